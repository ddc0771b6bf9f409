use statrs::function::gamma::ln_gamma;

use crate::error::{BgError, Result};
use crate::tape::{softplus, NodeRef, ParamId, ParamStore, Tape};
use crate::tensor::Tensor2;

/// Learnable anchor tokens, one per row.
#[derive(Clone, Debug)]
pub struct AnchorCodebook {
    /// m x d_u anchor matrix U.
    pub u: Tensor2,
}

impl AnchorCodebook {
    pub fn m(&self) -> usize {
        self.u.rows()
    }

    pub fn d_u(&self) -> usize {
        self.u.cols()
    }
}

/// Count-model heads mapping anchor space to per-gene ZINB parameters.
#[derive(Clone, Debug)]
pub struct ZinbHeadParams {
    pub w_pi: Tensor2,
    pub b_pi: Tensor2,
    pub w_theta: Tensor2,
    pub b_theta: Tensor2,
    pub w_mu: Tensor2,
    pub b_mu: Tensor2,
}

/// Optional reconstruction pathway out of anchor space. Nothing downstream
/// consumes its output; it exists behind a config flag only.
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub w_d: Tensor2,
    pub b_d: Tensor2,
}

#[derive(Clone, Debug)]
pub struct AnchorEncoderDecoder {
    /// d x d_u encoder weight.
    pub w_e: Tensor2,
    /// 1 x d_u encoder bias.
    pub b_e: Tensor2,
    pub decoder: Option<DecoderParams>,
    pub heads: ZinbHeadParams,
}

/// Per-entry ZINB parameters: dropout pi in (0,1), mean mu > 0,
/// dispersion theta > 0.
#[derive(Clone, Debug)]
pub struct ZinbParams {
    pub pi: Tensor2,
    pub mu: Tensor2,
    pub theta: Tensor2,
}

/// H = X W_e + b_e.
pub fn encode(x: &Tensor2, w_e: &Tensor2, b_e: &Tensor2) -> Result<Tensor2> {
    if w_e.rows() != x.cols() || b_e.rows() != 1 || b_e.cols() != w_e.cols() {
        return Err(BgError::ShapeMismatch {
            op: "encode",
            detail: format!(
                "X {}x{}, W_e {}x{}, b_e {}x{}",
                x.rows(),
                x.cols(),
                w_e.rows(),
                w_e.cols(),
                b_e.rows(),
                b_e.cols()
            ),
        });
    }
    Ok(x.matmul(w_e).add_row_vec(b_e.row(0)))
}

/// H_d = U_star W_d + b_d (the flag-gated pathway).
pub fn decode(u_star: &Tensor2, dec: &DecoderParams) -> Result<Tensor2> {
    encode(u_star, &dec.w_d, &dec.b_d).map_err(|_| BgError::ShapeMismatch {
        op: "decode",
        detail: format!(
            "U_star {}x{} vs W_d {}x{}",
            u_star.rows(),
            u_star.cols(),
            dec.w_d.rows(),
            dec.w_d.cols()
        ),
    })
}

/// Cosine nearest-anchor per cell; ties go to the smallest anchor index.
pub fn nearest_anchor(h: &Tensor2, u: &Tensor2) -> Result<(Vec<usize>, Tensor2)> {
    if h.cols() != u.cols() {
        return Err(BgError::ShapeMismatch {
            op: "assign",
            detail: format!("H dim {} vs U dim {}", h.cols(), u.cols()),
        });
    }
    let m = u.rows();
    let mut u_norms = Vec::with_capacity(m);
    for j in 0..m {
        let nrm: f64 = u.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        if nrm == 0.0 {
            return Err(BgError::ZeroVector {
                op: "assign anchor",
                row: j,
            });
        }
        u_norms.push(nrm);
    }
    let mut indices = Vec::with_capacity(h.rows());
    for i in 0..h.rows() {
        let h_norm: f64 = h.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if h_norm == 0.0 {
            return Err(BgError::ZeroVector {
                op: "assign cell",
                row: i,
            });
        }
        let mut best = 0usize;
        let mut best_cos = f64::NEG_INFINITY;
        for j in 0..m {
            let dot: f64 = h.row(i).iter().zip(u.row(j)).map(|(a, b)| a * b).sum();
            let cos = dot / (h_norm * u_norms[j]);
            if cos > best_cos {
                best_cos = cos;
                best = j;
            }
        }
        indices.push(best);
    }
    let u_star = u.gather_rows(&indices);
    Ok((indices, u_star))
}

pub fn assign(h: &Tensor2, cb: &AnchorCodebook) -> Result<(Vec<usize>, Tensor2)> {
    nearest_anchor(h, &cb.u)
}

/// pi = sigmoid(U* W_pi + b_pi), theta = softplus(U* W_theta + b_theta),
/// mu = exp(min(U* W_mu + b_mu, 30)).
pub fn zinb_heads(u_star: &Tensor2, heads: &ZinbHeadParams) -> Result<ZinbParams> {
    let pi = encode(u_star, &heads.w_pi, &heads.b_pi)?.map(crate::tape::sigmoid);
    let theta = encode(u_star, &heads.w_theta, &heads.b_theta)?.map(softplus);
    let mu = encode(u_star, &heads.w_mu, &heads.b_mu)?
        .map(|t| t.min(crate::tape::EXP_CLAMP_MAX).exp());
    if pi.cols() != theta.cols() || pi.cols() != mu.cols() {
        return Err(BgError::ShapeMismatch {
            op: "zinb_heads",
            detail: "head widths differ".into(),
        });
    }
    Ok(ZinbParams { pi, mu, theta })
}

fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// log ZINB(x | pi, mu, theta) for a single entry, in log space.
pub fn zinb_log_pmf(x: f64, pi: f64, mu: f64, theta: f64) -> f64 {
    let ln_pi = pi.ln();
    let ln_1mpi = (1.0 - pi).ln();
    let nb_zero = theta * (theta.ln() - (theta + mu).ln());
    if x == 0.0 {
        lse2(ln_pi, ln_1mpi + nb_zero)
    } else {
        ln_1mpi + ln_gamma(x + theta) - ln_gamma(theta) - ln_gamma(x + 1.0) + nb_zero
            + x * (mu.ln() - (theta + mu).ln())
    }
}

/// Mean over cells of the summed per-gene ZINB negative log-likelihood.
pub fn zinb_nll(x_raw: &Tensor2, zp: &ZinbParams) -> Result<f64> {
    let (n, d) = (x_raw.rows(), x_raw.cols());
    if (zp.pi.rows(), zp.pi.cols()) != (n, d) {
        return Err(BgError::ShapeMismatch {
            op: "zinb_nll",
            detail: format!(
                "counts {}x{} vs params {}x{}",
                n,
                d,
                zp.pi.rows(),
                zp.pi.cols()
            ),
        });
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..d {
            total += zinb_log_pmf(
                x_raw.get(i, j),
                zp.pi.get(i, j),
                zp.mu.get(i, j),
                zp.theta.get(i, j),
            );
        }
    }
    let nll = -total / n as f64;
    if !nll.is_finite() {
        return Err(BgError::NonFinite {
            part: "zinb_nll".into(),
        });
    }
    Ok(nll)
}

/// (1/N) Σ ‖h_i − u*_i‖².
pub fn commitment_loss(h: &Tensor2, u_star: &Tensor2) -> f64 {
    assert_eq!((h.rows(), h.cols()), (u_star.rows(), u_star.cols()));
    let diff = h.sub(u_star);
    diff.data().iter().map(|v| v * v).sum::<f64>() / h.rows() as f64
}

#[derive(Clone, Copy, Debug)]
pub struct AnchorLossParts {
    pub l_d: f64,
    pub l_com: f64,
}

/// L_a = L_d + L_com on one batch, at parameter values (no gradients).
pub fn anchor_loss(
    x_raw: &Tensor2,
    h: &Tensor2,
    cb: &AnchorCodebook,
    enc_dec: &AnchorEncoderDecoder,
) -> Result<(f64, AnchorLossParts)> {
    let (_indices, u_star) = assign(h, cb)?;
    let zp = zinb_heads(&u_star, &enc_dec.heads)?;
    let l_d = zinb_nll(x_raw, &zp)?;
    let l_com = commitment_loss(h, &u_star);
    Ok((l_d + l_com, AnchorLossParts { l_d, l_com }))
}

/// Parameter ids for the anchor pathway inside a ParamStore.
#[derive(Clone, Copy, Debug)]
pub struct AnchorParamIds {
    pub u: ParamId,
    pub w_e: ParamId,
    pub b_e: ParamId,
    pub w_pi: ParamId,
    pub b_pi: ParamId,
    pub w_theta: ParamId,
    pub b_theta: ParamId,
    pub w_mu: ParamId,
    pub b_mu: ParamId,
}

/// Assignment state pinned during finite-difference probes so the probed
/// function matches the gradients the straight-through routing produces.
#[derive(Clone, Debug)]
pub struct FrozenRouting {
    pub indices: Vec<usize>,
    pub h_base: Tensor2,
}

pub struct AnchorLossNodes {
    pub l_a: NodeRef,
    pub l_d: NodeRef,
    pub l_com: NodeRef,
    pub indices: Vec<usize>,
}

/// Builds the ZINB negative log-likelihood from pre-activation nodes.
/// theta = softplus(t_theta), mu = exp_clamp(t_mu) optionally scaled by the
/// cell size factors, pi kept as logits. The x = 0 branch uses
/// log(pi + (1-pi)·nb0) = log pi + softplus(log(1-pi) + log nb0 - log pi).
pub fn zinb_nll_tape(
    tape: &mut Tape,
    x_raw: &Tensor2,
    t_pi: NodeRef,
    t_theta: NodeRef,
    t_mu: NodeRef,
    size_factors: Option<&[f64]>,
) -> NodeRef {
    let (n, d) = (x_raw.rows(), x_raw.cols());
    let theta = tape.softplus(t_theta);
    let mu_raw = tape.exp_clamp(t_mu);
    let mu = match size_factors {
        Some(sf) => {
            assert_eq!(sf.len(), n);
            let mut s = Tensor2::zeros(n, d);
            for i in 0..n {
                s.row_mut(i).fill(sf[i]);
            }
            let s_node = tape.constant(s);
            tape.mul(mu_raw, s_node)
        }
        None => mu_raw,
    };

    let neg_t_pi = tape.affine(t_pi, -1.0, 0.0);
    let sp_neg = tape.softplus(neg_t_pi);
    let ln_pi = tape.affine(sp_neg, -1.0, 0.0);
    let sp_pos = tape.softplus(t_pi);
    let ln_1mpi = tape.affine(sp_pos, -1.0, 0.0);

    let theta_mu = tape.add(theta, mu);
    let ln_theta = tape.ln(theta);
    let ln_tm = tape.ln(theta_mu);
    let ln_mu = tape.ln(mu);
    let core_diff = tape.sub(ln_theta, ln_tm);
    let nb_core = tape.mul(theta, core_diff);

    let lg_x_theta = tape.lgamma_shift(theta, x_raw.clone());
    let lg_theta = tape.lgamma_shift(theta, Tensor2::zeros(n, d));
    let lgamma_x1 = tape.constant(x_raw.map(|x| ln_gamma(x + 1.0)));
    let x_node = tape.constant(x_raw.clone());

    let mut pos = tape.add(ln_1mpi, lg_x_theta);
    pos = tape.sub(pos, lg_theta);
    pos = tape.sub(pos, lgamma_x1);
    pos = tape.add(pos, nb_core);
    let rate_diff = tape.sub(ln_mu, ln_tm);
    let x_rate = tape.mul(x_node, rate_diff);
    pos = tape.add(pos, x_rate);

    let zero_sum = tape.add(ln_1mpi, nb_core);
    let zero_inner = tape.sub(zero_sum, ln_pi);
    let sp_zero = tape.softplus(zero_inner);
    let zero_branch = tape.add(ln_pi, sp_zero);

    let mask0 = tape.constant(x_raw.map(|x| if x == 0.0 { 1.0 } else { 0.0 }));
    let mask_pos = tape.constant(x_raw.map(|x| if x == 0.0 { 0.0 } else { 1.0 }));
    let z_part = tape.mul(mask0, zero_branch);
    let p_part = tape.mul(mask_pos, pos);
    let ll = tape.add(z_part, p_part);
    let total = tape.sum_all(ll);
    tape.affine(total, -1.0 / n as f64, 0.0)
}

/// Tape version of the anchor loss with straight-through routing: the
/// quantized input is gather(U, idx) + (H − H_base), so decoder gradients
/// reach U through the selected rows and H through the copy term, while the
/// commitment term updates both H and U. During training `frozen` is None and
/// H_base = H, making the forward value exactly gather(U, idx).
pub fn build_anchor_loss(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &AnchorParamIds,
    x_proc: &Tensor2,
    x_raw: &Tensor2,
    size_factors: Option<&[f64]>,
    frozen: Option<&FrozenRouting>,
) -> Result<AnchorLossNodes> {
    let x_node = tape.constant(x_proc.clone());
    let w_e = tape.param(store, ids.w_e);
    let b_e = tape.param(store, ids.b_e);
    let xe = tape.matmul(x_node, w_e);
    let h = tape.add_row(xe, b_e);

    let (indices, h_base) = match frozen {
        Some(f) => (f.indices.clone(), f.h_base.clone()),
        None => {
            let (idx, _u_star) = nearest_anchor(tape.value(h), store.value(ids.u))?;
            (idx, tape.value(h).clone())
        }
    };

    let u_node = tape.param(store, ids.u);
    let gathered = tape.gather_rows(u_node, indices.clone());
    let h_base_node = tape.constant(h_base);
    let h_shift = tape.sub(h, h_base_node);
    let st = tape.add(gathered, h_shift);

    let w_pi = tape.param(store, ids.w_pi);
    let b_pi = tape.param(store, ids.b_pi);
    let mm = tape.matmul(st, w_pi);
    let t_pi = tape.add_row(mm, b_pi);
    let w_theta = tape.param(store, ids.w_theta);
    let b_theta = tape.param(store, ids.b_theta);
    let mm = tape.matmul(st, w_theta);
    let t_theta = tape.add_row(mm, b_theta);
    let w_mu = tape.param(store, ids.w_mu);
    let b_mu = tape.param(store, ids.b_mu);
    let mm = tape.matmul(st, w_mu);
    let t_mu = tape.add_row(mm, b_mu);

    let l_d = zinb_nll_tape(tape, x_raw, t_pi, t_theta, t_mu, size_factors);

    let diff = tape.sub(h, gathered);
    let sq = tape.mul(diff, diff);
    let total = tape.sum_all(sq);
    let l_com = tape.affine(total, 1.0 / x_proc.rows() as f64, 0.0);

    let l_a = tape.add(l_d, l_com);
    Ok(AnchorLossNodes {
        l_a,
        l_d,
        l_com,
        indices,
    })
}
