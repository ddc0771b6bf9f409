use crate::error::{BgError, Result};
use crate::tensor::Tensor2;

/// Parameters of the quadratic self-attention baseline.
#[derive(Clone, Debug)]
pub struct FullAttentionParams {
    /// d x d_k query projection.
    pub w_q: Tensor2,
    /// d x d_k key projection.
    pub w_k: Tensor2,
    /// d x d_v value projection.
    pub w_v: Tensor2,
}

impl FullAttentionParams {
    pub fn d_k(&self) -> usize {
        self.w_q.cols()
    }
}

/// One bipartite cell-to-anchor head.
#[derive(Clone, Debug)]
pub struct BipartiteHead {
    /// d x d_k cell projection.
    pub w_p: Tensor2,
    /// d_u x d_k anchor key projection.
    pub w_k: Tensor2,
    /// d_u x d_h anchor value projection.
    pub w_v: Tensor2,
}

/// Multi-head bipartite attention with the residual projection.
#[derive(Clone, Debug)]
pub struct BipartiteAttentionParams {
    pub heads: Vec<BipartiteHead>,
    /// d x (l * d_h) residual projection.
    pub w_c: Tensor2,
    /// Divide scores by sqrt(d_k) before the softmax (off by default; the
    /// bipartite scores are defined without the scaling).
    pub scale_scores: bool,
}

impl BipartiteAttentionParams {
    pub fn l(&self) -> usize {
        self.heads.len()
    }

    pub fn d_h(&self) -> usize {
        self.heads[0].w_v.cols()
    }
}

fn shape_err(op: &'static str, detail: String) -> BgError {
    BgError::ShapeMismatch { op, detail }
}

/// A = row_softmax(X W_Q (X W_K)ᵀ / sqrt(d_k)); Z_hat = A X W_V.
pub fn full_self_attention(
    x: &Tensor2,
    p: &FullAttentionParams,
) -> Result<(Tensor2, Tensor2)> {
    let d = x.cols();
    if x.rows() == 0 {
        return Err(shape_err("full_self_attention", "no cells".into()));
    }
    if p.w_q.rows() != d || p.w_k.rows() != d || p.w_v.rows() != d {
        return Err(shape_err(
            "full_self_attention",
            format!(
                "input dim {d} vs projections {}/{}/{}",
                p.w_q.rows(),
                p.w_k.rows(),
                p.w_v.rows()
            ),
        ));
    }
    if p.w_q.cols() != p.w_k.cols() {
        return Err(shape_err(
            "full_self_attention",
            format!("d_k mismatch {} vs {}", p.w_q.cols(), p.w_k.cols()),
        ));
    }
    let q = x.matmul(&p.w_q);
    let k = x.matmul(&p.w_k);
    let v = x.matmul(&p.w_v);
    let scores = q.matmul_bt(&k).scale(1.0 / (p.d_k() as f64).sqrt());
    let a = scores.row_softmax();
    let z_hat = a.matmul(&v);
    Ok((a, z_hat))
}

/// S = X W_p (U W_k)ᵀ (optionally / sqrt(d_k)); B = row_softmax(S);
/// Z_head = B U W_v.
pub fn bipartite_head(
    x: &Tensor2,
    u: &Tensor2,
    head: &BipartiteHead,
    scale_scores: bool,
) -> Result<(Tensor2, Tensor2)> {
    if u.rows() == 0 {
        return Err(shape_err("bipartite_head", "no anchors".into()));
    }
    check_head(x, u, head)?;
    let cache = head_cache(u, head);
    Ok(apply_head(x, head, &cache, scale_scores))
}

fn check_head(x: &Tensor2, u: &Tensor2, head: &BipartiteHead) -> Result<()> {
    if head.w_p.rows() != x.cols() {
        return Err(shape_err(
            "bipartite_head",
            format!("cell dim {} vs W_p rows {}", x.cols(), head.w_p.rows()),
        ));
    }
    if head.w_k.rows() != u.cols() || head.w_v.rows() != u.cols() {
        return Err(shape_err(
            "bipartite_head",
            format!(
                "anchor dim {} vs W_k/W_v rows {}/{}",
                u.cols(),
                head.w_k.rows(),
                head.w_v.rows()
            ),
        ));
    }
    if head.w_p.cols() != head.w_k.cols() {
        return Err(shape_err(
            "bipartite_head",
            format!("d_k mismatch {} vs {}", head.w_p.cols(), head.w_k.cols()),
        ));
    }
    Ok(())
}

/// Anchor-side projections, which do not depend on the cells. The per-cell
/// cost of attention is measured over `bipartite_apply` alone.
#[derive(Clone, Debug)]
pub struct AnchorCache {
    /// Per head: U W_k (m x d_k).
    pub keys: Vec<Tensor2>,
    /// Per head: U W_v (m x d_h).
    pub values: Vec<Tensor2>,
}

struct HeadCache {
    key: Tensor2,
    value: Tensor2,
}

fn head_cache(u: &Tensor2, head: &BipartiteHead) -> HeadCache {
    HeadCache {
        key: u.matmul(&head.w_k),
        value: u.matmul(&head.w_v),
    }
}

fn apply_head(
    x: &Tensor2,
    head: &BipartiteHead,
    cache: &HeadCache,
    scale_scores: bool,
) -> (Tensor2, Tensor2) {
    let p = x.matmul(&head.w_p);
    let mut s = p.matmul_bt(&cache.key);
    if scale_scores {
        s = s.scale(1.0 / (head.w_p.cols() as f64).sqrt());
    }
    let b = s.row_softmax();
    let z = b.matmul(&cache.value);
    (b, z)
}

pub fn precompute_anchor_cache(
    u: &Tensor2,
    p: &BipartiteAttentionParams,
) -> Result<AnchorCache> {
    if p.heads.is_empty() {
        return Err(shape_err("multi_head_bipartite", "no heads".into()));
    }
    if u.rows() == 0 {
        return Err(shape_err("multi_head_bipartite", "no anchors".into()));
    }
    let mut keys = Vec::with_capacity(p.heads.len());
    let mut values = Vec::with_capacity(p.heads.len());
    for (i, head) in p.heads.iter().enumerate() {
        if head.w_k.rows() != u.cols() || head.w_v.rows() != u.cols() {
            return Err(shape_err(
                "multi_head_bipartite",
                format!("head {i} anchor dim mismatch"),
            ));
        }
        if head.w_p.cols() != head.w_k.cols() || head.w_v.cols() != p.d_h() {
            return Err(shape_err(
                "multi_head_bipartite",
                format!("head {i} width mismatch"),
            ));
        }
        let c = head_cache(u, head);
        keys.push(c.key);
        values.push(c.value);
    }
    Ok(AnchorCache { keys, values })
}

/// The n-dependent half of multi-head attention: scores, softmax, and value
/// aggregation against a prebuilt anchor cache.
pub fn bipartite_apply(
    x: &Tensor2,
    p: &BipartiteAttentionParams,
    cache: &AnchorCache,
) -> Result<(Vec<Tensor2>, Tensor2)> {
    let mut bs = Vec::with_capacity(p.heads.len());
    let mut zs = Vec::with_capacity(p.heads.len());
    for (i, head) in p.heads.iter().enumerate() {
        if head.w_p.rows() != x.cols() {
            return Err(shape_err(
                "multi_head_bipartite",
                format!("head {i} cell dim {} vs W_p rows {}", x.cols(), head.w_p.rows()),
            ));
        }
        let hc = HeadCache {
            key: cache.keys[i].clone(),
            value: cache.values[i].clone(),
        };
        let (b, z) = apply_head(x, head, &hc, p.scale_scores);
        bs.push(b);
        zs.push(z);
    }
    let refs: Vec<&Tensor2> = zs.iter().collect();
    Ok((bs, Tensor2::concat_cols(&refs)))
}

/// Per-head attention over anchors, heads concatenated in order.
pub fn multi_head_bipartite(
    x: &Tensor2,
    u: &Tensor2,
    p: &BipartiteAttentionParams,
) -> Result<(Vec<Tensor2>, Tensor2)> {
    let cache = precompute_anchor_cache(u, p)?;
    bipartite_apply(x, p, &cache)
}

/// Z = Z_out + X W_c.
pub fn residual_embed(x: &Tensor2, z_out: &Tensor2, w_c: &Tensor2) -> Result<Tensor2> {
    if w_c.rows() != x.cols() {
        return Err(shape_err(
            "residual_embed",
            format!("input dim {} vs W_c rows {}", x.cols(), w_c.rows()),
        ));
    }
    if w_c.cols() != z_out.cols() || x.rows() != z_out.rows() {
        return Err(shape_err(
            "residual_embed",
            format!(
                "Z_out {}x{} vs X W_c {}x{}",
                z_out.rows(),
                z_out.cols(),
                x.rows(),
                w_c.cols()
            ),
        ));
    }
    Ok(z_out.add(&x.matmul(w_c)))
}

/// Mean attention row per class; empty classes give zero rows.
pub fn class_attention_summary(b: &Tensor2, labels: &[usize], k: usize) -> Result<Tensor2> {
    if labels.len() != b.rows() {
        return Err(shape_err(
            "class_attention_summary",
            format!("{} labels for {} rows", labels.len(), b.rows()),
        ));
    }
    for &l in labels {
        if l >= k {
            return Err(BgError::LabelOutOfRange { label: l, count: k });
        }
    }
    let mut out = Tensor2::zeros(k, b.cols());
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (o, v) in out.row_mut(l).iter_mut().zip(b.row(i)) {
            *o += v;
        }
    }
    for (l, &c) in counts.iter().enumerate() {
        if c > 0 {
            for o in out.row_mut(l) {
                *o /= c as f64;
            }
        }
    }
    Ok(out)
}
