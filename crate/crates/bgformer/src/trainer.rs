//! Mini-batch training of the anchor attention model: warm-up on the
//! reconstruction and anchor losses, k-means centroid initialization, then
//! joint training with the clustering loss, a single optimizer step per
//! batch updating weights, anchors, and centroids together.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::anchors::{build_anchor_loss, encode, AnchorParamIds, FrozenRouting};
use crate::attention::{
    bipartite_apply, precompute_anchor_cache, residual_embed, BipartiteAttentionParams,
    BipartiteHead,
};
use crate::clustering::{init_centroids, predict_labels, soft_assign, target_distribution,
    ClusterState};
use crate::error::{BgError, Result};
use crate::ingest::{ExpressionMatrix, ProcessedBundle};
use crate::seeded_rng;
use crate::tape::{NodeRef, ParamId, ParamStore, Tape};
use crate::tensor::Tensor2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Anchor count m.
    pub m: usize,
    /// Attention heads.
    pub l: usize,
    pub d_k: usize,
    pub d_u: usize,
    pub d_h: usize,
    /// Cluster count K.
    pub k: usize,
    pub warmup_epochs: usize,
    pub w_s: f64,
    pub w_c: f64,
    pub w_a: f64,
    pub disable_l_a: bool,
    pub disable_l_s: bool,
    pub scale_scores: bool,
    /// Optimizer steps between target-distribution refreshes; 0 refreshes
    /// once per epoch.
    pub update_target_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
            m: 256,
            l: 4,
            d_k: 64,
            d_u: 64,
            d_h: 64,
            k: 2,
            warmup_epochs: 20,
            w_s: 1.0,
            w_c: 1.0,
            w_a: 1.0,
            disable_l_a: false,
            disable_l_s: false,
            scale_scores: false,
            update_target_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(BgError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(BgError::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(BgError::Config("learning_rate must be positive".into()));
        }
        if self.w_s < 0.0 || self.w_c < 0.0 || self.w_a < 0.0 {
            return Err(BgError::Config("loss weights must be non-negative".into()));
        }
        if self.m == 0 || self.l == 0 || self.d_k == 0 || self.d_u == 0 || self.d_h == 0 {
            return Err(BgError::Config("model dims must be positive".into()));
        }
        if self.k < 2 {
            return Err(BgError::Config("K must be at least 2".into()));
        }
        Ok(())
    }

    /// Applies one `key=value` override; keys follow the config-file names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| BgError::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "m" => self.m = num(key, value)?,
            "l" => self.l = num(key, value)?,
            "d_k" => self.d_k = num(key, value)?,
            "d_u" => self.d_u = num(key, value)?,
            "d_h" => self.d_h = num(key, value)?,
            "K" => self.k = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "w_s" => self.w_s = num(key, value)?,
            "w_c" => self.w_c = num(key, value)?,
            "w_a" => self.w_a = num(key, value)?,
            "disable_L_a" => self.disable_l_a = num(key, value)?,
            "disable_L_s" => self.disable_l_s = num(key, value)?,
            "scale_scores" => self.scale_scores = num(key, value)?,
            "update_target_every" => self.update_target_every = num(key, value)?,
            _ => return Err(BgError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }
}

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (li, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| BgError::Config(format!("line {}: expected key=value", li + 1)))?;
        cfg.set(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

/// Model input views: standardized matrix, matching raw counts, size
/// factors.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub x: Tensor2,
    pub raw: Tensor2,
    pub size_factors: Vec<f64>,
}

impl TrainData {
    pub fn from_expression(em: &ExpressionMatrix) -> Result<TrainData> {
        if em.processed.rows() == 0 {
            return Err(BgError::Config(
                "expression matrix has no processed values; run preprocessing first".into(),
            ));
        }
        let raw = if em.selected_genes.is_empty() {
            em.raw_counts.clone()
        } else {
            let n = em.n_cells();
            let mut raw = Tensor2::zeros(n, em.selected_genes.len());
            for i in 0..n {
                for (jj, &j) in em.selected_genes.iter().enumerate() {
                    raw.set(i, jj, em.raw_counts.get(i, j));
                }
            }
            raw
        };
        Ok(TrainData {
            x: em.processed.clone(),
            raw,
            size_factors: em.size_factors.clone(),
        })
    }

    pub fn from_bundle(b: &ProcessedBundle) -> TrainData {
        TrainData {
            x: b.processed.clone(),
            raw: b.raw_hvg.clone(),
            size_factors: b.size_factors.clone(),
        }
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadIds {
    pub w_p: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct SelfHeadIds {
    pub w_pi: ParamId,
    pub b_pi: ParamId,
    pub w_theta: ParamId,
    pub b_theta: ParamId,
    pub w_mu: ParamId,
    pub b_mu: ParamId,
}

#[derive(Clone, Debug)]
pub struct ModelIds {
    pub heads: Vec<HeadIds>,
    pub w_c: ParamId,
    pub anchor: AnchorParamIds,
    pub self_head: SelfHeadIds,
    pub centroids: ParamId,
}

/// Fresh parameter store for input width d under cfg's dims. Anchor rows
/// are placeholders until `train` re-seats them on encoded cells.
pub fn build_model(d: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> (ParamStore, ModelIds) {
    let mut store = ParamStore::new();
    let e = cfg.l * cfg.d_h;
    let heads = (0..cfg.l)
        .map(|h| HeadIds {
            w_p: store.add_glorot(&format!("head{h}.w_p"), d, cfg.d_k, rng),
            w_k: store.add_glorot(&format!("head{h}.w_k"), cfg.d_u, cfg.d_k, rng),
            w_v: store.add_glorot(&format!("head{h}.w_v"), cfg.d_u, cfg.d_h, rng),
        })
        .collect();
    let w_c = store.add_glorot("w_c", d, e, rng);
    let anchor = AnchorParamIds {
        u: store.add_glorot("u", cfg.m, cfg.d_u, rng),
        w_e: store.add_glorot("w_e", d, cfg.d_u, rng),
        b_e: store.add_zeros("b_e", 1, cfg.d_u),
        w_pi: store.add_glorot("anchor.w_pi", cfg.d_u, d, rng),
        b_pi: store.add_zeros("anchor.b_pi", 1, d),
        w_theta: store.add_glorot("anchor.w_theta", cfg.d_u, d, rng),
        b_theta: store.add_zeros("anchor.b_theta", 1, d),
        w_mu: store.add_glorot("anchor.w_mu", cfg.d_u, d, rng),
        b_mu: store.add_zeros("anchor.b_mu", 1, d),
    };
    let self_head = SelfHeadIds {
        w_pi: store.add_glorot("self.w_pi", e, d, rng),
        b_pi: store.add_zeros("self.b_pi", 1, d),
        w_theta: store.add_glorot("self.w_theta", e, d, rng),
        b_theta: store.add_zeros("self.b_theta", 1, d),
        w_mu: store.add_glorot("self.w_mu", e, d, rng),
        b_mu: store.add_zeros("self.b_mu", 1, d),
    };
    let centroids = store.add_zeros("centroids", cfg.k, e);
    (
        store,
        ModelIds {
            heads,
            w_c,
            anchor,
            self_head,
            centroids,
        },
    )
}

/// Rebuilds ids from parameter names, for stores loaded from a checkpoint.
pub fn resolve_ids(store: &ParamStore) -> Result<ModelIds> {
    let find = |name: &str| {
        store
            .id(name)
            .ok_or_else(|| BgError::Checkpoint(format!("missing parameter {name}")))
    };
    let mut heads = Vec::new();
    while let Some(w_p) = store.id(&format!("head{}.w_p", heads.len())) {
        let h = heads.len();
        heads.push(HeadIds {
            w_p,
            w_k: find(&format!("head{h}.w_k"))?,
            w_v: find(&format!("head{h}.w_v"))?,
        });
    }
    if heads.is_empty() {
        return Err(BgError::Checkpoint("no attention heads found".into()));
    }
    Ok(ModelIds {
        heads,
        w_c: find("w_c")?,
        anchor: AnchorParamIds {
            u: find("u")?,
            w_e: find("w_e")?,
            b_e: find("b_e")?,
            w_pi: find("anchor.w_pi")?,
            b_pi: find("anchor.b_pi")?,
            w_theta: find("anchor.w_theta")?,
            b_theta: find("anchor.b_theta")?,
            w_mu: find("anchor.w_mu")?,
            b_mu: find("anchor.b_mu")?,
        },
        self_head: SelfHeadIds {
            w_pi: find("self.w_pi")?,
            b_pi: find("self.b_pi")?,
            w_theta: find("self.w_theta")?,
            b_theta: find("self.b_theta")?,
            w_mu: find("self.w_mu")?,
            b_mu: find("self.b_mu")?,
        },
        centroids: find("centroids")?,
    })
}

pub fn attention_params(
    store: &ParamStore,
    ids: &ModelIds,
    scale_scores: bool,
) -> BipartiteAttentionParams {
    BipartiteAttentionParams {
        heads: ids
            .heads
            .iter()
            .map(|h| BipartiteHead {
                w_p: store.value(h.w_p).clone(),
                w_k: store.value(h.w_k).clone(),
                w_v: store.value(h.w_v).clone(),
            })
            .collect(),
        w_c: store.value(ids.w_c).clone(),
        scale_scores,
    }
}

/// Embedding Z for a batch, outside the tape. Row i depends only on cell
/// i, the anchors, and the parameters.
pub fn embed(
    store: &ParamStore,
    ids: &ModelIds,
    scale_scores: bool,
    x: &Tensor2,
) -> Result<Tensor2> {
    embed_batched(store, ids, scale_scores, x, x.rows().max(1))
}

/// `embed_batched` with row chunks distributed over worker threads. Chunk
/// boundaries are identical to the sequential version, so the output
/// matches it byte for byte at any thread count.
pub fn embed_threaded(
    store: &ParamStore,
    ids: &ModelIds,
    scale_scores: bool,
    x: &Tensor2,
    chunk: usize,
    threads: usize,
) -> Result<Tensor2> {
    if threads <= 1 {
        return embed_batched(store, ids, scale_scores, x, chunk);
    }
    if chunk == 0 {
        return Err(BgError::Config("evaluation chunk must be positive".into()));
    }
    let p = attention_params(store, ids, scale_scores);
    let cache = precompute_anchor_cache(store.value(ids.anchor.u), &p)?;
    let n = x.rows();
    let spans: Vec<(usize, usize)> = (0..n)
        .step_by(chunk.max(1))
        .map(|start| (start, (start + chunk).min(n)))
        .collect();
    let mut results: Vec<Result<Tensor2>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for lane in 0..threads {
            let spans = &spans;
            let p = &p;
            let cache = &cache;
            let w_c = store.value(ids.w_c);
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                for &(start, stop) in spans.iter().skip(lane).step_by(threads) {
                    let rows: Vec<usize> = (start..stop).collect();
                    let xb = x.gather_rows(&rows);
                    let part = bipartite_apply(&xb, p, cache)
                        .and_then(|(_, z_out)| residual_embed(&xb, &z_out, w_c));
                    out.push((start, part));
                }
                out
            }));
        }
        let mut flat: Vec<(usize, Result<Tensor2>)> = handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect();
        flat.sort_by_key(|(start, _)| *start);
        flat.into_iter().map(|(_, r)| r).collect()
    });
    let e = p.l() * p.d_h();
    let mut z = Tensor2::zeros(n, e);
    for (span, part) in spans.iter().zip(results.drain(..)) {
        let part = part?;
        for (local, i) in (span.0..span.1).enumerate() {
            z.row_mut(i).copy_from_slice(part.row(local));
        }
    }
    Ok(z)
}

/// Same as `embed`, computed over row chunks of at most `chunk` cells.
pub fn embed_batched(
    store: &ParamStore,
    ids: &ModelIds,
    scale_scores: bool,
    x: &Tensor2,
    chunk: usize,
) -> Result<Tensor2> {
    if chunk == 0 {
        return Err(BgError::Config("evaluation chunk must be positive".into()));
    }
    let p = attention_params(store, ids, scale_scores);
    let cache = precompute_anchor_cache(store.value(ids.anchor.u), &p)?;
    let n = x.rows();
    let e = p.l() * p.d_h();
    let mut z = Tensor2::zeros(n, e);
    let mut start = 0;
    while start < n {
        let stop = (start + chunk).min(n);
        let rows: Vec<usize> = (start..stop).collect();
        let xb = x.gather_rows(&rows);
        let (_, z_out) = bipartite_apply(&xb, &p, &cache)?;
        let zb = residual_embed(&xb, &z_out, store.value(ids.w_c))?;
        for (local, i) in (start..stop).enumerate() {
            z.row_mut(i).copy_from_slice(zb.row(local));
        }
        start = stop;
    }
    Ok(z)
}

pub struct BatchLossNodes {
    pub total: NodeRef,
    pub l_s: Option<NodeRef>,
    pub l_c: Option<NodeRef>,
    pub l_a: Option<NodeRef>,
    /// Anchor routing chosen for this batch; empty when L_a is disabled.
    pub anchor_indices: Vec<usize>,
    pub z: NodeRef,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub total: f64,
    pub l_s: f64,
    pub l_c: f64,
    pub l_a: f64,
}

/// Builds L = w_s L_s + w_c L_c + w_a L_a for one batch on the tape.
/// `p_rows` carries the target distribution rows for the batch; without it
/// the clustering term is left out (warm-up). Disabled terms are not built
/// at all, so their parameters receive exactly zero gradient.
pub fn build_batch_loss(
    tape: &mut Tape,
    store: &ParamStore,
    ids: &ModelIds,
    cfg: &TrainConfig,
    x_proc: &Tensor2,
    x_raw: &Tensor2,
    p_rows: Option<&Tensor2>,
    frozen: Option<&FrozenRouting>,
) -> Result<BatchLossNodes> {
    let d = x_proc.cols();
    if store.value(ids.heads[0].w_p).rows() != d {
        return Err(BgError::ShapeMismatch {
            op: "build_batch_loss",
            detail: format!(
                "input width {d} vs projection rows {}",
                store.value(ids.heads[0].w_p).rows()
            ),
        });
    }
    let x_node = tape.constant(x_proc.clone());
    let u_node = tape.param(store, ids.anchor.u);
    let mut head_outputs = Vec::with_capacity(ids.heads.len());
    for h in &ids.heads {
        let w_p = tape.param(store, h.w_p);
        let w_k = tape.param(store, h.w_k);
        let w_v = tape.param(store, h.w_v);
        let p = tape.matmul(x_node, w_p);
        let uk = tape.matmul(u_node, w_k);
        let mut s = tape.matmul_bt(p, uk);
        if cfg.scale_scores {
            s = tape.affine(s, 1.0 / (cfg.d_k as f64).sqrt(), 0.0);
        }
        let b = tape.row_softmax(s);
        let uv = tape.matmul(u_node, w_v);
        head_outputs.push(tape.matmul(b, uv));
    }
    let z_out = tape.concat_cols(&head_outputs);
    let w_c = tape.param(store, ids.w_c);
    let res = tape.matmul(x_node, w_c);
    let z = tape.add(z_out, res);

    let mut total = tape.scalar_const(0.0);
    let mut l_s = None;
    if !cfg.disable_l_s {
        let sh = &ids.self_head;
        let w_pi = tape.param(store, sh.w_pi);
        let b_pi = tape.param(store, sh.b_pi);
        let mm = tape.matmul(z, w_pi);
        let t_pi = tape.add_row(mm, b_pi);
        let w_theta = tape.param(store, sh.w_theta);
        let b_theta = tape.param(store, sh.b_theta);
        let mm = tape.matmul(z, w_theta);
        let t_theta = tape.add_row(mm, b_theta);
        let w_mu = tape.param(store, sh.w_mu);
        let b_mu = tape.param(store, sh.b_mu);
        let mm = tape.matmul(z, w_mu);
        let t_mu = tape.add_row(mm, b_mu);
        let node = crate::anchors::zinb_nll_tape(tape, x_raw, t_pi, t_theta, t_mu, None);
        let weighted = tape.affine(node, cfg.w_s, 0.0);
        total = tape.add(total, weighted);
        l_s = Some(node);
    }

    let mut l_c = None;
    if let Some(p_batch) = p_rows {
        let c_node = tape.param(store, ids.centroids);
        let zsq = tape.mul(z, z);
        let zz = tape.row_sum(zsq);
        let csq = tape.mul(c_node, c_node);
        let cc = tape.row_sum(csq);
        let cross = tape.matmul_bt(z, c_node);
        let neg2 = tape.affine(cross, -2.0, 0.0);
        let with_rows = tape.add_col(neg2, zz);
        let cct = tape.transpose(cc);
        let d2 = tape.add_row(with_rows, cct);
        let base = tape.affine(d2, 1.0, 1.0);
        let inv = tape.pow_const(base, -1.0);
        let q = tape.row_normalize(inv);
        let lnq = tape.ln(q);
        let p_node = tape.constant(p_batch.clone());
        let weighted_lnq = tape.mul(p_node, lnq);
        let cross_entropy = tape.sum_all(weighted_lnq);
        let p_log_p: f64 = p_batch
            .data()
            .iter()
            .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
            .sum();
        let node = tape.affine(cross_entropy, -1.0, p_log_p);
        let weighted = tape.affine(node, cfg.w_c, 0.0);
        total = tape.add(total, weighted);
        l_c = Some(node);
    }

    let mut l_a = None;
    let mut anchor_indices = Vec::new();
    if !cfg.disable_l_a {
        let nodes = build_anchor_loss(tape, store, &ids.anchor, x_proc, x_raw, None, frozen)?;
        let weighted = tape.affine(nodes.l_a, cfg.w_a, 0.0);
        total = tape.add(total, weighted);
        l_a = Some(nodes.l_a);
        anchor_indices = nodes.indices;
    }

    Ok(BatchLossNodes {
        total,
        l_s,
        l_c,
        l_a,
        anchor_indices,
        z,
    })
}

fn loss_parts(tape: &Tape, nodes: &BatchLossNodes) -> LossParts {
    LossParts {
        total: tape.scalar(nodes.total),
        l_s: nodes.l_s.map_or(0.0, |n| tape.scalar(n)),
        l_c: nodes.l_c.map_or(0.0, |n| tape.scalar(n)),
        l_a: nodes.l_a.map_or(0.0, |n| tape.scalar(n)),
    }
}

fn check_finite(parts: &LossParts) -> Result<()> {
    for (name, v) in [
        ("L_s", parts.l_s),
        ("L_c", parts.l_c),
        ("L_a", parts.l_a),
        ("total loss", parts.total),
    ] {
        if !v.is_finite() {
            return Err(BgError::NonFinite { part: name.into() });
        }
    }
    Ok(())
}

/// Adaptive-moment gradient descent; decay 0.9/0.999, epsilon 1e-8.
struct Adam {
    lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(store: &ParamStore, lr: f64) -> Adam {
        let sizes: Vec<usize> = store.ids().map(|id| store.value(id).data().len()).collect();
        Adam {
            lr,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: vec![0; sizes.len()],
        }
    }

    fn step(&mut self, store: &mut ParamStore) {
        for (slot, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let grad = store.grad(id).data().to_vec();
            self.t[slot] += 1;
            let bc1 = 1.0 - ADAM_B1.powi(self.t[slot] as i32);
            let bc2 = 1.0 - ADAM_B2.powi(self.t[slot] as i32);
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let value = store.value_mut(id).data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * g;
                v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                value[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }

    /// Fresh optimizer state for a parameter whose values were overwritten
    /// outside the gradient step.
    fn reset_param(&mut self, slot: usize) {
        self.m[slot].iter_mut().for_each(|x| *x = 0.0);
        self.v[slot].iter_mut().for_each(|x| *x = 0.0);
        self.t[slot] = 0;
    }

    fn reset_rows(&mut self, slot: usize, row: usize, cols: usize) {
        let span = row * cols..(row + 1) * cols;
        self.m[slot][span.clone()].iter_mut().for_each(|x| *x = 0.0);
        self.v[slot][span].iter_mut().for_each(|x| *x = 0.0);
    }
}

fn param_slot(store: &ParamStore, id: ParamId) -> usize {
    store.ids().position(|other| other == id).expect("id from this store")
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub l_s: f64,
    pub l_c: f64,
    pub l_a: f64,
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub ids: ModelIds,
    pub labels: Vec<usize>,
    pub history: Vec<EpochStats>,
    /// Assignment counts per anchor over the final epoch.
    pub anchor_usage: Vec<u64>,
}

pub fn train(em: &ExpressionMatrix, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let data = TrainData::from_expression(em)?;
    train_data(&data, cfg, |_, _| Ok(()))
}

fn refresh_target(
    store: &ParamStore,
    ids: &ModelIds,
    cfg: &TrainConfig,
    x: &Tensor2,
) -> Result<Tensor2> {
    let z = embed_batched(store, ids, cfg.scale_scores, x, cfg.batch_size.max(1024))?;
    let cs = ClusterState::new(store.value(ids.centroids).clone());
    let q = soft_assign(&z, &cs)?;
    target_distribution(&q)
}

/// Runs the training schedule; `hook` sees the epoch stats and the store
/// after every epoch and may persist them.
pub fn train_data(
    data: &TrainData,
    cfg: &TrainConfig,
    mut hook: impl FnMut(&EpochStats, &ParamStore) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = data.n();
    let d = data.d();
    if n < 2 {
        return Err(BgError::EmptyMatrix {
            stage: "train",
            rows: n,
            cols: d,
        });
    }
    if n < cfg.k {
        return Err(BgError::InsufficientCells {
            needed: cfg.k,
            k: cfg.k,
            got: n,
        });
    }
    let mut rng = seeded_rng(cfg.seed);
    let (mut store, ids) = build_model(d, cfg, &mut rng);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    seed_anchors(&mut store, &ids, cfg, data, &order, &mut rng)?;

    let mut adam = Adam::new(&store, cfg.learning_rate);
    let centroid_slot = param_slot(&store, ids.centroids);
    let u_slot = param_slot(&store, ids.anchor.u);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut p_full: Option<Tensor2> = None;
    let mut centroids_ready = false;
    let mut degenerate_retried = false;
    let mut usage = vec![0u64; cfg.m];
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let joint = epoch >= cfg.warmup_epochs;
        if joint && !centroids_ready {
            let z = embed_batched(&store, &ids, cfg.scale_scores, &data.x, cfg.batch_size.max(1024))?;
            let cs = init_centroids(&z, cfg.k, cfg.seed)?;
            *store.value_mut(ids.centroids) = cs.centroids;
            adam.reset_param(centroid_slot);
            centroids_ready = true;
            p_full = None;
        }
        if joint && (p_full.is_none() || cfg.update_target_every == 0) {
            p_full = Some(refresh_with_repair(
                &mut store,
                &ids,
                cfg,
                &data.x,
                epoch,
                &mut degenerate_retried,
                &mut adam,
                centroid_slot,
            )?);
        }

        order.shuffle(&mut rng);
        usage.iter_mut().for_each(|u| *u = 0);
        let mut sums = LossParts::default();
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if joint && cfg.update_target_every > 0 && step % cfg.update_target_every == 0 {
                p_full = Some(refresh_with_repair(
                    &mut store,
                    &ids,
                    cfg,
                    &data.x,
                    epoch,
                    &mut degenerate_retried,
                    &mut adam,
                    centroid_slot,
                )?);
            }
            let xb = data.x.gather_rows(batch);
            let rawb = data.raw.gather_rows(batch);
            let pb = if joint {
                Some(p_full.as_ref().expect("refreshed above").gather_rows(batch))
            } else {
                None
            };
            let mut tape = Tape::new();
            let nodes = build_batch_loss(
                &mut tape,
                &store,
                &ids,
                cfg,
                &xb,
                &rawb,
                pb.as_ref(),
                None,
            )?;
            let parts = loss_parts(&tape, &nodes);
            check_finite(&parts)?;
            store.zero_grads();
            tape.backward(nodes.total, &mut store);
            adam.step(&mut store);
            for &a in &nodes.anchor_indices {
                usage[a] += 1;
            }
            sums.total += parts.total;
            sums.l_s += parts.l_s;
            sums.l_c += parts.l_c;
            sums.l_a += parts.l_a;
            batches += 1;
            step += 1;
        }
        let scale = 1.0 / batches.max(1) as f64;
        history.push(EpochStats {
            epoch,
            total: sums.total * scale,
            l_s: sums.l_s * scale,
            l_c: sums.l_c * scale,
            l_a: sums.l_a * scale,
        });

        if !cfg.disable_l_a {
            revive_dead_anchors(&mut store, &ids, cfg, data, &usage, &mut rng, &mut adam, u_slot)?;
        }
        hook(history.last().expect("pushed above"), &store)?;
    }

    if !centroids_ready {
        let z = embed_batched(&store, &ids, cfg.scale_scores, &data.x, cfg.batch_size.max(1024))?;
        let cs = init_centroids(&z, cfg.k, cfg.seed)?;
        *store.value_mut(ids.centroids) = cs.centroids;
    }
    let z = embed_batched(&store, &ids, cfg.scale_scores, &data.x, cfg.batch_size.max(1024))?;
    let cs = ClusterState::new(store.value(ids.centroids).clone());
    let q = soft_assign(&z, &cs)?;
    let labels = predict_labels(&q);
    Ok(TrainOutcome {
        store,
        ids,
        labels,
        history,
        anchor_usage: usage,
    })
}

/// Target-distribution refresh; a degenerate soft assignment re-seeds the
/// centroids once, a second failure propagates.
#[allow(clippy::too_many_arguments)]
fn refresh_with_repair(
    store: &mut ParamStore,
    ids: &ModelIds,
    cfg: &TrainConfig,
    x: &Tensor2,
    epoch: usize,
    retried: &mut bool,
    adam: &mut Adam,
    centroid_slot: usize,
) -> Result<Tensor2> {
    match refresh_target(store, ids, cfg, x) {
        Ok(p) => Ok(p),
        Err(BgError::DegenerateCluster { .. }) if !*retried => {
            *retried = true;
            let z = embed_batched(store, ids, cfg.scale_scores, x, cfg.batch_size.max(1024))?;
            let cs = init_centroids(&z, cfg.k, cfg.seed.wrapping_add(epoch as u64 + 1))?;
            *store.value_mut(ids.centroids) = cs.centroids;
            adam.reset_param(centroid_slot);
            refresh_target(store, ids, cfg, x)
        }
        Err(e) => Err(e),
    }
}

/// Seats each anchor on an encoded cell from the shuffled order, plus a
/// small perturbation so duplicated cells stay distinct.
fn seed_anchors(
    store: &mut ParamStore,
    ids: &ModelIds,
    cfg: &TrainConfig,
    data: &TrainData,
    order: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let take: Vec<usize> = order.iter().copied().take(cfg.batch_size.min(data.n())).collect();
    let xb = data.x.gather_rows(&take);
    let h = encode(&xb, store.value(ids.anchor.w_e), store.value(ids.anchor.b_e))?;
    let mut u = Tensor2::zeros(cfg.m, cfg.d_u);
    for j in 0..cfg.m {
        let src = h.row(j % h.rows());
        for (c, val) in src.iter().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            u.set(j, c, val + 0.01 * noise);
        }
    }
    *store.value_mut(ids.anchor.u) = u;
    Ok(())
}

/// Anchors unused for a full epoch move onto a random encoded cell.
#[allow(clippy::too_many_arguments)]
fn revive_dead_anchors(
    store: &mut ParamStore,
    ids: &ModelIds,
    cfg: &TrainConfig,
    data: &TrainData,
    usage: &[u64],
    rng: &mut ChaCha8Rng,
    adam: &mut Adam,
    u_slot: usize,
) -> Result<()> {
    if usage.iter().all(|&u| u > 0) {
        return Ok(());
    }
    for j in 0..cfg.m {
        if usage[j] > 0 {
            continue;
        }
        let pick = rng.gen_range(0..data.n());
        let xb = data.x.gather_rows(&[pick]);
        let h = encode(&xb, store.value(ids.anchor.w_e), store.value(ids.anchor.b_e))?;
        let u = store.value_mut(ids.anchor.u);
        for c in 0..cfg.d_u {
            let noise: f64 = rng.sample(StandardNormal);
            u.set(j, c, h.get(0, c) + 0.01 * noise);
        }
        adam.reset_rows(u_slot, j, cfg.d_u);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub labels: Vec<usize>,
    pub z: Tensor2,
    pub q: Tensor2,
    pub cluster_sizes: Vec<usize>,
    pub acc: Option<f64>,
    pub ari: Option<f64>,
}

/// Full-data embedding, soft assignment, labels, and optional agreement
/// metrics against reference labels. `threads` caps the evaluation lanes.
pub fn evaluate(
    store: &ParamStore,
    ids: &ModelIds,
    scale_scores: bool,
    x: &Tensor2,
    truth: Option<&[usize]>,
    chunk: usize,
    threads: usize,
) -> Result<EvalReport> {
    let z = embed_threaded(store, ids, scale_scores, x, chunk, threads)?;
    let cs = ClusterState::new(store.value(ids.centroids).clone());
    let q = soft_assign(&z, &cs)?;
    let labels = predict_labels(&q);
    let mut cluster_sizes = vec![0usize; cs.k()];
    for &l in &labels {
        cluster_sizes[l] += 1;
    }
    let (acc, ari) = match truth {
        Some(t) => (
            Some(crate::clustering::metric_acc(&labels, t)?),
            Some(crate::clustering::metric_ari(&labels, t)?),
        ),
        None => (None, None),
    };
    Ok(EvalReport {
        labels,
        z,
        q,
        cluster_sizes,
        acc,
        ari,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{anchor_loss, zinb_heads, zinb_nll, AnchorCodebook, AnchorEncoderDecoder,
        ZinbHeadParams};
    use crate::clustering::dec_loss;
    use crate::tape::grad_check;
    use crate::theory::synth_generate;

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 5,
            m: 4,
            l: 2,
            d_k: 3,
            d_u: 4,
            d_h: 3,
            k: 2,
            warmup_epochs: 1,
            ..TrainConfig::default()
        }
    }

    fn toy_batch(n: usize, d: usize, seed: u64) -> (Tensor2, Tensor2) {
        let mut rng = seeded_rng(seed);
        let mut x = Tensor2::zeros(n, d);
        for v in x.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut raw = Tensor2::zeros(n, d);
        for v in raw.data_mut() {
            *v = f64::from(rng.gen_range(0u32..6));
        }
        (x, raw)
    }

    #[test]
    fn test_config_defaults() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.batch_size, 256);
        assert_eq!(cfg.m, 256);
        assert_eq!(cfg.l, 4);
        assert_eq!(cfg.warmup_epochs, 20);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn test_config_parse_overrides() {
        let text = "\
# schedule
epochs = 7
K=3
learning_rate = 0.01  # step size
disable_L_a=true
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.learning_rate, 0.01);
        assert!(cfg.disable_l_a);
        assert_eq!(cfg.batch_size, 256);
    }

    #[test]
    fn test_config_parse_rejects_unknown_key() {
        assert!(matches!(
            parse_config("momentum=0.9"),
            Err(BgError::Config(_))
        ));
        assert!(matches!(parse_config("epochs"), Err(BgError::Config(_))));
        assert!(matches!(
            parse_config("epochs=three"),
            Err(BgError::Config(_))
        ));
    }

    #[test]
    fn test_config_validation_bounds() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.w_c = -0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn test_total_loss_matches_separate_parts() {
        let cfg = TrainConfig {
            w_s: 0.7,
            w_c: 1.3,
            w_a: 0.9,
            ..toy_cfg()
        };
        let (x, raw) = toy_batch(16, 8, 3);
        let mut rng = seeded_rng(4);
        let (mut store, ids) = build_model(8, &cfg, &mut rng);
        let mut c = Tensor2::zeros(cfg.k, cfg.l * cfg.d_h);
        for v in c.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        *store.value_mut(ids.centroids) = c.clone();

        let z = embed(&store, &ids, cfg.scale_scores, &x).unwrap();
        let cs = ClusterState::new(c);
        let q = soft_assign(&z, &cs).unwrap();
        let p = target_distribution(&q).unwrap();

        let mut tape = Tape::new();
        let nodes =
            build_batch_loss(&mut tape, &store, &ids, &cfg, &x, &raw, Some(&p), None).unwrap();
        let parts = loss_parts(&tape, &nodes);

        let heads = ZinbHeadParams {
            w_pi: store.value(ids.self_head.w_pi).clone(),
            b_pi: store.value(ids.self_head.b_pi).clone(),
            w_theta: store.value(ids.self_head.w_theta).clone(),
            b_theta: store.value(ids.self_head.b_theta).clone(),
            w_mu: store.value(ids.self_head.w_mu).clone(),
            b_mu: store.value(ids.self_head.b_mu).clone(),
        };
        let l_s = zinb_nll(&raw, &zinb_heads(&z, &heads).unwrap()).unwrap();
        let l_c = dec_loss(&p, &q).unwrap();
        let h = encode(&x, store.value(ids.anchor.w_e), store.value(ids.anchor.b_e)).unwrap();
        let cb = AnchorCodebook {
            u: store.value(ids.anchor.u).clone(),
        };
        let enc_dec = AnchorEncoderDecoder {
            w_e: store.value(ids.anchor.w_e).clone(),
            b_e: store.value(ids.anchor.b_e).clone(),
            decoder: None,
            heads: ZinbHeadParams {
                w_pi: store.value(ids.anchor.w_pi).clone(),
                b_pi: store.value(ids.anchor.b_pi).clone(),
                w_theta: store.value(ids.anchor.w_theta).clone(),
                b_theta: store.value(ids.anchor.b_theta).clone(),
                w_mu: store.value(ids.anchor.w_mu).clone(),
                b_mu: store.value(ids.anchor.b_mu).clone(),
            },
        };
        let (l_a, _) = anchor_loss(&raw, &h, &cb, &enc_dec).unwrap();

        assert!((parts.l_s - l_s).abs() < 1e-9);
        assert!((parts.l_c - l_c).abs() < 1e-9);
        assert!((parts.l_a - l_a).abs() < 1e-9);
        let expected = cfg.w_s * l_s + cfg.w_c * l_c + cfg.w_a * l_a;
        assert!((parts.total - expected).abs() < 1e-9);
    }

    #[test]
    fn test_total_loss_zero_weights() {
        let cfg = TrainConfig {
            w_s: 0.0,
            w_c: 0.0,
            w_a: 0.0,
            ..toy_cfg()
        };
        let (x, raw) = toy_batch(6, 5, 9);
        let mut rng = seeded_rng(2);
        let (store, ids) = build_model(5, &cfg, &mut rng);
        let mut tape = Tape::new();
        let nodes = build_batch_loss(&mut tape, &store, &ids, &cfg, &x, &raw, None, None).unwrap();
        assert_eq!(tape.scalar(nodes.total), 0.0);
    }

    #[test]
    fn test_disable_flags_cut_gradients() {
        let cfg = TrainConfig {
            disable_l_a: true,
            ..toy_cfg()
        };
        let (x, raw) = toy_batch(6, 5, 1);
        let mut rng = seeded_rng(3);
        let (mut store, ids) = build_model(5, &cfg, &mut rng);
        let mut tape = Tape::new();
        let nodes = build_batch_loss(&mut tape, &store, &ids, &cfg, &x, &raw, None, None).unwrap();
        assert!(nodes.l_a.is_none());
        assert!(nodes.anchor_indices.is_empty());
        store.zero_grads();
        tape.backward(nodes.total, &mut store);
        assert_eq!(store.grad(ids.anchor.w_e).max_abs(), 0.0);
        assert_eq!(store.grad(ids.anchor.w_pi).max_abs(), 0.0);
        assert!(store.grad(ids.anchor.u).max_abs() > 0.0);

        let cfg = TrainConfig {
            disable_l_s: true,
            ..toy_cfg()
        };
        let mut tape = Tape::new();
        let nodes = build_batch_loss(&mut tape, &store, &ids, &cfg, &x, &raw, None, None).unwrap();
        assert!(nodes.l_s.is_none());
        store.zero_grads();
        tape.backward(nodes.total, &mut store);
        assert_eq!(store.grad(ids.self_head.w_pi).max_abs(), 0.0);
        assert_eq!(store.grad(ids.self_head.b_mu).max_abs(), 0.0);
    }

    #[test]
    fn test_total_loss_grad_check() {
        let cfg = TrainConfig {
            w_s: 0.8,
            w_c: 1.1,
            w_a: 0.6,
            ..toy_cfg()
        };
        let (x, raw) = toy_batch(6, 5, 8);
        let mut rng = seeded_rng(7);
        let (mut store, ids) = build_model(5, &cfg, &mut rng);
        let mut c = Tensor2::zeros(cfg.k, cfg.l * cfg.d_h);
        for v in c.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        *store.value_mut(ids.centroids) = c.clone();
        let z = embed(&store, &ids, cfg.scale_scores, &x).unwrap();
        let q = soft_assign(&z, &ClusterState::new(c)).unwrap();
        let p = target_distribution(&q).unwrap();
        let h = encode(&x, store.value(ids.anchor.w_e), store.value(ids.anchor.b_e)).unwrap();
        let (indices, _) = crate::anchors::nearest_anchor(&h, store.value(ids.anchor.u)).unwrap();
        let frozen = FrozenRouting {
            indices,
            h_base: h,
        };
        let err = grad_check(&mut store, 1e-5, |s| {
            let mut tape = Tape::new();
            let nodes =
                build_batch_loss(&mut tape, s, &ids, &cfg, &x, &raw, Some(&p), Some(&frozen))?;
            Ok((tape, nodes.total))
        })
        .unwrap();
        assert!(err < 1e-4, "max relative gradient error {err}");
    }

    fn preprocessed_synth(n: usize, k: usize, d: usize, de: usize, seed: u64) -> (TrainData, Vec<usize>) {
        let (em, labels) = synth_generate(n, k, d, de, seed).unwrap();
        let em = crate::ingest::filter_qc(&em, 1, 1).unwrap();
        assert_eq!(em.n_cells(), n, "qc dropped cells; labels would desync");
        let em = crate::ingest::select_hvg(&em, em.n_genes()).unwrap();
        let em = crate::ingest::normalize_log(&em).unwrap();
        (TrainData::from_expression(&em).unwrap(), labels)
    }

    #[test]
    fn test_train_two_blobs_perfect_ari() {
        let (data, truth) = preprocessed_synth(200, 2, 40, 16, 21);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 3e-3,
            seed: 1,
            m: 8,
            l: 2,
            d_k: 16,
            d_u: 16,
            d_h: 16,
            k: 2,
            warmup_epochs: 20,
            ..TrainConfig::default()
        };
        let out = train_data(&data, &cfg, |_, _| Ok(())).unwrap();
        let ari = crate::clustering::metric_ari(&out.labels, &truth).unwrap();
        assert_eq!(ari, 1.0);
    }

    #[test]
    fn test_train_warmup_only_emits_kmeans_labels() {
        let (data, truth) = preprocessed_synth(80, 2, 30, 6, 4);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 32,
            seed: 2,
            m: 6,
            l: 2,
            d_k: 8,
            d_u: 8,
            d_h: 8,
            k: 2,
            warmup_epochs: 1,
            ..TrainConfig::default()
        };
        let out = train_data(&data, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.history[0].l_c, 0.0);
        assert_eq!(out.labels.len(), 80);
        assert!(out.labels.iter().all(|&c| c < 2));
        assert!(out.labels.iter().any(|&c| c == 0) && out.labels.iter().any(|&c| c == 1));
        let z = embed(&out.store, &out.ids, cfg.scale_scores, &data.x).unwrap();
        let q = soft_assign(&z, &ClusterState::new(out.store.value(out.ids.centroids).clone()))
            .unwrap();
        assert_eq!(out.labels, predict_labels(&q));
        let _ = truth;
    }

    #[test]
    fn test_train_deterministic_across_runs() {
        let (data, _) = preprocessed_synth(60, 2, 24, 5, 13);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            seed: 11,
            m: 5,
            l: 2,
            d_k: 6,
            d_u: 6,
            d_h: 6,
            k: 2,
            warmup_epochs: 1,
            ..TrainConfig::default()
        };
        let a = train_data(&data, &cfg, |_, _| Ok(())).unwrap();
        let b = train_data(&data, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(a.labels, b.labels);
        for (sa, sb) in a.history.iter().zip(&b.history) {
            assert_eq!(sa.total.to_bits(), sb.total.to_bits());
            assert_eq!(sa.l_s.to_bits(), sb.l_s.to_bits());
            assert_eq!(sa.l_c.to_bits(), sb.l_c.to_bits());
            assert_eq!(sa.l_a.to_bits(), sb.l_a.to_bits());
        }
        for (ia, ib) in a.store.ids().zip(b.store.ids()) {
            assert_eq!(a.store.value(ia).data(), b.store.value(ib).data());
        }
    }

    #[test]
    fn test_warmup_loss_mostly_nonincreasing() {
        let mut good = 0;
        for seed in 0..10u64 {
            let (data, _) = preprocessed_synth(150, 2, 30, 6, 100 + seed);
            let cfg = TrainConfig {
                epochs: 5,
                batch_size: 50,
                seed,
                m: 8,
                l: 2,
                d_k: 8,
                d_u: 8,
                d_h: 8,
                k: 2,
                warmup_epochs: 5,
                ..TrainConfig::default()
            };
            let out = train_data(&data, &cfg, |_, _| Ok(())).unwrap();
            let warm: Vec<f64> = out
                .history
                .iter()
                .map(|s| cfg.w_s * s.l_s + cfg.w_a * s.l_a)
                .collect();
            if warm.windows(2).all(|w| w[1] <= w[0]) {
                good += 1;
            }
        }
        assert!(good >= 9, "only {good}/10 seeds were non-increasing");
    }

    #[test]
    fn test_evaluate_batch_partitions_agree() {
        let (data, _) = preprocessed_synth(60, 2, 24, 5, 6);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            seed: 3,
            m: 5,
            l: 2,
            d_k: 6,
            d_u: 6,
            d_h: 6,
            k: 2,
            warmup_epochs: 1,
            ..TrainConfig::default()
        };
        let out = train_data(&data, &cfg, |_, _| Ok(())).unwrap();
        let full = evaluate(&out.store, &out.ids, cfg.scale_scores, &data.x, None, 60, 1).unwrap();
        let quarters =
            evaluate(&out.store, &out.ids, cfg.scale_scores, &data.x, None, 15, 1).unwrap();
        assert!(full.z.max_abs_diff(&quarters.z) < 1e-12);
        assert_eq!(full.labels, quarters.labels);
        assert_eq!(full.cluster_sizes.iter().sum::<usize>(), 60);

        let threaded = embed_threaded(&out.store, &out.ids, cfg.scale_scores, &data.x, 15, 3)
            .unwrap();
        assert_eq!(threaded.data(), quarters.z.data());

        let with_truth = evaluate(
            &out.store,
            &out.ids,
            cfg.scale_scores,
            &data.x,
            Some(&full.labels),
            60,
            1,
        )
        .unwrap();
        assert_eq!(with_truth.acc, Some(1.0));
        assert_eq!(with_truth.ari, Some(1.0));
    }

    #[test]
    fn test_train_data_selects_raw_columns() {
        let (em, _) = synth_generate(30, 2, 20, 4, 9).unwrap();
        let em = crate::ingest::filter_qc(&em, 1, 1).unwrap();
        let em = crate::ingest::select_hvg(&em, 10).unwrap();
        let em = crate::ingest::normalize_log(&em).unwrap();
        let data = TrainData::from_expression(&em).unwrap();
        assert_eq!(data.raw.cols(), 10);
        assert_eq!(data.x.cols(), 10);
        for (jj, &j) in em.selected_genes.iter().enumerate() {
            assert_eq!(data.raw.get(0, jj), em.raw_counts.get(0, j));
        }
    }

    #[test]
    fn test_train_data_requires_preprocessing() {
        let (em, _) = synth_generate(10, 2, 8, 2, 0).unwrap();
        assert!(matches!(
            TrainData::from_expression(&em),
            Err(BgError::Config(_))
        ));
    }

    #[test]
    fn test_resolve_ids_roundtrip() {
        let cfg = toy_cfg();
        let mut rng = seeded_rng(1);
        let (store, ids) = build_model(5, &cfg, &mut rng);
        let resolved = resolve_ids(&store).unwrap();
        assert_eq!(resolved.heads.len(), ids.heads.len());
        assert_eq!(resolved.w_c, ids.w_c);
        assert_eq!(resolved.centroids, ids.centroids);
        assert_eq!(resolved.anchor.u, ids.anchor.u);
    }
}
