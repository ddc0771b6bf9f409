use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{BgError, Result};
use crate::tensor::Tensor2;

const CHECKPOINT_MAGIC: &[u8; 4] = b"BGF1";

/// Handle into a [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named trainable parameters with matching gradient buffers.
#[derive(Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor2>,
    grads: Vec<Tensor2>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor2) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.grads.push(Tensor2::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    /// Glorot-uniform init: entries uniform in ±sqrt(6/(rows+cols)).
    pub fn add_glorot(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| limit * (2.0 * rng.gen::<f64>() - 1.0))
            .collect();
        self.add(name, Tensor2::from_vec(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor2::zeros(rows, cols))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2 {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    fn accumulate_grad(&mut self, id: ParamId, g: &Tensor2) {
        let dst = &mut self.grads[id.0];
        assert_eq!((dst.rows(), dst.cols()), (g.rows(), g.cols()));
        for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
            *d += s;
        }
    }

    /// Serializes every parameter in insertion order. Each record is:
    /// u32 name length, UTF-8 name, u32 rows, u32 cols, row-major f64 data,
    /// all little-endian, after a 4-byte "BGF1" magic.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for i in 0..self.values.len() {
            let name = self.names[i].as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            let v = &self.values[i];
            buf.extend_from_slice(&(v.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(v.cols() as u32).to_le_bytes());
            for &x in v.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| BgError::io(path, e))?;
        f.write_all(&buf).map_err(|e| BgError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| BgError::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| BgError::io(path, e))?;
        if bytes.len() < 4 || &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(BgError::Checkpoint("bad magic".into()));
        }
        let mut store = ParamStore::new();
        let mut pos = 4;
        let take = |pos: &mut usize, n: usize| -> Result<usize> {
            let start = *pos;
            if start + n > bytes.len() {
                return Err(BgError::Checkpoint("truncated record".into()));
            }
            *pos += n;
            Ok(start)
        };
        while pos < bytes.len() {
            let at = take(&mut pos, 4)?;
            let name_len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
            let at = take(&mut pos, name_len)?;
            let name = std::str::from_utf8(&bytes[at..at + name_len])
                .map_err(|_| BgError::Checkpoint("name is not UTF-8".into()))?
                .to_string();
            let at = take(&mut pos, 4)?;
            let rows = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
            let at = take(&mut pos, 4)?;
            let cols = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
            let at = take(&mut pos, rows * cols * 8)?;
            let data = bytes[at..at + rows * cols * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if store.index.contains_key(&name) {
                return Err(BgError::Checkpoint(format!("duplicate parameter {name}")));
            }
            store.add(&name, Tensor2::from_vec(rows, cols, data));
        }
        Ok(store)
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Node handle inside a [`Tape`].
#[derive(Copy, Clone, Debug)]
pub struct NodeRef(usize);

enum Op {
    Const,
    Param(ParamId),
    MatMul(NodeRef, NodeRef),
    MatMulBT(NodeRef, NodeRef),
    Add(NodeRef, NodeRef),
    Sub(NodeRef, NodeRef),
    Mul(NodeRef, NodeRef),
    AddRow(NodeRef, NodeRef),
    AddCol(NodeRef, NodeRef),
    AffineScalar(NodeRef, f64),
    PowConst(NodeRef, f64),
    RowSoftmax(NodeRef),
    RowNormalize(NodeRef),
    Sigmoid(NodeRef),
    Softplus(NodeRef),
    ExpClamp(NodeRef),
    Ln(NodeRef),
    Log1p(NodeRef),
    LgammaShift(NodeRef, Tensor2),
    ConcatCols(Vec<NodeRef>),
    GatherRows(NodeRef, Vec<usize>),
    RowSum(NodeRef),
    SumAll(NodeRef),
    Transpose(NodeRef),
}

struct Node {
    op: Op,
    value: Tensor2,
}

pub const EXP_CLAMP_MAX: f64 = 30.0;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Reverse-mode tape over a fixed op vocabulary. Forward values are computed
/// eagerly as nodes are pushed; `backward` accumulates parameter gradients
/// into the store.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor2) -> NodeRef {
        self.nodes.push(Node { op, value });
        NodeRef(self.nodes.len() - 1)
    }

    pub fn value(&self, n: NodeRef) -> &Tensor2 {
        &self.nodes[n.0].value
    }

    pub fn scalar(&self, n: NodeRef) -> f64 {
        let v = self.value(n);
        assert_eq!((v.rows(), v.cols()), (1, 1), "scalar node expected");
        v.get(0, 0)
    }

    pub fn constant(&mut self, t: Tensor2) -> NodeRef {
        self.push(Op::Const, t)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeRef {
        self.constant(Tensor2::from_vec(1, 1, vec![v]))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeRef {
        let v = store.value(id).clone();
        self.push(Op::Param(id), v)
    }

    pub fn matmul(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    /// a times bᵀ.
    pub fn matmul_bt(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(Op::MatMulBT(a, b), v)
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        let v = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        let v = self.value(a).mul_elem(self.value(b));
        self.push(Op::Mul(a, b), v)
    }

    /// Broadcast-add a 1 x c row vector to every row of a.
    pub fn add_row(&mut self, a: NodeRef, row: NodeRef) -> NodeRef {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(a).cols());
        let v = self.value(a).add_row_vec(r.row(0));
        self.push(Op::AddRow(a, row), v)
    }

    /// Broadcast-add an r x 1 column vector to every column of a.
    pub fn add_col(&mut self, a: NodeRef, col: NodeRef) -> NodeRef {
        let c = self.value(col);
        assert_eq!(c.cols(), 1);
        assert_eq!(c.rows(), self.value(a).rows());
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            let b = c.get(i, 0);
            for x in v.row_mut(i) {
                *x += b;
            }
        }
        self.push(Op::AddCol(a, col), v)
    }

    pub fn affine(&mut self, a: NodeRef, mul: f64, add: f64) -> NodeRef {
        let v = self.value(a).map(|x| mul * x + add);
        self.push(Op::AffineScalar(a, mul), v)
    }

    pub fn pow_const(&mut self, a: NodeRef, p: f64) -> NodeRef {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(Op::PowConst(a, p), v)
    }

    pub fn row_softmax(&mut self, a: NodeRef) -> NodeRef {
        let v = self.value(a).row_softmax();
        self.push(Op::RowSoftmax(a), v)
    }

    /// Divides each row by its sum; rows must have positive sums.
    pub fn row_normalize(&mut self, a: NodeRef) -> NodeRef {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            let s: f64 = v.row(i).iter().sum();
            for x in v.row_mut(i) {
                *x /= s;
            }
        }
        self.push(Op::RowNormalize(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeRef) -> NodeRef {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn softplus(&mut self, a: NodeRef) -> NodeRef {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a), v)
    }

    /// exp(min(x, 30)); the clamp keeps count-scale means finite.
    pub fn exp_clamp(&mut self, a: NodeRef) -> NodeRef {
        let v = self.value(a).map(|x| x.min(EXP_CLAMP_MAX).exp());
        self.push(Op::ExpClamp(a), v)
    }

    pub fn ln(&mut self, a: NodeRef) -> NodeRef {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn log1p(&mut self, a: NodeRef) -> NodeRef {
        let v = self.value(a).map(f64::ln_1p);
        self.push(Op::Log1p(a), v)
    }

    /// lgamma(a + shift) with a constant shift matrix.
    pub fn lgamma_shift(&mut self, a: NodeRef, shift: Tensor2) -> NodeRef {
        let av = self.value(a);
        assert_eq!((av.rows(), av.cols()), (shift.rows(), shift.cols()));
        let mut v = av.clone();
        for (x, s) in v.data_mut().iter_mut().zip(shift.data()) {
            *x = ln_gamma(*x + s);
        }
        self.push(Op::LgammaShift(a, shift), v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeRef]) -> NodeRef {
        let tensors: Vec<&Tensor2> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor2::concat_cols(&tensors);
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn gather_rows(&mut self, a: NodeRef, idx: Vec<usize>) -> NodeRef {
        let v = self.value(a).gather_rows(&idx);
        self.push(Op::GatherRows(a, idx), v)
    }

    /// Row sums as an r x 1 column.
    pub fn row_sum(&mut self, a: NodeRef) -> NodeRef {
        let av = self.value(a);
        let mut v = Tensor2::zeros(av.rows(), 1);
        for i in 0..av.rows() {
            v.set(i, 0, av.row(i).iter().sum());
        }
        self.push(Op::RowSum(a), v)
    }

    pub fn sum_all(&mut self, a: NodeRef) -> NodeRef {
        let s = self.value(a).sum();
        self.push(Op::SumAll(a), Tensor2::from_vec(1, 1, vec![s]))
    }

    pub fn transpose(&mut self, a: NodeRef) -> NodeRef {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    /// Reverse sweep from a 1 x 1 loss node; parameter gradients are added
    /// into the store (callers zero them first when they want fresh values).
    pub fn backward(&self, loss: NodeRef, store: &mut ParamStore) {
        let lv = self.value(loss);
        assert_eq!((lv.rows(), lv.cols()), (1, 1), "loss must be scalar");
        let mut adj: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor2::from_vec(1, 1, vec![1.0]));

        for i in (0..self.nodes.len()).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(id) => store.accumulate_grad(*id, &g),
                Op::MatMul(a, b) => {
                    let da = g.matmul_bt(self.value(*b));
                    let db = self.value(*a).matmul_ta(&g);
                    acc(&mut adj, a.0, da);
                    acc(&mut adj, b.0, db);
                }
                Op::MatMulBT(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.matmul_ta(self.value(*a));
                    acc(&mut adj, a.0, da);
                    acc(&mut adj, b.0, db);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, a.0, g.clone());
                    acc(&mut adj, b.0, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, b.0, g.scale(-1.0));
                    acc(&mut adj, a.0, g);
                }
                Op::Mul(a, b) => {
                    let da = g.mul_elem(self.value(*b));
                    let db = g.mul_elem(self.value(*a));
                    acc(&mut adj, a.0, da);
                    acc(&mut adj, b.0, db);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Tensor2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, s) in dr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    acc(&mut adj, row.0, dr);
                    acc(&mut adj, a.0, g);
                }
                Op::AddCol(a, col) => {
                    let mut dc = Tensor2::zeros(g.rows(), 1);
                    for r in 0..g.rows() {
                        dc.set(r, 0, g.row(r).iter().sum());
                    }
                    acc(&mut adj, col.0, dc);
                    acc(&mut adj, a.0, g);
                }
                Op::AffineScalar(a, mul) => acc(&mut adj, a.0, g.scale(*mul)),
                Op::PowConst(a, p) => {
                    let av = self.value(*a);
                    let mut da = g.clone();
                    for (d, x) in da.data_mut().iter_mut().zip(av.data()) {
                        *d *= p * x.powf(p - 1.0);
                    }
                    acc(&mut adj, a.0, da);
                }
                Op::RowSoftmax(a) => {
                    let s = &self.nodes[i].value;
                    let mut da = Tensor2::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let dot: f64 = g.row(r).iter().zip(s.row(r)).map(|(x, y)| x * y).sum();
                        for ((d, gv), sv) in
                            da.row_mut(r).iter_mut().zip(g.row(r)).zip(s.row(r))
                        {
                            *d = sv * (gv - dot);
                        }
                    }
                    acc(&mut adj, a.0, da);
                }
                Op::RowNormalize(a) => {
                    let av = self.value(*a);
                    let y = &self.nodes[i].value;
                    let mut da = Tensor2::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let sum: f64 = av.row(r).iter().sum();
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(x, v)| x * v).sum();
                        for (d, gv) in da.row_mut(r).iter_mut().zip(g.row(r)) {
                            *d = (gv - dot) / sum;
                        }
                    }
                    acc(&mut adj, a.0, da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let mut da = g.clone();
                    for (d, s) in da.data_mut().iter_mut().zip(y.data()) {
                        *d *= s * (1.0 - s);
                    }
                    acc(&mut adj, a.0, da);
                }
                Op::Softplus(a) => {
                    let av = self.value(*a);
                    let mut da = g.clone();
                    for (d, x) in da.data_mut().iter_mut().zip(av.data()) {
                        *d *= sigmoid(*x);
                    }
                    acc(&mut adj, a.0, da);
                }
                Op::ExpClamp(a) => {
                    let av = self.value(*a);
                    let y = &self.nodes[i].value;
                    let mut da = g.clone();
                    for ((d, x), e) in da.data_mut().iter_mut().zip(av.data()).zip(y.data()) {
                        *d *= if *x < EXP_CLAMP_MAX { *e } else { 0.0 };
                    }
                    acc(&mut adj, a.0, da);
                }
                Op::Ln(a) => {
                    let av = self.value(*a);
                    let mut da = g.clone();
                    for (d, x) in da.data_mut().iter_mut().zip(av.data()) {
                        *d /= x;
                    }
                    acc(&mut adj, a.0, da);
                }
                Op::Log1p(a) => {
                    let av = self.value(*a);
                    let mut da = g.clone();
                    for (d, x) in da.data_mut().iter_mut().zip(av.data()) {
                        *d /= 1.0 + x;
                    }
                    acc(&mut adj, a.0, da);
                }
                Op::LgammaShift(a, shift) => {
                    let av = self.value(*a);
                    let mut da = g.clone();
                    for ((d, x), s) in da.data_mut().iter_mut().zip(av.data()).zip(shift.data())
                    {
                        *d *= digamma(*x + s);
                    }
                    acc(&mut adj, a.0, da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pc = self.value(*p).cols();
                        let mut dp = Tensor2::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        off += pc;
                        acc(&mut adj, p.0, dp);
                    }
                }
                Op::GatherRows(a, idx) => {
                    let av = self.value(*a);
                    let mut da = Tensor2::zeros(av.rows(), av.cols());
                    for (r, &src) in idx.iter().enumerate() {
                        for (d, s) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    acc(&mut adj, a.0, da);
                }
                Op::RowSum(a) => {
                    let av = self.value(*a);
                    let mut da = Tensor2::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let gv = g.get(r, 0);
                        for d in da.row_mut(r) {
                            *d = gv;
                        }
                    }
                    acc(&mut adj, a.0, da);
                }
                Op::SumAll(a) => {
                    let av = self.value(*a);
                    let da = Tensor2::filled(av.rows(), av.cols(), g.get(0, 0));
                    acc(&mut adj, a.0, da);
                }
                Op::Transpose(a) => acc(&mut adj, a.0, g.transpose()),
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn acc(adj: &mut [Option<Tensor2>], i: usize, g: Tensor2) {
    match &mut adj[i] {
        Some(existing) => {
            for (d, s) in existing.data_mut().iter_mut().zip(g.data()) {
                *d += s;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Compares analytic gradients against central finite differences on the same
/// graph builder. Returns the worst relative error over every parameter entry,
/// with relative error |ad - fd| / max(1, |ad|, |fd|).
pub fn grad_check<F>(store: &mut ParamStore, h: f64, mut build: F) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<(Tape, NodeRef)>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(BgError::Config(format!(
            "grad_check step {h} outside [1e-7, 1e-4]"
        )));
    }
    let (tape, loss) = build(store)?;
    let f0 = tape.scalar(loss);
    if !f0.is_finite() {
        return Err(BgError::NonFinite {
            part: "grad_check loss".into(),
        });
    }
    store.zero_grads();
    tape.backward(loss, store);
    let analytic: Vec<Tensor2> = store.ids().map(|id| store.grad(id).clone()).collect();

    let mut worst = 0.0_f64;
    let ids: Vec<ParamId> = store.ids().collect();
    for (pi, &id) in ids.iter().enumerate() {
        let n_entries = store.value(id).data().len();
        for e in 0..n_entries {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + h;
            let (tp, lp) = build(store)?;
            let fp = tp.scalar(lp);
            store.value_mut(id).data_mut()[e] = orig - h;
            let (tm, lm) = build(store)?;
            let fm = tm.scalar(lm);
            store.value_mut(id).data_mut()[e] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(BgError::NonFinite {
                    part: format!("grad_check probe of {}", store.name(id)),
                });
            }
            let fd = (fp - fm) / (2.0 * h);
            let ad = analytic[pi].data()[e];
            let rel = (ad - fd).abs() / 1.0_f64.max(ad.abs()).max(fd.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
