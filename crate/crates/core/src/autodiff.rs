//! Minimal reverse-mode autodiff over 2-D f64 tensors.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks it in reverse and accumulates gradients for every
//! named parameter into a [`GradStore`]. Node order is the accumulation order,
//! so gradients are deterministic across runs and thread counts.

use std::sync::Arc;

use indexmap::IndexMap;
use ndarray::{Array2, Axis};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Gradients keyed by parameter name, in first-touch order.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    grads: IndexMap<String, Array2<f64>>,
}

impl GradStore {
    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    fn accumulate(&mut self, name: &str, shape: (usize, usize), update: impl FnOnce(&mut Array2<f64>)) {
        let slot = self
            .grads
            .entry(name.to_string())
            .or_insert_with(|| Array2::zeros(shape));
        update(slot);
    }

    /// Set (or add into) a named gradient directly.
    pub fn insert(&mut self, name: &str, grad: Array2<f64>) {
        self.accumulate(name, grad.dim(), |slot| *slot += &grad);
    }

    /// Deterministic elementwise sum with another store.
    pub fn add_assign(&mut self, other: &GradStore) {
        for (name, grad) in other.iter() {
            self.accumulate(name, grad.dim(), |slot| *slot += grad);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for (_, g) in self.grads.iter_mut() {
            g.mapv_inplace(|x| x * c);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

enum Op {
    /// Constant input; no gradient flows.
    Const,
    /// Named parameter leaf.
    Param(String),
    /// Rows of a named parameter gathered by index (embedding lookup).
    GatherParam { name: String, dim: (usize, usize), indices: Vec<usize> },
    /// Rows of another node gathered by index.
    GatherRows { src: NodeId, indices: Vec<usize> },
    /// op(a) . op(b) with optional transposes.
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add { a: NodeId, b: NodeId },
    /// Broadcast-add a [1, n] row to every row of `a`.
    AddRow { a: NodeId, row: NodeId },
    Scale { a: NodeId, c: f64 },
    Mul { a: NodeId, b: NodeId },
    /// coeffs[i] * row for each output row i (value-channel injection).
    OuterScale { coeffs: Vec<f64>, row: NodeId },
    Gelu { a: NodeId },
    /// Row-wise softmax.
    Softmax { a: NodeId },
    /// Row-wise layer normalization with gain/bias of shape [1, d].
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId },
    SliceCols { a: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    /// Mean of the selected rows -> [1, d].
    MeanRows { a: NodeId, indices: Vec<usize> },
    /// Mean over rows of -log softmax(logits)[target] -> [1, 1].
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    /// Mean over rows of 0.5 (pred - target)^2; pred is [n, 1] -> [1, 1].
    HalfSquaredError { pred: NodeId, targets: Vec<f64> },
    /// Weighted sum of scalar nodes -> [1, 1].
    WeightedSum { terms: Vec<(NodeId, f64)> },
}

struct Node {
    value: Arc<Array2<f64>>,
    op: Op,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Forward-recording tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.push_rc(Arc::new(value), op)
    }

    fn push_rc(&mut self, value: Arc<Array2<f64>>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, name: &str, value: Arc<Array2<f64>>) -> NodeId {
        self.push_rc(value, Op::Param(name.to_string()))
    }

    /// Embedding lookup: rows of a named parameter.
    pub fn gather_param(
        &mut self,
        name: &str,
        table: &Arc<Array2<f64>>,
        indices: &[usize],
    ) -> NodeId {
        let mut out = Array2::zeros((indices.len(), table.ncols()));
        for (i, &idx) in indices.iter().enumerate() {
            out.row_mut(i).assign(&table.row(idx));
        }
        self.push(
            out,
            Op::GatherParam { name: name.to_string(), dim: table.dim(), indices: indices.to_vec() },
        )
    }

    pub fn gather_rows(&mut self, src: NodeId, indices: &[usize]) -> NodeId {
        let v = self.value(src);
        let mut out = Array2::zeros((indices.len(), v.ncols()));
        for (i, &idx) in indices.iter().enumerate() {
            out.row_mut(i).assign(&v.row(idx));
        }
        self.push(out, Op::GatherRows { src, indices: indices.to_vec() })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        let out = match (ta, tb) {
            (false, false) => av.dot(bv),
            (true, false) => av.t().dot(bv),
            (false, true) => av.dot(&bv.t()),
            (true, true) => av.t().dot(&bv.t()),
        };
        self.push(out, Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add { a, b })
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let out = self.value(a) + &self.value(row).row(0);
        self.push(out, Op::AddRow { a, row })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a) * c;
        self.push(out, Op::Scale { a, c })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul { a, b })
    }

    pub fn outer_scale(&mut self, coeffs: &[f64], row: NodeId) -> NodeId {
        let r = self.value(row).row(0).to_owned();
        let mut out = Array2::zeros((coeffs.len(), r.len()));
        for (i, &c) in coeffs.iter().enumerate() {
            out.row_mut(i).assign(&(&r * c));
        }
        self.push(out, Op::OuterScale { coeffs: coeffs.to_vec(), row })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu { a })
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::Softmax { a })
    }

    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let x = self.value(a);
        let g = self.value(gain).row(0).to_owned();
        let b = self.value(bias).row(0).to_owned();
        let mut out = Array2::zeros(x.dim());
        for (mut o, r) in out.axis_iter_mut(Axis(0)).zip(x.axis_iter(Axis(0))) {
            let (xhat, _) = normalize_row(&r.to_owned());
            o.assign(&(&xhat * &g + &b));
        }
        self.push(out, Op::LayerNorm { a, gain, bias })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let out = self.value(a).slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("compatible row counts");
        self.push(out, Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn mean_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        assert!(!indices.is_empty());
        let v = self.value(a);
        let mut acc = ndarray::Array1::<f64>::zeros(v.ncols());
        for &i in indices {
            acc += &v.row(i);
        }
        acc /= indices.len() as f64;
        let out = acc.insert_axis(Axis(0));
        self.push(out, Op::MeanRows { a, indices: indices.to_vec() })
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        assert_eq!(self.value(logits).nrows(), targets.len());
        let probs = softmax_rows(self.value(logits));
        let mut loss = 0.0;
        for (row, &t) in probs.axis_iter(Axis(0)).zip(targets) {
            loss -= row[t].max(f64::MIN_POSITIVE).ln();
        }
        loss /= targets.len() as f64;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy { logits, targets: targets.to_vec() },
        )
    }

    pub fn half_squared_error(&mut self, pred: NodeId, targets: &[f64]) -> NodeId {
        let p = self.value(pred);
        assert_eq!(p.dim(), (targets.len(), 1));
        let loss = p
            .column(0)
            .iter()
            .zip(targets)
            .map(|(&p, &t)| 0.5 * (p - t) * (p - t))
            .sum::<f64>()
            / targets.len() as f64;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::HalfSquaredError { pred, targets: targets.to_vec() },
        )
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let total: f64 = terms.iter().map(|&(id, w)| self.value(id)[(0, 0)] * w).sum();
        self.push(Array2::from_elem((1, 1), total), Op::WeightedSum { terms: terms.to_vec() })
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[(0, 0)]
    }

    /// Reverse pass from a scalar root; parameter gradients are accumulated
    /// into `store` (scaled by `seed`).
    pub fn backward(&self, root: NodeId, seed: f64, store: &mut GradStore) {
        let mut grads: Vec<Option<Array2<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem(self.value(root).dim(), seed));

        for idx in (0..=root.0).rev() {
            let grad = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let mut send = |id: NodeId, g: Array2<f64>| {
                debug_assert!(id.0 < idx, "tape must be topologically ordered");
                match &mut grads[id.0] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                };
            };
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Param(name) => {
                    store.accumulate(name, grad.dim(), |slot| *slot += &grad);
                }
                Op::GatherParam { name, dim, indices } => {
                    store.accumulate(name, *dim, |slot| {
                        for (i, &row) in indices.iter().enumerate() {
                            let mut r = slot.row_mut(row);
                            r += &grad.row(i);
                        }
                    });
                }
                Op::GatherRows { src, indices } => {
                    let mut g = Array2::zeros(self.value(*src).dim());
                    for (i, &row) in indices.iter().enumerate() {
                        let mut r = g.row_mut(row);
                        r += &grad.row(i);
                    }
                    send(*src, g);
                }
                Op::MatMul { a, b, ta, tb } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    // with X = op(A), Y = op(B): dX = dC Y^T, dY = X^T dC
                    let (dx, dy) = {
                        let x = if *ta { av.t().to_owned() } else { av.to_owned() };
                        let y = if *tb { bv.t().to_owned() } else { bv.to_owned() };
                        (grad.dot(&y.t()), x.t().dot(&grad))
                    };
                    send(*a, if *ta { dx.t().to_owned() } else { dx });
                    send(*b, if *tb { dy.t().to_owned() } else { dy });
                }
                Op::Add { a, b } => {
                    send(*a, grad.clone());
                    send(*b, grad);
                }
                Op::AddRow { a, row } => {
                    let row_grad = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(*a, grad);
                    send(*row, row_grad);
                }
                Op::Scale { a, c } => send(*a, grad * *c),
                Op::Mul { a, b } => {
                    let ga = &grad * self.value(*b);
                    let gb = &grad * self.value(*a);
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::OuterScale { coeffs, row } => {
                    let mut row_grad = ndarray::Array1::zeros(grad.ncols());
                    for (i, &c) in coeffs.iter().enumerate() {
                        row_grad.scaled_add(c, &grad.row(i));
                    }
                    send(*row, row_grad.insert_axis(Axis(0)));
                }
                Op::Gelu { a } => {
                    let g = &grad * &self.value(*a).mapv(gelu_grad);
                    send(*a, g);
                }
                Op::Softmax { a } => {
                    let y = &self.nodes[idx].value;
                    let mut g = &grad * &**y;
                    for (mut gr, yr) in g.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                        let dot = gr.sum();
                        gr.zip_mut_with(&yr, |gi, &yi| *gi -= dot * yi);
                    }
                    send(*a, g);
                }
                Op::LayerNorm { a, gain, bias } => {
                    let x = self.value(*a);
                    let g = self.value(*gain).row(0).to_owned();
                    let d = x.ncols() as f64;
                    let mut dx = Array2::zeros(x.dim());
                    let mut dgain = ndarray::Array1::zeros(x.ncols());
                    let mut dbias = ndarray::Array1::zeros(x.ncols());
                    for ((xr, gr), mut dxr) in x
                        .axis_iter(Axis(0))
                        .zip(grad.axis_iter(Axis(0)))
                        .zip(dx.axis_iter_mut(Axis(0)))
                    {
                        let (xhat, rstd) = normalize_row(&xr.to_owned());
                        let dy = gr.to_owned();
                        dgain += &(&dy * &xhat);
                        dbias += &dy;
                        let dxhat = &dy * &g;
                        let m1 = dxhat.sum() / d;
                        let m2 = (&dxhat * &xhat).sum() / d;
                        let dxi = (&dxhat - m1 - &xhat * m2) * rstd;
                        dxr.assign(&dxi);
                    }
                    send(*a, dx);
                    send(*gain, dgain.insert_axis(Axis(0)));
                    send(*bias, dbias.insert_axis(Axis(0)));
                }
                Op::SliceCols { a, start } => {
                    let mut g = Array2::zeros(self.value(*a).dim());
                    g.slice_mut(ndarray::s![.., *start..*start + grad.ncols()])
                        .assign(&grad);
                    send(*a, g);
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        send(p, grad.slice(ndarray::s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::MeanRows { a, indices } => {
                    let mut g = Array2::zeros(self.value(*a).dim());
                    let scale = 1.0 / indices.len() as f64;
                    for &i in indices {
                        let mut r = g.row_mut(i);
                        r.scaled_add(scale, &grad.row(0));
                    }
                    send(*a, g);
                }
                Op::CrossEntropy { logits, targets } => {
                    let scale = grad[(0, 0)] / targets.len() as f64;
                    let mut g = softmax_rows(self.value(*logits));
                    for (i, &t) in targets.iter().enumerate() {
                        g[(i, t)] -= 1.0;
                    }
                    send(*logits, g * scale);
                }
                Op::HalfSquaredError { pred, targets } => {
                    let scale = grad[(0, 0)] / targets.len() as f64;
                    let p = self.value(*pred);
                    let mut g = Array2::zeros(p.dim());
                    for (i, &t) in targets.iter().enumerate() {
                        g[(i, 0)] = (p[(i, 0)] - t) * scale;
                    }
                    send(*pred, g);
                }
                Op::WeightedSum { terms } => {
                    for &(id, w) in terms {
                        send(id, &grad * w);
                    }
                }
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn normalize_row(x: &ndarray::Array1<f64>) -> (ndarray::Array1<f64>, f64) {
    let d = x.len() as f64;
    let mean = x.sum() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    (x.mapv(|v| (v - mean) * rstd), rstd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    /// Central finite differences of `f` with respect to one named parameter.
    fn fd_grad(
        params: &mut IndexMap<String, Arc<Array2<f64>>>,
        name: &str,
        f: &dyn Fn(&IndexMap<String, Arc<Array2<f64>>>) -> f64,
        h: f64,
    ) -> Array2<f64> {
        let dim = params[name].dim();
        let mut grad = Array2::zeros(dim);
        for i in 0..dim.0 {
            for j in 0..dim.1 {
                let orig = params[name][(i, j)];
                Arc::make_mut(params.get_mut(name).unwrap())[(i, j)] = orig + h;
                let up = f(params);
                Arc::make_mut(params.get_mut(name).unwrap())[(i, j)] = orig - h;
                let down = f(params);
                Arc::make_mut(params.get_mut(name).unwrap())[(i, j)] = orig;
                grad[(i, j)] = (up - down) / (2.0 * h);
            }
        }
        grad
    }

    /// A small composite graph exercising most ops.
    fn composite(params: &IndexMap<String, Arc<Array2<f64>>>) -> (Tape, NodeId) {
        let mut tape = Tape::new();
        let emb = tape.gather_param("emb", &params["emb"], &[0, 2, 1, 2]);
        let w = tape.param("w", params["w"].clone());
        let b = tape.param("b", params["b"].clone());
        let gain = tape.param("gain", params["gain"].clone());
        let bias = tape.param("bias", params["bias"].clone());
        let h = tape.matmul(emb, w);
        let h = tape.add_row(h, b);
        let h = tape.layer_norm(h, gain, bias);
        let h = tape.gelu(h);
        let left = tape.slice_cols(h, 0, 2);
        let right = tape.slice_cols(h, 2, 2);
        let scores = tape.matmul_t(left, right, false, true);
        let probs = tape.softmax_rows(scores);
        let mixed = tape.matmul(probs, h);
        let both = tape.concat_cols(&[mixed, h]);
        let pooled = tape.mean_rows(both, &[0, 1, 3]);
        let head = tape.param("head", params["head"].clone());
        let logits = tape.matmul(pooled, head);
        let ce = tape.cross_entropy(logits, &[1]);
        let picked = tape.gather_rows(both, &[2, 0]);
        let vw = tape.param("vw", params["vw"].clone());
        let injected = tape.outer_scale(&[0.5, -1.5], vw);
        let reg_in = tape.slice_cols(picked, 0, 1);
        let inj0 = tape.slice_cols(injected, 0, 1);
        let reg_in = tape.add(reg_in, inj0);
        let mse = tape.half_squared_error(reg_in, &[0.3, -0.7]);
        let total = tape.weighted_sum(&[(ce, 1.0), (mse, 0.5)]);
        (tape, total)
    }

    #[test]
    fn composite_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut params: IndexMap<String, Arc<Array2<f64>>> = IndexMap::new();
        params.insert("emb".into(), Arc::new(randn(&mut rng, 3, 4)));
        params.insert("w".into(), Arc::new(randn(&mut rng, 4, 4)));
        params.insert("b".into(), Arc::new(randn(&mut rng, 1, 4)));
        params.insert("gain".into(), Arc::new(randn(&mut rng, 1, 4).mapv(|v| v + 1.5)));
        params.insert("bias".into(), Arc::new(randn(&mut rng, 1, 4)));
        params.insert("head".into(), Arc::new(randn(&mut rng, 8, 3)));
        params.insert("vw".into(), Arc::new(randn(&mut rng, 1, 8)));

        let (tape, root) = composite(&params);
        let mut store = GradStore::default();
        tape.backward(root, 1.0, &mut store);

        let f = |p: &IndexMap<String, Arc<Array2<f64>>>| {
            let (tape, root) = composite(p);
            tape.scalar(root)
        };
        let names: Vec<String> = params.keys().cloned().collect();
        for name in names {
            let fd = fd_grad(&mut params, &name, &f, 1e-5);
            let an = store.get(&name).unwrap();
            let denom = fd.mapv(f64::abs).sum().max(1e-8);
            let diff = (an - &fd).mapv(f64::abs).sum();
            assert!(diff / denom < 1e-6, "param {name}: rel err {}", diff / denom);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut tape = Tape::new();
        let logits = tape.constant(Array2::zeros((4, 59)));
        let ce = tape.cross_entropy(logits, &[0, 10, 20, 58]);
        assert!((tape.scalar(ce) - (59.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(randn(&mut rng, 5, 7) * 10.0);
        let s = tape.softmax_rows(x);
        for row in tape.value(s).axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_seed_scales_linearly() {
        let mut tape = Tape::new();
        let w = tape.param("w", Arc::new(arr2(&[[2.0, -1.0]])));
        let sq = tape.mul(w, w);
        let loss = tape.mean_rows(sq, &[0]);
        let loss = tape.slice_cols(loss, 0, 1);
        let total = tape.weighted_sum(&[(loss, 1.0)]);
        let mut g1 = GradStore::default();
        tape.backward(total, 1.0, &mut g1);
        let mut g2 = GradStore::default();
        tape.backward(total, 2.0, &mut g2);
        let a = g1.get("w").unwrap();
        let b = g2.get("w").unwrap();
        assert_eq!(&(a * 2.0), b);
    }

    #[test]
    fn grad_store_merge_is_elementwise() {
        let mut a = GradStore::default();
        a.accumulate("w", (1, 2), |g| g[(0, 0)] = 1.0);
        let mut b = GradStore::default();
        b.accumulate("w", (1, 2), |g| g[(0, 1)] = 2.0);
        a.add_assign(&b);
        assert_eq!(a.get("w").unwrap(), &arr2(&[[1.0, 2.0]]));
    }
}
