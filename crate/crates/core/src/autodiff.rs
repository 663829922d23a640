//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] appends one node holding its value to the
//! [`Tape`]. [`Var::backward`] walks the tape in reverse and adds the
//! gradient of a scalar into every node that requires one. Gradients
//! accumulate across calls until [`Tape::zero_grad`].
//!
//! A tape is single-threaded. Build independent tapes for independent work.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MulConst(usize, Tensor),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Softmax(usize),
    Gather(usize, Vec<usize>),
    SelectRows(usize, Vec<usize>),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    Sum(usize),
    CrossEntropy {
        logits: usize,
        target: Tensor,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one recorded value.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let rg = self.needs(parents);
        self.push(value, op, rg)
    }

    fn backward_from(&self, root: usize) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[root].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                nodes[root].value.shape()
            )));
        }
        let mut pending: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
        pending[root] = Some(Tensor::full(nodes[root].value.shape(), 1.0));

        for id in (0..=root).rev() {
            let Some(g) = pending[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            let contributions = local_grads(&nodes, id, &g)?;
            for (parent, pg) in contributions {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut pending[parent] {
                    Some(acc) => acc.accumulate(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(acc) => acc.accumulate(&g)?,
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Gradient contributions of node `id` to its parents, given its output gradient `g`.
fn local_grads(nodes: &[Node], id: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| &nodes[i].value;
    let out = match &nodes[id].op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let mut v = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                v.push((*a, g.matmul_bt(val(*b))?));
            }
            if nodes[*b].requires_grad {
                v.push((*b, val(*a).matmul_at(g)?));
            }
            v
        }
        Op::MatMulBt(a, b) => {
            // out = a bᵀ: da = g b, db = gᵀ a
            let mut v = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                v.push((*a, g.matmul(val(*b))?));
            }
            if nodes[*b].requires_grad {
                v.push((*b, g.matmul_at(val(*a))?));
            }
            v
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::AddRow(a, bias) => {
            let mut gb = Tensor::zeros(val(*bias).shape());
            let c = g.cols();
            for r in 0..g.rows() {
                for (acc, &x) in gb.data_mut().iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                    *acc += x;
                }
            }
            vec![(*a, g.clone()), (*bias, gb)]
        }
        Op::Mul(a, b) => vec![
            (*a, g.zip_with(val(*b), "mul", |x, y| x * y)?),
            (*b, g.zip_with(val(*a), "mul", |x, y| x * y)?),
        ],
        Op::Scale(a, f) => vec![(*a, g.scale(*f))],
        Op::MulConst(a, m) => vec![(*a, g.zip_with(m, "mul", |x, y| x * y)?)],
        Op::Gelu(a) => vec![(*a, g.zip_with(val(*a), "gelu", |x, y| x * tensor::gelu_grad(y))?)],
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = xhat.cols();
            let gamma = val(*gain).data();
            let mut gx = Tensor::zeros(xhat.shape());
            let mut gg = Tensor::zeros(val(*gain).shape());
            let mut gbias = Tensor::zeros(val(*bias).shape());
            for (r, &inv) in inv_std.iter().enumerate() {
                let gr = &g.data()[r * d..(r + 1) * d];
                let xr = xhat.row(r);
                let mut mean_dy = 0.0;
                let mut mean_dy_x = 0.0;
                for j in 0..d {
                    gg.data_mut()[j] += gr[j] * xr[j];
                    gbias.data_mut()[j] += gr[j];
                    let dy = gr[j] * gamma[j];
                    mean_dy += dy;
                    mean_dy_x += dy * xr[j];
                }
                mean_dy /= d as f64;
                mean_dy_x /= d as f64;
                let out = gx.row_mut(r);
                for j in 0..d {
                    let dy = gr[j] * gamma[j];
                    out[j] = inv * (dy - mean_dy - xr[j] * mean_dy_x);
                }
            }
            vec![(*x, gx), (*gain, gg), (*bias, gbias)]
        }
        Op::Softmax(a) => {
            let p = &nodes[id].value;
            let mut ga = Tensor::zeros(p.shape());
            for r in 0..p.rows() {
                let pr = p.row(r);
                let gr = g.row(r);
                let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                for (o, (&pv, &gv)) in ga.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
                    *o = pv * (gv - dot);
                }
            }
            vec![(*a, ga)]
        }
        Op::Gather(table, ids) => {
            let mut gt = Tensor::zeros(val(*table).shape());
            for (r, &id) in ids.iter().enumerate() {
                for (o, &x) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                    *o += x;
                }
            }
            vec![(*table, gt)]
        }
        Op::SelectRows(a, rows) => {
            let mut ga = Tensor::zeros(val(*a).shape());
            for (r, &src) in rows.iter().enumerate() {
                for (o, &x) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                    *o += x;
                }
            }
            vec![(*a, ga)]
        }
        Op::SliceCols(a, start) => {
            let mut ga = Tensor::zeros(val(*a).shape());
            let w = g.cols();
            for r in 0..g.rows() {
                ga.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
            }
            vec![(*a, ga)]
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            let mut v = Vec::with_capacity(parts.len());
            for &p in parts {
                let w = val(p).cols();
                let mut gp = Tensor::zeros(val(p).shape());
                for r in 0..g.rows() {
                    gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                }
                off += w;
                v.push((p, gp));
            }
            v
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::CrossEntropy {
            logits,
            target,
            probs,
        } => {
            let scale = g.item() / probs.rows() as f64;
            let c = probs.cols();
            let mut gl = Tensor::zeros(probs.shape());
            for r in 0..probs.rows() {
                let t = target.row(r);
                let tsum: f64 = t.iter().sum();
                let p = probs.row(r);
                let out = gl.row_mut(r);
                for j in 0..c {
                    out[j] = scale * (tsum * p[j] - t[j]);
                }
            }
            vec![(*logits, gl)]
        }
    };
    Ok(out)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// A copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    /// Accumulated gradient, zeros if nothing has flowed here yet.
    pub fn grad(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        n.grad.clone().unwrap_or_else(|| Tensor::zeros(n.value.shape()))
    }

    /// Accumulates `∂self/∂v` into every reachable `v`. `self` must be a scalar.
    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn with_values<R>(&self, other: &Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.with_values(other, |a, b| a.matmul(b))?;
        Ok(self.tape.record(v, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// `self × otherᵀ`.
    pub fn matmul_bt(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.with_values(other, |a, b| a.matmul_bt(b))?;
        Ok(self.tape.record(v, Op::MatMulBt(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.with_values(other, |a, b| a.add(b))?;
        Ok(self.tape.record(v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let v = self.with_values(bias, |a, b| {
            if b.numel() != a.cols() {
                return Err(Error::shape("add_row", a.shape(), b.shape()));
            }
            let mut out = a.clone();
            for r in 0..out.rows() {
                for (o, &x) in out.row_mut(r).iter_mut().zip(b.data()) {
                    *o += x;
                }
            }
            Ok(out)
        })?;
        Ok(self.tape.record(v, Op::AddRow(self.id, bias.id), &[self.id, bias.id]))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.with_values(other, |a, b| a.zip_with(b, "mul", |x, y| x * y))?;
        Ok(self.tape.record(v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        let v = self.with_value(|a| a.scale(factor));
        self.tape.record(v, Op::Scale(self.id, factor), &[self.id])
    }

    /// Elementwise product with a constant mask.
    pub fn mul_const(&self, mask: Tensor) -> Result<Var<'t>> {
        let v = self.with_value(|a| a.zip_with(&mask, "mul_const", |x, y| x * y))?;
        Ok(self.tape.record(v, Op::MulConst(self.id, mask), &[self.id]))
    }

    pub fn gelu(&self) -> Var<'t> {
        let v = self.with_value(|a| a.map(tensor::gelu));
        self.tape.record(v, Op::Gelu(self.id), &[self.id])
    }

    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let (out, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            tensor::layer_norm_parts(&nodes[self.id].value, &nodes[gain.id].value, &nodes[bias.id].value)?
        };
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            inv_std,
        };
        Ok(self.tape.record(out, op, &[self.id, gain.id, bias.id]))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let v = self.with_value(tensor::softmax_rows)?;
        Ok(self.tape.record(v, Op::Softmax(self.id), &[self.id]))
    }

    /// Row softmax where columns with `keep[j] == false` get zero weight,
    /// as if their logits were `-∞`. At least one column must be kept.
    pub fn masked_softmax_rows(&self, keep: &[bool]) -> Result<Var<'t>> {
        let v = self.with_value(|a| {
            if keep.len() != a.cols() {
                return Err(Error::shape("masked_softmax_rows", a.shape(), &[keep.len()]));
            }
            if !keep.iter().any(|&k| k) {
                return Err(Error::Contract("attention mask hides every position".into()));
            }
            if !a.is_finite() {
                return Err(Error::Numeric("attention logits contain non-finite values".into()));
            }
            let mut out = a.clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let max = row
                    .iter()
                    .zip(keep)
                    .filter(|(_, &k)| k)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (v, &k) in row.iter_mut().zip(keep) {
                    *v = if k { (*v - max).exp() } else { 0.0 };
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
            Ok(out)
        })?;
        // Masked entries are exactly zero, so the plain softmax backward applies.
        Ok(self.tape.record(v, Op::Softmax(self.id), &[self.id]))
    }

    /// Row lookup: output row `r` is row `ids[r]` of `self`.
    pub fn gather(&self, ids: &[usize]) -> Result<Var<'t>> {
        let v = self.with_value(|t| {
            let rows = t.rows();
            let mut data = Vec::with_capacity(ids.len() * t.cols());
            for &id in ids {
                if id >= rows {
                    return Err(Error::Contract(format!("row id {id} out of range {rows}")));
                }
                data.extend_from_slice(t.row(id));
            }
            Tensor::new(vec![ids.len(), t.cols()], data)
        })?;
        Ok(self.tape.record(v, Op::Gather(self.id, ids.to_vec()), &[self.id]))
    }

    /// Same as [`Var::gather`] but meant for picking positions out of activations.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let v = self.with_value(|t| {
            let mut data = Vec::with_capacity(rows.len() * t.cols());
            for &r in rows {
                if r >= t.rows() {
                    return Err(Error::Contract(format!("row {r} out of range {}", t.rows())));
                }
                data.extend_from_slice(t.row(r));
            }
            Tensor::new(vec![rows.len(), t.cols()], data)
        })?;
        Ok(self.tape.record(v, Op::SelectRows(self.id, rows.to_vec()), &[self.id]))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'t>> {
        let v = self.with_value(|t| {
            if start + width > t.cols() || width == 0 {
                return Err(Error::Contract(format!(
                    "column slice {start}..{} out of range {}",
                    start + width,
                    t.cols()
                )));
            }
            let mut data = Vec::with_capacity(t.rows() * width);
            for r in 0..t.rows() {
                data.extend_from_slice(&t.row(r)[start..start + width]);
            }
            Tensor::new(vec![t.rows(), width], data)
        })?;
        Ok(self.tape.record(v, Op::SliceCols(self.id, start), &[self.id]))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let tape = first.tape;
        let v = {
            let nodes = tape.nodes.borrow();
            let rows = nodes[first.id].value.rows();
            let total: usize = parts.iter().map(|p| nodes[p.id].value.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    let t = &nodes[p.id].value;
                    if t.rows() != rows {
                        return Err(Error::shape("concat_cols", nodes[first.id].value.shape(), t.shape()));
                    }
                    data.extend_from_slice(t.row(r));
                }
            }
            Tensor::new(vec![rows, total], data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.record(v, Op::ConcatCols(ids.clone()), &ids))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = self.with_value(|t| Tensor::scalar(t.sum()));
        self.tape.record(v, Op::Sum(self.id), &[self.id])
    }

    /// Mean soft-target cross-entropy over rows; `self` holds the logits.
    pub fn cross_entropy(&self, target: &Tensor) -> Result<Var<'t>> {
        let (loss, probs) = self.with_value(|logits| -> Result<(f64, Tensor)> {
            let loss = tensor::cross_entropy(logits, target)?;
            Ok((loss, tensor::softmax_rows(logits)?))
        })?;
        let op = Op::CrossEntropy {
            logits: self.id,
            target: target.clone(),
            probs,
        };
        Ok(self.tape.record(Tensor::scalar(loss), op, &[self.id]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `f` at every entry of every input.
    fn finite_diff(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64) -> Vec<Tensor> {
        let h = 1e-5;
        inputs
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let mut g = Tensor::zeros(t.shape());
                for i in 0..t.numel() {
                    let mut plus = inputs.to_vec();
                    plus[k].data_mut()[i] += h;
                    let mut minus = inputs.to_vec();
                    minus[k].data_mut()[i] -= h;
                    g.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
                }
                g
            })
            .collect()
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let num = a.sub(b).unwrap().data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let den = a.data().iter().chain(b.data()).map(|v| v * v).sum::<f64>().sqrt();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    /// Runs `build` on a fresh tape, then compares autodiff against finite differences.
    fn check(inputs: Vec<Tensor>, build: &dyn for<'t> Fn(&[Var<'t>]) -> Var<'t>) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        build(&vars).backward().unwrap();
        let eval = |ts: &[Tensor]| {
            let tape = Tape::new();
            let vars: Vec<Var> = ts.iter().map(|t| tape.param(t.clone())).collect();
            build(&vars).item()
        };
        let fd = finite_diff(&inputs, &eval);
        for (v, g) in vars.iter().zip(&fd) {
            let e = rel_err(&v.grad(), g);
            assert!(e < 1e-4, "relative error {e}");
        }
    }

    #[test]
    fn sum_grad_is_ones() {
        let tape = Tape::new();
        let w = tape.param(Tensor::full(&[3, 2], 0.7));
        w.sum().backward().unwrap();
        assert!(w.grad().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let tape = Tape::new();
        let w = tape.param(Tensor::full(&[2], 1.0));
        let loss = w.sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().data(), &[2.0, 2.0]);
        tape.zero_grad();
        loss.backward().unwrap();
        assert_eq!(w.grad().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_on_matrix_is_rejected() {
        let tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(w.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let w = tape.param(Tensor::full(&[2, 2], 1.0));
        let c = tape.constant(Tensor::full(&[2, 2], 3.0));
        w.matmul(&c).unwrap().sum().backward().unwrap();
        assert_eq!(c.grad(), Tensor::zeros(&[2, 2]));
        assert!(w.grad().data().iter().all(|&g| g == 6.0));
    }

    #[test]
    fn softmax_classifier_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[5, 4]);
        let target = Tensor::one_hot(&[0, 2, 1, 2, 0], 3).unwrap();
        let w = random(&mut rng, &[4, 3]);
        let b = random(&mut rng, &[3]);
        check(vec![x, w, b], &|v| {
            v[0].matmul(&v[1]).unwrap().add_row(&v[2]).unwrap().cross_entropy(&target).unwrap()
        });
    }

    #[test]
    fn matmul_chain_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 5]);
        let c = random(&mut rng, &[2, 5]);
        check(vec![a, b, c], &|v| {
            let ab = v[0].matmul(&v[1]).unwrap();
            ab.matmul_bt(&v[2]).unwrap().mul(&ab.matmul_bt(&v[2]).unwrap()).unwrap().sum()
        });
    }

    #[test]
    fn elementwise_and_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[4, 6]);
        let g = random(&mut rng, &[6]);
        let b = random(&mut rng, &[6]);
        let w = random(&mut rng, &[6, 6]);
        let mask = random(&mut rng, &[4, 6]);
        check(vec![x, g, b, w], &|v| {
            let h = v[0].layer_norm(&v[1], &v[2]).unwrap().gelu();
            let h = h.mul_const(mask.clone()).unwrap().scale(1.7);
            let s = h.matmul(&v[3]).unwrap().softmax_rows().unwrap();
            s.mul(&h).unwrap().sum()
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let table = random(&mut rng, &[7, 4]);
        let w = random(&mut rng, &[4, 4]);
        let target = Tensor::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.1, 0.1, 0.8]]).unwrap();
        check(vec![table, w], &|v| {
            let e = v[0].gather(&[3, 0, 3, 6]).unwrap().matmul(&v[1]).unwrap();
            let left = e.slice_cols(0, 2).unwrap();
            let right = e.slice_cols(2, 2).unwrap();
            let scores = right.matmul_bt(&left).unwrap().masked_softmax_rows(&[true, false, true, true]).unwrap();
            let mixed = scores.matmul(&right).unwrap();
            let both = Var::concat_cols(&[mixed, left]).unwrap();
            let picked = both.select_rows(&[0, 2]).unwrap().slice_cols(0, 3).unwrap();
            picked.cross_entropy(&target).unwrap()
        });
    }

    #[test]
    fn masked_softmax_zeroes_hidden_columns() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![5.0, 1.0, -2.0]]).unwrap());
        let s = a.masked_softmax_rows(&[true, false, true]).unwrap().value();
        assert_eq!(s.get(0, 1), 0.0);
        assert!((s.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.masked_softmax_rows(&[false, false, false]).is_err());
    }
}
