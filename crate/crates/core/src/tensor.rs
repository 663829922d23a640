//! Dense row-major `f64` tensors and the value-level kernels the tape builds on.

use crate::error::{Error, Result};

/// Variance floor used by [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape {shape:?} must be a non-empty list of positive dimensions"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "invalid shape {shape:?}"
        );
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// One row per id, each a one-hot vector of width `width`.
    pub fn one_hot(ids: &[usize], width: usize) -> Result<Self> {
        let mut t = Self::zeros(&[ids.len().max(1), width]);
        for (row, &id) in ids.iter().enumerate() {
            if id >= width {
                return Err(Error::Contract(format!("id {id} out of range {width}")));
            }
            t.data[row * width + id] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Contract(format!(
                "{op} expects a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// `self × other` for `[m,k] × [k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self × otherᵀ` for `[m,k] × [n,k]`.
    pub fn matmul_bt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul_bt")?;
        let (n, k2) = other.require_matrix("matmul_bt")?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ × other` for `[k,m] × [k,n]`.
    pub fn matmul_at(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.require_matrix("matmul_at")?;
        let (k2, n) = other.require_matrix("matmul_at")?;
        if k != k2 {
            return Err(Error::shape("matmul_at", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let b_row = &other.data[p * n..(p + 1) * n];
            for i in 0..m {
                let a = self.data[p * m + i];
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    /// In-place `self += other`.
    pub fn accumulate(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("accumulate", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Column index of the largest entry in each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Row-wise softmax, shifted by each row's maximum.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    if !m.is_finite() {
        return Err(Error::Numeric("softmax input contains non-finite values".into()));
    }
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-wise log-softmax via the log-sum-exp shift.
pub fn log_softmax_rows(m: &Tensor) -> Result<Tensor> {
    if !m.is_finite() {
        return Err(Error::Numeric("log-softmax input contains non-finite values".into()));
    }
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(out)
}

/// Checks that every row of `target` is a probability distribution.
pub(crate) fn check_stochastic(target: &Tensor, tol: f64, what: &str) -> Result<()> {
    for r in 0..target.rows() {
        let row = target.row(r);
        if row.iter().any(|&v| v < -tol || !v.is_finite()) {
            return Err(Error::Contract(format!("{what} row {r} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > tol {
            return Err(Error::Contract(format!("{what} row {r} sums to {s}, expected 1")));
        }
    }
    Ok(())
}

/// Mean over rows of `-Σ_j target[i,j] · log softmax(logits)[i,j]`.
///
/// `target` may hold soft distributions; each row must sum to one within `1e-6`.
pub fn cross_entropy(logits: &Tensor, target: &Tensor) -> Result<f64> {
    if logits.shape() != target.shape() {
        return Err(Error::shape("cross_entropy", logits.shape(), target.shape()));
    }
    check_stochastic(target, 1e-6, "cross-entropy target")?;
    let logp = log_softmax_rows(logits)?;
    let total: f64 = logp
        .data()
        .iter()
        .zip(target.data())
        .map(|(&lp, &t)| if t == 0.0 { 0.0 } else { -t * lp })
        .sum();
    Ok(total / logits.rows() as f64)
}

/// Normalizes the last axis to zero mean and unit variance, then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(layer_norm_parts(x, gain, bias)?.0)
}

/// Layer norm plus the normalized input and per-row inverse deviations used by backward.
pub(crate) fn layer_norm_parts(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let d = x.cols();
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let mut xhat = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(inv);
        let xh = xhat.row_mut(r);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * inv;
        }
        let o = out.row_mut(r);
        for j in 0..d {
            o[j] = xh[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((out, xhat, inv_std))
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let m = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.5, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&m).unwrap(), m);

        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, naive_matmul(&a, &b));
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);

        let bad = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = bad.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let m = Tensor::from_rows(&[
            vec![0.0, 0.0, 0.0],
            vec![1000.0, 1000.0, 1000.0],
            vec![2f64.ln(), 0.0, 0.0],
        ])
        .unwrap();
        let s = softmax_rows(&m).unwrap();
        for j in 0..3 {
            assert!((s.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
            assert!((s.get(1, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        // exp(ln 2) = 2, normalized by 2 + 1 + 1
        assert!((s.get(2, 0) - 0.5).abs() < 1e-15);
        assert!((s.get(2, 1) - 0.25).abs() < 1e-15);
        assert!((s.get(2, 2) - 0.25).abs() < 1e-15);

        let inf = Tensor::from_rows(&[vec![f64::INFINITY, 0.0]]).unwrap();
        assert!(matches!(softmax_rows(&inf), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = Tensor::zeros(&[1, 4]);
        let target = Tensor::one_hot(&[2], 4).unwrap();
        let ce = cross_entropy(&logits, &target).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);

        let logits = Tensor::from_rows(&[vec![0.2, -1.3, 2.0], vec![0.0, 0.5, 0.1]]).unwrap();
        let p = softmax_rows(&logits).unwrap();
        // direct entropy sum, independent of the fused log-softmax path
        let mut entropy = 0.0;
        for r in 0..2 {
            for j in 0..3 {
                let q = p.get(r, j);
                entropy -= q * q.ln();
            }
        }
        let ce = cross_entropy(&logits, &p).unwrap();
        assert!((ce - entropy / 2.0).abs() < 1e-12);

        let short = Tensor::from_rows(&[vec![0.5, 0.4]]).unwrap();
        assert!(matches!(
            cross_entropy(&Tensor::zeros(&[1, 2]), &short),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            cross_entropy(&Tensor::zeros(&[1, 3]), &short),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::full(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let c = Tensor::full(&[2, 4], 7.5);
        let out = layer_norm(&c, &ones, &zeros).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let x = Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap();
        let out = layer_norm(&x, &g, &b).unwrap();
        // mean 2, variance 1
        assert!((out.get(0, 0) + 1.0).abs() < 1e-9);
        assert!((out.get(0, 1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gelu_matches_reference_values() {
        // Φ(1) = 0.8413447460685429
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-15);
        assert_eq!(gelu(0.0), 0.0);
        let h = 1e-6;
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.1] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    fn matrix(max: usize) -> impl Strategy<Value = Tensor> {
        (1..=max, 1..=max).prop_flat_map(|(r, c)| {
            prop::collection::vec(-50.0f64..50.0, r * c)
                .prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(m in matrix(8)) {
            let s = softmax_rows(&m).unwrap();
            for r in 0..s.rows() {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn softmax_is_shift_invariant(m in matrix(8), shifts in prop::collection::vec(-500.0f64..500.0, 8)) {
            let mut shifted = m.clone();
            for r in 0..shifted.rows() {
                let c = shifts[r % shifts.len()];
                shifted.row_mut(r).iter_mut().for_each(|v| *v += c);
            }
            let a = softmax_rows(&m).unwrap();
            let b = softmax_rows(&shifted).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-9);
        }

        #[test]
        fn matmul_agrees_with_triple_loop(
            (m, k, n) in (1usize..=16, 1usize..=16, 1usize..=16),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut gen = |r: usize, c: usize| {
                Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
            };
            let a = gen(m, k);
            let b = gen(k, n);
            let expect = naive_matmul(&a, &b);
            prop_assert!(a.matmul(&b).unwrap().max_abs_diff(&expect) < 1e-9);
            prop_assert!(a.matmul_bt(&b.transpose().unwrap()).unwrap().max_abs_diff(&expect) < 1e-9);
            prop_assert!(a.transpose().unwrap().matmul_at(&b).unwrap().max_abs_diff(&expect) < 1e-9);
        }

        #[test]
        fn layer_norm_output_mean_is_bias(m in matrix(8), bias in -3.0f64..3.0) {
            prop_assume!(m.cols() >= 1);
            let g = Tensor::full(&[m.cols()], 1.0);
            let b = Tensor::full(&[m.cols()], bias);
            let out = layer_norm(&m, &g, &b).unwrap();
            for r in 0..out.rows() {
                let mean = out.row(r).iter().sum::<f64>() / m.cols() as f64;
                prop_assert!((mean - bias).abs() < 1e-9);
            }
        }
    }
}
