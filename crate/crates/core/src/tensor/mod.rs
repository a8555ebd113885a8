//! Dense row-major tensors and the numeric kernels the model is built from.
//!
//! Everything here works on `f64`. The differentiable versions of these
//! kernels live in [`graph`]; the functions on [`Tensor`] are the plain
//! forward computations and are what the graph calls internally.

mod adam;
pub mod graph;
mod param;
mod rng;

pub use adam::{AdamConfig, AdamState};
pub use graph::{AttnBlock, Gradients, Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::RngState;

use crate::error::{Error, Result};

/// Epsilon used by every layer normalization in the model.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_rows",
                lhs: vec![cols],
                rhs: vec![bad.len()],
            });
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        })
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

    /// Views the tensor as a matrix. Vectors are a single row and scalars
    /// are 1×1.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (k, 1), &other.data, (n, 1), &mut out, false);
        Tensor::new(vec![m, n], out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2();
        let (n, k2) = other.dims2();
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_t",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (k, 1), &other.data, (1, k), &mut out, false);
        Tensor::new(vec![m, n], out)
    }

    pub fn softmax_rows(&self) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = self.data.clone();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    pub fn log_softmax_rows(&self) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = self.data.clone();
        for i in 0..r {
            log_softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Row-wise layer normalization followed by the `gain`/`bias` affine map.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(layer_norm_forward(self, gain, bias, eps)?.0)
    }

    pub fn gelu(&self) -> Tensor {
        self.map(gelu)
    }

    /// Inverted dropout. In inference mode, or with `p == 0`, this is the
    /// identity.
    pub fn dropout(&self, p: f64, rng: &mut RngState, training: bool) -> Result<Tensor> {
        Ok(dropout_forward(self, p, rng, training)?.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Mean negative log-likelihood of `targets` over the rows where `mask` is
/// set. `log_probs` is `[n × V]`.
pub fn cross_entropy(log_probs: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let (n, v) = log_probs.dims2();
    if targets.len() != n || mask.len() != n {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: log_probs.shape.clone(),
            rhs: vec![targets.len(), mask.len()],
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (&t, &on)) in targets.iter().zip(mask).enumerate() {
        if !on {
            continue;
        }
        if t >= v {
            return Err(Error::Vocab { id: t, size: v });
        }
        total -= log_probs.get(i, t);
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoTargets);
    }
    Ok(total / count as f64)
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Returns `(output, normalized input, per-row inverse std)`.
pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (r, d) = x.dims2();
    if d == 0 || gain.numel() != d || bias.numel() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    let mut out = vec![0.0; r * d];
    let mut xhat = vec![0.0; r * d];
    let mut inv_std = vec![0.0; r];
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[i] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gain.data[j] + bias.data[j];
        }
    }
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        xhat,
        inv_std,
    ))
}

/// Returns the output and the per-element multiplier (0 or 1/(1-p)).
pub(crate) fn dropout_forward(
    x: &Tensor,
    p: f64,
    rng: &mut RngState,
    training: bool,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Param(format!("dropout probability {p} not in [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
        .collect();
    let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data,
        },
        Some(mask),
    ))
}

/// `c (+)= a · b` for row-major `c` of shape `[m × n]`; `a` and `b` are
/// addressed through (row stride, column stride) pairs so transposed
/// operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every address dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2();
        let n = b.cols();
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

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = RngState::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let b = random(&[3, 4], 1);
        assert_eq!(Tensor::identity(3).matmul(&b).unwrap(), b);

        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[5, 7], 2);
        let b = random(&[7, 3], 3);
        let fast = a.matmul(&b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);

        let bt = random(&[3, 7], 4);
        let mut t = Tensor::zeros(&[7, 3]);
        for i in 0..3 {
            for j in 0..7 {
                t.data_mut()[j * 3 + i] = bt.get(i, j);
            }
        }
        assert!(a.matmul_t(&bt).unwrap().max_abs_diff(&naive_matmul(&a, &t)) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let ragged = Tensor::from_rows(&[vec![2.0; 4], vec![0.0, 3f64.ln()]]);
        assert!(ragged.is_err());
        let eq = Tensor::full(&[1, 4], 2.0).softmax_rows();
        for &v in eq.data() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
        let s = Tensor::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap().softmax_rows();
        assert_abs_diff_eq!(s.get(0, 0), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s.get(0, 1), 0.75, epsilon = 1e-12);

        let big = Tensor::from_rows(&[vec![1000.0, 999.0, -1000.0]]).unwrap().softmax_rows();
        assert!(big.is_finite());
        assert_abs_diff_eq!(big.sum(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn layer_norm_cases() {
        let d = 5;
        let ones = Tensor::full(&[d], 1.0);
        let zeros = Tensor::zeros(&[d]);
        let constant = Tensor::full(&[1, d], 3.7);
        let out = constant.layer_norm(&ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let x = random(&[3, d], 9);
        let out = x.layer_norm(&ones, &zeros, LAYER_NORM_EPS).unwrap();
        for i in 0..3 {
            let row = out.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
        }

        let bias = Tensor::new(vec![d], vec![0.5, -1.0, 2.0, 0.0, 3.0]).unwrap();
        let out = x.layer_norm(&ones, &bias, LAYER_NORM_EPS).unwrap();
        let bias_mean = bias.sum() / d as f64;
        for i in 0..3 {
            let mean = out.row(i).iter().sum::<f64>() / d as f64;
            assert_abs_diff_eq!(mean, bias_mean, epsilon = 1e-9);
        }
    }

    #[test]
    fn layer_norm_unit_variance_with_small_eps_effect() {
        // Rows with variance far above eps normalize to unit variance at 1e-6.
        let d = 6;
        let x = random(&[4, d], 10).map(|v| v * 10.0);
        let out = x
            .layer_norm(&Tensor::full(&[d], 1.0), &Tensor::zeros(&[d]), LAYER_NORM_EPS)
            .unwrap();
        for i in 0..4 {
            let row = out.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert_abs_diff_eq!(gelu(1.0), 0.841_344_746_068_542_9, epsilon = 1e-12);
        assert_abs_diff_eq!(gelu(-10.0), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = RngState::new(5);
        let x = random(&[4, 4], 6);
        assert_eq!(x.dropout(0.0, &mut rng, true).unwrap(), x);
        assert_eq!(x.dropout(0.7, &mut rng, false).unwrap(), x);
        assert!(x.dropout(1.0, &mut rng, true).is_err());

        let ones = Tensor::full(&[1_000_000], 1.0);
        let out = ones.dropout(0.5, &mut rng, true).unwrap();
        let mean = out.sum() / 1e6;
        let zero_frac = out.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert_abs_diff_eq!(mean, 1.0, epsilon = 0.01);
        assert_abs_diff_eq!(zero_frac, 0.5, epsilon = 0.01);
    }

    #[test]
    fn cross_entropy_cases() {
        let v = 7;
        let uniform = Tensor::full(&[3, v], -(v as f64).ln());
        let loss = cross_entropy(&uniform, &[0, 3, 6], &[true; 3]).unwrap();
        assert_abs_diff_eq!(loss, (v as f64).ln(), epsilon = 1e-12);

        let mut confident = Tensor::full(&[1, 3], -1e9);
        confident.data_mut()[1] = 0.0;
        assert_abs_diff_eq!(cross_entropy(&confident, &[1], &[true]).unwrap(), 0.0);

        let lp = Tensor::from_rows(&[
            vec![0.2f64.ln(), 0.8f64.ln()],
            vec![0.5f64.ln(), 0.5f64.ln()],
            vec![0.9f64.ln(), 0.1f64.ln()],
        ])
        .unwrap();
        let loss = cross_entropy(&lp, &[1, 0, 1], &[true, false, true]).unwrap();
        let hand = (-(0.8f64.ln()) - 0.1f64.ln()) / 2.0;
        assert_abs_diff_eq!(loss, hand, epsilon = 1e-12);

        assert!(matches!(
            cross_entropy(&lp, &[1, 0, 1], &[false; 3]),
            Err(Error::NoTargets)
        ));
    }
}
