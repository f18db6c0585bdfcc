//! Dense 64-bit tensors and the handful of row-wise operations the denoiser
//! needs, plus a reverse-mode [`Tape`].
//!
//! Everything is row-major and at most two-dimensional. There is no
//! broadcasting beyond adding a row vector to every row of a matrix.

mod attention;
mod tape;

pub use attention::{AttentionKernel, AttentionMask, BoolMatrix};
pub use tape::{Gradients, KlDirection, MacCategory, MacCounts, NodeId, Tape};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to a target distribution before taking its log.
pub const KL_EPS: f64 = 1e-12;

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::dim("Tensor::from_rows", "ragged rows"));
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows, treating a 1-d tensor as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::dim(op, format!("expected a matrix, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// `c = a·b + beta·c` for row-major operands; transposes are expressed
/// through the strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_matrix("matmul")?;
    let (k2, n) = b.require_matrix("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(m, k, n, &a.data, (k, 1), &b.data, (n, 1), 0.0, &mut out.data);
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Log-softmax of one row; returns the log-partition as well.
pub fn log_softmax_row(row: &[f64], out: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
    lse
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = out.cols();
    if c > 0 {
        for row in out.data.chunks_mut(c) {
            softmax_in_place(row);
        }
    }
    out
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, d) = x.require_matrix("layer_norm")?;
    if gain.len() != d || bias.len() != d {
        return Err(Error::dim(
            "layer_norm",
            format!("row width {d}, gain {}, bias {}", gain.len(), bias.len()),
        ));
    }
    let mut out = x.clone();
    if d == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_mut(d) {
        let (mean, inv_std) = row_moments(row);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv_std * gain.data[j] + bias.data[j];
        }
    }
    Ok(out)
}

pub(crate) fn row_moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

pub fn embed(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (n, d) = table.require_matrix("embed")?;
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= n {
            return Err(Error::Range(format!("embedding id {id} >= table size {n}")));
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), d], data)
}

/// Mean token cross-entropy over the rows selected by `mask`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let (n, v) = logits.require_matrix("cross_entropy")?;
    if targets.len() != n || mask.len() != n {
        return Err(Error::dim(
            "cross_entropy",
            format!("{n} rows, {} targets, {} mask entries", targets.len(), mask.len()),
        ));
    }
    let mut scratch = vec![0.0; v];
    let mut total = 0.0;
    let mut count = 0usize;
    for i in (0..n).filter(|&i| mask[i]) {
        let t = targets[i];
        if t >= v {
            return Err(Error::Range(format!("target {t} >= vocabulary {v}")));
        }
        log_softmax_row(logits.row(i), &mut scratch);
        total -= scratch[t];
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMean("cross_entropy"));
    }
    Ok(total / count as f64)
}

/// `Σ p·ln(p/q)` with `0·ln 0 = 0` and `q` clamped below by [`KL_EPS`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("kl_divergence", format!("{} vs {}", p.len(), q.len())));
    }
    for (name, row) in [("p", p), ("q", q)] {
        if row.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::Domain(format!("{name} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("{name} sums to {s}, not 1")));
        }
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(KL_EPS).ln()))
        .sum())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, -6.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(3), &b).unwrap(), b);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matmul_small_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![0.5], vec![-1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[-1.0]);
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let x = Tensor::from_rows(&[vec![3.0; 5]]).unwrap();
        for &p in softmax_rows(&x).data() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::from_rows(&[vec![0.1, -2.0, 3.5], vec![800.0, 801.0, 799.0]]).unwrap();
        let shifted = Tensor::from_rows(&[vec![100.1, 98.0, 103.5], vec![0.0, 1.0, -1.0]]).unwrap();
        let (a, b) = (softmax_rows(&x), softmax_rows(&shifted));
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
        for i in 0..2 {
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let y = layer_norm(&x, &Tensor::filled(&[3], 1.0), &Tensor::zeros(&[3])).unwrap();
        let mean = y.data().iter().sum::<f64>() / 3.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
        // direct formula: (x - 2) / sqrt(2/3)
        let s = (2.0f64 / 3.0).sqrt();
        for (got, x) in y.data().iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - (x - 2.0) / s).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_out_of_range() {
        let t = Tensor::zeros(&[3, 2]);
        assert!(matches!(embed(&t, &[0, 3]), Err(Error::Range(_))));
        assert_eq!(embed(&t, &[2, 0]).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let logits = Tensor::zeros(&[2, 8]);
        let ce = cross_entropy(&logits, &[3, 5], &[true, true]).unwrap();
        assert!((ce - 8f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_peaked_margin_20() {
        let mut row = vec![0.0; 4];
        row[2] = 20.0;
        let logits = Tensor::from_rows(&[row]).unwrap();
        let ce = cross_entropy(&logits, &[2], &[true]).unwrap();
        // closed form: ln(1 + 3 e^-20)
        let expected = (3.0 * (-20f64).exp()).ln_1p();
        assert!(ce < 1e-8);
        assert!((ce - expected).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_single_row_by_hand() {
        let logits = Tensor::from_rows(&[vec![1.0, 2.0, 0.0]]).unwrap();
        let ce = cross_entropy(&logits, &[0], &[true]).unwrap();
        let z = 1f64.exp() + 2f64.exp() + 1.0;
        assert!((ce - (z.ln() - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_all_masked_is_error() {
        let logits = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            cross_entropy(&logits, &[0, 1], &[false, false]),
            Err(Error::EmptyMean(_))
        ));
    }

    #[test]
    fn kl_known_values() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let got = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((got - expected).abs() < 1e-15);
        let got = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((got - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_negative_entries() {
        assert!(matches!(
            kl_divergence(&[1.5, -0.5], &[0.5, 0.5]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn kl_clamps_zero_q() {
        let got = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(got.is_finite() && got > 10.0);
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero", |v| {
                let s: f64 = v.iter().sum();
                (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
            })
        }

        proptest! {
            #[test]
            fn kl_is_nonnegative(p in dist(5), q in dist(5)) {
                prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-15);
                prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
            }

            #[test]
            fn softmax_rows_sum_to_one(row in proptest::collection::vec(-50.0f64..50.0, 1..20), shift in -100.0f64..100.0) {
                let x = Tensor::from_rows(std::slice::from_ref(&row)).unwrap();
                let y = softmax_rows(&x);
                prop_assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
                let z = softmax_rows(&Tensor::from_rows(&[shifted]).unwrap());
                for (a, b) in y.data().iter().zip(z.data()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
