use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense boolean matrix, row-major. `true` means "row may attend column".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        BoolMatrix {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = BoolMatrix::new(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&b| b).count()
    }

    /// Text grid, one line per row, `#` for allowed and `.` for blocked.
    pub fn to_grid(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for i in 0..self.rows {
            s.extend(self.row(i).iter().map(|&b| if b { '#' } else { '.' }));
            s.push('\n');
        }
        s
    }
}

/// The allowed columns of a boolean attention matrix, stored row by row.
///
/// Columns `0..cached` address rows already held in a key/value cache; the
/// remaining columns address the query rows of the current pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
}

impl AttentionMask {
    pub fn from_matrix(m: &BoolMatrix) -> Self {
        let mut row_ptr = Vec::with_capacity(m.rows + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for i in 0..m.rows {
            col_idx.extend(
                m.row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(|(j, _)| j as u32),
            );
            row_ptr.push(col_idx.len());
        }
        AttentionMask {
            n_rows: m.rows,
            n_cols: m.cols,
            row_ptr,
            col_idx,
        }
    }

    /// Builds a mask row by row from sorted column lists.
    pub fn from_rows<I, R>(n_cols: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = usize>,
    {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        for r in rows {
            col_idx.extend(r.into_iter().map(|j| j as u32));
            row_ptr.push(col_idx.len());
        }
        AttentionMask {
            n_rows: row_ptr.len() - 1,
            n_cols,
            row_ptr,
            col_idx,
        }
    }

    /// Places several masks along the diagonal of one larger mask. Every
    /// part must describe a cache-free pass (square, rows = cols).
    pub fn block_diagonal(parts: &[AttentionMask]) -> Result<Self> {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut offset = 0u32;
        for p in parts {
            if p.n_rows != p.n_cols {
                return Err(Error::Layout("block_diagonal needs square parts".into()));
            }
            for i in 0..p.n_rows {
                col_idx.extend(p.row(i).iter().map(|&j| j + offset));
                row_ptr.push(col_idx.len());
            }
            offset += p.n_rows as u32;
        }
        Ok(AttentionMask {
            n_rows: offset as usize,
            n_cols: offset as usize,
            row_ptr,
            col_idx,
        })
    }

    pub fn to_matrix(&self) -> BoolMatrix {
        let mut m = BoolMatrix::new(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            for &j in self.row(i) {
                m.set(i, j as usize, true);
            }
        }
        m
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn row_len(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub(crate) fn validate(&self, cached: usize, queries: usize) -> Result<()> {
        if self.n_rows != queries || self.n_cols != cached + queries {
            return Err(Error::Layout(format!(
                "mask is {}x{}, pass needs {queries}x{}",
                self.n_rows,
                self.n_cols,
                cached + queries
            )));
        }
        for i in 0..self.n_rows {
            let r = self.row(i);
            if r.is_empty() {
                return Err(Error::Layout(format!("row {i} attends no column")));
            }
            if r.windows(2).any(|w| w[0] >= w[1]) || r.iter().any(|&j| j as usize >= self.n_cols) {
                return Err(Error::Layout(format!("row {i} has unsorted or out-of-range columns")));
            }
        }
        Ok(())
    }
}

/// How attention scores are evaluated.
///
/// `Sparse` scores only the allowed columns of each row. `Dense` scores every
/// column and then discards the blocked ones, the way a masked dense kernel
/// does; its outputs equal the sparse ones but its multiply-add count is
/// `rows × cols` instead of the mask's nonzero count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKernel {
    #[default]
    Sparse,
    Dense,
}

/// Inputs of one multi-head masked attention evaluation.
pub(crate) struct AttnInputs<'k> {
    pub q: &'k [f64],
    pub k: &'k [f64],
    pub v: &'k [f64],
    pub cached_k: &'k [f64],
    pub cached_v: &'k [f64],
    pub cached: usize,
    pub d: usize,
    pub heads: usize,
}

impl AttnInputs<'_> {
    #[inline]
    fn key(&self, col: usize) -> &[f64] {
        if col < self.cached {
            &self.cached_k[col * self.d..(col + 1) * self.d]
        } else {
            let j = col - self.cached;
            &self.k[j * self.d..(j + 1) * self.d]
        }
    }

    #[inline]
    fn value(&self, col: usize) -> &[f64] {
        if col < self.cached {
            &self.cached_v[col * self.d..(col + 1) * self.d]
        } else {
            let j = col - self.cached;
            &self.v[j * self.d..(j + 1) * self.d]
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Forward pass. Returns the output rows, the attention probabilities over
/// each row's allowed columns (laid out `[row][head][allowed]`), and the
/// multiply-adds performed.
pub(crate) fn attention_forward(
    inp: &AttnInputs<'_>,
    mask: &AttentionMask,
    kernel: AttentionKernel,
) -> (Vec<f64>, Vec<f64>, u64) {
    let (d, h) = (inp.d, inp.heads);
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = mask.n_rows();
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; mask.nnz() * h];
    let mut macs = 0u64;
    let mut scores = Vec::new();
    let mut dense = Vec::new();
    let mut allowed = Vec::new();

    for i in 0..n {
        let cols = mask.row(i);
        let qi = &inp.q[i * d..(i + 1) * d];
        let base = mask.row_ptr[i] * h;
        for head in 0..h {
            let hs = head * dh..(head + 1) * dh;
            let qh = &qi[hs.clone()];
            scores.clear();
            match kernel {
                AttentionKernel::Sparse => {
                    scores.extend(cols.iter().map(|&c| dot(qh, &inp.key(c as usize)[hs.clone()]) * scale));
                    macs += (cols.len() * dh) as u64;
                }
                AttentionKernel::Dense => {
                    dense.clear();
                    dense.extend((0..mask.n_cols()).map(|c| dot(qh, &inp.key(c)[hs.clone()]) * scale));
                    macs += (mask.n_cols() * dh) as u64;
                    scores.extend(cols.iter().map(|&c| dense[c as usize]));
                }
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let inv = 1.0 / sum;
            let p = &mut probs[base + head * cols.len()..base + (head + 1) * cols.len()];
            for (pt, s) in p.iter_mut().zip(&scores) {
                *pt = s * inv;
            }
            let o = &mut out[i * d + head * dh..i * d + (head + 1) * dh];
            match kernel {
                AttentionKernel::Sparse => {
                    for (&c, &pt) in cols.iter().zip(p.iter()) {
                        let vh = &inp.value(c as usize)[hs.clone()];
                        for (ov, vv) in o.iter_mut().zip(vh) {
                            *ov += pt * vv;
                        }
                    }
                    macs += (cols.len() * dh) as u64;
                }
                AttentionKernel::Dense => {
                    // Blocked columns carry weight zero but are still mixed.
                    allowed.clear();
                    allowed.resize(mask.n_cols(), 0.0);
                    for (&c, &pt) in cols.iter().zip(p.iter()) {
                        allowed[c as usize] = pt;
                    }
                    for (c, &pt) in allowed.iter().enumerate() {
                        let vh = &inp.value(c)[hs.clone()];
                        for (ov, vv) in o.iter_mut().zip(vh) {
                            *ov += pt * vv;
                        }
                    }
                    macs += (mask.n_cols() * dh) as u64;
                }
            }
        }
    }
    (out, probs, macs)
}

/// Backward pass for the query rows of a cache-free or cached pass.
/// Gradients are accumulated into `dq`, `dk`, `dv` (pass rows only; cached
/// rows are constants).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    inp: &AttnInputs<'_>,
    mask: &AttentionMask,
    probs: &[f64],
    dout: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let (d, h) = (inp.d, inp.heads);
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = Vec::new();
    for i in 0..mask.n_rows() {
        let cols = mask.row(i);
        let base = mask.row_ptr[i] * h;
        for head in 0..h {
            let hs = head * dh..(head + 1) * dh;
            let p = &probs[base + head * cols.len()..base + (head + 1) * cols.len()];
            let go = &dout[i * d + head * dh..i * d + (head + 1) * dh];
            dp.clear();
            dp.extend(cols.iter().map(|&c| dot(go, &inp.value(c as usize)[hs.clone()])));
            let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for (t, &c) in cols.iter().enumerate() {
                let c = c as usize;
                let ds = p[t] * (dp[t] - mean) * scale;
                let key = &inp.key(c)[hs.clone()];
                for (g, kv) in dq[i * d + head * dh..i * d + (head + 1) * dh].iter_mut().zip(key) {
                    *g += ds * kv;
                }
                if c >= inp.cached {
                    let j = c - inp.cached;
                    let qh = &inp.q[i * d + head * dh..i * d + (head + 1) * dh];
                    for (g, qv) in dk[j * d + head * dh..j * d + (head + 1) * dh].iter_mut().zip(qh) {
                        *g += ds * qv;
                    }
                    for (g, gv) in dv[j * d + head * dh..j * d + (head + 1) * dh].iter_mut().zip(go) {
                        *g += p[t] * gv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csr_round_trip() {
        let m = BoolMatrix::from_fn(3, 4, |i, j| (i + j) % 2 == 0);
        let mask = AttentionMask::from_matrix(&m);
        assert_eq!(mask.to_matrix(), m);
        assert_eq!(mask.row(1), &[1, 3]);
    }

    #[test]
    fn empty_row_rejected() {
        let m = BoolMatrix::from_fn(2, 2, |i, j| i == 0 && j == 0);
        assert!(AttentionMask::from_matrix(&m).validate(0, 2).is_err());
    }

    #[test]
    fn block_diagonal_offsets_columns() {
        let a = AttentionMask::from_matrix(&BoolMatrix::from_fn(2, 2, |i, j| j <= i));
        let b = AttentionMask::from_matrix(&BoolMatrix::from_fn(1, 1, |_, _| true));
        let both = AttentionMask::block_diagonal(&[a, b]).unwrap();
        assert_eq!(both.row(2), &[2]);
        assert_eq!(both.row(1), &[0, 1]);
    }

    #[test]
    fn dense_and_sparse_agree() {
        let d = 4;
        let q: Vec<f64> = (0..3 * d).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..3 * d).map(|i| (i as f64 * 0.11).cos()).collect();
        let v: Vec<f64> = (0..3 * d).map(|i| i as f64 * 0.1).collect();
        let inp = AttnInputs {
            q: &q,
            k: &k,
            v: &v,
            cached_k: &[],
            cached_v: &[],
            cached: 0,
            d,
            heads: 2,
        };
        let mask = AttentionMask::from_matrix(&BoolMatrix::from_fn(3, 3, |i, j| j <= i));
        let (a, _, ma) = attention_forward(&inp, &mask, AttentionKernel::Sparse);
        let (b, _, mb) = attention_forward(&inp, &mask, AttentionKernel::Dense);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(ma, 2 * 6 * d as u64);
        assert_eq!(mb, 2 * 9 * d as u64);
    }
}
