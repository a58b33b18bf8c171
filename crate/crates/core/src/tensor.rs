//! Dense row-major `f64` tensors and the forward kernels shared by the
//! recording graph and the eager evaluator.

use std::fmt;

use crate::counters;
use crate::error::{Error, Result};

pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self::from_parts(shape, data))
    }

    fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        counters::track_alloc(data.capacity() * std::mem::size_of::<f64>());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(Vec::new(), vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a `[rows.len(), k]` matrix.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let k = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * k);
        for r in rows {
            if r.len() != k {
                return Err(Error::shape("from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), k, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = *self.shape.last().unwrap_or(&1);
        &self.data[i * k..(i + 1) * k]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, format!("expected rank 2, got {:?}", self.shape))),
        }
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Self::from_parts(self.shape.clone(), self.data.clone())
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        counters::track_free(self.data.capacity() * std::mem::size_of::<f64>());
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

/// `C = op(A) · op(B)` for row-major matrices, optionally transposing either
/// operand in place via strides.
pub(crate) fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    let (ar, ac) = a.dims2("matmul")?;
    let (br, bc) = b.dims2("matmul")?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape, b.shape),
        ));
    }
    let mut out = vec![0.0; m * n];
    if m == 1 && !ta && !tb {
        // Row vector times matrix: packing in dgemm dominates at this size.
        for (x, row) in a.data.iter().zip(b.data.chunks_exact(n)) {
            out.iter_mut().zip(row).for_each(|(o, w)| *o += x * w);
        }
    } else if m > 0 && n > 0 && k > 0 {
        let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
        // SAFETY: the strides above index strictly within `a.data` (ar*ac
        // values) and `b.data` (br*bc values); `out` holds exactly m*n values
        // addressed with row stride n.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::matrix(m, n, out)
}

/// Checks that `small` broadcasts against `big` over leading axes and
/// returns the length of the repeated block.
fn bcast_block(op: &'static str, big: &Tensor, small: &Tensor) -> Result<usize> {
    let (bs, ss) = (&big.shape, &small.shape);
    if ss.len() > bs.len() || bs[bs.len() - ss.len()..] != ss[..] {
        return Err(Error::shape(op, format!("cannot broadcast {ss:?} onto {bs:?}")));
    }
    Ok(small.len().max(1))
}

pub(crate) fn zip_bcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let block = bcast_block(op, a, b)?;
    let data = a
        .data
        .chunks(block)
        .flat_map(|chunk| chunk.iter().zip(&b.data).map(|(&x, &y)| f(x, y)))
        .collect();
    Tensor::new(a.shape.clone(), data)
}

/// Sums `g` (shaped like the broadcast output) down to `target`'s shape.
pub(crate) fn reduce_to(g: &Tensor, target: &[usize]) -> Tensor {
    let block: usize = target.iter().product::<usize>().max(1);
    let mut out = vec![0.0; block];
    for chunk in g.data.chunks(block) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_parts(target.to_vec(), out)
}

pub(crate) fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape.clone(), a.data.iter().map(|&v| f(v)).collect())
}

pub(crate) fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape, b.shape);
    Tensor::from_parts(
        a.shape.clone(),
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub(crate) fn last_dim(op: &'static str, a: &Tensor) -> Result<usize> {
    match a.shape.last() {
        Some(&k) if k > 0 => Ok(k),
        _ => Err(Error::shape(op, format!("needs a non-empty last axis, got {:?}", a.shape))),
    }
}

pub(crate) fn sum_last(a: &Tensor) -> Result<Tensor> {
    let k = last_dim("sum_last", a)?;
    let data = a.data.chunks(k).map(|c| c.iter().sum()).collect();
    Ok(Tensor::from_parts(a.shape[..a.rank() - 1].to_vec(), data))
}

pub(crate) fn softmax_last(a: &Tensor) -> Result<Tensor> {
    let k = last_dim("softmax", a)?;
    let mut out = a.data.clone();
    for row in out.chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(Tensor::from_parts(a.shape.clone(), out))
}

/// Row-wise layer normalization. Returns the output and the normalized
/// input (`x̂`) with per-row inverse standard deviations.
pub(crate) fn layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let k = last_dim("layer_norm", x)?;
    if gamma.shape != [k] || beta.shape != [k] {
        return Err(Error::shape(
            "layer_norm",
            format!("affine params must be [{k}], got {:?} / {:?}", gamma.shape, beta.shape),
        ));
    }
    let rows = x.len() / k;
    let mut xhat = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x.data[r * k..(r + 1) * k];
        let mean = row.iter().sum::<f64>() / k as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv[r] = is;
        for j in 0..k {
            let h = (row[j] - mean) * is;
            xhat[r * k + j] = h;
            out[r * k + j] = h * gamma.data[j] + beta.data[j];
        }
    }
    Ok((Tensor::from_parts(x.shape.clone(), out), xhat, inv))
}

pub(crate) fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2("transpose")?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor::matrix(c, r, out)
}

/// Pairwise squared Euclidean distances between the rows of `a` `[m,k]` and
/// `b` `[n,k]`.
pub(crate) fn sq_dist(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("sq_dist")?;
    let (n, k2) = b.dims2("sq_dist")?;
    if k != k2 {
        return Err(Error::shape("sq_dist", format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ai = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let bj = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    }
    Tensor::matrix(m, n, out)
}

/// Cross-entropy of row-wise softmax against integer labels, summed or
/// averaged over rows. Also returns the softmax probabilities.
pub(crate) fn softmax_ce(logits: &Tensor, labels: &[usize], mean: bool) -> Result<(Tensor, Tensor)> {
    let (m, c) = logits.dims2("softmax_ce")?;
    if labels.len() != m {
        return Err(Error::shape("softmax_ce", format!("{m} rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::shape("softmax_ce", format!("label {bad} out of range for {c} classes")));
    }
    let probs = softmax_last(logits)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    if mean && m > 0 {
        total /= m as f64;
    }
    Ok((Tensor::scalar(total), probs))
}

pub(crate) fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let k = match parts.first() {
        Some(p) => *p.shape.last().unwrap_or(&1),
        None => return Err(Error::Empty("concat_rows")),
    };
    let mut data = Vec::new();
    for p in parts {
        if p.rank() > 2 || p.shape.last() != Some(&k) {
            return Err(Error::shape("concat_rows", format!("row width {k} vs {:?}", p.shape)));
        }
        data.extend_from_slice(&p.data);
    }
    let rows = data.len() / k;
    Tensor::matrix(rows, k, data)
}

/// Slice along axis 0.
pub(crate) fn narrow(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let outer = *a.shape.first().ok_or_else(|| Error::shape("narrow", "scalar input"))?;
    if start + len > outer {
        return Err(Error::shape("narrow", format!("{start}+{len} exceeds {outer}")));
    }
    let inner = a.len() / outer.max(1);
    let mut shape = a.shape.clone();
    shape[0] = len;
    Tensor::new(shape, a.data[start * inner..(start + len) * inner].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposes() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(2, 3, vec![1., 0., 1., 0., 1., 0.]).unwrap();
        let abt = gemm(&a, false, &b, true).unwrap();
        assert_eq!(abt.data(), &[4., 2., 10., 5.]);
        let atb = gemm(&a, true, &b, false).unwrap();
        assert_eq!(atb.shape(), &[3, 3]);
        assert_eq!(atb.data(), &[1., 4., 1., 2., 5., 2., 3., 6., 3.]);
    }

    #[test]
    fn broadcast_add_over_leading_axes() {
        let a = Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::vector(vec![10., 20.]);
        let c = zip_bcast("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11., 22., 13., 24.]);
        assert!(zip_bcast("add", &b, &a, |x, y| x + y).is_err());
    }

    #[test]
    fn allocation_is_tracked() {
        let before = counters::live_bytes();
        let t = Tensor::zeros(&[4, 4]);
        assert!(counters::live_bytes() >= before + 128);
        drop(t);
        assert_eq!(counters::live_bytes(), before);
    }

    #[test]
    fn rejects_bad_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }
}
