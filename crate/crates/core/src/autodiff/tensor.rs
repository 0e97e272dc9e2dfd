//! Dense row-major f64 tensors and the numeric kernels behind graph ops.
//!
//! Matrix multiplication parallelizes over output rows with rayon; each
//! output element is accumulated sequentially by exactly one thread, so
//! results are bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::{Error, Result};

/// Minimum multiply-add count before matmul switches to the parallel path.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
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

    /// n x n identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            shape: vec![r, c],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1 && self.shape.len() <= 1 || self.shape.is_empty()
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, &d) in idx.iter().enumerate() {
            assert!(d < self.shape[i]);
            flat = flat * self.shape[i] + d;
        }
        self.data[flat]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), self.numel());
        Tensor {
            shape,
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.ndim(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

/// True when `small` is a trailing suffix of `big` (the only broadcast form
/// the engine supports).
pub fn is_trailing_broadcast(big: &[usize], small: &[usize]) -> bool {
    small.len() < big.len() && big[big.len() - small.len()..] == *small
}

pub fn ew_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        Ok(Tensor {
            shape: a.shape.clone(),
            data,
        })
    } else if is_trailing_broadcast(&a.shape, &b.shape) {
        let k = b.numel();
        let mut data = a.data.clone();
        for chunk in data.chunks_mut(k) {
            for (x, y) in chunk.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        Ok(Tensor {
            shape: a.shape.clone(),
            data,
        })
    } else {
        Err(shape_err("add", a, b))
    }
}

pub fn ew_sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(shape_err("sub", a, b));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn ew_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        Ok(Tensor {
            shape: a.shape.clone(),
            data,
        })
    } else if is_trailing_broadcast(&a.shape, &b.shape) {
        let k = b.numel();
        let mut data = a.data.clone();
        for chunk in data.chunks_mut(k) {
            for (x, y) in chunk.iter_mut().zip(&b.data) {
                *x *= y;
            }
        }
        Ok(Tensor {
            shape: a.shape.clone(),
            data,
        })
    } else {
        Err(shape_err("mul", a, b))
    }
}

/// Sum the leading axes of `g` so the result has shape `small` (reverse of a
/// trailing broadcast).
pub fn reduce_to_suffix(g: &Tensor, small: &[usize]) -> Tensor {
    let k: usize = small.iter().product();
    let mut out = Tensor::zeros(small);
    for chunk in g.data.chunks(k) {
        for (o, x) in out.data.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    out
}

/// (m,k) x (k,n) -> (m,n). 3-D lhs (B,T,k) is treated as (B*T,k).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.ndim() != 2 {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k) = match a.ndim() {
        2 => (a.shape[0], a.shape[1]),
        3 => (a.shape[0] * a.shape[1], a.shape[2]),
        _ => return Err(shape_err("matmul", a, b)),
    };
    if b.shape[0] != k {
        return Err(shape_err("matmul", a, b));
    }
    let n = b.shape[1];
    let mut out = vec![0.0; m * n];
    matmul_kernel(&a.data, &b.data, m, k, n, &mut out);
    let shape = if a.ndim() == 3 {
        vec![a.shape[0], a.shape[1], n]
    } else {
        vec![m, n]
    };
    Ok(Tensor { shape, data: out })
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let work = m * k * n;
    let body = |i: usize, out_row: &mut [f64]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if work >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// Batched matmul: (B,m,k) x (B,k,n) -> (B,m,n).
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 3 || b.ndim() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1] {
        return Err(shape_err("bmm", a, b));
    }
    let (bs, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
    let n = b.shape[2];
    let mut out = vec![0.0; bs * m * n];
    let work = bs * m * k * n;
    let body = |bi: usize, chunk: &mut [f64]| {
        let a_mat = &a.data[bi * m * k..(bi + 1) * m * k];
        let b_mat = &b.data[bi * k * n..(bi + 1) * k * n];
        for i in 0..m {
            let a_row = &a_mat[i * k..(i + 1) * k];
            let out_row = &mut chunk[i * n..(i + 1) * n];
            for (p, &av) in a_row.iter().enumerate() {
                let b_row = &b_mat[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    };
    if work >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(m * n)
            .enumerate()
            .for_each(|(bi, chunk)| body(bi, chunk));
    } else {
        for (bi, chunk) in out.chunks_mut(m * n).enumerate() {
            body(bi, chunk);
        }
    }
    Ok(Tensor {
        shape: vec![bs, m, n],
        data: out,
    })
}

/// 2-D transpose, or transpose of the last two axes of a 3-D tensor.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    match a.ndim() {
        2 => {
            let (m, n) = (a.shape[0], a.shape[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = a.data[i * n + j];
                }
            }
            Ok(Tensor {
                shape: vec![n, m],
                data: out,
            })
        }
        3 => {
            let (b, m, n) = (a.shape[0], a.shape[1], a.shape[2]);
            let mut out = vec![0.0; b * m * n];
            for bi in 0..b {
                let src = &a.data[bi * m * n..(bi + 1) * m * n];
                let dst = &mut out[bi * m * n..(bi + 1) * m * n];
                for i in 0..m {
                    for j in 0..n {
                        dst[j * m + i] = src[i * n + j];
                    }
                }
            }
            Ok(Tensor {
                shape: vec![b, n, m],
                data: out,
            })
        }
        _ => Err(Error::ShapeMismatch {
            op: "transpose",
            lhs: a.shape.clone(),
            rhs: vec![],
        }),
    }
}

/// Log-sum-exp along the last axis, computed with a max shift.
pub fn log_sum_exp_last(a: &Tensor) -> Tensor {
    let n = *a.shape.last().expect("log_sum_exp on scalar");
    let rows = a.numel() / n;
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &a.data[r * n..(r + 1) * n];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
        out.push(m + s.ln());
    }
    Tensor {
        shape: a.shape[..a.shape.len() - 1].to_vec(),
        data: out,
    }
}

/// Softmax along the last axis.
pub fn softmax_last(a: &Tensor) -> Tensor {
    let n = *a.shape.last().expect("softmax on scalar");
    let rows = a.numel() / n;
    let mut out = vec![0.0; a.numel()];
    for r in 0..rows {
        let row = &a.data[r * n..(r + 1) * n];
        let dst = &mut out[r * n..(r + 1) * n];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - m).exp();
            s += *d;
        }
        for d in dst.iter_mut() {
            *d /= s;
        }
    }
    Tensor {
        shape: a.shape.clone(),
        data: out,
    }
}

pub fn sum_last(a: &Tensor) -> Tensor {
    let n = *a.shape.last().expect("sum_last on scalar");
    let rows = a.numel() / n;
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        out.push(a.data[r * n..(r + 1) * n].iter().sum());
    }
    Tensor {
        shape: a.shape[..a.shape.len() - 1].to_vec(),
        data: out,
    }
}

/// GELU with the tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Rows of a 2-D tensor scaled to unit L2 norm. Returns (normalized, norms);
/// norms are clamped below at 1e-12 to keep zero rows finite.
pub fn row_normalize(a: &Tensor) -> (Tensor, Vec<f64>) {
    assert_eq!(a.ndim(), 2, "row_normalize expects 2-D");
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    let mut norms = Vec::with_capacity(m);
    for i in 0..m {
        let row = &a.data[i * n..(i + 1) * n];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
            *o = x / norm;
        }
        norms.push(norm);
    }
    (
        Tensor {
            shape: a.shape.clone(),
            data: out,
        },
        norms,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_parallel_matches_serial() {
        // Big enough to take the rayon path; compare against a naive loop.
        let m = 64;
        let k = 48;
        let n = 40;
        let a = Tensor::new(
            vec![m, k],
            (0..m * k).map(|i| ((i * 37 % 101) as f64) * 0.01 - 0.5).collect(),
        );
        let b = Tensor::new(
            vec![k, n],
            (0..k * n).map(|i| ((i * 53 % 97) as f64) * 0.02 - 1.0).collect(),
        );
        let c = matmul(&a, &b).unwrap();
        for i in (0..m).step_by(17) {
            for j in (0..n).step_by(13) {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                assert!((c.data()[i * n + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        match matmul(&a, &b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn log_sum_exp_no_overflow() {
        let a = Tensor::new(vec![1, 2], vec![1000.0, 1000.0]);
        let l = log_sum_exp_last(&a);
        assert!((l.data()[0] - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn softmax_symmetry() {
        let a = Tensor::new(vec![1, 2], vec![0.0, 0.0]);
        let s = softmax_last(&a);
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn broadcast_add_trailing() {
        let a = Tensor::new(vec![2, 2, 2], (0..8).map(|x| x as f64).collect());
        let b = Tensor::new(vec![2], vec![10.0, 20.0]);
        let c = ew_add(&a, &b).unwrap();
        assert_eq!(c.data()[0], 10.0);
        assert_eq!(c.data()[1], 21.0);
        assert_eq!(c.data()[7], 27.0);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let t = transpose(&transpose(&a).unwrap()).unwrap();
        assert_eq!(a, t);
    }
}
