//! Dense 64-bit float tensors, row-major.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// A dense n-dimensional array of f64 in row-major order.
///
/// `Tensor` is plain storage: parameters, datasets and checkpoints hold
/// tensors; differentiable computation happens on a [`crate::autodiff::Graph`]
/// which copies leaf values in and hands gradients back out through `grad`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "tensor data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform in [-bound, bound], a fresh draw per element.
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(-bound, bound)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &shape, &self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rows `rows` of a [N, ...] tensor gathered into a new [len, ...] tensor.
    pub fn gather_rows(&self, rows: &[usize]) -> Tensor {
        assert!(!self.shape.is_empty());
        let row_len: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            let start = r * row_len;
            data.extend_from_slice(&self.data[start..start + row_len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Row `r` of a [N, ...] tensor as a new [...] tensor.
    pub fn row(&self, r: usize) -> Tensor {
        let row_len: usize = self.shape[1..].iter().product();
        let start = r * row_len;
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[start..start + row_len].to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Stack equal-shape tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }
}

/// Index into a [C, H, W] layout.
#[cfg(test)]
#[inline]
pub(crate) fn idx3(h: usize, w: usize, c: usize, y: usize, x: usize) -> usize {
    (c * h + y) * w + x
}

/// Cosine similarity <a,b> / (|a||b|), computed as dot/sqrt(dot_aa*dot_bb)
/// so that identical inputs give exactly 1.0. Two zero vectors are defined
/// as similarity 0 (warned, not an error).
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_similarity length mismatch");
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 && bb == 0.0 {
        eprintln!("warning: cosine_similarity of two zero vectors, defining as 0");
        return 0.0;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa * bb).sqrt()
}

// ── Parallel kernels ─────────────────────────────────────────────────
//
// Row-parallel helpers used by the matmul/conv inner loops. Each output
// element is produced by exactly one thread with a fixed serial inner
// loop, so results are bit-identical for any thread count.

use std::sync::OnceLock;

pub(crate) fn thread_count() -> usize {
    static N: OnceLock<usize> = OnceLock::new();
    *N.get_or_init(|| {
        if let Ok(v) = std::env::var("HYPERINV_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                return n.max(1);
            }
        }
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
            .min(8)
    })
}

/// Split `out` into contiguous row chunks and run `f(row_offset, chunk)`
/// on each from a scoped thread. `row_len` is the stride of one row.
pub(crate) fn par_rows<F>(out: &mut [f64], row_len: usize, min_rows_per_thread: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let rows = out.len() / row_len.max(1);
    let threads = thread_count().min(rows / min_rows_per_thread.max(1)).max(1);
    if threads <= 1 {
        f(0, out);
        return;
    }
    let chunk_rows = rows.div_ceil(threads);
    std::thread::scope(|scope| {
        for (i, chunk) in out.chunks_mut(chunk_rows * row_len).enumerate() {
            let f = &f;
            scope.spawn(move || f(i * chunk_rows, chunk));
        }
    });
}

/// out[m,n] = a[m,k] @ b[k,n], accumulating into zeroed storage.
pub(crate) fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    par_rows(out, n, 8, |row0, chunk| {
        for (local, out_row) in chunk.chunks_mut(n).enumerate() {
            let i = row0 + local;
            out_row.fill(0.0);
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &a_ip) in a_row.iter().enumerate() {
                if a_ip == 0.0 {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a_ip * b_pj;
                }
            }
        }
    });
}

/// out[m,n] = a[m,k] @ b[n,k]^T.
pub(crate) fn matmul_nt_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    par_rows(out, n, 8, |row0, chunk| {
        for (local, out_row) in chunk.chunks_mut(n).enumerate() {
            let i = row0 + local;
            let a_row = &a[i * k..(i + 1) * k];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b[j * k..(j + 1) * k];
                let mut s = 0.0;
                for (x, y) in a_row.iter().zip(b_row.iter()) {
                    s += x * y;
                }
                *o = s;
            }
        }
    });
}

/// out[k,n] += a[m,k]^T @ b[m,n], i.e. out = a^T b with out pre-zeroed.
pub(crate) fn matmul_tn_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    par_rows(out, n, 4, |row0, chunk| {
        let rows = chunk.len() / n;
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let b_row = &b[i * n..(i + 1) * n];
            for local in 0..rows {
                let p = row0 + local;
                let a_ip = a_row[p];
                if a_ip == 0.0 {
                    continue;
                }
                let out_row = &mut chunk[local * n..(local + 1) * n];
                for (o, &b_ij) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a_ip * b_ij;
                }
            }
        }
    });
}
