//! Minimal f32 tensor for the denoiser: (channels, height, width) storage
//! and a deterministic parallel GEMM.
//!
//! Parallel matmul splits the output columns into fixed-size chunks, so
//! each output element is produced by exactly one task with a fixed
//! accumulation order; results do not depend on the thread count.

use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Self { c, h, w, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn plane(&self, ch: usize) -> &[f32] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, ch: usize) -> &mut [f32] {
        let hw = self.h * self.w;
        &mut self.data[ch * hw..(ch + 1) * hw]
    }
}

const COL_CHUNK: usize = 4096;

/// C[m x n] = A[m x k] * B[k x n] (+ C if `accumulate`), all row-major.
pub fn matmul(
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // Column-chunked tasks: output columns [j0, j1) of every row.
    let n_chunks = n.div_ceil(COL_CHUNK);
    let a_ptr = SendPtr(a.as_ptr());
    let b_ptr = SendPtr(b.as_ptr());
    let c_ptr = SendPtrMut(c.as_mut_ptr());
    (0..n_chunks).into_par_iter().for_each(|chunk| {
        let j0 = chunk * COL_CHUNK;
        let j1 = ((chunk + 1) * COL_CHUNK).min(n);
        let nn = j1 - j0;
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                nn,
                1.0,
                a_ptr.get(),
                k as isize,
                1,
                b_ptr.get().add(j0),
                n as isize,
                1,
                beta,
                c_ptr.get().add(j0),
                n as isize,
                1,
            );
        }
    });
}

// Column chunks are disjoint, so concurrent writes never alias.
struct SendPtr(*const f32);
impl SendPtr {
    fn get(&self) -> *const f32 {
        self.0
    }
}
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}
struct SendPtrMut(*mut f32);
impl SendPtrMut {
    fn get(&self) -> *mut f32 {
        self.0
    }
}
unsafe impl Send for SendPtrMut {}
unsafe impl Sync for SendPtrMut {}
