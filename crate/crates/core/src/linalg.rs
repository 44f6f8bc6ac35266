//! Row-major dense kernels shared by the tensor ops and the layer code.
//!
//! One GEMM with a register-tiled microkernel covers every matrix product in
//! the crate; transposed operand variants go through an explicit transpose,
//! which is cheap next to the multiply at these sizes.

const MR: usize = 4;
const NR: usize = 16;

/// C += A * B, with A: [m, k], B: [k, n], C: [m, n], all row-major.
/// Wide B panels are packed contiguously so the microkernel streams them
/// linearly instead of striding across full rows.
pub fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut panel = vec![0.0f64; k * NR];
    let mut j = 0;
    while j < n {
        let jb = NR.min(n - j);
        if jb == NR {
            for p in 0..k {
                panel[p * NR..(p + 1) * NR].copy_from_slice(&b[p * n + j..p * n + j + NR]);
            }
        }
        let mut i = 0;
        while i < m {
            let ib = MR.min(m - i);
            if ib == MR && jb == NR {
                let mut acc = [[0.0f64; NR]; MR];
                for p in 0..k {
                    let b_row = &panel[p * NR..(p + 1) * NR];
                    for r in 0..MR {
                        let av = a[(i + r) * k + p];
                        for t in 0..NR {
                            acc[r][t] += av * b_row[t];
                        }
                    }
                }
                for r in 0..MR {
                    let c_row = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                    for t in 0..NR {
                        c_row[t] += acc[r][t];
                    }
                }
            } else {
                for r in 0..ib {
                    for t in 0..jb {
                        let mut s = 0.0;
                        for p in 0..k {
                            s += a[(i + r) * k + p] * b[p * n + j + t];
                        }
                        c[(i + r) * n + j + t] += s;
                    }
                }
            }
            i += ib;
        }
        j += jb;
    }
}

/// C = A * B (overwrites C).
pub fn gemm(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    c.fill(0.0);
    gemm_acc(c, a, b, m, k, n);
}

/// C += A * B^T with A: [m, k], B: [n, k], C: [m, n]. Inner loops are plain
/// dot products over contiguous rows, so no transpose is materialized.
pub fn gemm_acc_abt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let cr = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut s0 = 0.0;
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            let mut s3 = 0.0;
            let chunks = k / 4;
            for p in 0..chunks {
                s0 += ar[4 * p] * br[4 * p];
                s1 += ar[4 * p + 1] * br[4 * p + 1];
                s2 += ar[4 * p + 2] * br[4 * p + 2];
                s3 += ar[4 * p + 3] * br[4 * p + 3];
            }
            let mut s = s0 + s1 + s2 + s3;
            for p in 4 * chunks..k {
                s += ar[p] * br[p];
            }
            cr[j] += s;
        }
    }
}


/// Out-of-place transpose of a row-major [rows, cols] matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
