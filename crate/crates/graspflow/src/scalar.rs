//! Element types for tensors: `f32` for training, `f64` for verification.

use std::fmt;

/// Tensor element dtype tag used by the binary tensor format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point element type usable in tensors.
///
/// Single precision is the training default; double precision exists because
/// finite-difference gradient verification is unreliable in single precision.
pub trait Scalar:
    num_traits::Float + Send + Sync + fmt::Debug + fmt::Display + Default + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one element from `bytes`; callers guarantee the width.
    fn read_le(bytes: &[u8]) -> Self;

    /// `c[m x n] (+)= a[m x k] * b[k x n]` with explicit element strides.
    ///
    /// Every output element accumulates its k products in ascending-k order so
    /// results are reproducible run to run. The f64 implementation is also
    /// bit-identical to a naive ordered loop; the f32 implementation trades
    /// that for speed and is reproducible only.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        accumulate: bool,
    );
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        accumulate: bool,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        debug_assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
        debug_assert!(c.len() >= m * n);
        let beta = if accumulate { 1.0 } else { 0.0 };
        if k == 0 {
            if !accumulate {
                c[..m * n].fill(0.0);
            }
            return;
        }
        unsafe {
            matrixmultiply::sgemm(
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
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        accumulate: bool,
    ) {
        gemm_ordered_f64(m, k, n, a, rsa, csa, b, rsb, csb, c, accumulate);
    }
}

/// Ordered f64 GEMM: per-element accumulation runs over k in ascending order,
/// matching a naive triple loop bit for bit.
#[allow(clippy::too_many_arguments)]
fn gemm_ordered_f64(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    const MR: usize = 4;
    const NR: usize = 8;
    // Fast path for contiguous row-major operands: register tiling keeps the
    // ascending-k order per element while letting the compiler vectorize.
    if csa == 1 && csb == 1 && rsb == n {
        let mut i = 0;
        while i + MR <= m {
            let mut j = 0;
            while j + NR <= n {
                let mut acc = [[0f64; NR]; MR];
                if accumulate {
                    for (r, row) in acc.iter_mut().enumerate() {
                        row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
                    }
                }
                for p in 0..k {
                    let bp = &b[p * n + j..p * n + j + NR];
                    for (r, row) in acc.iter_mut().enumerate() {
                        let arp = a[(i + r) * rsa + p];
                        for t in 0..NR {
                            row[t] += arp * bp[t];
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
                }
                j += NR;
            }
            while j < n {
                for r in 0..MR {
                    let mut s = if accumulate { c[(i + r) * n + j] } else { 0.0 };
                    for p in 0..k {
                        s += a[(i + r) * rsa + p] * b[p * n + j];
                    }
                    c[(i + r) * n + j] = s;
                }
                j += 1;
            }
            i += MR;
        }
        for ii in i..m {
            for j in 0..n {
                let mut s = if accumulate { c[ii * n + j] } else { 0.0 };
                for p in 0..k {
                    s += a[ii * rsa + p] * b[p * n + j];
                }
                c[ii * n + j] = s;
            }
        }
        return;
    }
    // General strides: plain ordered loops.
    for i in 0..m {
        for j in 0..n {
            let mut s = if accumulate { c[i * n + j] } else { 0.0 };
            for p in 0..k {
                s += a[i * rsa + p * csa] * b[p * rsb + j * csb];
            }
            c[i * n + j] = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn ordered_f64_matches_naive_bitwise() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (9, 4, 11), (16, 16, 16), (7, 33, 5)] {
            let a: Vec<f64> = (0..m * k).map(|_| next()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| next()).collect();
            let mut c = vec![0.0; m * n];
            f64::gemm(m, k, n, &a, k, 1, &b, n, 1, &mut c, false);
            let want = naive(m, k, n, &a, &b);
            for (x, y) in c.iter().zip(want.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn gemm_accumulate_adds_on_top() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 0.0, 0.0, 1.0];
        let mut c = vec![10.0f64; 4];
        f64::gemm(2, 2, 2, &a, 2, 1, &b, 2, 1, &mut c, true);
        assert_eq!(c, vec![11.0, 12.0, 13.0, 14.0]);
    }

    #[test]
    fn f32_gemm_transposed_view_matches_materialized() {
        let m = 5;
        let k = 4;
        let n = 6;
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.25 - 1.0).collect();
        // b stored as n x k, used as its transpose.
        let bt: Vec<f32> = (0..n * k).map(|i| (i as f32).sin()).collect();
        let mut b = vec![0.0f32; k * n];
        for p in 0..k {
            for j in 0..n {
                b[p * n + j] = bt[j * k + p];
            }
        }
        let mut c1 = vec![0.0f32; m * n];
        let mut c2 = vec![0.0f32; m * n];
        f32::gemm(m, k, n, &a, k, 1, &b, n, 1, &mut c1, false);
        f32::gemm(m, k, n, &a, k, 1, &bt, 1, k, &mut c2, false);
        for (x, y) in c1.iter().zip(c2.iter()) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
    }
}
