//! Bit-packed linear algebra: ±1 dot products via XNOR + popcount on 64-bit
//! words, and multi-bit GEMM as a double sum over weight/neuron bit-plane
//! pairs.
//!
//! The quantized GEMM keeps its inner loop integer-only: per output element
//! and per plane pair (u, v) it accumulates an exact popcount dot and applies
//! the scale product `alpha_u * beta_v` once. Dense `f64` GEMM doubles as the
//! correctness oracle and as the benchmark baseline.

use thiserror::Error;

use crate::quant::QuantizedTensor;

pub type Result<T> = std::result::Result<T, KernelError>;

#[derive(Error, Debug)]
pub enum KernelError {
    #[error("sign value {value} at index {index} is outside {{-1,+1}}")]
    SignOutOfRange { index: usize, value: i8 },
    #[error("logical length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("dimension mismatch: {a_rows}x{a_cols} incompatible with {b_rows}x{b_cols}")]
    DimMismatch {
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },
    #[error("non-finite matrix entry at index {index}")]
    NonFinite { index: usize },
}

/// Number of 64-bit words needed to hold `n` packed bits.
#[inline]
pub const fn words_for(n: usize) -> usize {
    n.div_ceil(64)
}

// ---------------------------------------------------------------------------
// BitPlane
// ---------------------------------------------------------------------------

/// One packed ±1 vector: bit i set means element i is +1. Padding bits above
/// the logical length are always zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlane {
    words: Vec<u64>,
    len: usize,
}

impl BitPlane {
    /// Builds a plane from raw words; padding bits must already be zero.
    pub fn from_words(words: Vec<u64>, len: usize) -> Result<Self> {
        if words.len() != words_for(len) {
            return Err(KernelError::BadShape {
                rows: 1,
                cols: len,
                len: words.len() * 64,
            });
        }
        if len % 64 != 0 {
            debug_assert_eq!(words.last().map_or(0, |w| w >> (len % 64)), 0);
        }
        Ok(Self { words, len })
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Logical element count (not the padded bit count).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Sign of element `i` as ±1.
    pub fn sign(&self, i: usize) -> i8 {
        assert!(i < self.len);
        if self.words[i / 64] >> (i % 64) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    /// Unpacks back to a ±1 vector.
    pub fn to_signs(&self) -> Vec<i8> {
        (0..self.len).map(|i| self.sign(i)).collect()
    }
}

/// Packs a ±1 sign vector into 64-bit words (bit set ⇔ +1, padding zeroed).
pub fn pack_signs(signs: &[i8]) -> Result<BitPlane> {
    let mut words = vec![0u64; words_for(signs.len())];
    pack_signs_into(signs, &mut words)?;
    Ok(BitPlane {
        words,
        len: signs.len(),
    })
}

/// Packs into a caller-provided word slice (must be zeroed, correctly sized).
pub(crate) fn pack_signs_into(signs: &[i8], words: &mut [u64]) -> Result<()> {
    debug_assert_eq!(words.len(), words_for(signs.len()));
    for (i, &s) in signs.iter().enumerate() {
        match s {
            1 => words[i / 64] |= 1u64 << (i % 64),
            -1 => {}
            _ => return Err(KernelError::SignOutOfRange { index: i, value: s }),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// XNOR + popcount dot product
// ---------------------------------------------------------------------------

/// Sum of differing bits between two equal-length word slices.
///
/// Padding bits are zero on both sides, so XOR leaves them zero and no mask
/// is needed; popcount(XNOR masked to n) = n - popcount(XOR).
#[inline(always)]
fn xor_popcount_words(a: &[u64], b: &[u64]) -> u64 {
    debug_assert_eq!(a.len(), b.len());
    let mut sum = 0u64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        sum += (x ^ y).count_ones() as u64;
    }
    sum
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn xor_popcount_words_popcnt(a: &[u64], b: &[u64]) -> u64 {
    xor_popcount_words(a, b)
}

#[cfg(target_arch = "x86_64")]
fn popcnt_available() -> bool {
    static AVAILABLE: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
    *AVAILABLE.get_or_init(|| std::arch::is_x86_feature_detected!("popcnt"))
}

#[cfg(target_arch = "x86_64")]
fn avx2_available() -> bool {
    static AVAILABLE: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
    *AVAILABLE.get_or_init(|| {
        std::arch::is_x86_feature_detected!("avx2")
            && std::arch::is_x86_feature_detected!("popcnt")
    })
}

#[cfg(target_arch = "x86_64")]
fn fma_available() -> bool {
    static AVAILABLE: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
    *AVAILABLE.get_or_init(|| {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    })
}

/// ±1 dot product of two packed vectors: `sum_i a_i * b_i`.
///
/// Exact integer result in `[-n, n]` with parity `n mod 2`.
pub fn xnor_popcount_dot(a: &BitPlane, b: &BitPlane) -> Result<i64> {
    if a.len != b.len {
        return Err(KernelError::LengthMismatch { a: a.len, b: b.len });
    }
    let differing = {
        #[cfg(target_arch = "x86_64")]
        {
            if popcnt_available() {
                unsafe { xor_popcount_words_popcnt(&a.words, &b.words) }
            } else {
                xor_popcount_words(&a.words, &b.words)
            }
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            xor_popcount_words(&a.words, &b.words)
        }
    };
    Ok(a.len as i64 - 2 * differing as i64)
}

// ---------------------------------------------------------------------------
// DenseMatrix
// ---------------------------------------------------------------------------

/// Row-major full-precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds from row-major data, rejecting shape mismatch and non-finite
    /// entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(KernelError::BadShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(KernelError::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transposed(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Relative Frobenius distance to `other`, with a zero-norm guard.
    pub fn rel_frobenius_distance(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = other.frobenius_norm();
        if norm == 0.0 {
            diff
        } else {
            diff / norm
        }
    }
}

// ---------------------------------------------------------------------------
// Dense GEMM (oracle + benchmark baseline)
// ---------------------------------------------------------------------------

#[inline(always)]
fn gemm_dense_body(a: &DenseMatrix, b: &DenseMatrix, out: &mut DenseMatrix) {
    let n = a.cols;
    let p = b.cols;
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for k in 0..n {
            let aik = a_row[k];
            let b_row = &b.data[k * p..(k + 1) * p];
            for j in 0..p {
                out_row[j] += aik * b_row[j];
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_dense_avx2(a: &DenseMatrix, b: &DenseMatrix, out: &mut DenseMatrix) {
    gemm_dense_body(a, b, out);
}

/// Textbook matrix product `a[m×n] · b[n×p]`.
pub fn gemm_dense(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(KernelError::DimMismatch {
            a_rows: a.rows,
            a_cols: a.cols,
            b_rows: b.rows,
            b_cols: b.cols,
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    #[cfg(target_arch = "x86_64")]
    {
        if fma_available() {
            unsafe { gemm_dense_avx2(a, b, &mut out) };
            return Ok(out);
        }
    }
    gemm_dense_body(a, b, &mut out);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Quantized GEMM
// ---------------------------------------------------------------------------

#[inline(always)]
fn gemm_quantized_body(x: &QuantizedTensor, w: &QuantizedTensor, out: &mut DenseMatrix) {
    let m = x.rows();
    let p = w.rows();
    let n = x.cols() as i64;
    let n_bits = x.bits();
    let w_bits = w.bits();
    let x_scales = x.scales();
    let w_scales = w.scales();
    for i in 0..m {
        let out_row = out.row_mut(i);
        for j in 0..p {
            let mut acc = 0.0f64;
            // Weight plane outer so each weight row streams once per output;
            // activation planes for row i stay hot across the whole j loop.
            for v in 0..w_bits {
                let w_row = w.plane_row(v, j);
                let beta = w_scales[v];
                for u in 0..n_bits {
                    let x_row = x.plane_row(u, i);
                    let differing = xor_popcount_words(x_row, w_row) as i64;
                    let dot = n - 2 * differing;
                    acc += x_scales[u] * beta * dot as f64;
                }
            }
            out_row[j] = acc;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,popcnt")]
unsafe fn gemm_quantized_avx2(x: &QuantizedTensor, w: &QuantizedTensor, out: &mut DenseMatrix) {
    gemm_quantized_body(x, w, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn gemm_quantized_popcnt(x: &QuantizedTensor, w: &QuantizedTensor, out: &mut DenseMatrix) {
    gemm_quantized_body(x, w, out);
}

/// Multi-bit GEMM over packed tensors:
/// `out[i][j] = sum_u sum_v alpha_u * beta_v * dot(x.plane_u.row_i, w.plane_v.row_j)`.
///
/// `x` is m×n with N activation planes, `w` is p×n with W weight planes
/// (row-major per output neuron); the result equals the dense product of the
/// dequantized operands up to floating summation order.
pub fn gemm_quantized(x: &QuantizedTensor, w: &QuantizedTensor) -> Result<DenseMatrix> {
    if x.cols() != w.cols() {
        return Err(KernelError::DimMismatch {
            a_rows: x.rows(),
            a_cols: x.cols(),
            b_rows: w.rows(),
            b_cols: w.cols(),
        });
    }
    let mut out = DenseMatrix::zeros(x.rows(), w.rows());
    #[cfg(target_arch = "x86_64")]
    {
        if avx2_available() {
            unsafe { gemm_quantized_avx2(x, w, &mut out) };
            return Ok(out);
        }
        if popcnt_available() {
            unsafe { gemm_quantized_popcnt(x, w, &mut out) };
            return Ok(out);
        }
    }
    gemm_quantized_body(x, w, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize_matrix;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn brute_dot(a: &[i8], b: &[i8]) -> i64 {
        a.iter().zip(b).map(|(&x, &y)| x as i64 * y as i64).sum()
    }

    #[test]
    fn pack_all_plus_ones_one_full_word() {
        let p = pack_signs(&[1i8; 64]).unwrap();
        assert_eq!(p.words(), &[u64::MAX]);
        assert_eq!(p.len(), 64);
    }

    #[test]
    fn pack_all_minus_ones_zero_word() {
        let p = pack_signs(&[-1i8; 64]).unwrap();
        assert_eq!(p.words(), &[0u64]);
    }

    #[test]
    fn pack_mixed_bit_layout() {
        let p = pack_signs(&[1, -1, 1]).unwrap();
        assert_eq!(p.words(), &[0b101u64]);
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn pack_rejects_invalid_sign() {
        let err = pack_signs(&[1, 0, -1]).unwrap_err();
        assert!(matches!(err, KernelError::SignOutOfRange { index: 1, .. }));
    }

    #[test]
    fn dot_identical_vectors_gives_n() {
        let a = pack_signs(&[1i8; 64]).unwrap();
        assert_eq!(xnor_popcount_dot(&a, &a).unwrap(), 64);
    }

    #[test]
    fn dot_half_agreeing() {
        let a = pack_signs(&[1, 1, 1, 1]).unwrap();
        let b = pack_signs(&[-1, -1, 1, 1]).unwrap();
        assert_eq!(xnor_popcount_dot(&a, &b).unwrap(), 0);
    }

    #[test]
    fn dot_crosses_word_boundary() {
        let a = pack_signs(&[1i8; 65]).unwrap();
        let b = pack_signs(&[-1i8; 65]).unwrap();
        assert_eq!(xnor_popcount_dot(&a, &b).unwrap(), -65);
    }

    #[test]
    fn dot_rejects_length_mismatch() {
        let a = pack_signs(&[1, 1]).unwrap();
        let b = pack_signs(&[1]).unwrap();
        assert!(matches!(
            xnor_popcount_dot(&a, &b),
            Err(KernelError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn dot_exhaustive_small_lengths() {
        for n in 1..=6usize {
            for bits_a in 0..(1u32 << n) {
                for bits_b in 0..(1u32 << n) {
                    let signs = |bits: u32| -> Vec<i8> {
                        (0..n).map(|i| if bits >> i & 1 == 1 { 1 } else { -1 }).collect()
                    };
                    let (sa, sb) = (signs(bits_a), signs(bits_b));
                    let a = pack_signs(&sa).unwrap();
                    let b = pack_signs(&sb).unwrap();
                    assert_eq!(xnor_popcount_dot(&a, &b).unwrap(), brute_dot(&sa, &sb));
                }
            }
        }
    }

    #[test]
    fn dot_randomized_word_boundaries() {
        let mut rng = StdRng::seed_from_u64(7);
        for &n in &[63usize, 64, 65, 127, 128, 129] {
            for _ in 0..50 {
                let sa: Vec<i8> = (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
                let sb: Vec<i8> = (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
                let a = pack_signs(&sa).unwrap();
                let b = pack_signs(&sb).unwrap();
                assert_eq!(xnor_popcount_dot(&a, &b).unwrap(), brute_dot(&sa, &sb));
            }
        }
    }

    #[test]
    fn gemm_dense_identity() {
        let m = DenseMatrix::from_fn(3, 3, |i, j| (3 * i + j) as f64);
        let out = gemm_dense(&DenseMatrix::identity(3), &m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn gemm_dense_one_by_one() {
        let a = DenseMatrix::from_vec(1, 1, vec![2.0]).unwrap();
        let b = DenseMatrix::from_vec(1, 1, vec![3.0]).unwrap();
        assert_eq!(gemm_dense(&a, &b).unwrap().get(0, 0), 6.0);
    }

    #[test]
    fn gemm_dense_matches_triple_loop() {
        let mut rng = StdRng::seed_from_u64(11);
        let a = DenseMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let b = DenseMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let fast = gemm_dense(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert!((fast.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_dense_rejects_dim_mismatch() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(4, 2);
        assert!(matches!(gemm_dense(&a, &b), Err(KernelError::DimMismatch { .. })));
    }

    #[test]
    fn gemm_quantized_hand_built_one_by_one() {
        // 1.5 represented as +1.0 +0.5 on both sides: product (1.0+0.5)^2.
        let x = QuantizedTensor::from_parts(1, 1, vec![1.0, 0.5], vec![vec![1u64], vec![1u64]])
            .unwrap();
        let w = x.clone();
        let out = gemm_quantized(&x, &w).unwrap();
        assert!((out.get(0, 0) - 2.25).abs() < 1e-12);
    }

    #[test]
    fn gemm_quantized_zero_scales_zero_output() {
        let m = DenseMatrix::zeros(3, 5);
        let q = quantize_matrix(&m, 2).unwrap();
        let w = quantize_matrix(&DenseMatrix::from_fn(4, 5, |i, j| (i + j) as f64 - 3.0), 2)
            .unwrap();
        let out = gemm_quantized(&q, &w).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gemm_quantized_matches_dense_oracle() {
        let mut rng = StdRng::seed_from_u64(23);
        for &(w_bits, n_bits) in &[(1usize, 1usize), (1, 2), (2, 1), (2, 4), (4, 8), (8, 8)] {
            let x = DenseMatrix::from_fn(8, 12, |_, _| rng.gen_range(-2.0..2.0));
            let w = DenseMatrix::from_fn(5, 12, |_, _| rng.gen_range(-2.0..2.0));
            let xq = quantize_matrix(&x, n_bits).unwrap();
            let wq = quantize_matrix(&w, w_bits).unwrap();
            let fast = gemm_quantized(&xq, &wq).unwrap();
            let oracle = gemm_dense(&xq.dequantize(), &wq.dequantize().transposed()).unwrap();
            assert!(
                fast.rel_frobenius_distance(&oracle) < 1e-6,
                "W={w_bits} N={n_bits}"
            );
        }
    }

    #[test]
    fn gemm_quantized_rejects_dim_mismatch() {
        let x = quantize_matrix(&DenseMatrix::zeros(2, 3), 1).unwrap();
        let w = quantize_matrix(&DenseMatrix::zeros(2, 4), 1).unwrap();
        assert!(matches!(gemm_quantized(&x, &w), Err(KernelError::DimMismatch { .. })));
    }

    proptest! {
        #[test]
        fn dot_is_symmetric_and_self_dot_is_n(
            signs in proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], 1..200),
            other in proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], 1..200),
        ) {
            let n = signs.len().min(other.len());
            let a = pack_signs(&signs[..n]).unwrap();
            let b = pack_signs(&other[..n]).unwrap();
            prop_assert_eq!(
                xnor_popcount_dot(&a, &b).unwrap(),
                xnor_popcount_dot(&b, &a).unwrap()
            );
            prop_assert_eq!(xnor_popcount_dot(&a, &a).unwrap(), n as i64);
        }

        #[test]
        fn pack_unpack_round_trip(
            signs in proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], 1..=130),
        ) {
            let plane = pack_signs(&signs).unwrap();
            prop_assert_eq!(plane.to_signs(), signs);
        }
    }
}
