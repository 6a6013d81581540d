//! Distribution-sensitive quantization of real tensors into K sign bit
//! planes with shared per-plane scales.
//!
//! Level k stores the sign of the current residual and the mean absolute
//! residual as its scale: `alpha_k = mean(|r_k|)`, `plane_k = sign(r_k)`,
//! `r_{k+1} = r_k - alpha_k * plane_k`, starting from the raw values. The
//! first plane is therefore the plain sign split and every later plane
//! refines the working approximation by adding or subtracting the average
//! distance from it. Dequantization is `sum_k alpha_k * s_ki`.
//!
//! Scales are shared across the whole tensor so that the multi-bit GEMM in
//! [`crate::bitkernel`] factors into plane-pair popcount dots.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::bitkernel::{pack_signs_into, words_for, DenseMatrix};

pub type Result<T> = std::result::Result<T, QuantError>;

#[derive(Error, Debug)]
pub enum QuantError {
    #[error("empty tensor")]
    EmptyTensor,
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("bit width must be at least 1")]
    ZeroBits,
    #[error("corrupt quantized tensor: {0}")]
    Corrupt(String),
    #[error("i/o error")]
    Io(#[from] std::io::Error),
}

/// Sign of `v` with `sign(0) = +1`.
#[inline]
pub fn sign_plus(v: f64) -> i8 {
    if v >= 0.0 {
        1
    } else {
        -1
    }
}

// ---------------------------------------------------------------------------
// QuantizedVector — unpacked reference form
// ---------------------------------------------------------------------------

/// K sign planes plus K scales over an n-element vector. Planes are kept as
/// ±1 bytes; the packed form lives in [`QuantizedTensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    pub planes: Vec<Vec<i8>>,
    pub scales: Vec<f64>,
    pub len: usize,
}

impl QuantizedVector {
    pub fn bits(&self) -> usize {
        self.scales.len()
    }
}

fn validate_input(values: &[f64], bits: usize) -> Result<()> {
    if values.is_empty() {
        return Err(QuantError::EmptyTensor);
    }
    if bits == 0 {
        return Err(QuantError::ZeroBits);
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite { index });
    }
    Ok(())
}

/// Residual-error-mean quantization of a real vector into `bits` planes.
pub fn quantize_residual(values: &[f64], bits: usize) -> Result<QuantizedVector> {
    validate_input(values, bits)?;
    let n = values.len();
    let mut residual = values.to_vec();
    let mut planes = Vec::with_capacity(bits);
    let mut scales = Vec::with_capacity(bits);
    for _ in 0..bits {
        let alpha = residual.iter().map(|r| r.abs()).sum::<f64>() / n as f64;
        let plane: Vec<i8> = residual.iter().map(|&r| sign_plus(r)).collect();
        for (r, &s) in residual.iter_mut().zip(&plane) {
            *r -= alpha * s as f64;
        }
        scales.push(alpha);
        planes.push(plane);
    }
    Ok(QuantizedVector { planes, scales, len: n })
}

/// Sign planes for `values` under externally fixed (frozen) scales.
///
/// Same recurrence as [`quantize_residual`] except that each level uses the
/// provided `scales[k]` instead of the mean absolute residual.
pub fn quantize_with_scales(values: &[f64], scales: &[f64]) -> Result<QuantizedVector> {
    validate_input(values, scales.len())?;
    let mut residual = values.to_vec();
    let mut planes = Vec::with_capacity(scales.len());
    for &alpha in scales {
        let plane: Vec<i8> = residual.iter().map(|&r| sign_plus(r)).collect();
        for (r, &s) in residual.iter_mut().zip(&plane) {
            *r -= alpha * s as f64;
        }
        planes.push(plane);
    }
    Ok(QuantizedVector {
        planes,
        scales: scales.to_vec(),
        len: values.len(),
    })
}

/// Reconstructs `out[i] = sum_k scales[k] * planes[k][i]`.
pub fn dequantize(q: &QuantizedVector) -> Vec<f64> {
    let mut out = vec![0.0; q.len];
    for (plane, &alpha) in q.planes.iter().zip(&q.scales) {
        for (o, &s) in out.iter_mut().zip(plane) {
            *o += alpha * s as f64;
        }
    }
    out
}

/// L2 norm of the quantization residual after a `bits`-plane round trip.
pub fn quantization_error(values: &[f64], bits: usize) -> Result<f64> {
    let q = quantize_residual(values, bits)?;
    let approx = dequantize(&q);
    Ok(values
        .iter()
        .zip(&approx)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

// ---------------------------------------------------------------------------
// QuantizedTensor — packed bit-plane matrix
// ---------------------------------------------------------------------------

/// Bit-plane decomposition of an m×n matrix: K packed sign planes and K
/// whole-tensor scales. Each plane row is padded to a 64-bit word boundary
/// with zero bits, so kernel dots never need a tail mask.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    scales: Vec<f64>,
    planes: Vec<Vec<u64>>,
    words_per_row: usize,
}

impl QuantizedTensor {
    /// Assembles a tensor from already-packed planes (tests, file decode).
    pub fn from_parts(
        rows: usize,
        cols: usize,
        scales: Vec<f64>,
        planes: Vec<Vec<u64>>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(QuantError::EmptyTensor);
        }
        if scales.is_empty() {
            return Err(QuantError::ZeroBits);
        }
        if planes.len() != scales.len() {
            return Err(QuantError::Corrupt(format!(
                "{} planes for {} scales",
                planes.len(),
                scales.len()
            )));
        }
        let words_per_row = words_for(cols);
        for (k, plane) in planes.iter().enumerate() {
            if plane.len() != rows * words_per_row {
                return Err(QuantError::Corrupt(format!(
                    "plane {k} has {} words, expected {}",
                    plane.len(),
                    rows * words_per_row
                )));
            }
            if cols % 64 != 0 {
                for i in 0..rows {
                    let last = plane[i * words_per_row + words_per_row - 1];
                    if last >> (cols % 64) != 0 {
                        return Err(QuantError::Corrupt(format!(
                            "plane {k} row {i} has nonzero padding bits"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            scales,
            planes,
            words_per_row,
        })
    }

    fn pack_vector(rows: usize, cols: usize, q: &QuantizedVector) -> Result<Self> {
        let words_per_row = words_for(cols);
        let mut planes = Vec::with_capacity(q.bits());
        for plane in &q.planes {
            let mut words = vec![0u64; rows * words_per_row];
            for i in 0..rows {
                pack_signs_into(
                    &plane[i * cols..(i + 1) * cols],
                    &mut words[i * words_per_row..(i + 1) * words_per_row],
                )
                .expect("signs come from the quantizer");
            }
            planes.push(words);
        }
        Ok(Self {
            rows,
            cols,
            scales: q.scales.clone(),
            planes,
            words_per_row,
        })
    }

    /// Quantizes a dense matrix with whole-tensor scales.
    pub fn from_matrix(m: &DenseMatrix, bits: usize) -> Result<Self> {
        let q = quantize_residual(m.data(), bits)?;
        Self::pack_vector(m.rows(), m.cols(), &q)
    }

    /// Packs a matrix under frozen scales (inference-time activations).
    pub fn from_matrix_with_scales(m: &DenseMatrix, scales: &[f64]) -> Result<Self> {
        let q = quantize_with_scales(m.data(), scales)?;
        Self::pack_vector(m.rows(), m.cols(), &q)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> usize {
        self.scales.len()
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Packed words of row `i` in plane `k`.
    #[inline]
    pub fn plane_row(&self, k: usize, i: usize) -> &[u64] {
        &self.planes[k][i * self.words_per_row..(i + 1) * self.words_per_row]
    }

    /// Sign (±1) of element (i, j) in plane `k`.
    pub fn sign(&self, k: usize, i: usize, j: usize) -> i8 {
        let word = self.planes[k][i * self.words_per_row + j / 64];
        if word >> (j % 64) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    pub fn dequantize(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for (k, &alpha) in self.scales.iter().enumerate() {
            for i in 0..self.rows {
                let row = out.row_mut(i);
                for (j, v) in row.iter_mut().enumerate() {
                    *v += alpha * self.sign(k, i, j) as f64;
                }
            }
        }
        out
    }

    /// Serialized byte size of this tensor in the on-disk layout.
    pub fn encoded_len(&self) -> usize {
        12 + self.scales.len() * 8 + self.planes.len() * self.rows * self.words_per_row * 8
    }

    /// Writes the on-disk layout: `rows, cols, bits` as u32 LE, then K scales
    /// as f64 LE, then K planes with each row padded to a 64-bit boundary,
    /// words little-endian.
    pub fn encode<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_u32::<LittleEndian>(self.rows as u32)?;
        w.write_u32::<LittleEndian>(self.cols as u32)?;
        w.write_u32::<LittleEndian>(self.scales.len() as u32)?;
        for &s in &self.scales {
            w.write_f64::<LittleEndian>(s)?;
        }
        for plane in &self.planes {
            for &word in plane {
                w.write_u64::<LittleEndian>(word)?;
            }
        }
        Ok(())
    }

    pub fn decode<R: Read>(mut r: R) -> Result<Self> {
        let rows = r.read_u32::<LittleEndian>()? as usize;
        let cols = r.read_u32::<LittleEndian>()? as usize;
        let bits = r.read_u32::<LittleEndian>()? as usize;
        if rows == 0 || cols == 0 {
            return Err(QuantError::Corrupt("zero dimension".into()));
        }
        if bits == 0 || bits > 64 {
            return Err(QuantError::Corrupt(format!("bad bit width {bits}")));
        }
        let mut scales = Vec::with_capacity(bits);
        for _ in 0..bits {
            scales.push(r.read_f64::<LittleEndian>()?);
        }
        let words_per_row = words_for(cols);
        let mut planes = Vec::with_capacity(bits);
        for _ in 0..bits {
            let mut words = vec![0u64; rows * words_per_row];
            for w in words.iter_mut() {
                *w = r.read_u64::<LittleEndian>()?;
            }
            planes.push(words);
        }
        Self::from_parts(rows, cols, scales, planes)
    }
}

/// Residual-error-mean quantization of a matrix; the recurrence runs over
/// all rows×cols elements jointly (whole-tensor scales).
pub fn quantize_matrix(m: &DenseMatrix, bits: usize) -> Result<QuantizedTensor> {
    QuantizedTensor::from_matrix(m, bits)
}
