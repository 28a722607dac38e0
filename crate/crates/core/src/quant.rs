//! Symmetric INT16 quantization and MSB-truncated low-bit views.
//!
//! A tensor is quantized once to 16 bits; the 4-bit and 2-bit operands used by
//! the filtering rounds are the top bits of the same stored words, obtained by
//! an arithmetic right shift. Because the 2-bit view is the top half of the
//! 4-bit view, a 4-bit key splits into a signed high pair and an unsigned low
//! pair with `k4 = hi * 4 + lo`, which is what lets round-1 scores reuse the
//! round-0 partial sums.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const INT16_MAX: i32 = 32_767;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    scale: f64,
    data: Vec<i16>,
}

impl QuantizedMatrix {
    pub fn from_raw(rows: usize, cols: usize, scale: f64, data: Vec<i16>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} quantized matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
        }
        if data.contains(&i16::MIN) {
            return Err(Error::InvalidArgument("-32768 is not a valid quantized value".into()));
        }
        Ok(Self { rows, cols, scale, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn data(&self) -> &[i16] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[i16] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Dequantized copy of row `i` at full precision.
    pub fn dequantized_row(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&x| f64::from(x) * self.scale).collect()
    }

    pub fn view(&self, bits: u32) -> Result<BitView<'_>> {
        view_bits(self, bits)
    }
}

/// Per-tensor symmetric quantization: `scale = max|m| / 32767`, values rounded
/// half away from zero and clamped to `[-32767, 32767]`. An all-zero matrix
/// gets `scale = 1`.
pub fn quantize_int16(m: &Matrix) -> QuantizedMatrix {
    let max = m.max_abs();
    let scale = if max > 0.0 { max / f64::from(INT16_MAX) } else { 1.0 };
    let limit = f64::from(INT16_MAX);
    let data = m
        .data()
        .iter()
        .map(|&x| (x / scale).round().clamp(-limit, limit) as i16)
        .collect();
    QuantizedMatrix {
        rows: m.rows(),
        cols: m.cols(),
        scale,
        data,
    }
}

/// Supported operand widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BitWidth {
    Two,
    Four,
    Sixteen,
}

impl BitWidth {
    pub fn bits(self) -> u32 {
        match self {
            Self::Two => 2,
            Self::Four => 4,
            Self::Sixteen => 16,
        }
    }

    pub fn shift(self) -> u32 {
        16 - self.bits()
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = Error;

    fn try_from(bits: u32) -> Result<Self> {
        match bits {
            2 => Ok(Self::Two),
            4 => Ok(Self::Four),
            16 => Ok(Self::Sixteen),
            other => Err(Error::UnsupportedBits(other)),
        }
    }
}

/// Top `bits` bits of a stored 16-bit word, sign-extended.
#[inline]
pub fn truncate(value: i16, width: BitWidth) -> i32 {
    i32::from(value) >> width.shift()
}

/// Read-only view of a quantized matrix at reduced precision.
#[derive(Debug, Clone, Copy)]
pub struct BitView<'a> {
    source: &'a QuantizedMatrix,
    width: BitWidth,
}

impl<'a> BitView<'a> {
    pub fn source(&self) -> &'a QuantizedMatrix {
        self.source
    }

    pub fn width(&self) -> BitWidth {
        self.width
    }

    pub fn bits(&self) -> u32 {
        self.width.bits()
    }

    pub fn rows(&self) -> usize {
        self.source.rows
    }

    pub fn cols(&self) -> usize {
        self.source.cols
    }

    pub fn get(&self, i: usize, j: usize) -> i32 {
        truncate(self.source.data[i * self.source.cols + j], self.width)
    }

    pub fn row(&self, i: usize) -> Vec<i32> {
        self.source.row(i).iter().map(|&x| truncate(x, self.width)).collect()
    }

    /// Real value represented by one unit of this view.
    pub fn unit(&self) -> f64 {
        self.source.scale * f64::from(1u32 << self.width.shift())
    }
}

pub fn view_bits(qm: &QuantizedMatrix, bits: u32) -> Result<BitView<'_>> {
    Ok(BitView {
        source: qm,
        width: BitWidth::try_from(bits)?,
    })
}

/// Splits a signed 4-bit value into its signed top pair and unsigned bottom pair.
pub fn split_hi_lo(v4: i32) -> Result<(i32, u32)> {
    if !(-8..=7).contains(&v4) {
        return Err(Error::OutOfRange(v4));
    }
    Ok((v4 >> 2, (v4 & 3) as u32))
}

/// `value * scale * 2^(16 - bits)` elementwise.
pub fn dequantize(view: &BitView<'_>) -> Matrix {
    let unit = view.unit();
    Matrix::from_fn(view.rows(), view.cols(), |i, j| f64::from(view.get(i, j)) * unit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(v: i16) -> QuantizedMatrix {
        QuantizedMatrix::from_raw(1, 1, 1.0, vec![v]).unwrap()
    }

    #[test]
    fn quantize_max_abs_normalization() {
        let m = Matrix::new(1, 2, vec![1.0, -1.0]).unwrap();
        let q = quantize_int16(&m);
        assert_eq!(q.scale(), 1.0 / 32767.0);
        assert_eq!(q.data(), &[32767, -32767]);
    }

    #[test]
    fn quantize_zero_matrix() {
        let q = quantize_int16(&Matrix::zeros(3, 2));
        assert_eq!(q.scale(), 1.0);
        assert!(q.data().iter().all(|&x| x == 0));
    }

    #[test]
    fn quantize_round_trip_within_half_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = Matrix::from_fn(8, 8, |_, _| rng.random_range(-3.0..3.0));
        let q = quantize_int16(&m);
        let back = dequantize(&q.view(16).unwrap());
        for (a, b) in m.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= q.scale() / 2.0 + 1e-15);
        }
    }

    #[test]
    fn quantize_rounds_half_away_from_zero() {
        // scale = 2/32767 so 1/32767 sits exactly on a half step
        let m = Matrix::new(1, 3, vec![2.0, 1.0 / 32767.0, -1.0 / 32767.0]).unwrap();
        let q = quantize_int16(&m);
        assert_eq!(q.data(), &[32767, 1, -1]);
    }

    #[test]
    fn view_examples() {
        assert_eq!(single(0x7FFF).view(4).unwrap().get(0, 0), 7);
        assert_eq!(single(-1).view(2).unwrap().get(0, 0), -1);
        assert_eq!(single(-32767).view(4).unwrap().get(0, 0), -8);
        assert_eq!(single(1234).view(16).unwrap().get(0, 0), 1234);
        assert!(matches!(single(1).view(8), Err(Error::UnsupportedBits(8))));
    }

    #[test]
    fn two_bit_view_is_shift_of_four_bit_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let v = rng.random_range(-32767i16..=32767);
            let q = single(v);
            let v2 = q.view(2).unwrap().get(0, 0);
            let v4 = q.view(4).unwrap().get(0, 0);
            assert_eq!(v2, v4 >> 2);
            assert!((-2..=1).contains(&v2));
            assert!((-8..=7).contains(&v4));
        }
    }

    #[test]
    fn split_hi_lo_examples() {
        assert_eq!(split_hi_lo(7).unwrap(), (1, 3));
        assert_eq!(split_hi_lo(-8).unwrap(), (-2, 0));
        assert_eq!(split_hi_lo(8), Err(Error::OutOfRange(8)));
        assert_eq!(split_hi_lo(-9), Err(Error::OutOfRange(-9)));
    }

    #[test]
    fn split_hi_lo_products_exhaustive() {
        for v in -8..=7 {
            let (hi, lo) = split_hi_lo(v).unwrap();
            assert_eq!(hi * 4 + lo as i32, v);
            for q in -8..=7 {
                assert_eq!(q * v, q * hi * 4 + q * lo as i32);
            }
        }
    }

    #[test]
    fn dequantize_low_bit_views() {
        let z = QuantizedMatrix::from_raw(2, 2, 0.5, vec![0; 4]).unwrap();
        assert!(dequantize(&z.view(2).unwrap()).data().iter().all(|&x| x == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = Matrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        let q = quantize_int16(&m);
        let full = dequantize(&q.view(16).unwrap());
        let four = dequantize(&q.view(4).unwrap());
        let step = q.scale() * 4096.0;
        for (a, b) in full.data().iter().zip(four.data()) {
            // truncation floors: one-sided error below one 4-bit step
            assert!(a - b >= 0.0 && a - b < step);
        }
    }

    #[test]
    fn from_raw_validation() {
        assert!(QuantizedMatrix::from_raw(1, 2, 1.0, vec![0]).is_err());
        assert!(QuantizedMatrix::from_raw(1, 1, 0.0, vec![0]).is_err());
        assert!(QuantizedMatrix::from_raw(1, 1, 1.0, vec![i16::MIN]).is_err());
    }
}
