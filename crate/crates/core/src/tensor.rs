//! Integer tensors and the exact-arithmetic kernels everything else is
//! checked against.
//!
//! Floating point only appears in [`quantize`]; from there on every value is
//! an `i32` element and every accumulation is `i64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_BITS: u32 = 16;

/// Inclusive value range of a `bits`-wide integer.
pub fn value_range(bits: u32, signed: bool) -> (i64, i64) {
    if signed {
        (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
    } else {
        (0, (1i64 << bits) - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
    bits: u32,
    signed: bool,
}

impl QuantTensor {
    /// Builds a tensor, checking that the shape matches the data and that
    /// every element fits the declared precision. `bits` may exceed
    /// [`MAX_BITS`] by one so that adversary reads of differential pairs
    /// (which span one extra bit) remain representable.
    pub fn new(shape: Vec<usize>, data: Vec<i32>, bits: u32, signed: bool) -> Result<Self> {
        if bits == 0 || bits > MAX_BITS + 1 {
            return Err(Error::InvalidPrecision(bits));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {expected} elements but data has {}",
                data.len()
            )));
        }
        let (lo, hi) = value_range(bits, signed);
        if let Some(&v) = data.iter().find(|&&v| (v as i64) < lo || (v as i64) > hi) {
            return Err(Error::OutOfRange {
                value: v as i64,
                lo,
                hi,
            });
        }
        Ok(Self {
            shape,
            data,
            bits,
            signed,
        })
    }

    pub fn zeros(shape: Vec<usize>, bits: u32, signed: bool) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0; n], bits, signed)
    }

    pub fn vector(data: Vec<i32>, bits: u32, signed: bool) -> Result<Self> {
        Self::new(vec![data.len()], data, bits, signed)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<i32> {
        self.data
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn signed(&self) -> bool {
        self.signed
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn range(&self) -> (i64, i64) {
        value_range(self.bits, self.signed)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data, self.bits, self.signed)
    }

    /// Row-major `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn at2(&self, row: usize, col: usize) -> i32 {
        self.data[row * self.shape[1] + col]
    }

    /// Smallest and largest element, `None` when empty.
    pub fn min_max(&self) -> Option<(i32, i32)> {
        let min = *self.data.iter().min()?;
        let max = *self.data.iter().max()?;
        Some((min, max))
    }
}

/// Quantizer output: the integer tensor plus the real value of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub tensor: QuantTensor,
    pub scale: f64,
}

impl Quantized {
    pub fn dequantize(&self) -> Vec<f64> {
        self.tensor
            .data()
            .iter()
            .map(|&q| q as f64 * self.scale)
            .collect()
    }
}

/// Symmetric linear quantization with round-half-away-from-zero and
/// saturation at the range edges.
///
/// Signed tensors map `max|v|` to `2^(bits-1) - 1`; unsigned tensors map
/// `max(v)` to `2^bits - 1` and clamp negatives to zero.
pub fn quantize(values: &[f64], bits: u32, signed: bool) -> Result<Quantized> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::InvalidPrecision(bits));
    }
    let (lo, hi) = value_range(bits, signed);
    let top = if signed {
        values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    } else {
        values.iter().fold(0.0f64, |m, &v| m.max(v))
    };
    let scale = if top > 0.0 {
        top / hi.max(1) as f64
    } else {
        1.0
    };
    // f64::round rounds half-way cases away from zero.
    let data = values
        .iter()
        .map(|&v| ((v / scale).round() as i64).clamp(lo, hi) as i32)
        .collect();
    let tensor = QuantTensor::vector(data, bits, signed)?;
    Ok(Quantized { tensor, scale })
}

/// Ground-truth VMM, `y_j = sum_i w[i][j] * x[i]`, with `i64` accumulation.
pub fn matmul_oracle(x: &QuantTensor, w: &QuantTensor) -> Result<Vec<i64>> {
    let (m, _) = w.dims2()?;
    if x.len() != m {
        return Err(Error::shape(format!(
            "input of length {} against weight matrix with {m} rows",
            x.len()
        )));
    }
    Ok(vmm(x.data(), w))
}

/// Unchecked body of [`matmul_oracle`]; `x.len()` must equal the row count.
pub(crate) fn vmm(x: &[i32], w: &QuantTensor) -> Vec<i64> {
    let n = w.shape()[1];
    let mut y = vec![0i64; n];
    for (row, &xi) in w.data().chunks_exact(n).zip(x) {
        if xi == 0 {
            continue;
        }
        let xi = xi as i64;
        for (acc, &wij) in y.iter_mut().zip(row) {
            *acc += wij as i64 * xi;
        }
    }
    y
}

/// Geometry of a 2-D convolution over a `[channels, height, width]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::shape("kernel and stride must be non-zero"));
        }
        if self.in_height + 2 * self.padding < self.kernel_h
            || self.in_width + 2 * self.padding < self.kernel_w
        {
            return Err(Error::shape(format!(
                "kernel {}x{} larger than padded input {}x{}",
                self.kernel_h,
                self.kernel_w,
                self.in_height + 2 * self.padding,
                self.in_width + 2 * self.padding
            )));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.in_height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn num_patches(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.num_patches()
    }
}

/// Lowers a convolution input to a `[patches, C*kh*kw]` matrix.
///
/// Patches are ordered row-major over output positions; within a patch,
/// elements run channel, kernel row, kernel column. Zero padding is
/// materialised as zeros.
pub fn im2col(input: &QuantTensor, geom: &ConvGeometry) -> Result<QuantTensor> {
    geom.validate()?;
    if input.len() != geom.input_len() {
        return Err(Error::shape(format!(
            "conv input has {} elements, geometry expects {}x{}x{}",
            input.len(),
            geom.in_channels,
            geom.in_height,
            geom.in_width
        )));
    }
    let data = im2col_raw(input.data(), geom);
    QuantTensor::new(
        vec![geom.num_patches(), geom.patch_len()],
        data,
        input.bits(),
        input.signed(),
    )
}

pub(crate) fn im2col_raw(x: &[i32], g: &ConvGeometry) -> Vec<i32> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut out = Vec::with_capacity(oh * ow * g.patch_len());
    for oy in 0..oh {
        for ox in 0..ow {
            for c in 0..g.in_channels {
                for ky in 0..g.kernel_h {
                    for kx in 0..g.kernel_w {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        let inside = iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.in_height
                            && (ix as usize) < g.in_width;
                        out.push(if inside {
                            x[(c * g.in_height + iy as usize) * g.in_width + ix as usize]
                        } else {
                            0
                        });
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use serde::Deserialize;

    #[test]
    fn quantize_trivial_points() {
        let q = quantize(&[0.0], 8, true).unwrap();
        assert_eq!(q.tensor.data(), &[0]);
        let q = quantize(&[0.3, -0.1, 0.75], 8, true).unwrap();
        assert_eq!(q.tensor.data()[2], 127);
        let q = quantize(&[-2.0, 1.0], 8, true).unwrap();
        assert_eq!(q.tensor.data()[0], -127);
    }

    #[test]
    fn quantize_rejects_bad_input() {
        assert!(matches!(quantize(&[], 8, true), Err(Error::EmptyInput)));
        assert!(matches!(
            quantize(&[1.0], 0, true),
            Err(Error::InvalidPrecision(0))
        ));
        assert!(matches!(
            quantize(&[1.0], 17, true),
            Err(Error::InvalidPrecision(17))
        ));
    }

    #[test]
    fn quantize_unsigned_clamps_negatives() {
        let q = quantize(&[-1.0, 0.5, 1.0], 8, false).unwrap();
        assert_eq!(q.tensor.data(), &[0, 128, 255]);
    }

    #[test]
    fn quantize_rounds_half_away_from_zero() {
        // scale = 1.0 exactly, so the halves are representable.
        let q = quantize(&[127.0, 2.5, -2.5, 0.5, -0.5], 8, true).unwrap();
        assert_eq!(q.tensor.data(), &[127, 3, -3, 1, -1]);
    }

    #[derive(Deserialize)]
    struct QuantCase {
        bits: u32,
        signed: bool,
        expected: Vec<i32>,
    }

    #[derive(Deserialize)]
    struct QuantFixture {
        values: Vec<f64>,
        cases: Vec<QuantCase>,
    }

    /// Expected values come from the numpy reference quantizer in
    /// `fixtures/gen_fixtures.py`.
    #[test]
    fn quantize_matches_reference_fixture() {
        let fx: QuantFixture =
            serde_json::from_str(include_str!("../fixtures/golden/quantize.json")).unwrap();
        for case in fx.cases {
            let q = quantize(&fx.values, case.bits, case.signed).unwrap();
            assert_eq!(
                q.tensor.data(),
                case.expected.as_slice(),
                "bits={}",
                case.bits
            );
        }
    }

    #[test]
    fn matmul_small_column() {
        // Weights (01b, 10b) as one column, input (1, 0).
        let w = QuantTensor::new(vec![2, 1], vec![1, 2], 8, true).unwrap();
        let x = QuantTensor::vector(vec![1, 0], 8, false).unwrap();
        assert_eq!(matmul_oracle(&x, &w).unwrap(), vec![1]);
        let zero = QuantTensor::vector(vec![0, 0], 8, false).unwrap();
        assert_eq!(matmul_oracle(&zero, &w).unwrap(), vec![0]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let w = QuantTensor::zeros(vec![3, 2], 8, true).unwrap();
        let x = QuantTensor::vector(vec![1, 2], 8, false).unwrap();
        assert!(matches!(matmul_oracle(&x, &w), Err(Error::Shape(_))));
    }

    fn schoolbook(x: &[i32], w: &[i32], m: usize, n: usize) -> Vec<i64> {
        let mut y = vec![0i64; n];
        for j in 0..n {
            for i in 0..m {
                y[j] += (w[i * n + j] as i64) * (x[i] as i64);
            }
        }
        y
    }

    #[test]
    fn matmul_random_8x8_against_schoolbook() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w: Vec<i32> = (0..64).map(|_| rng.gen_range(-128..=127)).collect();
        let x: Vec<i32> = (0..8).map(|_| rng.gen_range(0..=255)).collect();
        let wt = QuantTensor::new(vec![8, 8], w.clone(), 8, true).unwrap();
        let xt = QuantTensor::vector(x.clone(), 8, false).unwrap();
        assert_eq!(matmul_oracle(&xt, &wt).unwrap(), schoolbook(&x, &w, 8, 8));
    }

    #[test]
    fn tensor_invariants_enforced() {
        assert!(QuantTensor::new(vec![2, 2], vec![0; 3], 8, true).is_err());
        assert!(QuantTensor::new(vec![1], vec![128], 8, true).is_err());
        assert!(QuantTensor::new(vec![1], vec![-1], 8, false).is_err());
        assert!(QuantTensor::new(vec![1], vec![255], 8, false).is_ok());
    }

    fn geom(c: usize, h: usize, w: usize, oc: usize, k: usize, s: usize, p: usize) -> ConvGeometry {
        ConvGeometry {
            in_channels: c,
            in_height: h,
            in_width: w,
            out_channels: oc,
            kernel_h: k,
            kernel_w: k,
            stride: s,
            padding: p,
        }
    }

    #[test]
    fn im2col_one_by_one_is_identity_rearrangement() {
        let g = geom(1, 3, 3, 1, 1, 1, 0);
        let x = QuantTensor::vector((0..9).collect(), 8, false).unwrap();
        let cols = im2col(&x, &g).unwrap();
        assert_eq!(cols.shape(), &[9, 1]);
        assert_eq!(cols.data(), x.data());
    }

    #[test]
    fn im2col_3x3_on_4x4_sliding_windows() {
        let g = geom(1, 4, 4, 1, 3, 1, 0);
        let x: Vec<i32> = (0..16).collect();
        let cols = im2col(&QuantTensor::vector(x.clone(), 8, false).unwrap(), &g).unwrap();
        assert_eq!(cols.shape(), &[4, 9]);
        let mut expected = Vec::new();
        for oy in 0..2 {
            for ox in 0..2 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        expected.push(x[(oy + ky) * 4 + ox + kx]);
                    }
                }
            }
        }
        assert_eq!(cols.data(), expected.as_slice());
    }

    #[test]
    fn im2col_rejects_wrong_input_size() {
        let g = geom(1, 4, 4, 1, 3, 1, 0);
        let x = QuantTensor::vector(vec![0; 15], 8, false).unwrap();
        assert!(matches!(im2col(&x, &g), Err(Error::Shape(_))));
    }

    /// Naive nested-loop convolution, kernel laid out `[oc, ic, kh, kw]`,
    /// output `[oc, oh, ow]`.
    fn direct_conv(x: &[i32], k: &[i32], g: &ConvGeometry) -> Vec<i64> {
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut out = vec![0i64; g.out_channels * oh * ow];
        for oc in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0i64;
                    for c in 0..g.in_channels {
                        for ky in 0..g.kernel_h {
                            for kx in 0..g.kernel_w {
                                let iy = (oy * g.stride + ky) as i64 - g.padding as i64;
                                let ix = (ox * g.stride + kx) as i64 - g.padding as i64;
                                if iy < 0
                                    || ix < 0
                                    || iy >= g.in_height as i64
                                    || ix >= g.in_width as i64
                                {
                                    continue;
                                }
                                let xv =
                                    x[(c * g.in_height + iy as usize) * g.in_width + ix as usize];
                                let kv = k[((oc * g.in_channels + c) * g.kernel_h + ky)
                                    * g.kernel_w
                                    + kx];
                                acc += xv as i64 * kv as i64;
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn conv_via_im2col(x: &[i32], k: &[i32], g: &ConvGeometry) -> Vec<i64> {
        let cols = im2col(&QuantTensor::vector(x.to_vec(), 8, false).unwrap(), g).unwrap();
        // [oc, patch] -> [patch, oc]
        let plen = g.patch_len();
        let mut wm = vec![0i32; plen * g.out_channels];
        for oc in 0..g.out_channels {
            for e in 0..plen {
                wm[e * g.out_channels + oc] = k[oc * plen + e];
            }
        }
        let wm = QuantTensor::new(vec![plen, g.out_channels], wm, 8, true).unwrap();
        let np = g.num_patches();
        let mut out = vec![0i64; g.output_len()];
        for p in 0..np {
            let patch = &cols.data()[p * plen..(p + 1) * plen];
            for (oc, v) in vmm(patch, &wm).into_iter().enumerate() {
                out[oc * np + p] = v;
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn conv_lowering_matches_direct(
            c in 1usize..4, h in 3usize..9, w in 3usize..9, oc in 1usize..5,
            k in 1usize..4, s in 1usize..3, p in 0usize..2, seed in any::<u64>(),
        ) {
            let g = geom(c, h, w, oc, k, s, p);
            prop_assume!(g.validate().is_ok());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<i32> = (0..g.input_len()).map(|_| rng.gen_range(0..=255)).collect();
            let kern: Vec<i32> = (0..oc * g.patch_len()).map(|_| rng.gen_range(-128..=127)).collect();
            prop_assert_eq!(conv_via_im2col(&x, &kern, &g), direct_conv(&x, &kern, &g));
        }

        #[test]
        fn quantize_idempotent_on_grid(
            vals in prop::collection::vec(-100.0f64..100.0, 1..40),
            bits in 2u32..=16,
            signed in any::<bool>(),
        ) {
            let q = quantize(&vals, bits, signed).unwrap();
            let again = quantize(&q.dequantize(), bits, signed).unwrap();
            prop_assert_eq!(again.tensor.data(), q.tensor.data());
        }
    }
}
