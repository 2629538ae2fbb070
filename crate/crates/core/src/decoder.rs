//! Post-ADC decoder logic: restores true partial VMM results from the
//! observed column outputs of transformed columns.
//!
//! Biased scheme: a subtractor forms `bias = (2^p_m - 1) * sum(x)` once per
//! input segment and a 2:1 selector picks `bias - observed` or `observed`.
//! Differential scheme: an inverter and a selector pick `-observed` or
//! `observed`.

use std::ops::Range;

use crate::crossbar::{CrossbarConfig, Scheme};
use crate::error::{Error, Result};
use crate::secure_map::BitMatrix;

/// `(sum << p_m) - sum`, i.e. `(2^p_m - 1) * sum`.
pub fn compute_bias(sum_inputs: i64, device_bits: u32) -> i64 {
    (sum_inputs << device_bits) - sum_inputs
}

pub fn decode_scheme1(observed: i64, bias: i64, key_bit: bool) -> i64 {
    if key_bit {
        bias - observed
    } else {
        observed
    }
}

pub fn decode_scheme2(observed: i64, key_bit: bool) -> i64 {
    if key_bit {
        -observed
    } else {
        observed
    }
}

/// Event counters; the bias costs one cycle per input segment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DecoderStats {
    pub bias_cycles: u64,
    pub corrected: u64,
    pub passed: u64,
}

impl std::ops::AddAssign for DecoderStats {
    fn add_assign(&mut self, o: Self) {
        self.bias_cycles += o.bias_cycles;
        self.corrected += o.corrected;
        self.passed += o.passed;
    }
}

/// Per-segment decoder state. Not shared across concurrent inputs.
#[derive(Clone, Debug)]
pub struct DecoderContext {
    scheme: Scheme,
    device_bits: u32,
    current_bias: i64,
    pub stats: DecoderStats,
}

impl DecoderContext {
    pub fn new(config: &CrossbarConfig) -> Self {
        Self {
            scheme: config.scheme,
            device_bits: config.device_bits,
            current_bias: 0,
            stats: DecoderStats::default(),
        }
    }

    /// Latches the bias for a new input segment.
    pub fn load_segment(&mut self, sum_inputs: i64) {
        if self.scheme == Scheme::Biased {
            self.current_bias = compute_bias(sum_inputs, self.device_bits);
            self.stats.bias_cycles += 1;
        }
    }

    pub fn current_bias(&self) -> i64 {
        self.current_bias
    }

    pub fn decode(&mut self, observed: i64, key_bit: bool) -> i64 {
        if key_bit {
            self.stats.corrected += 1;
        } else {
            self.stats.passed += 1;
        }
        match self.scheme {
            Scheme::Biased => decode_scheme1(observed, self.current_bias, key_bit),
            Scheme::Differential => decode_scheme2(observed, key_bit),
        }
    }
}

/// Raw ADC outputs of one activated word-line segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentPartials {
    pub rows: Range<usize>,
    pub sum_inputs: i64,
    /// `[group][weight column]`.
    pub groups: Vec<Vec<i64>>,
}

/// Decodes every segment with the key bit of the block it belongs to, then
/// accumulates across segments and blocks. Returns `[group][column]`
/// totals, ready for shift&add.
///
/// Each segment must lie inside a single block; the key bit of a column is
/// the same for all groups.
pub fn decode_block_pipeline(
    segments: &[SegmentPartials],
    transform: &BitMatrix,
    config: &CrossbarConfig,
    ctx: &mut DecoderContext,
) -> Result<Vec<Vec<i64>>> {
    let cols = transform.cols();
    let mut out = vec![vec![0i64; cols]; config.groups];
    for seg in segments {
        if seg.rows.is_empty() {
            continue;
        }
        let block = config.block_of_row(seg.rows.start);
        if config.block_of_row(seg.rows.end - 1) != block {
            return Err(Error::BlockMisaligned {
                rows: seg.rows.clone(),
                block_rows: config.block_rows,
            });
        }
        if block >= transform.rows() {
            return Err(Error::shape(format!(
                "segment rows {:?} fall in block {block}, key has {} blocks",
                seg.rows,
                transform.rows()
            )));
        }
        if seg.groups.len() != config.groups {
            return Err(Error::Arity {
                expected: config.groups,
                got: seg.groups.len(),
            });
        }
        ctx.load_segment(seg.sum_inputs);
        for (acc, observed) in out.iter_mut().zip(&seg.groups) {
            if observed.len() != cols {
                return Err(Error::shape(format!(
                    "{} column outputs for {cols} key columns",
                    observed.len()
                )));
            }
            for (j, (a, &y)) in acc.iter_mut().zip(observed).enumerate() {
                *a += ctx.decode(y, transform.get(block, j));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossbar::{combine, decompose};
    use crate::secure_map::encode_scheme1;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(scheme: Scheme, p_m: u32, groups: usize) -> CrossbarConfig {
        CrossbarConfig {
            rows: 8,
            cols: 2,
            device_bits: p_m,
            groups,
            wl_active: 2,
            block_rows: 4,
            adcs_per_group: 1,
            scheme,
            sum_column: false,
        }
    }

    #[test]
    fn bias_examples() {
        assert_eq!(compute_bias(1, 2), 3);
        assert_eq!(compute_bias(0, 5), 0);
        assert_eq!(compute_bias(7, 1), 7);
    }

    #[test]
    fn worked_biased_column() {
        // Complemented column (10b, 01b) against (1, 0) reads 2; bias 3 restores 1.
        let (cells, x) = ([2i64, 1], [1i64, 0]);
        let observed: i64 = cells.iter().zip(x).map(|(c, x)| c * x).sum();
        assert_eq!(decode_scheme1(observed, compute_bias(1, 2), true), 1);
        assert_eq!(decode_scheme1(1, 3, false), 1);
    }

    #[test]
    fn worked_differential_pair() {
        // Complemented pair observes +1; the true (1, -2) . (1, 1) is -1.
        assert_eq!(decode_scheme2(1, true), -1);
        assert_eq!(decode_scheme2(1, false), 1);
    }

    #[test]
    fn misaligned_segment_rejected() {
        let c = config(Scheme::Biased, 1, 1);
        let seg = SegmentPartials {
            rows: 3..5,
            sum_inputs: 0,
            groups: vec![vec![0]],
        };
        let mut ctx = DecoderContext::new(&c);
        let t = BitMatrix::zeros(2, 1);
        assert!(matches!(
            decode_block_pipeline(&[seg], &t, &c, &mut ctx),
            Err(Error::BlockMisaligned { .. })
        ));
    }

    #[test]
    fn two_blocks_only_keyed_block_corrected() {
        // k = 2, keys (1, 0) on the single column. Block 0 stores complements.
        let c = config(Scheme::Biased, 2, 1);
        let w = [3u8, 1, 0, 2, 1, 1, 2, 3];
        let x = [5i32, 0, 7, 1, 2, 2, 9, 4];
        let stored: Vec<u8> = w
            .iter()
            .enumerate()
            .map(|(r, &v)| if r < 4 { 3 - v } else { v })
            .collect();
        let mut t = BitMatrix::zeros(2, 1);
        t.set(0, 0, true);
        let segs: Vec<SegmentPartials> = (0..4)
            .map(|s| {
                let rows = 2 * s..2 * s + 2;
                let y: i64 = rows.clone().map(|r| stored[r] as i64 * x[r] as i64).sum();
                let sum: i64 = rows.clone().map(|r| x[r] as i64).sum();
                SegmentPartials {
                    rows,
                    sum_inputs: sum,
                    groups: vec![vec![y]],
                }
            })
            .collect();
        let mut ctx = DecoderContext::new(&c);
        let out = decode_block_pipeline(&segs, &t, &c, &mut ctx).unwrap();
        let truth: i64 = (0..8).map(|r| w[r] as i64 * x[r] as i64).sum();
        assert_eq!(out[0][0], truth);
        assert_eq!(ctx.stats.bias_cycles, 4);
        assert_eq!(ctx.stats.corrected, 2);
        // decoding block 1 too would be wrong
        t.set(1, 0, true);
        let mut ctx = DecoderContext::new(&c);
        assert_ne!(
            decode_block_pipeline(&segs, &t, &c, &mut ctx).unwrap()[0][0],
            truth
        );
    }

    /// Ten thousand random columns: bias - observed recovers the true
    /// product of a complemented column.
    #[test]
    fn bias_identity_random_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000);
        for _ in 0..10_000 {
            let p = rng.gen_range(1..=8u32);
            let m = rng.gen_range(1..=32usize);
            let w: Vec<u32> = (0..m).map(|_| rng.gen_range(0..(1u32 << p))).collect();
            let x: Vec<i64> = (0..m).map(|_| rng.gen_range(0..=255)).collect();
            let truth: i64 = w.iter().zip(&x).map(|(&a, &b)| a as i64 * b).sum();
            let observed: i64 = w
                .iter()
                .zip(&x)
                .map(|(&a, &b)| encode_scheme1(a, p).unwrap() as i64 * b)
                .sum();
            let bias = compute_bias(x.iter().sum(), p);
            assert_eq!(decode_scheme1(observed, bias, true), truth);
        }
    }

    #[test]
    fn sliced_decode_then_combine_matches_whole_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (p_m, g) = (2u32, 4usize);
        for _ in 0..200 {
            let w: Vec<u32> = (0..6).map(|_| rng.gen_range(0..256)).collect();
            let x: Vec<i64> = (0..6).map(|_| rng.gen_range(0..=255)).collect();
            let sum: i64 = x.iter().sum();
            let truth: i64 = w.iter().zip(&x).map(|(&a, &b)| a as i64 * b).sum();
            let partials: Vec<i64> = (0..g)
                .map(|gi| {
                    let observed: i64 = w
                        .iter()
                        .zip(&x)
                        .map(|(&a, &b)| (3 - decompose(a, p_m, g).unwrap()[gi]) as i64 * b)
                        .sum();
                    decode_scheme1(observed, compute_bias(sum, p_m), true)
                })
                .collect();
            assert_eq!(combine(&partials, p_m), truth);
        }
    }

    proptest! {
        #[test]
        fn bias_is_linear(a in 0i64..1 << 40, b in 0i64..1 << 40, p in 1u32..=8) {
            prop_assert_eq!(compute_bias(a + b, p), compute_bias(a, p) + compute_bias(b, p));
        }

        #[test]
        fn wrong_key_on_pair_negates(observed in -1_000_000i64..1_000_000) {
            prop_assert_eq!(decode_scheme2(observed, true), -decode_scheme2(observed, false));
        }
    }
}
