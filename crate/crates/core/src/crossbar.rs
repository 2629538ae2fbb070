//! Processing-element model: `G` crossbar groups, each one crossbar
//! (biased mapping) or a positive/negative pair (differential mapping),
//! holding one `p_m`-bit slice of every weight.
//!
//! Conductances are integer levels and column currents are exact integer
//! dot products. ADCs are ideal over one activated word-line segment.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weight-to-conductance mapping scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scheme {
    /// Scheme 1: weights shifted non-negative, bias removed after the VMM.
    Biased,
    /// Scheme 2: a signed weight is the difference of a conductance pair.
    Differential,
}

impl Scheme {
    pub fn number(self) -> u8 {
        match self {
            Scheme::Biased => 1,
            Scheme::Differential => 2,
        }
    }
}

impl TryFrom<u8> for Scheme {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Scheme::Biased),
            2 => Ok(Scheme::Differential),
            other => Err(format!("mapping scheme must be 1 or 2, got {other}")),
        }
    }
}

impl From<Scheme> for u8 {
    fn from(s: Scheme) -> u8 {
        s.number()
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossbarConfig {
    /// Word lines (M).
    pub rows: usize,
    /// Bit lines (N), including the sum-of-inputs column when present.
    pub cols: usize,
    /// Bits per memristor level (p_m).
    pub device_bits: u32,
    /// Crossbar groups per PE (G).
    pub groups: usize,
    /// Word lines activated per ADC conversion.
    pub wl_active: usize,
    /// Rows per protection block (x).
    pub block_rows: usize,
    pub adcs_per_group: usize,
    pub scheme: Scheme,
    /// Reserve the last column as an all-ones sum-of-inputs column.
    pub sum_column: bool,
}

impl CrossbarConfig {
    /// The evaluation setup: 256x256 crossbars, 8 one-bit groups, 16 ADCs,
    /// 16 word lines per activation, blocks of 32 rows. The biased scheme
    /// keeps its last column for the input sum.
    pub fn evaluation(scheme: Scheme) -> Self {
        Self {
            rows: 256,
            cols: 256,
            device_bits: 1,
            groups: 8,
            wl_active: 16,
            block_rows: 32,
            adcs_per_group: 16,
            scheme,
            sum_column: scheme == Scheme::Biased,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::geometry(
                "crossbar must have at least one row and column",
            ));
        }
        if self.cols <= usize::from(self.sum_column) {
            return Err(Error::geometry(
                "no weight columns left beside the sum column",
            ));
        }
        if !(1..=8).contains(&self.device_bits) {
            return Err(Error::geometry(format!(
                "device precision {} outside 1..=8 bits",
                self.device_bits
            )));
        }
        if self.groups == 0 {
            return Err(Error::geometry("at least one crossbar group is required"));
        }
        if self.weight_bits() > crate::tensor::MAX_BITS {
            return Err(Error::geometry(format!(
                "weight precision p_m*G = {} exceeds 16 bits",
                self.weight_bits()
            )));
        }
        if self.wl_active == 0 || self.block_rows == 0 {
            return Err(Error::geometry(
                "activation width and block height must be non-zero",
            ));
        }
        if !self.block_rows.is_multiple_of(self.wl_active) {
            return Err(Error::geometry(format!(
                "block height {} is not a multiple of the {} activated word lines",
                self.block_rows, self.wl_active
            )));
        }
        if !self.rows.is_multiple_of(self.block_rows) {
            return Err(Error::geometry(format!(
                "block height {} does not divide {} rows",
                self.block_rows, self.rows
            )));
        }
        if self.adcs_per_group == 0 {
            return Err(Error::geometry("each group needs at least one ADC"));
        }
        Ok(())
    }

    /// p_w = p_m * G.
    pub fn weight_bits(&self) -> u32 {
        self.device_bits * self.groups as u32
    }

    /// k = M / x.
    pub fn blocks(&self) -> usize {
        self.rows / self.block_rows
    }

    pub fn weight_cols(&self) -> usize {
        self.cols - usize::from(self.sum_column)
    }

    pub fn sum_col_index(&self) -> Option<usize> {
        self.sum_column.then(|| self.cols - 1)
    }

    pub fn segments(&self) -> usize {
        self.rows / self.wl_active
    }

    pub fn block_of_row(&self, row: usize) -> usize {
        row / self.block_rows
    }

    pub fn device_max(&self) -> u8 {
        ((1u32 << self.device_bits) - 1) as u8
    }

    pub fn is_pair(&self) -> bool {
        self.scheme == Scheme::Differential
    }
}

/// One group's slice of the weight matrix: device levels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DigitPlane {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl DigitPlane {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.data[row * self.cols + col] = v;
    }
}

/// A programmed crossbar, or crossbar pair for the differential scheme.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossbarTile {
    config: CrossbarConfig,
    pos: Vec<u8>,
    neg: Option<Vec<u8>>,
}

impl CrossbarTile {
    /// Validates levels against the device range, the pair layout against
    /// the scheme and the sum column against its all-ones contract.
    pub fn from_cells(config: CrossbarConfig, pos: Vec<u8>, neg: Option<Vec<u8>>) -> Result<Self> {
        config.validate()?;
        let n = config.rows * config.cols;
        if pos.len() != n || neg.as_ref().is_some_and(|v| v.len() != n) {
            return Err(Error::shape(format!(
                "tile needs {n} cells per array for {}x{}",
                config.rows, config.cols
            )));
        }
        if neg.is_some() != config.is_pair() {
            return Err(Error::shape(format!(
                "scheme {} expects {} array(s)",
                config.scheme,
                if config.is_pair() { 2 } else { 1 }
            )));
        }
        let max = config.device_max();
        for &c in pos.iter().chain(neg.iter().flatten()) {
            if c > max {
                return Err(Error::OutOfRange {
                    value: c as i64,
                    lo: 0,
                    hi: max as i64,
                });
            }
        }
        let tile = Self { config, pos, neg };
        if let Some(sc) = config.sum_col_index() {
            let ok = (0..config.rows).all(|r| {
                tile.pos[r * config.cols + sc] == 1
                    && tile
                        .neg
                        .as_ref()
                        .is_none_or(|neg| neg[r * config.cols + sc] == 0)
            });
            if !ok {
                return Err(Error::Format("sum-of-inputs column is not all ones".into()));
            }
        }
        Ok(tile)
    }

    pub fn config(&self) -> &CrossbarConfig {
        &self.config
    }

    pub fn rows(&self) -> usize {
        self.config.rows
    }

    pub fn cols(&self) -> usize {
        self.config.cols
    }

    pub fn pos_cells(&self) -> &[u8] {
        &self.pos
    }

    pub fn neg_cells(&self) -> Option<&[u8]> {
        self.neg.as_deref()
    }

    pub fn cell(&self, row: usize, col: usize) -> u8 {
        self.pos[row * self.config.cols + col]
    }

    pub fn cell_neg(&self, row: usize, col: usize) -> Option<u8> {
        self.neg.as_ref().map(|n| n[row * self.config.cols + col])
    }

    /// Adds this segment's column currents into `acc` (length = cols).
    /// Rows with zero input are skipped; they contribute nothing.
    pub(crate) fn accumulate_segment(&self, x_seg: &[i32], row0: usize, acc: &mut [i64]) {
        let cols = self.config.cols;
        for (i, &xi) in x_seg.iter().enumerate() {
            if xi == 0 {
                continue;
            }
            let r = row0 + i;
            let v = xi as i64;
            accumulate_row(&self.pos[r * cols..(r + 1) * cols], v, acc);
            if let Some(neg) = &self.neg {
                // negative-polarity word line: the same input with its sign flipped
                accumulate_row(&neg[r * cols..(r + 1) * cols], -v, acc);
            }
        }
    }
}

#[inline]
fn accumulate_row(cells: &[u8], x: i64, acc: &mut [i64]) {
    for (a, &c) in acc.iter_mut().zip(cells) {
        *a += c as i64 * x;
    }
}

/// Splits an unsigned `p_m * G`-bit value into `G` device levels,
/// most significant first.
pub fn decompose(value: u32, device_bits: u32, groups: usize) -> Result<Vec<u8>> {
    let total = device_bits * groups as u32;
    if total < 32 && value >> total != 0 {
        return Err(Error::OutOfRange {
            value: value as i64,
            lo: 0,
            hi: (1i64 << total) - 1,
        });
    }
    let mask = (1u32 << device_bits) - 1;
    Ok((0..groups)
        .map(|g| {
            let shift = device_bits * (groups - 1 - g) as u32;
            ((value >> shift) & mask) as u8
        })
        .collect())
}

/// Writes a PE's worth of crossbars: group `g` receives plane `g`.
///
/// `neg` must be given exactly for the differential scheme. Planes cover the
/// weight columns; the sum column, if configured, is filled with ones.
pub fn program_tile(
    pos: &[DigitPlane],
    neg: Option<&[DigitPlane]>,
    config: &CrossbarConfig,
) -> Result<Vec<CrossbarTile>> {
    config.validate()?;
    if pos.len() != config.groups {
        return Err(Error::Arity {
            expected: config.groups,
            got: pos.len(),
        });
    }
    if let Some(neg) = neg {
        if neg.len() != config.groups {
            return Err(Error::Arity {
                expected: config.groups,
                got: neg.len(),
            });
        }
    }
    let wc = config.weight_cols();
    let expand = |plane: &DigitPlane, ones: bool| -> Result<Vec<u8>> {
        if plane.rows != config.rows || plane.cols != wc {
            return Err(Error::shape(format!(
                "slice is {}x{}, crossbar expects {}x{wc}",
                plane.rows, plane.cols, config.rows
            )));
        }
        let mut cells = vec![0u8; config.rows * config.cols];
        for r in 0..config.rows {
            cells[r * config.cols..r * config.cols + wc]
                .copy_from_slice(&plane.data[r * wc..(r + 1) * wc]);
            if let Some(sc) = config.sum_col_index() {
                cells[r * config.cols + sc] = u8::from(ones);
            }
        }
        Ok(cells)
    };
    (0..config.groups)
        .map(|g| {
            let p = expand(&pos[g], true)?;
            let n = neg.map(|n| expand(&n[g], false)).transpose()?;
            CrossbarTile::from_cells(*config, p, n)
        })
        .collect()
}

/// Column currents for the word lines in `rows`, driven by `x_seg`.
///
/// Returns one value per physical column. Pairs return
/// `pos . x - neg . x`, the analog sum of both polarities.
pub fn xbar_vmm_segment(
    tile: &CrossbarTile,
    x_seg: &[i32],
    rows: Range<usize>,
) -> Result<Vec<i64>> {
    let cfg = tile.config();
    if rows.start > rows.end || rows.end > cfg.rows {
        return Err(Error::shape(format!(
            "row range {rows:?} outside {} word lines",
            cfg.rows
        )));
    }
    if rows.len() > cfg.wl_active {
        return Err(Error::shape(format!(
            "segment of {} rows exceeds {} activated word lines",
            rows.len(),
            cfg.wl_active
        )));
    }
    if x_seg.len() != rows.len() {
        return Err(Error::shape(format!(
            "{} inputs for {} activated rows",
            x_seg.len(),
            rows.len()
        )));
    }
    let mut acc = vec![0i64; cfg.cols];
    tile.accumulate_segment(x_seg, rows.start, &mut acc);
    Ok(acc)
}

/// Recombines per-group partial results with radix `2^p_m`, group 0 most
/// significant.
pub fn shift_add_combine(partials: &[i64], config: &CrossbarConfig) -> Result<i64> {
    if partials.len() != config.groups {
        return Err(Error::Arity {
            expected: config.groups,
            got: partials.len(),
        });
    }
    Ok(combine(partials, config.device_bits))
}

pub(crate) fn combine(partials: &[i64], device_bits: u32) -> i64 {
    partials
        .iter()
        .fold(0i64, |acc, &p| (acc << device_bits) + p)
}

/// Input sum over a segment, computed as a VMM against an all-ones column.
pub fn sum_of_inputs(x_seg: &[i32]) -> i64 {
    let ones = vec![1u8; x_seg.len()];
    let mut acc = [0i64];
    for (&c, &x) in ones.iter().zip(x_seg) {
        accumulate_row(std::slice::from_ref(&c), x as i64, &mut acc);
    }
    acc[0]
}
