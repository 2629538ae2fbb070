//! Key generation and the protected weight mapping.
//!
//! A layer's VMM matrix is cut into crossbar-sized tiles. Every tile has a
//! `k x N_w` transform matrix (one bit per row block and weight column,
//! shared by all `G` groups) and, when a small tile is padded up to the
//! crossbar size, row and column masks marking where the real weights sit.
//! A set transform bit stores that block of the column as 1's complements.

use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::crossbar::{decompose, program_tile, CrossbarConfig, CrossbarTile, DigitPlane, Scheme};
use crate::error::{Error, Result};
use crate::model::{Activation, LayerKind, LayerSpec, NetworkModel};
use crate::tensor::{value_range, QuantTensor};

/// 1's complement of an unsigned `bits`-wide value: `2^bits - 1 - w`.
pub fn encode_scheme1(w: u32, bits: u32) -> Result<u32> {
    if bits == 0 || bits > 16 {
        return Err(Error::InvalidPrecision(bits));
    }
    let top = (1u32 << bits) - 1;
    if w > top {
        return Err(Error::OutOfRange {
            value: w as i64,
            lo: 0,
            hi: top as i64,
        });
    }
    Ok(top - w)
}

/// 1's complement of a conductance level, `2^p_m - 1 - c`.
pub fn encode_scheme2(c: u8, device_bits: u32) -> Result<u8> {
    if device_bits == 0 || device_bits > 8 {
        return Err(Error::InvalidPrecision(device_bits));
    }
    let top = ((1u32 << device_bits) - 1) as u8;
    if c > top {
        return Err(Error::OutOfRange {
            value: c as i64,
            lo: 0,
            hi: top as i64,
        });
    }
    Ok(top - c)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} bits for a {rows}x{cols} matrix",
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        Self {
            rows,
            cols,
            bits: (0..rows * cols).map(|_| rng.gen()).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.cols + col] = v;
    }

    pub fn flip(&mut self, row: usize, col: usize) {
        let b = &mut self.bits[row * self.cols + col];
        *b = !*b;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Key material for one tile (one PE's worth of crossbar groups).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileKey {
    /// `k x N_w`: block `b`, weight column `j` stored complemented.
    pub transform: BitMatrix,
    /// Length M; set where a real weight row sits.
    pub row_mask: Vec<bool>,
    /// Length N_w; set where a real weight column sits.
    pub col_mask: Vec<bool>,
    pub padded: bool,
}

impl TileKey {
    /// Real-row positions in ascending order.
    pub fn real_rows(&self) -> Vec<usize> {
        positions(&self.row_mask)
    }

    pub fn real_cols(&self) -> Vec<usize> {
        positions(&self.col_mask)
    }

    /// Secret bits: the transform matrix, plus both masks when padded.
    pub fn secret_bits(&self) -> u64 {
        let t = (self.transform.rows() * self.transform.cols()) as u64;
        if self.padded {
            t + (self.row_mask.len() + self.col_mask.len()) as u64
        } else {
            t
        }
    }
}

fn positions(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerKeys {
    pub protected: bool,
    pub tiles: Vec<TileKey>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyStore {
    pub config: CrossbarConfig,
    pub seed: u64,
    pub layers: Vec<LayerKeys>,
}

impl KeyStore {
    /// Total secret key bits across all protected tiles.
    pub fn secret_bits(&self) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.protected)
            .flat_map(|l| &l.tiles)
            .map(TileKey::secret_bits)
            .sum()
    }

    /// Checks that every tile key has the geometry `mapped` needs. Key
    /// values are not checked; wrong values are how attacks are simulated.
    pub fn check_compatible(&self, mapped: &MappedModel) -> Result<()> {
        if self.config != mapped.config {
            return Err(Error::KeyMismatch("crossbar configuration differs".into()));
        }
        if self.layers.len() != mapped.layers.len() {
            return Err(Error::KeyMismatch(format!(
                "{} key layers for {} mapped layers",
                self.layers.len(),
                mapped.layers.len()
            )));
        }
        let c = &self.config;
        for (li, (keys, layer)) in self.layers.iter().zip(&mapped.layers).enumerate() {
            if keys.tiles.len() != layer.tiles.len() {
                return Err(Error::KeyMismatch(format!(
                    "layer {li}: {} tile keys for {} tiles",
                    keys.tiles.len(),
                    layer.tiles.len()
                )));
            }
            for (ti, (k, t)) in keys.tiles.iter().zip(&layer.tiles).enumerate() {
                let ok = k.transform.rows() == c.blocks()
                    && k.transform.cols() == c.weight_cols()
                    && k.row_mask.len() == c.rows
                    && k.col_mask.len() == c.weight_cols()
                    && k.row_mask.iter().filter(|&&b| b).count() == t.real_rows
                    && k.col_mask.iter().filter(|&&b| b).count() == t.real_cols;
                if !ok {
                    return Err(Error::KeyMismatch(format!(
                        "layer {li} tile {ti}: key geometry does not match the tile"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Which layers get keys, and whether small tiles are padded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Protection {
    pub layers: Vec<bool>,
    pub pad_small: bool,
}

impl Protection {
    pub fn all(n: usize) -> Self {
        Self {
            layers: vec![true; n],
            pad_small: true,
        }
    }

    pub fn none(n: usize) -> Self {
        Self {
            layers: vec![false; n],
            pad_small: true,
        }
    }

    pub fn only(n: usize, layer: usize) -> Self {
        let mut p = Self::none(n);
        p.layers[layer] = true;
        p
    }
}

/// How a `rows x cols` VMM matrix is cut into crossbar tiles. Tiles are
/// indexed row-major: `row_tile * col_tiles + col_tile`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
}

impl TileGrid {
    pub fn new(rows: usize, cols: usize, config: &CrossbarConfig) -> Self {
        Self {
            rows,
            cols,
            tile_rows: config.rows,
            tile_cols: config.weight_cols(),
        }
    }

    pub fn row_tiles(&self) -> usize {
        self.rows.div_ceil(self.tile_rows)
    }

    pub fn col_tiles(&self) -> usize {
        self.cols.div_ceil(self.tile_cols)
    }

    pub fn count(&self) -> usize {
        self.row_tiles() * self.col_tiles()
    }

    /// Logical row and column ranges covered by tile `t`.
    pub fn extent(&self, t: usize) -> (Range<usize>, Range<usize>) {
        let (rt, ct) = (t / self.col_tiles(), t % self.col_tiles());
        let r0 = rt * self.tile_rows;
        let c0 = ct * self.tile_cols;
        (
            r0..(r0 + self.tile_rows).min(self.rows),
            c0..(c0 + self.tile_cols).min(self.cols),
        )
    }
}

fn prefix_mask(len: usize, n: usize) -> Vec<bool> {
    (0..len).map(|i| i < n).collect()
}

fn random_mask(len: usize, n: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut mask = vec![false; len];
    for i in sample(rng, len, n) {
        mask[i] = true;
    }
    mask
}

/// Key material for one tile. `protected` draws a random transform matrix;
/// `padded` additionally scatters the real rows and columns.
pub fn tile_key(
    config: &CrossbarConfig,
    real_rows: usize,
    real_cols: usize,
    protected: bool,
    padded: bool,
    rng: &mut impl Rng,
) -> TileKey {
    let (k, wc) = (config.blocks(), config.weight_cols());
    let transform = if protected {
        BitMatrix::random(k, wc, rng)
    } else {
        BitMatrix::zeros(k, wc)
    };
    let (row_mask, col_mask) = if padded {
        (
            random_mask(config.rows, real_rows, rng),
            random_mask(wc, real_cols, rng),
        )
    } else {
        (
            prefix_mask(config.rows, real_rows),
            prefix_mask(wc, real_cols),
        )
    };
    TileKey {
        transform,
        row_mask,
        col_mask,
        padded,
    }
}

/// Draws keys for layers of the given VMM shapes `(rows, cols)`.
///
/// Deterministic in `seed`. Unprotected layers get all-zero transforms and
/// top-left placement, which is public information.
pub fn generate_keys(
    config: &CrossbarConfig,
    shapes: &[(usize, usize)],
    protection: &Protection,
    seed: u64,
) -> Result<KeyStore> {
    config.validate()?;
    if protection.layers.len() != shapes.len() {
        return Err(Error::shape(format!(
            "protection plan covers {} layers, model has {}",
            protection.layers.len(),
            shapes.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let layers = shapes
        .iter()
        .zip(&protection.layers)
        .map(|(&(rows, cols), &protected)| {
            let grid = TileGrid::new(rows, cols, config);
            let tiles = (0..grid.count())
                .map(|t| {
                    let (r, c) = grid.extent(t);
                    let small = r.len() < config.rows || c.len() < config.weight_cols();
                    let padded = protected && protection.pad_small && small;
                    tile_key(config, r.len(), c.len(), protected, padded, &mut rng)
                })
                .collect();
            LayerKeys { protected, tiles }
        })
        .collect();
    Ok(KeyStore {
        config: *config,
        seed,
        layers,
    })
}

fn check_masks(w_rows: usize, w_cols: usize, row_mask: &[bool], col_mask: &[bool]) -> Result<()> {
    for (mask, want) in [(row_mask, w_rows), (col_mask, w_cols)] {
        let got = mask.iter().filter(|&&b| b).count();
        if got != want {
            return Err(Error::MaskPopcount {
                expected: want,
                got,
            });
        }
    }
    Ok(())
}

fn scatter(w: &QuantTensor, out: &mut [i32], cols: usize, row_mask: &[bool], col_mask: &[bool]) {
    let rpos = positions(row_mask);
    let cpos = positions(col_mask);
    for (i, &r) in rpos.iter().enumerate() {
        for (j, &c) in cpos.iter().enumerate() {
            out[r * cols + c] = w.at2(i, j);
        }
    }
}

/// Enlarges `w` to `rows x cols`. Real entries go to the masked positions
/// in their original order; every other entry is drawn uniformly from
/// `[min(w), max(w)]`.
pub fn pad_matrix(
    w: &QuantTensor,
    rows: usize,
    cols: usize,
    rng: &mut impl Rng,
    row_mask: &[bool],
    col_mask: &[bool],
) -> Result<QuantTensor> {
    let (wr, wc) = w.dims2()?;
    if row_mask.len() != rows || col_mask.len() != cols {
        return Err(Error::shape(format!(
            "masks of length {}x{} for a {rows}x{cols} target",
            row_mask.len(),
            col_mask.len()
        )));
    }
    check_masks(wr, wc, row_mask, col_mask)?;
    let (lo, hi) = w.min_max().ok_or(Error::EmptyInput)?;
    let mut out: Vec<i32> = (0..rows * cols).map(|_| rng.gen_range(lo..=hi)).collect();
    scatter(w, &mut out, cols, row_mask, col_mask);
    QuantTensor::new(vec![rows, cols], out, w.bits(), w.signed())
}

/// Like [`pad_matrix`] but leaves unused positions at zero weight.
pub fn place_matrix(
    w: &QuantTensor,
    rows: usize,
    cols: usize,
    row_mask: &[bool],
    col_mask: &[bool],
) -> Result<QuantTensor> {
    let (wr, wc) = w.dims2()?;
    if row_mask.len() != rows || col_mask.len() != cols {
        return Err(Error::shape("mask length does not match target size"));
    }
    check_masks(wr, wc, row_mask, col_mask)?;
    let mut out = vec![0i32; rows * cols];
    scatter(w, &mut out, cols, row_mask, col_mask);
    QuantTensor::new(vec![rows, cols], out, w.bits(), w.signed())
}

/// Inverse of the scatter: gathers the masked rows and columns.
fn gather(values: &[i64], cols: usize, row_mask: &[bool], col_mask: &[bool]) -> Vec<i64> {
    let rpos = positions(row_mask);
    let cpos = positions(col_mask);
    let mut out = Vec::with_capacity(rpos.len() * cpos.len());
    for &r in &rpos {
        for &c in &cpos {
            out.push(values[r * cols + c]);
        }
    }
    out
}

/// Stored conductance levels for one physical `M x N_w` signed matrix.
///
/// Biased scheme: `u = w + 2^(p_w-1)` is sliced MSB-first into `G` levels,
/// and each level of a transformed (block, column) is complemented, which
/// is the same as complementing `u` as a whole. Differential scheme: the
/// magnitude goes to the positive or negative array and both members are
/// complemented.
pub fn program_protected(
    physical: &QuantTensor,
    transform: &BitMatrix,
    config: &CrossbarConfig,
) -> Result<Vec<CrossbarTile>> {
    let (rows, cols) = physical.dims2()?;
    if rows != config.rows || cols != config.weight_cols() {
        return Err(Error::shape(format!(
            "physical matrix {rows}x{cols} for a {}x{} crossbar",
            config.rows,
            config.weight_cols()
        )));
    }
    let g = config.groups;
    let p_m = config.device_bits;
    let max = config.device_max();
    let offset = bias_offset(config);
    let mut pos = vec![DigitPlane::zeros(rows, cols); g];
    let mut neg = config
        .is_pair()
        .then(|| vec![DigitPlane::zeros(rows, cols); g]);
    for r in 0..rows {
        let block = config.block_of_row(r);
        for c in 0..cols {
            let w = physical.at2(r, c) as i64;
            let flip = transform.get(block, c);
            let put = |planes: &mut [DigitPlane], mag: i64| -> Result<()> {
                for (gi, d) in decompose(mag as u32, p_m, g)?.into_iter().enumerate() {
                    planes[gi].set(r, c, if flip { max - d } else { d });
                }
                Ok(())
            };
            match neg.as_mut() {
                None => put(&mut pos, w + offset)?,
                Some(neg) => {
                    put(&mut pos, w.max(0))?;
                    put(neg, (-w).max(0))?;
                }
            }
        }
    }
    program_tile(&pos, neg.as_deref(), config)
}

/// Weight bias applied by the biased scheme, `2^(p_w-1)`; zero otherwise.
pub fn bias_offset(config: &CrossbarConfig) -> i64 {
    match config.scheme {
        Scheme::Biased => 1i64 << (config.weight_bits() - 1),
        Scheme::Differential => 0,
    }
}

/// Reads every physical weight back under `transform`, the inverse of
/// [`program_protected`]. Values are signed weights, row-major `M x N_w`.
pub fn read_protected(
    groups: &[CrossbarTile],
    transform: &BitMatrix,
    config: &CrossbarConfig,
) -> Vec<i64> {
    let (rows, wc) = (config.rows, config.weight_cols());
    let max = config.device_max();
    let offset = bias_offset(config);
    let mut out = vec![0i64; rows * wc];
    for r in 0..rows {
        let block = config.block_of_row(r);
        for c in 0..wc {
            let flip = transform.get(block, c);
            let level = |v: u8| if flip { (max - v) as i64 } else { v as i64 };
            let mut acc = 0i64;
            for tile in groups {
                let mut d = level(tile.cell(r, c));
                if let Some(n) = tile.cell_neg(r, c) {
                    d -= level(n);
                }
                acc = (acc << config.device_bits) + d;
            }
            out[r * wc + c] = acc - offset;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MappedTile {
    pub real_rows: usize,
    pub real_cols: usize,
    pub padded: bool,
    /// One crossbar (or pair) per group, group 0 most significant.
    pub groups: Vec<CrossbarTile>,
}

/// A layer as it sits in the accelerator. Everything here except the
/// cells' meaning is public structure.
#[derive(Clone, Debug, PartialEq)]
pub struct MappedLayer {
    pub kind: LayerKind,
    pub activation: Activation,
    pub shift: u32,
    pub protected: bool,
    /// Added to every weight before slicing (biased scheme only).
    pub bias_offset: i64,
    pub grid: TileGrid,
    pub tiles: Vec<MappedTile>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MappedModel {
    pub config: CrossbarConfig,
    pub input_shape: Vec<usize>,
    pub input_bits: u32,
    pub num_classes: usize,
    pub layers: Vec<MappedLayer>,
}

impl MappedModel {
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.grid.rows, l.grid.cols))
            .collect()
    }
}

pub fn model_shapes(model: &NetworkModel) -> Vec<(usize, usize)> {
    model.layers.iter().map(|l| l.kind.vmm_dims()).collect()
}

/// Places every layer of `model` onto crossbars under `keys`.
pub fn map_model(
    model: &NetworkModel,
    config: &CrossbarConfig,
    keys: &KeyStore,
) -> Result<MappedModel> {
    config.validate()?;
    model.validate()?;
    if keys.config != *config {
        return Err(Error::KeyMismatch(
            "key store was generated for another configuration".into(),
        ));
    }
    if keys.layers.len() != model.layers.len() {
        return Err(Error::KeyMismatch(format!(
            "{} key layers for {} model layers",
            keys.layers.len(),
            model.layers.len()
        )));
    }
    let layers = model
        .layers
        .iter()
        .zip(&keys.layers)
        .enumerate()
        .map(|(i, (layer, lk))| map_layer(layer, lk, config, keys.seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(MappedModel {
        config: *config,
        input_shape: model.input_shape.clone(),
        input_bits: model.input_bits,
        num_classes: model.num_classes,
        layers,
    })
}

fn map_layer(
    layer: &LayerSpec,
    keys: &LayerKeys,
    config: &CrossbarConfig,
    seed: u64,
    index: usize,
) -> Result<MappedLayer> {
    let matrix = layer.vmm_matrix();
    let (rows, cols) = matrix.dims2()?;
    let (lo, hi) = value_range(config.weight_bits(), true);
    if let Some((min, max)) = matrix.min_max() {
        for v in [min, max] {
            if (v as i64) < lo || (v as i64) > hi {
                return Err(Error::OutOfRange {
                    value: v as i64,
                    lo,
                    hi,
                });
            }
        }
    }
    let grid = TileGrid::new(rows, cols, config);
    if keys.tiles.len() != grid.count() {
        return Err(Error::KeyMismatch(format!(
            "layer {index}: {} tile keys for {} tiles",
            keys.tiles.len(),
            grid.count()
        )));
    }
    // padding values come from their own stream so key bits stay independent
    let mut pad_rng = ChaCha20Rng::seed_from_u64(seed);
    pad_rng.set_stream(1 + index as u64);
    let tiles = keys
        .tiles
        .iter()
        .enumerate()
        .map(|(t, key)| {
            let (r, c) = grid.extent(t);
            let block = sub_matrix(&matrix, r.clone(), c.clone())?;
            let (m, wc) = (config.rows, config.weight_cols());
            if key.transform.rows() != config.blocks() || key.transform.cols() != wc {
                return Err(Error::KeyMismatch(format!(
                    "layer {index} tile {t}: transform shape"
                )));
            }
            let physical = if key.padded {
                pad_matrix(&block, m, wc, &mut pad_rng, &key.row_mask, &key.col_mask)?
            } else {
                place_matrix(&block, m, wc, &key.row_mask, &key.col_mask)?
            };
            let physical = QuantTensor::new(
                vec![m, wc],
                physical.into_data(),
                config.weight_bits(),
                true,
            )?;
            Ok(MappedTile {
                real_rows: r.len(),
                real_cols: c.len(),
                padded: key.padded,
                groups: program_protected(&physical, &key.transform, config)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MappedLayer {
        kind: layer.kind,
        activation: layer.activation,
        shift: layer.shift,
        protected: keys.protected,
        bias_offset: bias_offset(config),
        grid,
        tiles,
    })
}

fn sub_matrix(m: &QuantTensor, rows: Range<usize>, cols: Range<usize>) -> Result<QuantTensor> {
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for r in rows.clone() {
        for c in cols.clone() {
            data.push(m.at2(r, c));
        }
    }
    QuantTensor::new(vec![rows.len(), cols.len()], data, m.bits(), m.signed())
}

/// Reads a layer's VMM matrix back out of its crossbars under `keys`.
///
/// With the keys used for mapping this returns the original weights. Under
/// other keys it returns what an adversary holding those keys would read;
/// differential reads can need one bit more than `p_w`, and the returned
/// precision widens accordingly.
pub fn demap_layer(
    layer: &MappedLayer,
    keys: &[TileKey],
    config: &CrossbarConfig,
) -> Result<QuantTensor> {
    let grid = layer.grid;
    if keys.len() != layer.tiles.len() {
        return Err(Error::KeyMismatch(format!(
            "{} tile keys for {} tiles",
            keys.len(),
            layer.tiles.len()
        )));
    }
    let mut out = vec![0i64; grid.rows * grid.cols];
    for (t, (tile, key)) in layer.tiles.iter().zip(keys).enumerate() {
        let (r, c) = grid.extent(t);
        check_masks(r.len(), c.len(), &key.row_mask, &key.col_mask)?;
        let values = read_protected(&tile.groups, &key.transform, config);
        let real = gather(&values, config.weight_cols(), &key.row_mask, &key.col_mask);
        for (i, row) in r.clone().enumerate() {
            for (j, col) in c.clone().enumerate() {
                out[row * grid.cols + col] = real[i * c.len() + j];
            }
        }
    }
    let pw = config.weight_bits();
    let (lo, hi) = value_range(pw, true);
    let bits = if out.iter().all(|&v| v >= lo && v <= hi) {
        pw
    } else {
        pw + 1
    };
    QuantTensor::new(
        vec![grid.rows, grid.cols],
        out.into_iter().map(|v| v as i32).collect(),
        bits,
        true,
    )
}

/// Rebuilds the whole network from its crossbars under `keys`.
pub fn demap_model(mapped: &MappedModel, keys: &KeyStore) -> Result<NetworkModel> {
    keys.check_compatible(mapped)?;
    let layers = mapped
        .layers
        .iter()
        .zip(&keys.layers)
        .map(|(layer, lk)| {
            let matrix = demap_layer(layer, &lk.tiles, &mapped.config)?;
            layer_from_matrix(layer, matrix)
        })
        .collect::<Result<Vec<_>>>()?;
    NetworkModel::new(
        mapped.input_shape.clone(),
        mapped.input_bits,
        mapped.num_classes,
        layers,
    )
}

/// A [`LayerSpec`] with the mapped layer's structure and the given VMM
/// matrix as weights.
pub fn layer_from_matrix(layer: &MappedLayer, matrix: QuantTensor) -> Result<LayerSpec> {
    let (rows, cols) = layer.kind.vmm_dims();
    let template = match layer.kind {
        LayerKind::Fc { .. } => LayerSpec {
            kind: layer.kind,
            weight: QuantTensor::zeros(vec![rows, cols], matrix.bits(), true)?,
            activation: layer.activation,
            shift: layer.shift,
        },
        LayerKind::Conv(g) => LayerSpec {
            kind: layer.kind,
            weight: QuantTensor::zeros(
                vec![g.out_channels, g.in_channels, g.kernel_h, g.kernel_w],
                matrix.bits(),
                true,
            )?,
            activation: layer.activation,
            shift: layer.shift,
        },
    };
    template.with_vmm_matrix(matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Activation;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(scheme: Scheme) -> CrossbarConfig {
        CrossbarConfig {
            rows: 16,
            cols: 9,
            device_bits: 2,
            groups: 4,
            wl_active: 4,
            block_rows: 8,
            adcs_per_group: 2,
            scheme,
            sum_column: scheme == Scheme::Biased,
        }
    }

    #[test]
    fn scheme1_encoding_examples() {
        assert_eq!(encode_scheme1(1, 2).unwrap(), 2);
        assert_eq!(encode_scheme1(0, 8).unwrap(), 255);
        assert!(encode_scheme1(4, 2).is_err());
        assert!(encode_scheme1(0, 0).is_err());
    }

    #[test]
    fn scheme2_encoding_examples() {
        assert_eq!(encode_scheme2(0, 1).unwrap(), 1);
        assert_eq!(encode_scheme2(1, 1).unwrap(), 0);
        assert!(encode_scheme2(2, 1).is_err());
        // Pair (1, 0) / (0, 2) at two bits complements to (2, 3) / (3, 1).
        let pos = [1u8, 0];
        let neg = [0u8, 2];
        let cp: Vec<u8> = pos.iter().map(|&c| encode_scheme2(c, 2).unwrap()).collect();
        let cn: Vec<u8> = neg.iter().map(|&c| encode_scheme2(c, 2).unwrap()).collect();
        assert_eq!(cp, vec![2, 3]);
        assert_eq!(cn, vec![3, 1]);
    }

    #[test]
    fn encodings_are_involutions_exhaustively() {
        for p in 1..=8 {
            for w in 0..(1u32 << p) {
                assert_eq!(encode_scheme1(encode_scheme1(w, p).unwrap(), p).unwrap(), w);
                let c = w as u8;
                assert_eq!(encode_scheme2(encode_scheme2(c, p).unwrap(), p).unwrap(), c);
            }
        }
    }

    #[test]
    fn whole_word_complement_equals_per_slice_complement() {
        for (p_m, g) in [(1u32, 8usize), (2, 4), (4, 2)] {
            for u in 0..256u32 {
                let whole = decompose(encode_scheme1(u, 8).unwrap(), p_m, g).unwrap();
                let sliced: Vec<u8> = decompose(u, p_m, g)
                    .unwrap()
                    .into_iter()
                    .map(|d| encode_scheme2(d, p_m).unwrap())
                    .collect();
                assert_eq!(whole, sliced);
            }
        }
    }

    #[test]
    fn key_counts_for_128_geometry() {
        let mut c = CrossbarConfig::evaluation(Scheme::Biased);
        c.rows = 128;
        c.cols = 128;
        c.wl_active = 8;
        c.block_rows = 8;
        let keys = generate_keys(&c, &[(128, 127)], &Protection::all(1), 1).unwrap();
        assert_eq!(keys.layers[0].tiles[0].transform.bits().len(), 16 * 127);
        assert_eq!(keys.secret_bits(), 2032);
        c.scheme = Scheme::Differential;
        c.sum_column = false;
        let keys = generate_keys(&c, &[(128, 128)], &Protection::all(1), 1).unwrap();
        assert_eq!(keys.secret_bits(), 2048);
    }

    #[test]
    fn single_block_gives_one_bit_per_column() {
        let mut c = small_config(Scheme::Differential);
        c.block_rows = c.rows;
        let keys = generate_keys(&c, &[(16, 9)], &Protection::all(1), 5).unwrap();
        assert_eq!(keys.layers[0].tiles[0].transform.rows(), 1);
        assert_eq!(keys.layers[0].tiles[0].transform.cols(), 9);
    }

    #[test]
    fn keygen_deterministic_and_geometry_checked() {
        let c = small_config(Scheme::Biased);
        let a = generate_keys(&c, &[(20, 10)], &Protection::all(1), 9).unwrap();
        let b = generate_keys(&c, &[(20, 10)], &Protection::all(1), 9).unwrap();
        assert_eq!(a, b);
        let d = generate_keys(&c, &[(20, 10)], &Protection::all(1), 10).unwrap();
        assert_ne!(a, d);
        let mut bad = c;
        bad.block_rows = 6;
        assert!(matches!(
            generate_keys(&bad, &[(20, 10)], &Protection::all(1), 9),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn pad_identity_when_full_size() {
        let w = QuantTensor::new(vec![2, 2], vec![1, -2, 3, -4], 8, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = pad_matrix(&w, 2, 2, &mut rng, &[true, true], &[true, true]).unwrap();
        assert_eq!(p, w);
    }

    #[test]
    fn pad_places_real_values_in_order() {
        let w = QuantTensor::new(vec![2, 2], vec![10, 20, 30, 40], 8, true).unwrap();
        let rm = [true, false, true, false];
        let cm = [false, true, false, true];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = pad_matrix(&w, 4, 4, &mut rng, &rm, &cm).unwrap();
        let mut seen = Vec::new();
        for (r, &real_row) in rm.iter().enumerate() {
            for (c, &real_col) in cm.iter().enumerate() {
                let v = p.at2(r, c);
                assert!((10..=40).contains(&v));
                if real_row && real_col {
                    seen.push(v);
                }
            }
        }
        assert_eq!(seen, vec![10, 20, 30, 40]);
    }

    #[test]
    fn pad_constant_matrix_and_mask_errors() {
        let w = QuantTensor::new(vec![1, 2], vec![-7, -7], 8, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = pad_matrix(
            &w,
            3,
            3,
            &mut rng,
            &[false, true, false],
            &[true, false, true],
        )
        .unwrap();
        assert!(p.data().iter().all(|&v| v == -7));
        assert!(matches!(
            pad_matrix(
                &w,
                3,
                3,
                &mut rng,
                &[true, true, false],
                &[true, false, true]
            ),
            Err(Error::MaskPopcount {
                expected: 1,
                got: 2
            })
        ));
    }

    fn fc_model(rows: usize, cols: usize, seed: u64, bits: u32) -> NetworkModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = value_range(bits, true);
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(lo..=hi) as i32)
            .collect();
        let w = QuantTensor::new(vec![rows, cols], data, bits, true).unwrap();
        let layer = LayerSpec::fc(w, Activation::None, 0).unwrap();
        NetworkModel::new(vec![rows], 8, cols, vec![layer]).unwrap()
    }

    #[test]
    fn zero_keys_match_unprotected_mapping() {
        let c = small_config(Scheme::Biased);
        let model = fc_model(20, 10, 4, 8);
        let plain = generate_keys(&c, &[(20, 10)], &Protection::none(1), 3).unwrap();
        let mut zero = generate_keys(&c, &[(20, 10)], &Protection::all(1), 3).unwrap();
        for lk in &mut zero.layers {
            for t in &mut lk.tiles {
                let (k, n) = (t.transform.rows(), t.transform.cols());
                t.transform = BitMatrix::zeros(k, n);
                t.row_mask = prefix_mask(t.row_mask.len(), t.real_rows().len());
                t.col_mask = prefix_mask(t.col_mask.len(), t.real_cols().len());
                t.padded = false;
            }
        }
        let a = map_model(&model, &c, &plain).unwrap();
        let b = map_model(&model, &c, &zero).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.tiles, lb.tiles);
        }
    }

    #[test]
    fn transformed_column_stores_complements() {
        let c = small_config(Scheme::Biased);
        let model = fc_model(16, 8, 6, 8);
        let plain = generate_keys(&c, &[(16, 8)], &Protection::none(1), 1).unwrap();
        let mut keyed = plain.clone();
        keyed.layers[0].tiles[0].transform.set(0, 3, true);
        let a = map_model(&model, &c, &plain).unwrap();
        let b = map_model(&model, &c, &keyed).unwrap();
        for (ga, gb) in a.layers[0].tiles[0]
            .groups
            .iter()
            .zip(&b.layers[0].tiles[0].groups)
        {
            for r in 0..16 {
                for col in 0..c.cols {
                    let expect = if col == 3 && r < 8 {
                        encode_scheme2(ga.cell(r, col), c.device_bits).unwrap()
                    } else {
                        ga.cell(r, col)
                    };
                    assert_eq!(gb.cell(r, col), expect, "r={r} col={col}");
                }
            }
        }
        // Whole-weight view of the same column: complementing the biased value.
        let off = bias_offset(&c);
        let read_plain = read_protected(&a.layers[0].tiles[0].groups, &BitMatrix::zeros(2, 8), &c);
        let read_raw = read_protected(&b.layers[0].tiles[0].groups, &BitMatrix::zeros(2, 8), &c);
        for r in 0..8 {
            let u = (read_plain[r * 8 + 3] + off) as u32;
            assert_eq!(
                read_raw[r * 8 + 3] + off,
                encode_scheme1(u, 8).unwrap() as i64
            );
        }
    }

    #[test]
    fn small_matrix_padded_to_crossbar() {
        let mut c = CrossbarConfig::evaluation(Scheme::Differential);
        c.rows = 128;
        c.cols = 128;
        c.wl_active = 8;
        c.block_rows = 8;
        let model = fc_model(32, 32, 7, 8);
        let keys = generate_keys(&c, &[(32, 32)], &Protection::all(1), 11).unwrap();
        let key = &keys.layers[0].tiles[0];
        assert!(key.padded);
        assert_eq!(key.row_mask.len(), 128);
        let mapped = map_model(&model, &c, &keys).unwrap();
        assert_eq!(mapped.layers[0].tiles[0].groups[0].rows(), 128);
        assert_eq!(mapped.layers[0].tiles[0].groups[0].cols(), 128);
        let back = demap_model(&mapped, &keys).unwrap();
        assert_eq!(back.layers[0].weight, model.layers[0].weight);
    }

    #[test]
    fn key_complement_symmetry() {
        let c = small_config(Scheme::Differential);
        let model = fc_model(16, 9, 12, 8);
        let keys = generate_keys(&c, &[(16, 9)], &Protection::all(1), 2).unwrap();
        let mut flipped = keys.clone();
        flipped.layers[0].tiles[0].transform.flip(1, 4);
        let a = map_model(&model, &c, &keys).unwrap();
        let b = map_model(&model, &c, &flipped).unwrap();
        let max = c.device_max();
        for (ga, gb) in a.layers[0].tiles[0]
            .groups
            .iter()
            .zip(&b.layers[0].tiles[0].groups)
        {
            let mut pos = ga.pos_cells().to_vec();
            let mut neg = ga.neg_cells().unwrap().to_vec();
            for r in 8..16 {
                pos[r * c.cols + 4] = max - pos[r * c.cols + 4];
                neg[r * c.cols + 4] = max - neg[r * c.cols + 4];
            }
            assert_eq!(gb.pos_cells(), pos.as_slice());
            assert_eq!(gb.neg_cells().unwrap(), neg.as_slice());
        }
    }

    #[test]
    fn out_of_range_weights_rejected() {
        let c = small_config(Scheme::Biased);
        let w = QuantTensor::new(vec![2, 1], vec![3, 200], 9, true).unwrap();
        let layer = LayerSpec::fc(w, Activation::None, 0).unwrap();
        let model = NetworkModel::new(vec![2], 8, 1, vec![layer]).unwrap();
        let keys = generate_keys(&c, &[(2, 1)], &Protection::all(1), 1).unwrap();
        assert!(matches!(
            map_model(&model, &c, &keys),
            Err(Error::OutOfRange { value: 200, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn map_demap_round_trip(
            seed in any::<u64>(),
            rows in 1usize..40,
            cols in 1usize..20,
            scheme in prop::sample::select(vec![Scheme::Biased, Scheme::Differential]),
            pad in any::<bool>(),
        ) {
            let c = small_config(scheme);
            let model = fc_model(rows, cols, seed, 8);
            let mut plan = Protection::all(1);
            plan.pad_small = pad;
            let keys = generate_keys(&c, &[(rows, cols)], &plan, seed ^ 0x5a5a).unwrap();
            let mapped = map_model(&model, &c, &keys).unwrap();
            let back = demap_model(&mapped, &keys).unwrap();
            prop_assert_eq!(&back.layers[0].weight, &model.layers[0].weight);
        }

        #[test]
        fn masks_preserve_order_and_count(seed in any::<u64>(), rows in 1usize..16, cols in 1usize..8) {
            let c = small_config(Scheme::Biased);
            let keys = generate_keys(&c, &[(rows, cols)], &Protection::all(1), seed).unwrap();
            let k = &keys.layers[0].tiles[0];
            prop_assert_eq!(k.real_rows().len(), rows);
            prop_assert_eq!(k.real_cols().len(), cols);
            prop_assert!(k.real_rows().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
