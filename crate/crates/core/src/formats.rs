//! On-disk formats. Everything is JSON; bulk integer data is base64.
//!
//! - tensor: `{"shape", "bits", "signed", "data"}`, little-endian elements
//!   of 1, 2 or 4 bytes for up to 8, 16 or 32 bits (two's complement when
//!   signed)
//! - model: `{"input_shape", "input_bits", "num_classes", "layers": [{"kind":
//!   "fc"|"conv", "weight": <tensor file>, "activation", "shift",
//!   "stride"?, "padding"?}]}`, tensor paths relative to the model file
//! - tile dump: `{"config", "cells", "cells_neg"}`, one file per crossbar
//!   group, cells row-major one byte each
//! - key file: `{"config", "seed", "layers": [{"protected", "tiles":
//!   [{"transform", "row_mask", "col_mask", "padded"}]}]}`, bit matrices as
//!   base64 bitsets, bit `i` in byte `i / 8` at position `i % 8`
//! - mapped model: a directory with `manifest.json` and the tile dumps

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::crossbar::{CrossbarConfig, CrossbarTile};
use crate::error::{Error, Result};
use crate::model::{Activation, LayerKind, LayerSpec, NetworkModel};
use crate::secure_map::{
    BitMatrix, KeyStore, LayerKeys, MappedLayer, MappedModel, MappedTile, TileGrid, TileKey,
};
use crate::tensor::{ConvGeometry, QuantTensor};

/// Writes through a sibling temp file and a rename, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        name.to_string_lossy(),
        std::process::id()
    ));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn decode_b64(s: &str) -> Result<Vec<u8>> {
    B64.decode(s)
        .map_err(|e| Error::Format(format!("bad base64: {e}")))
}

// ---- tensors ----

#[derive(Serialize, Deserialize)]
struct TensorFile {
    shape: Vec<usize>,
    bits: u32,
    signed: bool,
    data: String,
}

fn element_width(bits: u32) -> usize {
    match bits {
        0..=8 => 1,
        9..=16 => 2,
        _ => 4,
    }
}

pub fn tensor_to_json(t: &QuantTensor) -> String {
    let width = element_width(t.bits());
    let mut bytes = Vec::with_capacity(t.len() * width);
    for &v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes()[..width]);
    }
    let file = TensorFile {
        shape: t.shape().to_vec(),
        bits: t.bits(),
        signed: t.signed(),
        data: B64.encode(bytes),
    };
    serde_json::to_string(&file).expect("plain struct")
}

pub fn tensor_from_json(text: &str) -> Result<QuantTensor> {
    let file: TensorFile = serde_json::from_str(text)?;
    let width = element_width(file.bits);
    let bytes = decode_b64(&file.data)?;
    if bytes.len() % width != 0 {
        return Err(Error::Format(format!(
            "{} data bytes for {width}-byte elements",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(width)
        .map(|c| match (width, file.signed) {
            (1, true) => c[0] as i8 as i32,
            (1, false) => c[0] as i32,
            (2, true) => i16::from_le_bytes([c[0], c[1]]) as i32,
            (2, false) => u16::from_le_bytes([c[0], c[1]]) as i32,
            _ => i32::from_le_bytes([c[0], c[1], c[2], c[3]]),
        })
        .collect();
    QuantTensor::new(file.shape, data, file.bits, file.signed)
}

pub fn load_tensor(path: &Path) -> Result<QuantTensor> {
    tensor_from_json(&fs::read_to_string(path)?)
}

pub fn save_tensor(path: &Path, t: &QuantTensor) -> Result<()> {
    write_atomic(path, tensor_to_json(t).as_bytes())
}

// ---- models ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum KindTag {
    Fc,
    Conv,
}

#[derive(Serialize, Deserialize)]
struct ModelLayerEntry {
    kind: KindTag,
    weight: String,
    activation: Activation,
    shift: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    input_shape: Vec<usize>,
    input_bits: u32,
    num_classes: usize,
    layers: Vec<ModelLayerEntry>,
}

/// Loads a model and its weight tensors. A conv layer's input is the model
/// input (`[C, H, W]`) or the previous conv's `[oc, oh, ow]` output.
pub fn load_model(path: &Path) -> Result<NetworkModel> {
    let file: ModelFile = read_json(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut chw: Option<[usize; 3]> = match file.input_shape[..] {
        [c, h, w] => Some([c, h, w]),
        _ => None,
    };
    let mut layers = Vec::with_capacity(file.layers.len());
    for (i, entry) in file.layers.iter().enumerate() {
        let weight = load_tensor(&dir.join(&entry.weight))?;
        let layer = match entry.kind {
            KindTag::Fc => {
                chw = None;
                LayerSpec::fc(weight, entry.activation, entry.shift)?
            }
            KindTag::Conv => {
                let input = chw.ok_or_else(|| {
                    Error::shape(format!("conv layer {i} needs a [C, H, W] input"))
                })?;
                let l = LayerSpec::conv(
                    weight,
                    input,
                    entry.stride.unwrap_or(1),
                    entry.padding.unwrap_or(0),
                    entry.activation,
                    entry.shift,
                )?;
                if let LayerKind::Conv(g) = l.kind {
                    chw = Some([g.out_channels, g.out_height(), g.out_width()]);
                }
                l
            }
        };
        layers.push(layer);
    }
    NetworkModel::new(file.input_shape, file.input_bits, file.num_classes, layers)
}

/// Writes `model.json` plus one `layer{i}.json` tensor per layer into `dir`.
pub fn save_model(dir: &Path, model: &NetworkModel) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let name = format!("layer{i}.json");
        save_tensor(&dir.join(&name), &layer.weight)?;
        let (kind, stride, padding) = match layer.kind {
            LayerKind::Fc { .. } => (KindTag::Fc, None, None),
            LayerKind::Conv(g) => (KindTag::Conv, Some(g.stride), Some(g.padding)),
        };
        entries.push(ModelLayerEntry {
            kind,
            weight: name,
            activation: layer.activation,
            shift: layer.shift,
            stride,
            padding,
        });
    }
    let file = ModelFile {
        input_shape: model.input_shape.clone(),
        input_bits: model.input_bits,
        num_classes: model.num_classes,
        layers: entries,
    };
    let path = dir.join("model.json");
    write_json(&path, &file)?;
    Ok(path)
}

// ---- tile dumps ----

#[derive(Serialize, Deserialize)]
struct TileDump {
    config: CrossbarConfig,
    cells: String,
    cells_neg: Option<String>,
}

pub fn tile_to_json(tile: &CrossbarTile) -> String {
    let dump = TileDump {
        config: *tile.config(),
        cells: B64.encode(tile.pos_cells()),
        cells_neg: tile.neg_cells().map(|c| B64.encode(c)),
    };
    serde_json::to_string(&dump).expect("plain struct")
}

pub fn tile_from_json(text: &str) -> Result<CrossbarTile> {
    let dump: TileDump = serde_json::from_str(text)?;
    let neg = dump.cells_neg.as_deref().map(decode_b64).transpose()?;
    CrossbarTile::from_cells(dump.config, decode_b64(&dump.cells)?, neg)
}

// ---- keys ----

fn pack_bits(bits: &[bool]) -> String {
    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        bytes[i / 8] |= 1 << (i % 8);
    }
    B64.encode(bytes)
}

fn unpack_bits(s: &str, len: usize) -> Result<Vec<bool>> {
    let bytes = decode_b64(s)?;
    if bytes.len() != len.div_ceil(8) {
        return Err(Error::Format(format!(
            "{} bytes for a {len}-bit field",
            bytes.len()
        )));
    }
    Ok((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

#[derive(Serialize, Deserialize)]
struct TileKeyEntry {
    transform: String,
    row_mask: String,
    col_mask: String,
    padded: bool,
}

#[derive(Serialize, Deserialize)]
struct LayerKeyEntry {
    protected: bool,
    tiles: Vec<TileKeyEntry>,
}

#[derive(Serialize, Deserialize)]
struct KeyFile {
    config: CrossbarConfig,
    seed: u64,
    layers: Vec<LayerKeyEntry>,
}

pub fn keys_to_json(keys: &KeyStore) -> String {
    let file = KeyFile {
        config: keys.config,
        seed: keys.seed,
        layers: keys
            .layers
            .iter()
            .map(|l| LayerKeyEntry {
                protected: l.protected,
                tiles: l
                    .tiles
                    .iter()
                    .map(|t| TileKeyEntry {
                        transform: pack_bits(t.transform.bits()),
                        row_mask: pack_bits(&t.row_mask),
                        col_mask: pack_bits(&t.col_mask),
                        padded: t.padded,
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("plain struct") + "\n"
}

pub fn keys_from_json(text: &str) -> Result<KeyStore> {
    let file: KeyFile = serde_json::from_str(text)?;
    let c = file.config;
    c.validate()?;
    let (k, wc) = (c.blocks(), c.weight_cols());
    let layers = file
        .layers
        .into_iter()
        .map(|l| {
            let tiles = l
                .tiles
                .into_iter()
                .map(|t| {
                    Ok(TileKey {
                        transform: BitMatrix::from_bits(k, wc, unpack_bits(&t.transform, k * wc)?)?,
                        row_mask: unpack_bits(&t.row_mask, c.rows)?,
                        col_mask: unpack_bits(&t.col_mask, wc)?,
                        padded: t.padded,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LayerKeys {
                protected: l.protected,
                tiles,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KeyStore {
        config: c,
        seed: file.seed,
        layers,
    })
}

pub fn load_keys(path: &Path) -> Result<KeyStore> {
    keys_from_json(&fs::read_to_string(path)?)
}

pub fn save_keys(path: &Path, keys: &KeyStore) -> Result<()> {
    write_atomic(path, keys_to_json(keys).as_bytes())
}

// ---- mapped models ----

#[derive(Serialize, Deserialize)]
struct ManifestTile {
    real_rows: usize,
    real_cols: usize,
    padded: bool,
    groups: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestLayer {
    kind: KindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conv: Option<ConvGeometry>,
    activation: Activation,
    shift: u32,
    protected: bool,
    bias_offset: i64,
    vmm_rows: usize,
    vmm_cols: usize,
    tiles: Vec<ManifestTile>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: CrossbarConfig,
    input_shape: Vec<usize>,
    input_bits: u32,
    num_classes: usize,
    layers: Vec<ManifestLayer>,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes the crossbar contents and public structure of `mapped` into
/// `dir`. Keys are never part of it.
pub fn save_mapped(dir: &Path, mapped: &MappedModel) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut layers = Vec::with_capacity(mapped.layers.len());
    for (li, layer) in mapped.layers.iter().enumerate() {
        let mut tiles = Vec::with_capacity(layer.tiles.len());
        for (ti, tile) in layer.tiles.iter().enumerate() {
            let mut groups = Vec::with_capacity(tile.groups.len());
            for (g, xbar) in tile.groups.iter().enumerate() {
                let name = format!("l{li}_t{ti}_g{g}.json");
                write_atomic(&dir.join(&name), tile_to_json(xbar).as_bytes())?;
                groups.push(name);
            }
            tiles.push(ManifestTile {
                real_rows: tile.real_rows,
                real_cols: tile.real_cols,
                padded: tile.padded,
                groups,
            });
        }
        let (kind, conv) = match layer.kind {
            LayerKind::Fc { .. } => (KindTag::Fc, None),
            LayerKind::Conv(g) => (KindTag::Conv, Some(g)),
        };
        layers.push(ManifestLayer {
            kind,
            conv,
            activation: layer.activation,
            shift: layer.shift,
            protected: layer.protected,
            bias_offset: layer.bias_offset,
            vmm_rows: layer.grid.rows,
            vmm_cols: layer.grid.cols,
            tiles,
        });
    }
    let manifest = Manifest {
        config: mapped.config,
        input_shape: mapped.input_shape.clone(),
        input_bits: mapped.input_bits,
        num_classes: mapped.num_classes,
        layers,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_mapped(dir: &Path) -> Result<MappedModel> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    let config = manifest.config;
    config.validate()?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (li, l) in manifest.layers.into_iter().enumerate() {
        let kind = match (l.kind, l.conv) {
            (KindTag::Fc, _) => LayerKind::Fc {
                inputs: l.vmm_rows,
                outputs: l.vmm_cols,
            },
            (KindTag::Conv, Some(g)) => {
                g.validate()?;
                LayerKind::Conv(g)
            }
            (KindTag::Conv, None) => {
                return Err(Error::Format(format!("conv layer {li} lacks its geometry")))
            }
        };
        if kind.vmm_dims() != (l.vmm_rows, l.vmm_cols) {
            return Err(Error::Format(format!(
                "layer {li}: VMM shape disagrees with its geometry"
            )));
        }
        let grid = TileGrid::new(l.vmm_rows, l.vmm_cols, &config);
        if grid.count() != l.tiles.len() {
            return Err(Error::Format(format!(
                "layer {li}: {} tiles listed, geometry needs {}",
                l.tiles.len(),
                grid.count()
            )));
        }
        let mut tiles = Vec::with_capacity(l.tiles.len());
        for (ti, t) in l.tiles.into_iter().enumerate() {
            let (r, c) = grid.extent(ti);
            if (r.len(), c.len()) != (t.real_rows, t.real_cols) {
                return Err(Error::Format(format!(
                    "layer {li} tile {ti}: wrong real extent"
                )));
            }
            if t.groups.len() != config.groups {
                return Err(Error::Arity {
                    expected: config.groups,
                    got: t.groups.len(),
                });
            }
            let groups = t
                .groups
                .iter()
                .map(|name| {
                    let xbar = tile_from_json(&fs::read_to_string(dir.join(name))?)?;
                    if *xbar.config() != config {
                        return Err(Error::Format(format!(
                            "{name}: configuration differs from manifest"
                        )));
                    }
                    Ok(xbar)
                })
                .collect::<Result<Vec<_>>>()?;
            tiles.push(MappedTile {
                real_rows: t.real_rows,
                real_cols: t.real_cols,
                padded: t.padded,
                groups,
            });
        }
        layers.push(MappedLayer {
            kind,
            activation: l.activation,
            shift: l.shift,
            protected: l.protected,
            bias_offset: l.bias_offset,
            grid,
            tiles,
        });
    }
    Ok(MappedModel {
        config,
        input_shape: manifest.input_shape,
        input_bits: manifest.input_bits,
        num_classes: manifest.num_classes,
        layers,
    })
}
