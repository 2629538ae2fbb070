//! Layer-by-layer integer inference, either straight through the
//! reference VMM or through crossbars, decoders and shift&add.

use rayon::prelude::*;

use crate::crossbar::{combine, sum_of_inputs, CrossbarConfig, Scheme};
use crate::dataset::Dataset;
use crate::decoder::{decode_block_pipeline, DecoderContext, DecoderStats, SegmentPartials};
use crate::error::{Error, Result};
use crate::model::{Activation, LayerKind, NetworkModel};
use crate::secure_map::{KeyStore, MappedLayer, MappedModel, MappedTile, TileKey};
use crate::tensor::{im2col_raw, vmm, QuantTensor};

/// Counters gathered while running the crossbar pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PipelineStats {
    /// Tile-level VMMs (one input vector against one PE).
    pub tile_vmms: u64,
    /// Word-line segments activated, summed over groups.
    pub segments: u64,
    pub decoder: DecoderStats,
}

struct Stage<'a> {
    kind: &'a LayerKind,
    activation: Activation,
    shift: u32,
}

/// Runs the layer chain. `vmm` is called with the layer index and one
/// input vector and must return the layer's VMM outputs.
fn forward(
    stages: &[Stage<'_>],
    input_shape: &[usize],
    input_bits: u32,
    input: &QuantTensor,
    mut vmm: impl FnMut(usize, &[i32]) -> Result<Vec<i64>>,
) -> Result<Vec<i64>> {
    let expected: usize = input_shape.iter().product();
    if input.len() != expected {
        return Err(Error::shape(format!(
            "input has {} values, model expects {expected}",
            input.len()
        )));
    }
    let top = (1i64 << input_bits) - 1;
    if let Some(&v) = input.data().iter().find(|&&v| v < 0 || v as i64 > top) {
        return Err(Error::OutOfRange {
            value: v as i64,
            lo: 0,
            hi: top,
        });
    }
    let mut x: Vec<i32> = input.data().to_vec();
    let mut y: Vec<i64> = Vec::new();
    for (li, stage) in stages.iter().enumerate() {
        y = match stage.kind {
            LayerKind::Fc { .. } => vmm(li, &x)?,
            LayerKind::Conv(g) => {
                let patches = im2col_raw(&x, g);
                let np = g.num_patches();
                let mut out = vec![0i64; g.output_len()];
                for (p, patch) in patches.chunks_exact(g.patch_len()).enumerate() {
                    for (oc, v) in vmm(li, patch)?.into_iter().enumerate() {
                        out[oc * np + p] = v;
                    }
                }
                out
            }
        };
        if stage.activation == Activation::Relu {
            x = y
                .iter()
                .map(|&v| ((v.max(0)) >> stage.shift).min(top) as i32)
                .collect();
            if li + 1 == stages.len() {
                return Ok(x.iter().map(|&v| v as i64).collect());
            }
        }
    }
    Ok(y)
}

/// Ground-truth inference on the quantized weights.
pub fn infer_reference(model: &NetworkModel, input: &QuantTensor) -> Result<Vec<i64>> {
    Reference::new(model)?.infer(input)
}

/// Reference path with the VMM matrices prepared once.
pub struct Reference<'a> {
    model: &'a NetworkModel,
    matrices: Vec<QuantTensor>,
}

impl<'a> Reference<'a> {
    pub fn new(model: &'a NetworkModel) -> Result<Self> {
        model.validate()?;
        let matrices = model.layers.iter().map(|l| l.vmm_matrix()).collect();
        Ok(Self { model, matrices })
    }

    pub fn infer(&self, input: &QuantTensor) -> Result<Vec<i64>> {
        let stages: Vec<Stage<'_>> = self
            .model
            .layers
            .iter()
            .map(|l| Stage {
                kind: &l.kind,
                activation: l.activation,
                shift: l.shift,
            })
            .collect();
        forward(
            &stages,
            &self.model.input_shape,
            self.model.input_bits,
            input,
            |li, x| Ok(vmm(x, &self.matrices[li])),
        )
    }
}

/// Inference through the crossbars with the decoders driven by `keys`.
///
/// Keys only need the right geometry; wrong key values give the outputs a
/// user of the hardware would see with those keys.
pub fn infer_mapped(
    mapped: &MappedModel,
    keys: &KeyStore,
    input: &QuantTensor,
) -> Result<Vec<i64>> {
    infer_mapped_with_stats(mapped, keys, input).map(|(y, _)| y)
}

pub fn infer_mapped_with_stats(
    mapped: &MappedModel,
    keys: &KeyStore,
    input: &QuantTensor,
) -> Result<(Vec<i64>, PipelineStats)> {
    keys.check_compatible(mapped)?;
    run_mapped(mapped, keys, input)
}

fn run_mapped(
    mapped: &MappedModel,
    keys: &KeyStore,
    input: &QuantTensor,
) -> Result<(Vec<i64>, PipelineStats)> {
    let mut stats = PipelineStats::default();
    let stages: Vec<Stage<'_>> = mapped
        .layers
        .iter()
        .map(|l| Stage {
            kind: &l.kind,
            activation: l.activation,
            shift: l.shift,
        })
        .collect();
    let y = forward(
        &stages,
        &mapped.input_shape,
        mapped.input_bits,
        input,
        |li, x| {
            layer_vmm(
                &mapped.layers[li],
                &keys.layers[li].tiles,
                &mapped.config,
                x,
                &mut stats,
            )
        },
    )?;
    Ok((y, stats))
}

fn layer_vmm(
    layer: &MappedLayer,
    keys: &[TileKey],
    config: &CrossbarConfig,
    x: &[i32],
    stats: &mut PipelineStats,
) -> Result<Vec<i64>> {
    let grid = layer.grid;
    let mut out = vec![0i64; grid.cols];
    for (t, (tile, key)) in layer.tiles.iter().zip(keys).enumerate() {
        let (rows, cols) = grid.extent(t);
        let part = tile_vmm(tile, key, config, layer.bias_offset, &x[rows], stats)?;
        for (o, v) in out[cols].iter_mut().zip(part) {
            *o += v;
        }
    }
    Ok(out)
}

/// One input vector through one PE: scatter inputs onto real word lines,
/// activate segment by segment, decode per block, shift&add across groups,
/// remove the weight bias, keep the real columns.
fn tile_vmm(
    tile: &MappedTile,
    key: &TileKey,
    config: &CrossbarConfig,
    bias_offset: i64,
    x_real: &[i32],
    stats: &mut PipelineStats,
) -> Result<Vec<i64>> {
    let mut x = vec![0i32; config.rows];
    for (&pos, &v) in key.real_rows().iter().zip(x_real) {
        x[pos] = v;
    }
    let wc = config.weight_cols();
    let sum_col = config.sum_col_index();
    let mut segments = Vec::with_capacity(config.segments());
    for s in 0..config.segments() {
        let rows = s * config.wl_active..(s + 1) * config.wl_active;
        let x_seg = &x[rows.clone()];
        let mut groups = Vec::with_capacity(config.groups);
        let mut sum_inputs = None;
        for (g, xbar) in tile.groups.iter().enumerate() {
            let mut acc = vec![0i64; config.cols];
            xbar.accumulate_segment(x_seg, rows.start, &mut acc);
            if g == 0 {
                sum_inputs = sum_col.map(|c| acc[c]);
            }
            acc.truncate(wc);
            groups.push(acc);
        }
        stats.segments += config.groups as u64;
        let sum_inputs = sum_inputs.unwrap_or_else(|| sum_of_inputs(x_seg));
        segments.push(SegmentPartials {
            rows,
            sum_inputs,
            groups,
        });
    }
    let mut ctx = DecoderContext::new(config);
    let decoded = decode_block_pipeline(&segments, &key.transform, config, &mut ctx)?;
    stats.decoder += ctx.stats;
    stats.tile_vmms += 1;

    let input_sum: i64 = segments.iter().map(|s| s.sum_inputs).sum();
    let unbias = match config.scheme {
        Scheme::Biased => bias_offset * input_sum,
        Scheme::Differential => 0,
    };
    let mut partials = vec![0i64; config.groups];
    Ok(key
        .real_cols()
        .into_iter()
        .map(|j| {
            for (p, g) in partials.iter_mut().zip(&decoded) {
                *p = g[j];
            }
            combine(&partials, config.device_bits) - unbias
        })
        .collect())
}

pub fn argmax(scores: &[i64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub scores: Vec<Vec<i64>>,
    pub correct: usize,
}

impl Evaluation {
    fn from_scores(scores: Vec<Vec<i64>>, labels: &[usize]) -> Self {
        let predictions: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
        let correct = predictions
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        Self {
            predictions,
            scores,
            correct,
        }
    }

    pub fn total(&self) -> usize {
        self.predictions.len()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total() as f64
    }
}

pub fn evaluate_reference(model: &NetworkModel, dataset: &Dataset) -> Result<Evaluation> {
    dataset.validate()?;
    let reference = Reference::new(model)?;
    let scores = (0..dataset.len())
        .into_par_iter()
        .map(|i| reference.infer(&dataset.input(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation::from_scores(scores, &dataset.labels))
}

pub fn evaluate_mapped(
    mapped: &MappedModel,
    keys: &KeyStore,
    dataset: &Dataset,
) -> Result<(Evaluation, PipelineStats)> {
    dataset.validate()?;
    keys.check_compatible(mapped)?;
    let runs = (0..dataset.len())
        .into_par_iter()
        .map(|i| run_mapped(mapped, keys, &dataset.input(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut stats = PipelineStats::default();
    let scores = runs
        .into_iter()
        .map(|(y, s)| {
            stats.tile_vmms += s.tile_vmms;
            stats.segments += s.segments;
            stats.decoder += s.decoder;
            y
        })
        .collect();
    Ok((Evaluation::from_scores(scores, &dataset.labels), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerSpec;
    use crate::secure_map::{generate_keys, map_model, model_shapes, Protection};

    fn identity_model(n: usize) -> NetworkModel {
        let mut data = vec![0i32; n * n];
        for i in 0..n {
            data[i * n + i] = 1;
        }
        let w = QuantTensor::new(vec![n, n], data, 8, true).unwrap();
        NetworkModel::new(
            vec![n],
            8,
            n,
            vec![LayerSpec::fc(w, Activation::None, 0).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn identity_layer_returns_input() {
        let m = identity_model(5);
        let x = QuantTensor::vector(vec![3, 0, 255, 7, 1], 8, false).unwrap();
        assert_eq!(infer_reference(&m, &x).unwrap(), vec![3, 0, 255, 7, 1]);
    }

    #[test]
    fn zero_input_gives_zero_scores() {
        let m = identity_model(4);
        let x = QuantTensor::vector(vec![0; 4], 8, false).unwrap();
        assert_eq!(infer_reference(&m, &x).unwrap(), vec![0; 4]);
    }

    #[test]
    fn shape_and_range_errors() {
        let m = identity_model(4);
        let x = QuantTensor::vector(vec![0; 3], 8, false).unwrap();
        assert!(matches!(infer_reference(&m, &x), Err(Error::Shape(_))));
        let x = QuantTensor::vector(vec![0, 0, 0, 300], 9, false).unwrap();
        assert!(matches!(
            infer_reference(&m, &x),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1, 5, 5, 0]), 1);
        assert_eq!(argmax(&[-3]), 0);
    }

    #[test]
    fn mapped_identity_both_schemes_and_stats() {
        let m = identity_model(6);
        let x = QuantTensor::vector(vec![9, 1, 0, 4, 200, 3], 8, false).unwrap();
        for scheme in [Scheme::Biased, Scheme::Differential] {
            let c = CrossbarConfig {
                rows: 8,
                cols: 8,
                device_bits: 2,
                groups: 4,
                wl_active: 2,
                block_rows: 4,
                adcs_per_group: 2,
                scheme,
                sum_column: true,
            };
            let keys = generate_keys(&c, &model_shapes(&m), &Protection::all(1), 77).unwrap();
            let mapped = map_model(&m, &c, &keys).unwrap();
            let (y, stats) = infer_mapped_with_stats(&mapped, &keys, &x).unwrap();
            assert_eq!(y, infer_reference(&m, &x).unwrap());
            assert_eq!(stats.tile_vmms, 1);
            assert_eq!(stats.segments, 4 * 4);
            let expected_bias = if scheme == Scheme::Biased { 4 } else { 0 };
            assert_eq!(stats.decoder.bias_cycles, expected_bias);
        }
    }
}
