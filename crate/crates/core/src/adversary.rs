//! The attacker's view: read every conductance, guess the keys, rebuild
//! the network and measure what it is worth.
//!
//! Structure is public (layer shapes, tiling, which layers and tiles are
//! protected or padded). Key values are not. Accuracy of a rebuilt network
//! is measured with the reference engine on the de-mapped weights.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::crossbar::CrossbarConfig;
use crate::dataset::Dataset;
use crate::engine::evaluate_reference;
use crate::error::{Error, Result};
use crate::model::NetworkModel;
use crate::secure_map::{
    demap_model, generate_keys, map_model, model_shapes, tile_key, KeyStore, LayerKeys,
    MappedModel, Protection,
};

/// Weights an adversary holding `guess` reads out of the crossbars.
pub fn extract_model(mapped: &MappedModel, guess: &KeyStore) -> Result<NetworkModel> {
    demap_model(mapped, guess)
}

/// What an adversary knows for free: zero transforms and top-left placement
/// on unprotected layers. Protected layers get the same placeholder.
pub fn public_keys(mapped: &MappedModel) -> KeyStore {
    keys_for(mapped, |_, _| false, &mut ChaCha20Rng::seed_from_u64(0))
}

/// Uniformly random keys for every protected layer: random transform bits,
/// and on padded tiles random masks with the public popcounts.
pub fn random_guess(mapped: &MappedModel, rng: &mut impl Rng) -> KeyStore {
    keys_for(mapped, |layer, _| mapped.layers[layer].protected, rng)
}

fn keys_for(
    mapped: &MappedModel,
    secret: impl Fn(usize, usize) -> bool,
    rng: &mut impl Rng,
) -> KeyStore {
    let layers = mapped
        .layers
        .iter()
        .enumerate()
        .map(|(li, layer)| LayerKeys {
            protected: layer.protected,
            tiles: layer
                .tiles
                .iter()
                .enumerate()
                .map(|(ti, t)| {
                    let s = secret(li, ti);
                    tile_key(
                        &mapped.config,
                        t.real_rows,
                        t.real_cols,
                        s,
                        s && t.padded,
                        rng,
                    )
                })
                .collect(),
        })
        .collect();
    KeyStore {
        config: mapped.config,
        seed: 0,
        layers,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trial {
    pub trial: u64,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackReport {
    pub scheme: u8,
    pub seed: u64,
    /// Accuracy with the true keys, when they were available.
    pub baseline: Option<f64>,
    pub trials: Vec<Trial>,
    pub mean: f64,
    pub std_dev: f64,
    pub min: f64,
    pub max: f64,
}

impl AttackReport {
    fn new(scheme: u8, seed: u64, baseline: Option<f64>, trials: Vec<Trial>) -> Self {
        let n = trials.len() as f64;
        let accs = trials.iter().map(|t| t.accuracy);
        let mean = accs.clone().sum::<f64>() / n;
        let var = accs.clone().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        Self {
            scheme,
            seed,
            baseline,
            mean,
            std_dev: var.sqrt(),
            min: accs.clone().fold(f64::INFINITY, f64::min),
            max: accs.fold(f64::NEG_INFINITY, f64::max),
            trials,
        }
    }

    /// One line per trial: `trial,correct,total,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["trial", "correct", "total", "accuracy"])
            .expect("in-memory write");
        for t in &self.trials {
            w.write_record([
                t.trial.to_string(),
                t.correct.to_string(),
                t.total.to_string(),
                format!("{:.6}", t.accuracy),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }

    /// Summary without the per-trial rows.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "scheme": self.scheme,
            "seed": self.seed,
            "trials": self.trials.len(),
            "baseline": self.baseline,
            "mean": self.mean,
            "std_dev": self.std_dev,
            "min": self.min,
            "max": self.max,
        })
    }
}

/// Accuracy of the network read out with the true keys.
pub fn attack_correct_keys(
    mapped: &MappedModel,
    keys: &KeyStore,
    dataset: &Dataset,
) -> Result<f64> {
    Ok(evaluate_reference(&extract_model(mapped, keys)?, dataset)?.accuracy())
}

/// Attack randomness lives apart from key generation: the same `seed` never
/// makes a guess replay the key generator.
pub fn attack_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_le_bytes());
    s[8..16].copy_from_slice(b"adversry");
    let mut rng = ChaCha20Rng::from_seed(s);
    rng.set_stream(stream);
    rng
}

/// `trials` independent uniformly random key guesses. Trial `i` draws from
/// its own stream, so results do not depend on scheduling.
pub fn attack_random_keys(
    mapped: &MappedModel,
    dataset: &Dataset,
    trials: u64,
    seed: u64,
    true_keys: Option<&KeyStore>,
) -> Result<AttackReport> {
    if trials == 0 {
        return Err(Error::EmptyInput);
    }
    dataset.validate()?;
    let baseline = true_keys
        .map(|k| attack_correct_keys(mapped, k, dataset))
        .transpose()?;
    let results = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = attack_rng(seed, trial);
            let guess = random_guess(mapped, &mut rng);
            let eval = evaluate_reference(&extract_model(mapped, &guess)?, dataset)?;
            Ok(Trial {
                trial,
                correct: eval.correct,
                total: eval.total(),
                accuracy: eval.accuracy(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttackReport::new(
        mapped.config.scheme.number(),
        seed,
        baseline,
        results,
    ))
}

/// One key bit: block `block`, weight column `col` of tile `tile` in layer
/// `layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Target {
    pub layer: usize,
    pub tile: usize,
    pub block: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetResult {
    pub target: Target,
    pub true_bit: bool,
    pub acc_correct: f64,
    pub acc_wrong: f64,
    pub threshold: f64,
    pub distinguishable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DncReport {
    pub samples: usize,
    pub results: Vec<TargetResult>,
    pub distinguishable: usize,
    pub fraction: f64,
}

impl DncReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "layer",
            "tile",
            "block",
            "col",
            "true_bit",
            "acc_correct",
            "acc_wrong",
            "threshold",
            "distinguishable",
        ])
        .expect("in-memory write");
        for r in &self.results {
            let t = r.target;
            w.write_record([
                t.layer.to_string(),
                t.tile.to_string(),
                t.block.to_string(),
                t.col.to_string(),
                (r.true_bit as u8).to_string(),
                format!("{:.6}", r.acc_correct),
                format!("{:.6}", r.acc_wrong),
                format!("{:.6}", r.threshold),
                (r.distinguishable as u8).to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "targets": self.results.len(),
            "samples": self.samples,
            "distinguishable": self.distinguishable,
            "fraction": self.fraction,
        })
    }
}

/// Three standard errors of the difference of two accuracies on `n` samples.
pub fn separation_threshold(p1: f64, p2: f64, n: usize) -> f64 {
    3.0 * ((p1 * (1.0 - p1) + p2 * (1.0 - p2)) / n as f64).sqrt()
}

/// Divide-and-conquer: for each target, keep `base` everywhere else and
/// try the bit both ways. The bit counts as recovered when the setting that
/// matches the true key scores clearly higher. `true_keys` only labels the
/// outcome; the attacker never uses it.
pub fn attack_divide_and_conquer(
    mapped: &MappedModel,
    dataset: &Dataset,
    true_keys: &KeyStore,
    base: &KeyStore,
    targets: &[Target],
) -> Result<DncReport> {
    dataset.validate()?;
    true_keys.check_compatible(mapped)?;
    base.check_compatible(mapped)?;
    if targets.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = dataset.len();
    let results = targets
        .par_iter()
        .map(|&t| {
            let truth = true_keys
                .layers
                .get(t.layer)
                .and_then(|l| l.tiles.get(t.tile))
                .filter(|k| t.block < k.transform.rows() && t.col < k.transform.cols())
                .ok_or_else(|| Error::shape(format!("target {t:?} outside the key store")))?
                .transform
                .get(t.block, t.col);
            let acc_with = |bit: bool| -> Result<f64> {
                let mut guess = base.clone();
                guess.layers[t.layer].tiles[t.tile]
                    .transform
                    .set(t.block, t.col, bit);
                Ok(evaluate_reference(&extract_model(mapped, &guess)?, dataset)?.accuracy())
            };
            let acc_correct = acc_with(truth)?;
            let acc_wrong = acc_with(!truth)?;
            let threshold = separation_threshold(acc_correct, acc_wrong, n);
            Ok(TargetResult {
                target: t,
                true_bit: truth,
                acc_correct,
                acc_wrong,
                threshold,
                distinguishable: acc_correct - acc_wrong > threshold,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let distinguishable = results.iter().filter(|r| r.distinguishable).count();
    let fraction = distinguishable as f64 / results.len() as f64;
    Ok(DncReport {
        samples: n,
        results,
        distinguishable,
        fraction,
    })
}

fn all_targets(mapped: &MappedModel) -> Vec<Target> {
    let (k, wc) = (mapped.config.blocks(), mapped.config.weight_cols());
    let mut out = Vec::new();
    for (layer, l) in mapped
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.protected)
    {
        for tile in 0..l.tiles.len() {
            for block in 0..k {
                for col in 0..wc {
                    out.push(Target {
                        layer,
                        tile,
                        block,
                        col,
                    });
                }
            }
        }
    }
    out
}

/// `count` distinct key bits drawn uniformly from all protected tiles.
pub fn uniform_schedule(mapped: &MappedModel, count: usize, rng: &mut impl Rng) -> Vec<Target> {
    let mut all = all_targets(mapped);
    let (picked, _) = all.partial_shuffle(rng, count);
    picked.to_vec()
}

/// Like [`uniform_schedule`] but restricted to bits that touch real
/// weights: the column is real and the block holds at least one real row.
/// Bits on padding cannot change any output, so they are excluded to keep
/// the measurement about bits that matter. Needs the true masks, which
/// makes it an evaluation tool rather than an attack.
pub fn real_only_schedule(
    mapped: &MappedModel,
    true_keys: &KeyStore,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<Target> {
    let x = mapped.config.block_rows;
    let mut all: Vec<Target> = all_targets(mapped)
        .into_iter()
        .filter(|t| {
            let key = &true_keys.layers[t.layer].tiles[t.tile];
            key.col_mask[t.col]
                && key.row_mask[t.block * x..(t.block + 1) * x]
                    .iter()
                    .any(|&b| b)
        })
        .collect();
    let (picked, _) = all.partial_shuffle(rng, count);
    picked.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    /// Protected layer index, or `None` when every layer is protected.
    pub layer: Option<usize>,
    pub baseline: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Protects one layer at a time, then all of them, and runs the random-key
/// attack on each configuration.
pub fn sweep_layers(
    model: &NetworkModel,
    config: &CrossbarConfig,
    dataset: &Dataset,
    trials: u64,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let n = model.layers.len();
    let plans = (0..n)
        .map(|i| (Some(i), Protection::only(n, i)))
        .chain([(None, Protection::all(n))]);
    let mut rows = Vec::with_capacity(n + 1);
    for (layer, plan) in plans {
        let keys = generate_keys(config, &model_shapes(model), &plan, seed)?;
        let mapped = map_model(model, config, &keys)?;
        let report = attack_random_keys(&mapped, dataset, trials, seed, Some(&keys))?;
        rows.push(SweepRow {
            layer,
            baseline: report.baseline.expect("true keys supplied"),
            mean: report.mean,
            min: report.min,
            max: report.max,
        });
    }
    Ok(rows)
}
