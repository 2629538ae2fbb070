//! `xbarsec`: map networks onto protected crossbars, run them, attack them
//! and report key overheads.
//!
//! Exit codes: 0 success, 2 invalid input, 3 filesystem error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use xbarsec::adversary::{
    attack_divide_and_conquer, attack_random_keys, attack_rng, random_guess, real_only_schedule,
    sweep_layers,
};
use xbarsec::engine::{evaluate_mapped, evaluate_reference};
use xbarsec::formats::{load_keys, load_mapped, load_model, save_keys, save_mapped, write_atomic};
use xbarsec::report::{security_bits, SecurityReport};
use xbarsec::secure_map::{
    demap_model, generate_keys, map_model, model_shapes, KeyStore, MappedModel,
};
use xbarsec::{CrossbarConfig, Dataset, NetworkModel, Protection, Scheme};

#[derive(Parser)]
#[command(
    name = "xbarsec",
    version,
    about = "Secure weight mapping on memristor crossbars"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Map a model onto protected crossbars and write tiles, manifest and keys.
    Map(MapArgs),
    /// Run a dataset through a mapped model.
    Infer(InferArgs),
    /// Attack a mapped model with guessed keys.
    Attack(AttackArgs),
    /// Print security strength and key-storage overheads.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct XbarArgs {
    /// Mapping scheme: 1 biased, 2 differential.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    scheme: u8,
    /// Crossbar size MxN, N including any sum column.
    #[arg(long, default_value = "256x256", value_parser = parse_dims)]
    xbar: (usize, usize),
    /// Bits per memristor.
    #[arg(long, default_value_t = 1)]
    pm: u32,
    /// Crossbar groups per PE.
    #[arg(long, default_value_t = 8)]
    groups: usize,
    /// Word lines activated per ADC conversion.
    #[arg(long, default_value_t = 16)]
    wl_active: usize,
    /// Rows per key block.
    #[arg(long, default_value_t = 32)]
    block_x: usize,
    #[arg(long, default_value_t = 16)]
    adcs: usize,
    /// Reserve the last column for the input sum (default: scheme 1 only).
    #[arg(long)]
    sum_column: Option<bool>,
}

impl XbarArgs {
    fn config(&self) -> Result<CrossbarConfig> {
        let scheme = Scheme::try_from(self.scheme).map_err(anyhow::Error::msg)?;
        let c = CrossbarConfig {
            rows: self.xbar.0,
            cols: self.xbar.1,
            device_bits: self.pm,
            groups: self.groups,
            wl_active: self.wl_active,
            block_rows: self.block_x,
            adcs_per_group: self.adcs,
            scheme,
            sum_column: self.sum_column.unwrap_or(scheme == Scheme::Biased),
        };
        c.validate()?;
        Ok(c)
    }
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected MxN, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(a)?, p(b)?))
}

#[derive(Args)]
struct MapArgs {
    #[arg(long)]
    model: PathBuf,
    /// Output directory for the mapped model.
    #[arg(long)]
    out: PathBuf,
    /// Key file path [default: <out>.keys.json].
    #[arg(long)]
    keys_out: Option<PathBuf>,
    /// `all`, `none` or a comma-separated list of layer indices.
    #[arg(long, default_value = "all")]
    protect: String,
    /// Do not pad protected small tiles.
    #[arg(long)]
    no_pad: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    xbar: XbarArgs,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    mapped: PathBuf,
    /// Key file, or `random` for a uniformly random guess.
    #[arg(long)]
    keys: String,
    #[arg(long)]
    dataset: PathBuf,
    /// Check bit-exact agreement with the reference engine.
    #[arg(long)]
    reference: bool,
    /// Reference model [default: the weights read out under --keys].
    #[arg(long, requires = "reference")]
    model: Option<PathBuf>,
    /// Write the full result (with per-sample scores) to this JSON file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Random,
    Dnc,
}

#[derive(Args)]
struct AttackArgs {
    /// Mapped model directory (not needed with --per-layer).
    #[arg(long, required_unless_present = "per_layer")]
    mapped: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "random")]
    mode: Mode,
    #[arg(long, default_value_t = 40, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    /// True keys: baseline for random mode, scoring for dnc mode.
    #[arg(long)]
    keys: Option<PathBuf>,
    /// Key bits to test in dnc mode.
    #[arg(long, default_value_t = 200)]
    targets: usize,
    /// Protect each layer alone, then all; maps --model with the crossbar flags.
    #[arg(long, requires = "model")]
    per_layer: bool,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output prefix: writes <out>.csv and <out>.json.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    xbar: XbarArgs,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    xbar: XbarArgs,
    /// Unpadded small-matrix example RxC.
    #[arg(long, default_value = "32x32", value_parser = parse_dims)]
    small: (usize, usize),
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Map(a) => cmd_map(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let io = e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>().is_some()
            || c.downcast_ref::<xbarsec::Error>()
                .is_some_and(|x| x.is_io())
    });
    if io {
        3
    } else {
        2
    }
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(json: bool, value: &serde_json::Value, text: &str) {
    let out = if json {
        serde_json::to_string_pretty(value).expect("json value") + "\n"
    } else {
        text.to_string()
    };
    let _ = std::io::stdout().lock().write_all(out.as_bytes());
}

fn write_json_file(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn protection_plan(spec: &str, layers: usize, pad: bool) -> Result<Protection> {
    let mut plan = match spec {
        "all" => Protection::all(layers),
        "none" => Protection::none(layers),
        list => {
            let mut p = Protection::none(layers);
            for item in list.split(',') {
                let i: usize = item
                    .trim()
                    .parse()
                    .with_context(|| format!("bad layer index `{item}`"))?;
                if i >= layers {
                    bail!("layer {i} out of range, model has {layers} layers");
                }
                p.layers[i] = true;
            }
            p
        }
    };
    plan.pad_small = pad;
    Ok(plan)
}

fn model_from(path: &Path) -> Result<NetworkModel> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn mapped_from(path: &Path) -> Result<MappedModel> {
    load_mapped(path).with_context(|| format!("loading mapped model {}", path.display()))
}

fn keys_from(path: &Path) -> Result<KeyStore> {
    load_keys(path).with_context(|| format!("loading keys {}", path.display()))
}

fn dataset_for(path: &Path, input_shape: &[usize]) -> Result<Dataset> {
    let ds = Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
    Ok(ds.with_shape(input_shape.to_vec())?)
}

fn cmd_map(a: MapArgs) -> Result<()> {
    let config = a.xbar.config()?;
    let model = model_from(&a.model)?;
    let plan = protection_plan(&a.protect, model.layers.len(), !a.no_pad)?;
    let keys = generate_keys(&config, &model_shapes(&model), &plan, a.seed)?;
    let mapped = map_model(&model, &config, &keys)?;
    let keys_path = a.keys_out.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".keys.json");
        PathBuf::from(p)
    });
    save_mapped(&a.out, &mapped).with_context(|| format!("writing {}", a.out.display()))?;
    save_keys(&keys_path, &keys).with_context(|| format!("writing {}", keys_path.display()))?;

    let per_tile = security_bits(&config)?;
    let layers: Vec<_> = mapped
        .layers
        .iter()
        .zip(&keys.layers)
        .map(|(l, k)| {
            json!({
                "vmm": [l.grid.rows, l.grid.cols],
                "tiles": l.tiles.len(),
                "protected": l.protected,
                "padded_tiles": l.tiles.iter().filter(|t| t.padded).count(),
                "secret_bits": if k.protected { k.tiles.iter().map(|t| t.secret_bits()).sum::<u64>() } else { 0 },
            })
        })
        .collect();
    let value = json!({
        "mapped": a.out,
        "keys": keys_path,
        "security_bits_per_tile": per_tile,
        "secret_bits": keys.secret_bits(),
        "layers": layers,
    });
    let mut text = format!(
        "mapped {} layers to {} (keys: {})\nsecurity per crossbar{}: 2^{per_tile}\n",
        mapped.layers.len(),
        a.out.display(),
        keys_path.display(),
        if config.is_pair() { " pair" } else { "" },
    );
    for (i, l) in value["layers"]
        .as_array()
        .expect("array")
        .iter()
        .enumerate()
    {
        text += &format!(
            "  layer {i}: vmm {}, {} tile(s), protected {}, {} padded, {} secret bits\n",
            l["vmm"], l["tiles"], l["protected"], l["padded_tiles"], l["secret_bits"]
        );
    }
    text += &format!("total secret bits: {}\n", keys.secret_bits());
    emit(a.json, &value, &text);
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let mapped = mapped_from(&a.mapped)?;
    let keys = if a.keys == "random" {
        random_guess(&mapped, &mut attack_rng(a.seed, 0))
    } else {
        keys_from(Path::new(&a.keys))?
    };
    let ds = dataset_for(&a.dataset, &mapped.input_shape)?;
    let (eval, stats) = evaluate_mapped(&mapped, &keys, &ds)?;

    let mut reference_match = None;
    if a.reference {
        let model = match &a.model {
            Some(p) => model_from(p)?,
            None => demap_model(&mapped, &keys)?,
        };
        let reference = evaluate_reference(&model, &ds)?;
        if let Some(i) = (0..ds.len()).find(|&i| reference.scores[i] != eval.scores[i]) {
            bail!(
                "sample {i}: crossbar scores {:?} differ from reference {:?}",
                eval.scores[i],
                reference.scores[i]
            );
        }
        reference_match = Some(true);
    }

    let value = json!({
        "samples": eval.total(),
        "correct": eval.correct,
        "accuracy": eval.accuracy(),
        "reference_match": reference_match,
        "stats": {
            "tile_vmms": stats.tile_vmms,
            "segments": stats.segments,
            "bias_cycles": stats.decoder.bias_cycles,
            "decoded_corrected": stats.decoder.corrected,
            "decoded_passed": stats.decoder.passed,
        },
    });
    if let Some(out) = &a.out {
        let mut full = value.clone();
        full["predictions"] = json!(eval.predictions);
        full["scores"] = json!(eval.scores);
        write_json_file(out, &full)?;
    }
    let mut text = format!(
        "accuracy {:.4} ({}/{})\n",
        eval.accuracy(),
        eval.correct,
        eval.total()
    );
    if reference_match.is_some() {
        text += "bit-exact with reference: yes\n";
    }
    text += &format!(
        "tile VMMs {}, segments {}, bias cycles {}, corrected outputs {}\n",
        stats.tile_vmms, stats.segments, stats.decoder.bias_cycles, stats.decoder.corrected
    );
    emit(a.json, &value, &text);
    Ok(())
}

fn write_outputs(out: &Option<PathBuf>, csv: &str, summary: &serde_json::Value) -> Result<()> {
    if let Some(prefix) = out {
        let with = |ext: &str| {
            let mut p = prefix.clone().into_os_string();
            p.push(ext);
            PathBuf::from(p)
        };
        let csv_path = with(".csv");
        write_atomic(&csv_path, csv.as_bytes())
            .with_context(|| format!("writing {}", csv_path.display()))?;
        write_json_file(&with(".json"), summary)?;
    }
    Ok(())
}

fn cmd_attack(a: AttackArgs) -> Result<()> {
    if a.per_layer {
        if a.mode != Mode::Random {
            bail!("--per-layer runs the random-key attack only");
        }
        let config = a.xbar.config()?;
        let model = model_from(a.model.as_deref().expect("clap requires --model"))?;
        let ds = dataset_for(&a.dataset, &model.input_shape)?;
        let rows = sweep_layers(&model, &config, &ds, a.trials, a.seed)?;
        let mut csv = String::from("protected,baseline,mean,min,max\n");
        let mut text = format!(
            "{:<10} {:>9} {:>9} {:>9} {:>9}\n",
            "protected", "baseline", "mean", "min", "max"
        );
        for r in &rows {
            let label = r.layer.map_or("all".to_string(), |l| l.to_string());
            csv += &format!(
                "{label},{:.6},{:.6},{:.6},{:.6}\n",
                r.baseline, r.mean, r.min, r.max
            );
            text += &format!(
                "{label:<10} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
                r.baseline, r.mean, r.min, r.max
            );
        }
        let value = json!({ "scheme": config.scheme.number(), "seed": a.seed, "trials": a.trials, "rows": rows });
        write_outputs(&a.out, &csv, &value)?;
        emit(a.json, &value, &text);
        return Ok(());
    }

    let mapped = mapped_from(a.mapped.as_deref().expect("clap requires --mapped"))?;
    let ds = dataset_for(&a.dataset, &mapped.input_shape)?;
    let keys = a.keys.as_deref().map(keys_from).transpose()?;
    match a.mode {
        Mode::Random => {
            let report = attack_random_keys(&mapped, &ds, a.trials, a.seed, keys.as_ref())?;
            let summary = report.summary_json();
            write_outputs(&a.out, &report.to_csv(), &summary)?;
            let mut text = format!(
                "{} random-key trials: mean accuracy {:.4} (std {:.4}, min {:.4}, max {:.4})\n",
                report.trials.len(),
                report.mean,
                report.std_dev,
                report.min,
                report.max
            );
            if let Some(b) = report.baseline {
                text += &format!("baseline with true keys: {b:.4}\n");
            }
            emit(a.json, &summary, &text);
        }
        Mode::Dnc => {
            let Some(keys) = keys else {
                bail!("--mode dnc needs --keys to score the recovered bits");
            };
            let mut rng = attack_rng(a.seed, u64::MAX);
            let base = random_guess(&mapped, &mut rng);
            let targets = real_only_schedule(&mapped, &keys, a.targets, &mut rng);
            let report = attack_divide_and_conquer(&mapped, &ds, &keys, &base, &targets)?;
            let summary = report.summary_json();
            write_outputs(&a.out, &report.to_csv(), &summary)?;
            let text = format!(
                "divide-and-conquer: {}/{} key bits distinguishable ({:.1}%) on {} samples\n",
                report.distinguishable,
                report.results.len(),
                100.0 * report.fraction,
                report.samples
            );
            emit(a.json, &summary, &text);
        }
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let config = a.xbar.config()?;
    let report = SecurityReport::new(&config, a.small)?;
    let value: serde_json::Value = serde_json::from_str(&report.to_json())?;
    if let Some(out) = &a.out {
        write_atomic(out, report.to_json().as_bytes())
            .with_context(|| format!("writing {}", out.display()))?;
    }
    emit(a.json, &value, &report.render());
    Ok(())
}
