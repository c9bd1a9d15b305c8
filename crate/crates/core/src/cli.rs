//! Command-line front end. `srn <command> --help` lists the flags.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use crate::analysis::{self, top_activating};
use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport, PredictionSet, Protocol};
use crate::model::{ModelConfig, SrnModel};
use crate::synth::{validate_world, WorldSpec};
use crate::trainer::{score_split, write_log, Stage, TrainConfig, Trainer};

/// Environment variable fixing the number of worker threads for evaluation.
pub const THREADS_ENV: &str = "SRN_THREADS";

#[derive(Parser, Debug)]
#[command(name = "srn", version, about = "Spatial regularization networks for multi-label classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset from a world spec.
    Generate {
        /// World spec (TOML). Defaults to the desk benchmark world.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        /// Total samples, split by the world's fractions.
        #[arg(long, conflicts_with = "counts")]
        n: Option<usize>,
        /// Explicit train,val,test sizes.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        /// Probe size for the world statistics report.
        #[arg(long, default_value_t = 5000)]
        probe: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train some or all of the four stages.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training config (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        stages: Vec<usize>,
        /// Checkpoint to resume from; defaults to the previous stage's
        /// checkpoint in `--out`.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split and write metric reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// `all`, `top-k`, `top-k-filtered`, or explicit forms such as `top-3`.
        #[arg(long, value_delimiter = ',', default_value = "all,top-k,top-k-filtered")]
        protocols: Vec<String>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0.5)]
        filter_threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write attention (A), confidence (S) and weighted attention (U) maps.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample indices into the whole dataset.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Neuron/location correlation, top-activating samples or AP gains.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comparison checkpoint for `ap-gain`.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        which: Which,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Correlation,
    TopActivations,
    ApGain,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn stage_checkpoint(dir: &Path, stage: usize) -> PathBuf {
    dir.join(format!("stage{stage}.ckpt"))
}

pub fn init_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // A second initialisation in the same process is harmless to ignore.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads();
    match cli.command {
        Command::Generate { config, seed, n, counts, probe, out } => generate(config, seed, n, counts, probe, &out),
        Command::Train { data, config, model_config, seed, stages, init, out } => {
            train(&data, config, model_config, seed, &stages, init, &out)
        }
        Command::Eval { checkpoint, data, split, protocols, k, filter_threshold, out } => {
            let protocols = resolve_protocols(&protocols, k, filter_threshold)?;
            eval(&checkpoint, &data, split.into(), &protocols, &out).map(|_| ())
        }
        Command::ExportAttention { checkpoint, data, ids, out } => export_attention(&checkpoint, &data, &ids, &out),
        Command::Analyze { checkpoint, baseline, data, which, split, k, out } => {
            analyze(&checkpoint, baseline.as_deref(), &data, which, split.into(), k, &out)
        }
    }
}

/// Expands `top-k` and `top-k-filtered` with the given `k` and threshold.
pub fn resolve_protocols(names: &[String], k: usize, threshold: f64) -> Result<Vec<Protocol>> {
    if k == 0 {
        return Err(Error::Config("--k must be at least 1".into()));
    }
    names
        .iter()
        .map(|n| match n.as_str() {
            "top-k" => Ok(Protocol::TopK { k, filter: None }),
            "top-k-filtered" => Ok(Protocol::TopK { k, filter: Some(threshold) }),
            other => other.parse(),
        })
        .collect()
}

fn generate(config: Option<PathBuf>, seed: u64, n: Option<usize>, counts: Option<Vec<usize>>, probe: usize, out: &Path) -> Result<()> {
    let mut world = match &config {
        Some(p) => WorldSpec::from_toml(&read_text(p)?)?,
        None => WorldSpec::desk_benchmark(),
    };
    world.seed = seed;
    world.validate()?;
    let data = match (n, counts) {
        (_, Some(c)) if c.len() != 3 => return Err(Error::Config(format!("--counts needs train,val,test sizes, got {c:?}"))),
        (_, Some(c)) => world.generate_counts(c[0], c[1], c[2])?,
        (Some(n), None) => world.generate(n)?,
        (None, None) => world.generate_counts(2000, 300, 500)?,
    };
    fs::create_dir_all(out)?;
    data.save(&out.join("dataset.bin"))?;
    write_text(&out.join("world.toml"), &world.to_toml())?;
    let report = validate_world(&world, probe)?;
    write_text(&out.join("world_report.txt"), &report.to_text())?;
    write_text(&out.join("world_report.json"), &serde_json::to_string_pretty(&report)?)?;
    println!("{} samples written to {}", data.len(), out.display());
    Ok(())
}

fn train(
    data_path: &Path,
    config: Option<PathBuf>,
    model_config: Option<PathBuf>,
    seed: u64,
    stages: &[usize],
    init: Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let mut stages: Vec<Stage> = stages.iter().map(|&s| Stage::from_index(s)).collect::<Result<_>>()?;
    stages.sort();
    stages.dedup();
    if stages.windows(2).any(|w| w[1].index() != w[0].index() + 1) {
        return Err(Error::Config("requested stages must be consecutive".into()));
    }
    let first = stages.first().copied().ok_or_else(|| Error::Config("no stages requested".into()))?;
    let mut train_cfg = match &config {
        Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    train_cfg.seed = seed;
    let data = Dataset::load(data_path)?;

    let (model, completed) = if first == Stage::MainNet {
        let cfg = match &model_config {
            Some(p) => ModelConfig::from_toml(&read_text(p)?)?,
            None => ModelConfig { num_labels: data.num_labels, image_h: data.image_h, image_w: data.image_w, ..ModelConfig::default() },
        };
        (SrnModel::new(cfg, seed)?, 0)
    } else {
        let prev = first.index() - 1;
        let path = init.unwrap_or_else(|| stage_checkpoint(out, prev));
        if !path.exists() {
            return Err(Error::Config(format!(
                "stage {} needs the stage {prev} checkpoint, {} does not exist",
                first.index(),
                path.display()
            )));
        }
        let ckpt = Checkpoint::load(&path)?;
        if ckpt.stage as usize != prev {
            return Err(Error::Config(format!(
                "{} holds a stage {} model, stage {} needs stage {prev}",
                path.display(),
                ckpt.stage,
                first.index()
            )));
        }
        (ckpt.into_model()?, prev)
    };
    fs::create_dir_all(out)?;
    write_text(&out.join("train_config.toml"), &train_cfg.to_toml())?;
    write_text(&out.join("model_config.toml"), &model.config.to_toml())?;
    let mut trainer = Trainer::new(model, completed, train_cfg)?;
    let mut logs = Vec::new();
    for stage in stages {
        let report = trainer.run_stage(stage, &data)?;
        logs.extend(report.epochs.iter().cloned());
        let path = stage_checkpoint(out, stage.index());
        Checkpoint::from_model(&trainer.model, stage.index() as u32).save(&path)?;
        println!(
            "stage {}: {} epochs, final val loss {:.5}, checkpoint {}",
            stage.index(),
            report.epochs.len(),
            report.final_val_loss(),
            path.display()
        );
    }
    let log_name = format!("train_log_stage{}-{}.tsv", first.index(), trainer.completed);
    write_log(BufWriter::new(fs::File::create(out.join(&log_name))?), &logs)?;
    Ok(())
}

fn load_pair(checkpoint: &Path, data: &Path) -> Result<(Checkpoint, Dataset)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = Dataset::load(data)?;
    if data.num_labels != ckpt.config.num_labels || data.image_c != ckpt.config.image_c {
        return Err(Error::Data(format!(
            "dataset has {} labels, checkpoint expects {}",
            data.num_labels, ckpt.config.num_labels
        )));
    }
    Ok((ckpt, data))
}

/// Predictions of a checkpoint on one split, with the head its stage calls for.
pub fn predictions(ckpt: Checkpoint, data: &Dataset, split: Split) -> Result<PredictionSet> {
    let stage = ckpt.stage as usize;
    let model = ckpt.into_model()?;
    let scores = score_split(&model, stage, data, split)?;
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Data(format!("split {split:?} is empty")));
    }
    let targets = idx.iter().flat_map(|&i| data.samples[i].targets.clone()).collect();
    let mask = idx.iter().flat_map(|&i| data.samples[i].mask.clone()).collect();
    PredictionSet::with_ids(data.num_labels, idx.iter().map(|i| i.to_string()).collect(), scores.concat(), targets, Some(mask))
}

fn eval(checkpoint: &Path, data: &Path, split: Split, protocols: &[Protocol], out: &Path) -> Result<MetricsReport> {
    let (ckpt, data) = load_pair(checkpoint, data)?;
    let set = predictions(ckpt, &data, split)?;
    let report = evaluate(&set, protocols)?;
    fs::create_dir_all(out)?;
    set.write_tsv(BufWriter::new(fs::File::create(out.join("predictions.tsv"))?))?;
    for p in &report.protocols {
        let single = MetricsReport { protocols: vec![p.clone()], ..report.clone() };
        write_text(&out.join(format!("report_{}.json", p.protocol)), &single.to_json())?;
    }
    let mut ap = String::from("label\tAP\n");
    for (l, a) in report.per_class_ap.iter().enumerate() {
        ap += &format!("{l}\t{}\n", a.map_or("excluded".to_string(), |v| format!("{v:.6}")));
    }
    write_text(&out.join("per_class_ap.tsv"), &ap)?;
    print!("{}", report.to_text());
    Ok(report)
}

/// Scales a map to 0..=255; a constant map becomes mid-gray.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 })
        .collect()
}

pub fn write_pgm(path: &Path, h: usize, w: usize, pixels: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(pixels)?;
    f.flush()?;
    Ok(())
}

/// One row per line, values separated by spaces, printed exactly.
pub fn map_to_text(h: usize, w: usize, values: &[f64]) -> String {
    let mut s = String::new();
    for i in 0..h {
        let row: Vec<String> = values[i * w..(i + 1) * w].iter().map(|v| v.to_string()).collect();
        s += &row.join(" ");
        s.push('\n');
    }
    s
}

pub fn parse_map_text(text: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Data(format!("bad map value {t:?}: {e}"))))
        .collect()
}

fn export_attention(checkpoint: &Path, data: &Path, ids: &[usize], out: &Path) -> Result<()> {
    let (ckpt, data) = load_pair(checkpoint, data)?;
    let model = ckpt.into_model()?;
    if let Some(&bad) = ids.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Data(format!("sample id {bad} out of range, dataset has {}", data.len())));
    }
    fs::create_dir_all(out)?;
    let (h, w, c) = (model.config.feature_h, model.config.feature_w, model.config.num_labels);
    for &id in ids {
        let image = crate::trainer::eval_view(&data.samples[id].image, model.config.image_h, model.config.image_w)?;
        let maps = model.maps(&image)?;
        for (kind, t) in [("A", &maps.a), ("S", &maps.s), ("U", &maps.u)] {
            for l in 0..c {
                let values = t.channel(l);
                let stem = format!("sample{id}_label{l}_{kind}");
                write_pgm(&out.join(format!("{stem}.pgm")), h, w, &to_gray(&values))?;
                fs::write(out.join(format!("{stem}.txt")), map_to_text(h, w, &values))?;
            }
        }
    }
    println!("exported maps for {} samples to {}", ids.len(), out.display());
    Ok(())
}

fn analyze(checkpoint: &Path, baseline: Option<&Path>, data: &Path, which: Which, split: Split, k: usize, out: &Path) -> Result<()> {
    let (ckpt, data) = load_pair(checkpoint, data)?;
    let samples = data.split(split);
    let idx = data.indices(split);
    fs::create_dir_all(out)?;
    match which {
        Which::Correlation => {
            let model = ckpt.into_model()?;
            let table = analysis::neuron_location_correlation(&model, &samples)?;
            write_text(&out.join("correlation.tsv"), &table.to_text())?;
            write_text(&out.join("correlation.json"), &table.to_json())?;
            if let Some(e) = table.strongest() {
                println!("strongest: neuron {} label {} axis {:?} r = {:.4} over {} samples", e.neuron, e.label, e.axis, e.r, e.count);
            }
        }
        Which::TopActivations => {
            let model = ckpt.into_model()?;
            let acts = analysis::conv4_activations(&model, &samples)?;
            let neurons = model.config.conv4_channels();
            let mut text = String::from("neuron\trank\tsample\tactivation\n");
            let mut json = Vec::new();
            for n in 0..neurons {
                let top = top_activating(&acts, n, k)?;
                for (rank, &(pos, a)) in top.iter().enumerate() {
                    text += &format!("{n}\t{}\t{}\t{a}\n", rank + 1, idx[pos]);
                }
                json.push(top.iter().map(|&(pos, a)| (idx[pos], a)).collect::<Vec<_>>());
            }
            write_text(&out.join("top_activations.tsv"), &text)?;
            write_text(&out.join("top_activations.json"), &serde_json::to_string_pretty(&json)?)?;
        }
        Which::ApGain => {
            let base_path = baseline.ok_or_else(|| Error::Config("ap-gain needs --baseline".into()))?;
            let base = Checkpoint::load(base_path)?;
            if base.config.num_labels != data.num_labels {
                return Err(Error::Data("baseline checkpoint has a different label count".into()));
            }
            let all = [Protocol::All];
            let report = evaluate(&predictions(ckpt, &data, split)?, &all)?;
            let base_report = evaluate(&predictions(base, &data, split)?, &all)?;
            let table = analysis::ap_gain_vs_concurrency(&report, &base_report, &samples)?;
            write_text(&out.join("ap_gain.tsv"), &table.to_text())?;
            write_text(&out.join("ap_gain.json"), &table.to_json())?;
            print!("{}", table.to_text());
        }
    }
    Ok(())
}
