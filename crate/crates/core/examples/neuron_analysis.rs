//! Which conv4 neurons track where a label sits, and whether the full model
//! gains most on labels that share images with many others.
//!
//! Trains the benchmark setting from scratch, a few minutes on one core.
//!
//! `cargo run --release --example neuron_analysis`

use srn::analysis::{ap_gain_vs_concurrency, neuron_location_correlation, Axis};
use srn::benchmark::{TEST, TRAIN, VAL};
use srn::data::Split;
use srn::metrics::{evaluate, PredictionSet, Protocol};
use srn::model::{ModelConfig, SrnModel};
use srn::synth::WorldSpec;
use srn::trainer::{score_split, Stage, TrainConfig, Trainer};

fn main() -> srn::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let data = WorldSpec { seed: 1, ..WorldSpec::desk_benchmark() }.generate_counts(TRAIN, VAL, TEST)?;
    let config = TrainConfig::desk_benchmark(1);
    let mut trainer = Trainer::new(SrnModel::new(ModelConfig::default(), 1)?, 0, config)?;
    trainer.run_stage(Stage::MainNet, &data)?;
    let targets: Vec<bool> = data.split(Split::Test).iter().flat_map(|s| s.targets.clone()).collect();
    let baseline = evaluate(
        &PredictionSet::new(8, score_split(&trainer.model, 1, &data, Split::Test)?.concat(), targets.clone(), None)?,
        &[Protocol::All],
    )?;
    for stage in [Stage::Attention, Stage::Regularizer, Stage::Joint] {
        trainer.run_stage(stage, &data)?;
    }
    let full = evaluate(
        &PredictionSet::new(8, score_split(&trainer.model, 4, &data, Split::Test)?.concat(), targets, None)?,
        &[Protocol::All],
    )?;
    println!("test mAP {:.4} -> {:.4}", baseline.map, full.map);

    let test = data.split(Split::Test);
    let table = neuron_location_correlation(&trainer.model, &test)?;
    if let Some(e) = table.strongest() {
        println!("strongest: neuron {} vs label {} {:?}, r = {:.3} over {} images", e.neuron, e.label, e.axis, e.r, e.count);
        let other = if e.axis == Axis::Y { Axis::X } else { Axis::Y };
        println!("same neuron on the other axis: r = {:.3}", table.get(e.neuron, e.label, other).r);
    }
    let gains = ap_gain_vs_concurrency(&full, &baseline, &test)?;
    print!("{}", gains.to_text());
    Ok(())
}
