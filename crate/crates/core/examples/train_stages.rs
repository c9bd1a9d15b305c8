//! Four-stage training on a reduced benchmark, saving a checkpoint per stage
//! and reloading the last one.
//!
//! `cargo run --release --example train_stages -- [out dir]`

use std::path::PathBuf;

use srn::checkpoint::Checkpoint;
use srn::data::Split;
use srn::model::{ModelConfig, SrnModel};
use srn::synth::WorldSpec;
use srn::trainer::{write_log, Stage, TrainConfig, Trainer};

fn main() -> srn::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "train_demo".into()));
    std::fs::create_dir_all(&dir)?;

    let data = WorldSpec { seed: 4, ..WorldSpec::desk_benchmark() }.generate_counts(1000, 150, 100)?;
    let config = TrainConfig { stage_max_epochs: vec![12, 6, 6, 4], ..TrainConfig::desk_benchmark(4) };
    let mut trainer = Trainer::new(SrnModel::new(ModelConfig::default(), 4)?, 0, config)?;

    let mut logs = Vec::new();
    for stage in Stage::ALL {
        let report = trainer.run_stage(stage, &data)?;
        println!(
            "stage {} ({:?}): {} epochs, val loss {:.4}, trained groups {:?}",
            stage.index(),
            stage,
            report.epochs.len(),
            report.final_val_loss(),
            stage.trainable()
        );
        logs.extend(report.epochs);
        Checkpoint::from_model(&trainer.model, stage.index() as u32).save(&dir.join(format!("stage{}.ckpt", stage.index())))?;
    }
    write_log(std::fs::File::create(dir.join("train_log.tsv"))?, &logs)?;

    let reloaded = Checkpoint::load(&dir.join("stage4.ckpt"))?.into_model()?;
    let sample = data.split(Split::Test).into_iter().find(|s| s.num_present() >= 2).expect("a test image with two labels");
    let p = reloaded.predict(&sample.image)?;
    println!("targets {:?}", sample.targets.iter().map(|&t| t as u8).collect::<Vec<_>>());
    let probs: Vec<String> = p.y_hat.data().iter().map(|&v| format!("{:.2}", srn::layers::sigmoid_scalar(v))).collect();
    println!("scores  {probs:?}");
    Ok(())
}
