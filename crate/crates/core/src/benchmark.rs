//! Main net versus full model on the planted-relation benchmark.

use std::time::Instant;

use log::info;
use serde::Serialize;

use crate::data::{Dataset, Split};
use crate::error::Result;
use crate::metrics::{evaluate, PredictionSet, Protocol};
use crate::model::{ModelConfig, SrnModel};
use crate::synth::WorldSpec;
use crate::trainer::{score_split, Stage, TrainConfig, Trainer};

pub const TRAIN: usize = 2000;
pub const VAL: usize = 300;
pub const TEST: usize = 500;

#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub seed: u64,
    /// Test mAP after each completed stage.
    pub stage_map: Vec<f64>,
    /// Validation BCE of the prediction head after each stage (main net
    /// through stage 2, aggregated logits after).
    pub head_val_loss: Vec<f64>,
    pub per_class_ap: Vec<Option<f64>>,
    pub seconds: f64,
}

impl AblationRun {
    pub fn baseline(&self) -> f64 {
        self.stage_map[0]
    }

    pub fn full(&self) -> f64 {
        *self.stage_map.last().expect("at least one stage")
    }

    /// Full-model gain over the main net, in mAP points.
    pub fn gain(&self) -> f64 {
        100.0 * (self.full() - self.baseline())
    }
}

pub fn test_map(trainer: &Trainer, data: &Dataset) -> Result<(f64, Vec<Option<f64>>)> {
    let scores = score_split(&trainer.model, trainer.completed, data, Split::Test)?;
    let targets = data.split(Split::Test).iter().flat_map(|s| s.targets.clone()).collect();
    let set = PredictionSet::new(data.num_labels, scores.concat(), targets, None)?;
    let report = evaluate(&set, &[Protocol::All])?;
    Ok((report.map, report.per_class_ap))
}

/// Trains all four stages on the benchmark world drawn with `seed`.
pub fn run_ablation(seed: u64, model: ModelConfig, config: TrainConfig) -> Result<AblationRun> {
    let start = Instant::now();
    let world = WorldSpec { seed, ..WorldSpec::desk_benchmark() };
    let data = world.generate_counts(TRAIN, VAL, TEST)?;
    let mut trainer = Trainer::new(SrnModel::new(model, seed)?, 0, config)?;
    let mut run = AblationRun { seed, stage_map: vec![], head_val_loss: vec![], per_class_ap: vec![], seconds: 0.0 };
    for stage in Stage::ALL {
        trainer.run_stage(stage, &data)?;
        let (map, ap) = test_map(&trainer, &data)?;
        info!("seed {seed} stage {}: test mAP {map:.4}", stage.index());
        run.stage_map.push(map);
        let nodes = trainer.model.nodes();
        let head = if trainer.completed >= 3 { nodes.loss_hat } else { nodes.loss_cls };
        run.head_val_loss.push(trainer.mean_loss(&data, &data.indices(Split::Val), head)?);
        run.per_class_ap = ap;
    }
    run.seconds = start.elapsed().as_secs_f64();
    Ok(run)
}
