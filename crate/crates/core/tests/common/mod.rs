#![allow(dead_code)]

use srn::checkpoint::Checkpoint;
use srn::data::Dataset;
use srn::graph::ParamStore;
use srn::model::{ModelConfig, SrnModel};
use srn::synth::WorldSpec;
use srn::trainer::{Stage, StageReport, TrainConfig, Trainer};

/// Outcome of a short four-stage run, for the training contracts.
pub struct MiniRun {
    pub reports: Vec<StageReport>,
    /// Names of parameters that moved although their group was frozen.
    pub frozen_changed: Vec<String>,
    /// Names of trainable parameters that never moved.
    pub trainable_static: Vec<String>,
    pub checkpoint: Vec<u8>,
    pub lr_floor: f64,
}

pub fn mini_data() -> Dataset {
    WorldSpec { seed: 11, ..WorldSpec::desk_benchmark() }.generate_counts(48, 16, 0).unwrap()
}

pub fn mini_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        lr_init: 1e-3,
        max_epochs: 5,
        // Every epoch counts as a plateau, so the rate walks down to the floor.
        plateau_patience: 1,
        plateau_min_delta: 10.0,
        seed,
        ..TrainConfig::default()
    }
}

fn bits(store: &ParamStore) -> Vec<(String, Vec<u64>)> {
    store.iter().map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect())).collect()
}

pub fn mini_run(seed: u64) -> MiniRun {
    let data = mini_data();
    let config = mini_config(seed);
    let lr_floor = config.lr_floor;
    let mut trainer = Trainer::new(SrnModel::new(ModelConfig::default(), seed).unwrap(), 0, config).unwrap();
    let mut run = MiniRun { reports: vec![], frozen_changed: vec![], trainable_static: vec![], checkpoint: vec![], lr_floor };
    for stage in Stage::ALL {
        let before = bits(&trainer.model.params);
        run.reports.push(trainer.run_stage(stage, &data).unwrap());
        let after = bits(&trainer.model.params);
        for (((_, p), (name, a)), (_, b)) in trainer.model.params.iter().zip(&before).zip(&after) {
            let moved = a != b;
            let trainable = stage.trainable().contains(&p.group);
            if moved && !trainable {
                run.frozen_changed.push(format!("stage {}: {name}", stage.index()));
            }
            if !moved && trainable {
                run.trainable_static.push(format!("stage {}: {name}", stage.index()));
            }
        }
    }
    run.checkpoint = Checkpoint::from_model(&trainer.model, 4).to_bytes();
    run
}

impl MiniRun {
    /// Non-increasing within each stage and never below the floor.
    pub fn lr_monotone(&self) -> bool {
        self.reports.iter().all(|r| {
            r.epochs.windows(2).all(|w| w[1].lr <= w[0].lr) && r.epochs.iter().all(|e| e.lr >= self.lr_floor)
        })
    }

    pub fn reached_floor(&self) -> bool {
        self.reports.iter().all(|r| r.epochs.last().is_some_and(|e| e.lr == self.lr_floor))
    }
}
