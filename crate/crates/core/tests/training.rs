mod common;

use common::{mini_data, mini_run};
use srn::data::Split;
use srn::model::{ModelConfig, SrnModel};
use srn::trainer::{Stage, TrainConfig, Trainer};

#[test]
fn miniature_run_honours_freezing_lr_and_reproducibility() {
    let a = mini_run(4);
    assert!(a.frozen_changed.is_empty(), "{:?}", a.frozen_changed);
    assert!(a.trainable_static.is_empty(), "{:?}", a.trainable_static);
    assert!(a.lr_monotone());
    assert!(a.reached_floor());
    let b = mini_run(4);
    assert_eq!(a.checkpoint, b.checkpoint);
    let c = mini_run(5);
    assert_ne!(a.checkpoint, c.checkpoint);
}

fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
    }
}

#[test]
fn regularizer_on_zeroed_attention_learns_label_priors_only() {
    let data = srn::synth::WorldSpec { seed: 2, ..srn::synth::WorldSpec::desk_benchmark() }
        .generate_counts(200, 40, 0)
        .unwrap();
    let mut model = SrnModel::new(ModelConfig::default(), 8).unwrap();
    // sigmoid(-1e3) is exactly 0, so U = sigmoid(S) * A vanishes.
    for p in model.params.iter_mut() {
        match p.name.as_str() {
            "conv1.w" => p.value.fill(0.0),
            "conv1.b" => p.value.fill(-1e3),
            _ => {}
        }
    }
    let image = &data.samples[0].image;
    assert!(model.maps(image).unwrap().u.data().iter().all(|&u| u == 0.0));

    let config = TrainConfig { lr_init: 0.05, max_epochs: 40, plateau_patience: 10, augment: false, seed: 1, ..TrainConfig::default() };
    let mut trainer = Trainer::new(model, 2, config).unwrap();
    let train = data.indices(Split::Train);
    let loss_sr = trainer.model.nodes().loss_sr;
    let start = trainer.mean_loss(&data, &train, loss_sr).unwrap();
    assert!((start - std::f64::consts::LN_2).abs() < 1e-12, "{start}");

    trainer.run_stage(Stage::Regularizer, &data).unwrap();
    let c = data.num_labels;
    let prior: f64 = (0..c)
        .map(|l| {
            let p = train.iter().filter(|&&i| data.samples[i].targets[l]).count() as f64 / train.len() as f64;
            binary_entropy(p)
        })
        .sum::<f64>()
        / c as f64;
    let end = trainer.mean_loss(&data, &train, loss_sr).unwrap();
    // A constant input cannot beat the best constant logits.
    assert!(end >= prior - 1e-9, "{end} < {prior}");
    assert!(end - prior < 0.02, "{end} vs {prior}");
}

#[test]
fn stage_order_and_checkpoint_resume() {
    let data = mini_data();
    let cfg = TrainConfig { max_epochs: 1, augment: false, ..TrainConfig::default() };
    let mut t = Trainer::new(SrnModel::new(ModelConfig::default(), 1).unwrap(), 0, cfg.clone()).unwrap();
    assert!(t.run_stage(Stage::Attention, &data).is_err());
    t.run_stage(Stage::MainNet, &data).unwrap();
    let bytes = srn::checkpoint::Checkpoint::from_model(&t.model, 1).to_bytes();
    let back = srn::checkpoint::Checkpoint::read_from(bytes.as_slice()).unwrap().into_model().unwrap();
    assert_eq!(back.params, t.model.params);
}
