//! Attention (A), confidence (S) and weighted attention (U) maps of one
//! image, printed as text heat maps. Trains stages 1 and 2 briefly first so
//! the maps mean something.
//!
//! `cargo run --release --example attention_maps`

use srn::data::Split;
use srn::model::{ModelConfig, SrnModel};
use srn::synth::WorldSpec;
use srn::trainer::{Stage, TrainConfig, Trainer};

fn heat(values: &[f64], w: usize) -> String {
    let ramp = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    values
        .chunks(w)
        .map(|row| {
            row.iter()
                .map(|&v| if hi > lo { ramp[((v - lo) / (hi - lo) * 9.0).round() as usize] } else { '-' })
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn main() -> srn::Result<()> {
    let data = WorldSpec { seed: 6, ..WorldSpec::desk_benchmark() }.generate_counts(600, 100, 50)?;
    let config = TrainConfig { stage_max_epochs: vec![8, 6], ..TrainConfig::desk_benchmark(6) };
    let mut trainer = Trainer::new(SrnModel::new(ModelConfig::default(), 6)?, 0, config)?;
    trainer.run_stage(Stage::MainNet, &data)?;
    trainer.run_stage(Stage::Attention, &data)?;

    let sample = data.split(Split::Test).into_iter().find(|s| s.num_present() >= 3).expect("a busy test image");
    let maps = trainer.model.maps(&sample.image)?;
    let w = trainer.model.config.feature_w;
    for (l, center) in sample.centers.iter().enumerate() {
        let Some((y, x)) = center else { continue };
        println!("label {l} at ({y:.1}, {x:.1}), y_att {:.3}", maps.y_att.data()[l]);
        for (name, t) in [("A", &maps.a), ("U", &maps.u)] {
            println!("{name}\n{}", heat(&t.channel(l), w));
        }
        let u_max = maps.u.channel(l).iter().zip(maps.a.channel(l)).all(|(u, a)| *u <= a);
        println!("U <= A everywhere: {u_max}\n");
    }
    Ok(())
}
