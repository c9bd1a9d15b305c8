//! Closed-form parameter counts at desk scale and at the full scale,
//! set against the naive ungrouped alternative.
//!
//! `cargo run --example param_budget`

use srn::model::{ModelConfig, ParamBudget, SrnModel};

fn show(name: &str, cfg: &ModelConfig) {
    let b = ParamBudget::closed_form(cfg);
    println!("{name}");
    println!("  backbone {:>12}  classifier {:>8}", b.cnn, b.cls);
    println!("  attention {:>11}  conv1 {:>13}", b.att, b.conv1);
    println!("  f_sr {:>16}  of which conv4 weights {}", b.sr, b.conv4_weights);
    println!("  branch total {:>8}", b.srn_total());
    println!(
        "  naive single layer {} ({:.3} x C million)",
        b.naive_single_layer,
        b.naive_single_layer as f64 / cfg.num_labels as f64 / 1e6
    );
}

fn main() -> srn::Result<()> {
    let desk = ModelConfig::default();
    show("desk scale", &desk);
    // The instantiated model agrees with the formula.
    let model = SrnModel::new(desk.clone(), 0)?;
    println!("  instantiated parameters {}\n", model.params.count(None));
    for c in [81, 80, 14] {
        show(&format!("full scale, C = {c}"), &ModelConfig::full_scale(c));
    }
    Ok(())
}
