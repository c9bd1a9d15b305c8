//! Metrics on a hand-made prediction set: mAP, per-class AP, and macro/micro
//! scores under the threshold and top-3 protocols.
//!
//! `cargo run --example evaluate_metrics`

use srn::metrics::{evaluate, PredictionSet, Protocol};

fn main() -> srn::Result<()> {
    // Four images, five labels. Image 3 has one masked (unannotated) label.
    let scores = vec![
        0.9, 0.8, 0.1, 0.05, 0.3, //
        0.2, 0.45, 0.1, 0.3, 0.05, //
        0.5, 0.7, 0.6, 0.2, 0.9, //
        0.1, 0.85, 0.95, 0.4, 0.35,
    ];
    let targets = [
        1, 1, 0, 0, 0, //
        0, 1, 0, 1, 0, //
        0, 1, 1, 0, 1, //
        0, 0, 1, 0, 0,
    ]
    .map(|t| t == 1)
    .to_vec();
    let mut mask = vec![true; 20];
    mask[15 + 3] = false;

    let set = PredictionSet::new(5, scores, targets, Some(mask))?;
    let protocols: Vec<Protocol> = ["all", "top-3", "top-3-filtered"].iter().map(|p| p.parse()).collect::<srn::Result<_>>()?;
    let report = evaluate(&set, &protocols)?;
    print!("{}", report.to_text());
    for p in &protocols {
        println!("{:<16} {:?}", p.to_string(), p.binarize(&set).chunks(5).map(|r| r.iter().map(|&b| b as u8).collect::<Vec<_>>()).collect::<Vec<_>>());
    }
    println!("{}", report.to_json());
    Ok(())
}
