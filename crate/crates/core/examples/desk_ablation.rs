//! Main net alone versus the full four-stage model on the planted-relation
//! benchmark, over several seeds.
//!
//! `cargo run --release --example desk_ablation -- [seeds, default 1,2,3]`

use srn::benchmark::run_ablation;
use srn::model::ModelConfig;
use srn::trainer::TrainConfig;

fn main() -> srn::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').filter_map(|e| e.parse().ok()).collect())
        .unwrap_or_else(|| vec![1, 2, 3]);

    let mut gains = Vec::new();
    for &seed in &seeds {
        let run = run_ablation(seed, ModelConfig::default(), TrainConfig::desk_benchmark(seed))?;
        let maps: Vec<String> = run.stage_map.iter().map(|m| format!("{m:.4}")).collect();
        println!("seed {seed}: mAP by stage {maps:?}, gain {:+.2} points, {:.0}s", run.gain(), run.seconds);
        gains.push(run.gain());
    }
    gains.sort_by(f64::total_cmp);
    println!("median gain {:+.2} points", gains[gains.len() / 2]);
    Ok(())
}
