//! Builds a small custom world, checks its statistics on a probe draw and
//! writes a dataset.
//!
//! `cargo run --release --example generate_world -- [out.bin]`

use srn::synth::{validate_world, Edge, Glyph, Relation, Rule, Shape, WorldSpec};

fn main() -> srn::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "world_demo.bin".into());
    let world = WorldSpec {
        num_labels: 3,
        marginals: vec![0.5, 0.3, 0.2],
        glyphs: vec![
            Glyph { shape: Shape::Bar, color: [0.9, 0.9, 0.9], size: [7.0, 9.0] },
            Glyph { shape: Shape::Disk, color: [0.9, 0.8, 0.1], size: [5.0, 7.0] },
            Glyph { shape: Shape::Triangle, color: [0.2, 0.8, 0.2], size: [6.0, 8.0] },
        ],
        // A disk pulls in the bar and sits above it nine times out of ten.
        cooccurrence: vec![Edge { from: 1, to: 0, prob: 0.8 }],
        rules: vec![Rule { a: 1, b: 0, relation: Relation::Above, compliance: 0.9 }],
        seed: 3,
        ..WorldSpec::desk_benchmark()
    };
    world.validate()?;

    println!("exact marginals {:?}", world.expected_marginals()?);
    let report = validate_world(&world, 2000)?;
    print!("{}", report.to_text());

    let data = world.generate_counts(350, 50, 100)?;
    data.save(std::path::Path::new(&out))?;
    println!("{} samples written to {out}", data.len());

    // The desk benchmark world is also available as TOML for the CLI.
    println!("\n{}", WorldSpec::desk_benchmark().to_toml().lines().take(12).collect::<Vec<_>>().join("\n"));
    Ok(())
}
