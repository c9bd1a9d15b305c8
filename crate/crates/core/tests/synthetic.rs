use srn::synth::{validate_world, Glyph, Relation, Rule, Shape, WorldSpec};

fn three_se(p: f64, n: usize) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

fn plain_world(marginals: Vec<f64>) -> WorldSpec {
    let c = marginals.len();
    let shapes = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Bar];
    WorldSpec {
        num_labels: c,
        marginals,
        glyphs: (0..c)
            .map(|l| Glyph { shape: shapes[l % 4], color: [0.2 + 0.1 * l as f64, 0.5, 0.9], size: [5.0, 7.0] })
            .collect(),
        cooccurrence: vec![],
        rules: vec![],
        ..WorldSpec::desk_benchmark()
    }
}

#[test]
fn desk_marginals_within_three_standard_errors() {
    let world = WorldSpec::desk_benchmark();
    let expected = world.expected_marginals().unwrap();
    let n = 10_000;
    let mut counts = vec![0usize; world.num_labels];
    for i in 0..n {
        let layout = world.layout(i).unwrap();
        for (l, &t) in layout.targets.iter().enumerate() {
            counts[l] += t as usize;
        }
    }
    for l in 0..world.num_labels {
        let p = counts[l] as f64 / n as f64;
        assert!((p - expected[l]).abs() <= three_se(expected[l], n), "label {l}: {p} vs {}", expected[l]);
    }
}

#[test]
fn hard_rule_holds_in_every_cooccurring_sample() {
    let mut world = plain_world(vec![0.6, 0.6, 0.3]);
    world.rules = vec![Rule { a: 0, b: 1, relation: Relation::Above, compliance: 1.0 }];
    let data = world.generate(2000).unwrap();
    let mut seen = 0;
    for s in &data.samples {
        if let (Some(a), Some(b)) = (s.centers[0], s.centers[1]) {
            assert!(a.0 < b.0, "{a:?} not above {b:?}");
            seen += 1;
        }
    }
    assert!(seen > 500);
}

#[test]
fn half_compliance_rule_realized_near_half() {
    let mut world = plain_world(vec![0.7, 0.7]);
    world.rules = vec![Rule { a: 0, b: 1, relation: Relation::LeftOf, compliance: 0.5 }];
    let report = validate_world(&world, 5000).unwrap();
    let rate = report.rules[0].rate;
    assert!((0.45..=0.55).contains(&rate), "{rate}");
}

#[test]
fn independent_labels_cooccur_as_products() {
    let world = plain_world(vec![0.5, 0.3, 0.2, 0.6]);
    let report = validate_world(&world, 5000).unwrap();
    let m = &report.marginals;
    for a in 0..4 {
        for b in a + 1..4 {
            let p = m[a] * m[b];
            let got = report.cooccurrence[a][b];
            assert!((got - p).abs() <= three_se(p, 5000), "{a},{b}: {got} vs {p}");
        }
    }
    assert!(report.flags.is_empty(), "{:?}", report.flags);
}

#[test]
fn zero_noise_zero_marginals_give_background() {
    let mut world = plain_world(vec![0.0; 3]);
    world.noise = 0.0;
    world.background = [0.25, 0.5, 0.75];
    let data = world.generate(20).unwrap();
    for s in &data.samples {
        assert!(s.targets.iter().all(|&t| !t));
        assert!(s.centers.iter().all(Option::is_none));
        for (k, &v) in s.image.data().iter().enumerate() {
            assert_eq!(v, world.background[k % 3]);
        }
    }
}

#[test]
fn splits_are_disjoint_and_exhaustive() {
    let data = WorldSpec::desk_benchmark().generate_counts(70, 10, 20).unwrap();
    use srn::data::Split;
    let mut all: Vec<usize> = [Split::Train, Split::Val, Split::Test].iter().flat_map(|&s| data.indices(s)).collect();
    assert_eq!(data.indices(Split::Train).len(), 70);
    assert_eq!(data.indices(Split::Test).len(), 20);
    all.sort();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
}
