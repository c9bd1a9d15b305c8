use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use srn::checkpoint::Checkpoint;
use srn::cli::parse_map_text;
use srn::data::Dataset;
use srn::metrics::MetricsReport;
use tempfile::TempDir;

fn srn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srn"))
        .args(args)
        .env("SRN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = srn(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small desk dataset plus a stage-1..4 run at one epoch per stage.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(stages: &str) -> Self {
        let dir = TempDir::new().unwrap();
        let f = Fixture { dir };
        ok(&["generate", "--seed", "5", "--counts", "40,10,20", "--probe", "200", "--out", s(&f.path("data"))]);
        fs::write(
            f.path("train.toml"),
            "max_epochs = 1\naugment = false\nlr_init = 0.05\nbatch_size = 8\n",
        )
        .unwrap();
        if !stages.is_empty() {
            ok(&[
                "train",
                "--data",
                s(&f.data()),
                "--config",
                s(&f.path("train.toml")),
                "--seed",
                "3",
                "--stages",
                stages,
                "--out",
                s(&f.path("run")),
            ]);
        }
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self) -> PathBuf {
        self.path("data/dataset.bin")
    }

    fn ckpt(&self, stage: usize) -> PathBuf {
        self.path(&format!("run/stage{stage}.ckpt"))
    }
}

#[test]
fn generate_is_reproducible_and_reports() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["generate", "--seed", "9", "--n", "50", "--probe", "100", "--out", s(out)]);
    }
    for name in ["dataset.bin", "world.toml", "world_report.txt", "world_report.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let data = Dataset::load(&a.join("dataset.bin")).unwrap();
    assert_eq!(data.len(), 50);
    assert_eq!(data.num_labels, 8);
}

#[test]
fn cyclic_hard_rules_exit_with_config_code() {
    let dir = TempDir::new().unwrap();
    let mut world = srn::synth::WorldSpec::desk_benchmark();
    for r in &mut world.rules {
        r.compliance = 1.0;
    }
    // 4 above 0 and 0 above 4.
    world.rules.push(srn::synth::Rule { a: 0, b: 4, relation: srn::synth::Relation::Above, compliance: 1.0 });
    let spec = dir.path().join("world.toml");
    fs::write(&spec, toml_of(&world)).unwrap();
    let out = srn(&["generate", "--config", s(&spec), "--seed", "1", "--n", "10", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cycl"));
}

fn toml_of(world: &srn::synth::WorldSpec) -> String {
    world.to_toml()
}

#[test]
fn later_stage_without_checkpoint_fails() {
    let f = Fixture::new("");
    let out = srn(&["train", "--data", s(&f.data()), "--seed", "1", "--stages", "2", "--out", s(&f.path("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage 1 checkpoint"));
    assert!(!f.ckpt(2).exists());
}

#[test]
fn missing_data_file_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let out = srn(&["train", "--data", s(&dir.path().join("nope.bin")), "--seed", "1", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn staged_training_eval_export_and_analysis() {
    let f = Fixture::new("1");
    assert!(f.ckpt(1).exists());
    // Resume from the stage-1 checkpoint in the same directory.
    ok(&["train", "--data", s(&f.data()), "--config", s(&f.path("train.toml")), "--seed", "3", "--stages", "2,3,4", "--out", s(&f.path("run"))]);
    for stage in 1..=4 {
        assert_eq!(Checkpoint::load(&f.ckpt(stage)).unwrap().stage, stage as u32);
    }
    let log = fs::read_to_string(f.path("run/train_log_stage2-4.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);

    // Two protocols give two report files; a rerun writes identical bytes.
    let ev = |out: &str| {
        ok(&["eval", "--checkpoint", s(&f.ckpt(4)), "--data", s(&f.data()), "--protocols", "all,top-3", "--out", s(&f.path(out))])
    };
    ev("e1");
    ev("e2");
    let reports: Vec<_> = fs::read_dir(f.path("e1"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("report_"))
        .collect();
    assert_eq!(reports.len(), 2, "{reports:?}");
    for name in ["report_all.json", "report_top-3.json", "predictions.tsv", "per_class_ap.tsv"] {
        assert_eq!(fs::read(f.path("e1").join(name)).unwrap(), fs::read(f.path("e2").join(name)).unwrap(), "{name}");
    }
    let report = MetricsReport::from_json(&fs::read_to_string(f.path("e1/report_top-3.json")).unwrap()).unwrap();
    assert!(report.protocol("top-3").is_some());

    // Raw map files parse back to the in-memory maps, and U <= A.
    ok(&["export-attention", "--checkpoint", s(&f.ckpt(4)), "--data", s(&f.data()), "--ids", "0,3", "--out", s(&f.path("maps"))]);
    let model = Checkpoint::load(&f.ckpt(4)).unwrap().into_model().unwrap();
    let data = Dataset::load(&f.data()).unwrap();
    let maps = model.maps(&data.samples[3].image).unwrap();
    for l in 0..8 {
        let read = |k: &str| parse_map_text(&fs::read_to_string(f.path(&format!("maps/sample3_label{l}_{k}.txt"))).unwrap()).unwrap();
        let (a, u) = (read("A"), read("U"));
        assert_eq!(a, maps.a.channel(l));
        assert_eq!(u, maps.u.channel(l));
        assert_eq!(read("S"), maps.s.channel(l));
        assert!(u.iter().zip(&a).all(|(u, a)| u <= a));
        let pgm = fs::read(f.path(&format!("maps/sample0_label{l}_A.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(pgm.len(), 11 + 64);
    }
    let out = srn(&["export-attention", "--checkpoint", s(&f.ckpt(4)), "--data", s(&f.data()), "--ids", "70", "--out", s(&f.path("maps"))]);
    assert_eq!(out.status.code(), Some(3));

    // Identical checkpoints give zero AP gain everywhere.
    let gain = f.path("gain");
    ok(&["analyze", "--checkpoint", s(&f.ckpt(4)), "--baseline", s(&f.ckpt(4)), "--data", s(&f.data()), "--which", "ap-gain", "--out", s(&gain)]);
    let table: serde_json::Value = serde_json::from_str(&fs::read_to_string(gain.join("ap_gain.json")).unwrap()).unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert!(!rows.is_empty());
    for row in rows {
        assert_eq!(row["delta_ap"].as_f64().unwrap(), 0.0, "{row}");
    }

    let top = f.path("top");
    ok(&["analyze", "--checkpoint", s(&f.ckpt(4)), "--data", s(&f.data()), "--which", "top-activations", "--k", "3", "--out", s(&top)]);
    let json: Vec<Vec<(usize, f64)>> = serde_json::from_str(&fs::read_to_string(top.join("top_activations.json")).unwrap()).unwrap();
    assert_eq!(json.len(), model.config.conv4_channels());
    assert!(json.iter().all(|ids| ids.len() == 3));
}

#[test]
fn stage_one_checkpoint_reports_main_net_scores() {
    let f = Fixture::new("1");
    ok(&["eval", "--checkpoint", s(&f.ckpt(1)), "--data", s(&f.data()), "--protocols", "all", "--out", s(&f.path("e"))]);
    let model = Checkpoint::load(&f.ckpt(1)).unwrap().into_model().unwrap();
    let data = Dataset::load(&f.data()).unwrap();
    let tsv = fs::read_to_string(f.path("e/predictions.tsv")).unwrap();
    let test = data.indices(srn::data::Split::Test);
    let first = tsv.lines().nth(1).unwrap();
    let cols: Vec<&str> = first.split('\t').collect();
    assert_eq!(cols[0], test[0].to_string());
    let logits = model.predict_cls(&data.samples[test[0]].image).unwrap();
    let want = srn::layers::sigmoid_scalar(logits.data()[0]);
    let got: f64 = cols[1].parse().unwrap();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn analysis_on_random_model() {
    let f = Fixture::new("");
    let dir = f.path("rand");
    fs::create_dir_all(&dir).unwrap();
    let model = srn::model::SrnModel::new(srn::model::ModelConfig::default(), 1).unwrap();
    let ckpt = dir.join("random.ckpt");
    Checkpoint::from_model(&model, 0).save(&ckpt).unwrap();
    ok(&["analyze", "--checkpoint", s(&ckpt), "--data", s(&f.data()), "--which", "correlation", "--split", "train", "--out", s(&dir)]);
    assert!(dir.join("correlation.tsv").exists());
    assert!(dir.join("correlation.json").exists());
    let out = srn(&["analyze", "--checkpoint", s(&ckpt), "--data", s(&f.data()), "--which", "ap-gain", "--out", s(&dir)]);
    assert_eq!(out.status.code(), Some(2));
}
