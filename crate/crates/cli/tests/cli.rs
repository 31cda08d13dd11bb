use std::path::Path;
use std::process::Command;

use sketchlab_cli::config::{ExperimentConfig, ModuleKind, RESOLVED_NAME};
use sketchlab_cli::data;
use sketchlab_cli::export::{export_metrics, read_evaluations, sig6, Evaluation, COLUMNS};
use sketchlab_cli::runs::{read_masks, run, Overrides};
use sketchlab_cli::store;
use sketchlab_cli::CliError;

const BIN: &str = env!("CARGO_BIN_EXE_sketchlab");

fn tiny(out: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
seed = 3
out_dir = "{}"

[data.synth]
n_classes = 3
n_instances_per_class = 4
noise_strokes_per_sketch = 1

[embed.encoder]
channels = 8
dim = 8

[embed.triplet]
epochs = 2

[otf]
T = 4
epochs = 1
batch = 4

[subset.alternating]
rounds = 1
[subset.alternating.encoder]
channels = 8
dim = 8
[subset.alternating.triplet]
epochs = 1
[subset.alternating.selector]
iterations = 2
hidden = 8
batch = 4
buffer = 8
"#,
        out.display()
    );
    ExperimentConfig::parse(&text, "tiny").unwrap()
}

fn resolved(cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.resolve().unwrap()
}

#[test]
fn unknown_keys_are_rejected_with_a_line_number() {
    let err = ExperimentConfig::parse("seed = 1\n\n[embed]\nmargin = 0.2\n", "t.toml").unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("line 4"), "{msg}");
    assert!(msg.contains("margin"), "{msg}");
    assert!(ExperimentConfig::parse("[otf.reward]\nscheme = \"nope\"\n", "t").is_err());
}

#[test]
fn invalid_config_exits_nonzero_with_line_reference() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "seed = 1\nsede = 2\n").unwrap();
    let out = Command::new(BIN).args(["train-embed", "--config"]).arg(&p).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("sede"), "{err}");
}

#[test]
fn semantic_validation_names_the_key() {
    let mut cfg = ExperimentConfig::default();
    cfg.embed.encoder.patch = 5;
    assert!(cfg.resolve().unwrap_err().to_string().contains("embed.encoder"));
    let mut cfg = ExperimentConfig::default();
    cfg.semisup.labelled_frac = 0.0;
    assert!(cfg.resolve().unwrap_err().to_string().contains("semisup.labelled_frac"));
}

#[test]
fn missing_dataset_path_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = resolved(tiny(&dir.path().join("run")));
    cfg.data.path = Some(dir.path().join("nowhere"));
    let err = run(&cfg, ModuleKind::TrainEmbed, &Overrides::default(), true).unwrap_err();
    assert!(matches!(&err, CliError::MissingPath { key, .. } if key == "data.path"), "{err}");
    assert!(err.to_string().contains("data.path"));
}

#[test]
fn dry_run_validates_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = resolved(tiny(&out));
    let r = run(&cfg, ModuleKind::TrainEmbed, &Overrides::default(), true).unwrap();
    assert!(r.evaluations.is_empty());
    assert!(!out.exists());
    let err = run(&cfg, ModuleKind::Augment, &Overrides::default(), true).unwrap_err();
    assert!(err.to_string().contains("init_dir"), "{err}");

    let p = dir.path().join("c.toml");
    std::fs::write(&p, format!("module = \"train-embed\"\nout_dir = \"{}\"\n", out.display())).unwrap();
    let o = Command::new(BIN).args(["run", "--dry-run", "--config"]).arg(&p).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn same_config_twice_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let cfg = resolved(tiny(&out));
        run(&cfg, ModuleKind::TrainOtf, &Overrides::default(), false).unwrap();
        export_metrics(&out, None).unwrap();
        files.push(
            ["evaluations.jsonl", "log.jsonl", "metrics.csv", "summary.json"]
                .map(|f| std::fs::read(out.join(f)).unwrap()),
        );
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn resolved_config_is_written_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = resolved(tiny(&out));
    run(&cfg, ModuleKind::TrainEmbed, &Overrides::default(), false).unwrap();
    let back = ExperimentConfig::load(&out.join(RESOLVED_NAME)).unwrap();
    assert_eq!(back.module, Some(ModuleKind::TrainEmbed));
    assert_eq!(ExperimentConfig { module: None, ..back }, cfg);
    assert_eq!(cfg.embed.triplet.seed, 3);
    assert_eq!(cfg.data.synth.seed, 3);
}

#[test]
fn seed_env_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let p = dir.path().join("c.toml");
    std::fs::write(&p, format!("seed = 1\nout_dir = \"{}\"\n[data.synth]\nn_classes = 2\nn_instances_per_class = 4\n", out.display())).unwrap();
    let o = Command::new(BIN).env("SKETCHLAB_SEED", "77").args(["gen-data", "--config"]).arg(&p).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = ExperimentConfig::load(&out.join(RESOLVED_NAME)).unwrap();
    assert_eq!(cfg.seed, 77);
    assert_eq!(cfg.data.synth.seed, 77);
    let bad = Command::new(BIN).env("SKETCHLAB_SEED", "x").args(["gen-data", "--config"]).arg(&p).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("SKETCHLAB_SEED"));
}

#[test]
fn generated_dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let cfg = resolved(tiny(&out));
    run(&cfg, ModuleKind::GenData, &Overrides::default(), false).unwrap();
    let mem = data::load(&cfg.data).unwrap();
    let mut from_disk = cfg.data.clone();
    from_disk.path = Some(out.clone());
    let disk = data::load(&from_disk).unwrap();
    assert_eq!(mem.len(), disk.len());
    for (a, b) in mem.iter().zip(&disk) {
        assert_eq!((a.instance_id, a.class_id), (b.instance_id, b.class_id));
        assert_eq!(a.sketch, b.sketch);
        assert_eq!(a.noise_mask, b.noise_mask);
        for (x, y) in a.photo.data().iter().zip(b.photo.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}

#[test]
fn export_contract() {
    let dir = tempfile::tempdir().unwrap();
    let missing = export_metrics(&dir.path().join("none"), None);
    assert!(matches!(missing, Err(CliError::MissingPath { .. })));

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let ex = export_metrics(&empty, None).unwrap();
    assert_eq!(std::fs::read_to_string(&ex.csv).unwrap().trim_end(), COLUMNS.join(","));
    assert!(ex.summary.evaluations.is_empty());

    let out = dir.path().join("run");
    let cfg = resolved(tiny(&out));
    let r = run(&cfg, ModuleKind::TrainEmbed, &Overrides::default(), false).unwrap();
    let ex = export_metrics(&out, Some(&dir.path().join("exported"))).unwrap();
    let text = std::fs::read_to_string(&ex.json).unwrap();
    let parsed: sketchlab_cli::export::Summary = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, ex.summary);
    assert_eq!(parsed.evaluations[0].acc1, r.evaluations[0].acc1.map(sig6));

    let mut rdr = csv::Reader::from_path(&ex.csv).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), COLUMNS);
    let row = rdr.records().next().unwrap().unwrap();
    assert_eq!(&row[0], "embed/test");
    assert_eq!(row[1].parse::<f64>().unwrap(), sig6(r.evaluations[0].acc1.unwrap()));
    assert_eq!(read_evaluations(&out).unwrap(), r.evaluations);
}

#[test]
fn six_significant_digits() {
    assert_eq!(sig6(1.0 / 3.0), 0.333333);
    assert_eq!(sig6(123456.789), 123457.0);
    assert_eq!(sig6(0.0), 0.0);
    assert_eq!(sig6(2.0 / 3.0 * 1e-7), 6.66667e-8);
    let e = Evaluation::new("x");
    assert_eq!(e.acc1, None);
}

#[test]
fn otf_run_prints_epoch_lines_and_saves_policy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let p = dir.path().join("c.toml");
    std::fs::write(&p, tiny(&out).to_toml()).unwrap();
    let o = Command::new(BIN).args(["train-otf", "--config"]).arg(&p).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<serde_json::Value> = String::from_utf8_lossy(&o.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines.iter().any(|l| l.get("mean_sigma").is_some()));
    assert!(lines.iter().any(|l| l["tag"] == "otf/test-after"));
    let policy = store::load_policy(&out.join(store::POLICY)).unwrap();
    assert!(policy.sigma().iter().all(|s| *s > 0.0));
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = resolved(tiny(&out));
    run(&cfg, ModuleKind::TrainEmbed, &Overrides::default(), false).unwrap();
    let m = store::load_retrieval(&out.join(store::RETRIEVAL)).unwrap();
    let again = dir.path().join("again.ckpt");
    store::save_retrieval(&again, &m).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(out.join(store::RETRIEVAL)).unwrap());
    assert!(store::load_selector(&out.join(store::RETRIEVAL)).is_err());
    assert!(store::load_retrieval(&out.join("missing.ckpt")).is_err());
}

#[test]
fn subset_oracle_and_augment_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("sub");
    let cfg = resolved(tiny(&sub));
    let r = run(&cfg, ModuleKind::TrainSubset, &Overrides::default(), false).unwrap();
    let tags: Vec<&str> = r.evaluations.iter().map(|e| e.tag.as_str()).collect();
    assert_eq!(tags, ["subset/baseline", "subset/raw", "subset/cleaned"]);

    let mut o = cfg.clone();
    o.out_dir = dir.path().join("oracle");
    o.init_dir = Some(sub.clone());
    let r = run(&o, ModuleKind::Oracle, &Overrides::default(), false).unwrap();
    assert!(r.evaluations[1].acc1 >= r.evaluations[0].acc1);

    let mut a = o.clone();
    a.out_dir = dir.path().join("aug");
    a.subset.augment_n = 3;
    run(&a, ModuleKind::Augment, &Overrides::default(), false).unwrap();
    let masks = read_masks(&a.out_dir.join("masks.json")).unwrap();
    let all = data::load(&a.data).unwrap();
    assert_eq!(masks.len(), all.len());
    for i in &all {
        let m = &masks[&i.instance_id.to_string()];
        assert_eq!(m.len(), 3);
        assert!(m.iter().all(|mask| mask.len() == i.sketch.num_strokes() && mask.iter().any(|b| *b)));
    }
}
