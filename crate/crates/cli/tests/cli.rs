mod common;

use std::path::Path;

use common::{lcco, small_config, write_toy_dataset};
use lcco::clip::FixtureStore;
use lcco::harness::data::load_mask;
use lcco::harness::ExperimentConfig;
use lcco::nn::OptimizerConfig;

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("exp.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path.to_str().unwrap().to_string()
}

fn trained(dir: &Path) -> (ExperimentConfig, String) {
    let manifest = write_toy_dataset(dir, &[1, 2], 6, 32);
    let mut cfg = small_config(32, 16, 4);
    cfg.train_manifest = Some(manifest.clone());
    cfg.eval_manifests = vec![manifest];
    cfg.output_dir = dir.join("run");
    cfg.train.steps = 3;
    let config = write_config(dir, &cfg);
    let out = lcco(&["train", "--config", &config]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (cfg, config)
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(lcco(&[]).status.code(), Some(1));
    assert_eq!(lcco(&["train"]).status.code(), Some(1));
    assert_eq!(lcco(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lcco(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_config_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[train]\nprompt_template = \"no slot here\"\n").unwrap();
    let out = lcco(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[CLASS]"));
}

#[test]
fn missing_data_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = lcco(&["train", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let mut cfg = small_config(32, 16, 1);
    cfg.train_manifest = Some(dir.path().join("no_manifest.txt"));
    let config = write_config(dir.path(), &cfg);
    assert_eq!(lcco(&["train", "--config", &config]).status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_toy_dataset(dir.path(), &[3], 5, 32);
    let mut cfg = small_config(32, 16, 2);
    cfg.train_manifest = Some(manifest);
    cfg.output_dir = dir.path().join("run");
    cfg.train.optimizer = OptimizerConfig::Sgd { lr: 1e300, momentum: 0.0 };
    cfg.train.steps = 5;
    let config = write_config(dir.path(), &cfg);
    let out = lcco(&["train", "--config", &config]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = trained(dir.path());
    let log = std::fs::read_to_string(cfg.output_dir.join("loss_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);
    assert!(cfg.output_dir.join("model.lcco").is_file());
}

#[test]
fn eval_reruns_at_two_set_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, config) = trained(dir.path());
    let ckpt = cfg.output_dir.join("model.lcco");
    for n in ["5", "8"] {
        let out = lcco(&["eval", "--config", &config, "--checkpoint", ckpt.to_str().unwrap(), "--n-eval", n]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let report: serde_json::Value =
            serde_json::from_slice(&std::fs::read(cfg.output_dir.join("eval_report.json")).unwrap()).unwrap();
        assert_eq!(report["n_eval"], n.parse::<u64>().unwrap());
        let d = &report["datasets"][0];
        assert_eq!(d["images"], 12);
        for key in ["precision", "jaccard"] {
            let v = d[key].as_f64().unwrap();
            assert!((0.0..=100.0).contains(&v), "{key} = {v}");
        }
        for g in d["groups"].as_array().unwrap() {
            assert!(g["masked_norm_before"].as_f64().unwrap() >= 0.0);
            assert!(g["masked_norm_after"].as_f64().unwrap() >= 0.0);
        }
    }
}

#[test]
fn infer_writes_one_binary_mask_per_image_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = trained(dir.path());
    let ckpt = cfg.output_dir.join("model.lcco");
    let images = dir.path().join("class_1").join("images");
    let subset = dir.path().join("three");
    std::fs::create_dir_all(&subset).unwrap();
    for name in ["000.png", "001.png", "002.png"] {
        std::fs::copy(images.join(name), subset.join(name)).unwrap();
    }
    let out_dir = dir.path().join("pred");
    let args = [
        "infer",
        "--images",
        subset.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--overlay",
    ];
    let first = lcco(&args);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let snapshot = |name: &str| std::fs::read(out_dir.join(name)).unwrap();
    let before: Vec<Vec<u8>> = ["000.png", "001.png", "002.png"].map(snapshot).to_vec();
    for name in ["000", "001", "002"] {
        let mask = load_mask(&out_dir.join(format!("{name}.png")), None).unwrap();
        assert_eq!((mask.height, mask.width), (32, 32));
        let raw = image::open(out_dir.join(format!("{name}.png"))).unwrap().to_luma8();
        assert!(raw.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
        assert!(out_dir.join(format!("{name}_overlay.png")).is_file());
    }
    assert!(lcco(&args).status.success());
    let after: Vec<Vec<u8>> = ["000.png", "001.png", "002.png"].map(snapshot).to_vec();
    assert_eq!(before, after);
}

#[test]
fn infer_needs_two_images() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = trained(dir.path());
    let single = dir.path().join("single");
    std::fs::create_dir_all(&single).unwrap();
    std::fs::copy(dir.path().join("class_1/images/000.png"), single.join("000.png")).unwrap();
    let out = lcco(&[
        "infer",
        "--images",
        single.to_str().unwrap(),
        "--checkpoint",
        cfg.output_dir.join("model.lcco").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn record_fixtures_then_train_strictly() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_toy_dataset(dir.path(), &[5], 5, 32);
    let prompts = dir.path().join("classes.txt");
    std::fs::write(&prompts, "cow\nsheep\ncar\ndog\nboat\nbird\n").unwrap();
    let mut cfg = small_config(32, 16, 6);
    let cfg_path = write_config(dir.path(), &cfg);
    let fixture = dir.path().join("clip.fix");
    let out = lcco(&[
        "record-fixtures",
        "--images",
        dir.path().to_str().unwrap(),
        "--prompts",
        prompts.to_str().unwrap(),
        "--out",
        fixture.to_str().unwrap(),
        "--config",
        &cfg_path,
        "--synthetic",
        "--dim",
        "16",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let store = FixtureStore::load(&fixture).unwrap();
    assert_eq!(store.len(), 5 + 5 + 6);

    cfg.clip.fixture = Some(fixture);
    cfg.clip.synthesize_missing = false;
    cfg.train_manifest = Some(manifest);
    cfg.output_dir = dir.path().join("run");
    cfg.train.steps = 2;
    let config = write_config(dir.path(), &cfg);
    let out = lcco(&["train", "--config", &config]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
