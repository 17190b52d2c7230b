// End-to-end runs of the `cisnet` binary on small synthetic datasets.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cis_cli::commands::ablate::spearman;
use cis_cli::commands::compare::Comparison;
use cis_core::load_checkpoint;

fn spec_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs").join(name)
}

fn cisnet(out_root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cisnet"))
        .args(args)
        .env("CISNET_OUT", out_root)
        .output()
        .expect("binary runs")
}

fn ok(out_root: &Path, args: &[&str]) -> String {
    let out = cisnet(out_root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path, spec: &str, n: usize, seed: u64) -> PathBuf {
    let file = dir.join(format!("data_{spec}_{n}_{seed}.jsonl"));
    ok(
        dir,
        &[
            "gen-data",
            "--spec",
            spec_path(spec).to_str().unwrap(),
            "--n",
            &n.to_string(),
            "--seed",
            &seed.to_string(),
            "--out",
            file.to_str().unwrap(),
        ],
    );
    file
}

fn train(dir: &Path, data: &Path, variant: &str, out: &Path, extra: &[&str]) {
    let spec = spec_path("demo.toml");
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--spec",
        spec.to_str().unwrap(),
        "--variant",
        variant,
        "--kfold",
        "3",
        "--epochs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn gen_data_writes_one_record_per_sample_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(
        dir.path(),
        &["gen-data", "--spec", spec_path("demo.toml").to_str().unwrap(), "--n", "600", "--seed", "1", "--out", out.to_str().unwrap()],
    );
    let file = out.join("dataset.jsonl");
    let text = fs::read_to_string(&file).unwrap();
    // Header line plus one line per sample.
    assert_eq!(text.lines().count(), 601);
    assert!(out.join("dataset.jsonl.spec-hash").exists());

    let again = gen(dir.path(), "demo.toml", 600, 1);
    assert_eq!(fs::read(&file).unwrap(), fs::read(again).unwrap());
}

#[test]
fn missing_spec_exits_with_config_code_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let out = cisnet(dir.path(), &["gen-data", "--spec", missing.to_str().unwrap(), "--n", "10"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.toml"));
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // Usage error from argument parsing.
    assert_eq!(cisnet(dir.path(), &["train", "--variant", "bogus"]).status.code(), Some(2));
    // Corrupt dataset is a data error.
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "not json\n").unwrap();
    let out = cisnet(dir.path(), &["train", "--data", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    // Dataset from the wrong spec is refused for oracle alignment.
    let other = gen(dir.path(), "unconfounded.toml", 200, 1);
    let out = cisnet(
        dir.path(),
        &["train", "--data", other.to_str().unwrap(), "--spec", spec_path("demo.toml").to_str().unwrap(), "--epochs", "1"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn cisnet_on_data_missing_a_subject_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "demo.toml", 400, 2);
    let text = fs::read_to_string(&data).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let kept: Vec<&str> = lines.filter(|l| !l.contains("\"subject_id\":3")).collect();
    let bad = dir.path().join("missing.jsonl");
    fs::write(&bad, format!("{header}\n{}\n", kept.join("\n"))).unwrap();
    let out = cisnet(dir.path(), &["train", "--data", bad.to_str().unwrap(), "--epochs", "1"]);
    assert_ne!(out.status.code(), Some(0));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('3'), "{err}");
}

#[test]
fn train_layout_determinism_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "demo.toml", 600, 1);
    let base = dir.path().join("base");
    let cis = dir.path().join("cis");
    let cis_again = dir.path().join("cis_again");
    train(dir.path(), &data, "baseline", &base, &["--seeds", "1,2"]);
    train(dir.path(), &data, "cisnet", &cis, &["--seeds", "1,2"]);
    train(dir.path(), &data, "cisnet", &cis_again, &["--seeds", "1,2"]);

    for seed in [1, 2] {
        for fold in 0..3 {
            let f = cis.join(format!("seed_{seed}/fold_{fold}"));
            for file in ["checkpoint.ckpt", "report.json", "f1.csv", "train_log.jsonl", "subjects.json"] {
                assert!(f.join(file).exists(), "{}", f.join(file).display());
            }
            let again = cis_again.join(format!("seed_{seed}/fold_{fold}"));
            for file in ["report.json", "f1.csv"] {
                assert!(fs::read(f.join(file)).unwrap() == fs::read(again.join(file)).unwrap(), "{file}");
            }
            // Checkpoints differ only in the logged wall time.
            let a = load_checkpoint::<f64>(f.join("checkpoint.ckpt")).unwrap();
            let b = load_checkpoint::<f64>(again.join("checkpoint.ckpt")).unwrap();
            assert!(a.model == b.model);
        }
    }
    assert_eq!(fs::read(cis.join("summary.csv")).unwrap(), fs::read(cis_again.join("summary.csv")).unwrap());
    assert!(cis.join("config.toml").exists());

    // The snapshot alone re-runs the experiment.
    let rerun = dir.path().join("rerun");
    ok(dir.path(), &["train", "--config", cis.join("config.toml").to_str().unwrap(), "--out", rerun.to_str().unwrap()]);
    assert_eq!(fs::read(cis.join("summary.csv")).unwrap(), fs::read(rerun.join("summary.csv")).unwrap());

    // Identical runs compare to all-zero deltas.
    let cmp_out = dir.path().join("cmp_same");
    ok(dir.path(), &["compare", cis.to_str().unwrap(), cis_again.to_str().unwrap(), "--out", cmp_out.to_str().unwrap()]);
    let same: Comparison = serde_json::from_str(&fs::read_to_string(cmp_out.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(same.seeds.len(), 2);
    for s in &same.seeds {
        assert_eq!(s.delta_macro_f1, 0.0);
        assert_eq!(s.delta_mad_to_do, Some(0.0));
        assert_eq!(s.delta_mean_pcc_cosine, Some(0.0));
    }
    assert!(same.per_au_delta.iter().all(|&d| d == 0.0));

    let cmp_out = dir.path().join("cmp");
    let stdout = ok(dir.path(), &["compare", base.to_str().unwrap(), cis.to_str().unwrap(), "--out", cmp_out.to_str().unwrap()]);
    assert!(stdout.contains("60.6") && stdout.contains("64.3"));
    let csv = fs::read_to_string(cmp_out.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(fs::read_to_string(cmp_out.join("per_au_delta.csv")).unwrap().lines().count(), 8);

    // A run on a different fold plan is refused.
    let other = dir.path().join("other");
    train(dir.path(), &data, "cisnet", &other, &["--seeds", "3,4"]);
    let out = cisnet(dir.path(), &["compare", base.to_str().unwrap(), other.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    // Evaluation, PCC analysis and feature export on a trained fold.
    let fold = cis.join("seed_1/fold_0");
    let ckpt = fold.join("checkpoint.ckpt");
    let subjects: serde_json::Value = serde_json::from_str(&fs::read_to_string(fold.join("subjects.json")).unwrap()).unwrap();
    let test: Vec<String> = subjects["test"].as_array().unwrap().iter().map(|v| v.to_string()).collect();
    let test = test.join(",");
    ok(
        dir.path(),
        &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--subjects", &test, "--spec", spec_path("demo.toml").to_str().unwrap()],
    );
    assert!(
        fs::read(fold.join("eval/report.json")).unwrap() == fs::read(fold.join("report.json")).unwrap(),
        "re-evaluation reproduces the fold report"
    );
    let pcc = dir.path().join("pcc");
    ok(
        dir.path(),
        &["analyze-pcc", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--subjects", &test, "--out", pcc.to_str().unwrap()],
    );
    let cos = fs::read_to_string(pcc.join("cosine.csv")).unwrap();
    assert_eq!(cos.lines().next().unwrap(), "subject,cosine,cosine_upper");
    assert_eq!(cos.lines().count(), 1 + subjects["test"].as_array().unwrap().len());
    let first = subjects["test"][0].as_u64().unwrap();
    let gt = fs::read_to_string(pcc.join(format!("pcc_s{first}_gt.csv"))).unwrap();
    assert_eq!(gt.lines().count(), 7);

    let features = dir.path().join("feat/features.jsonl");
    ok(dir.path(), &["export-features", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", features.to_str().unwrap()]);
    assert!(fs::read_to_string(&features).unwrap().lines().count() >= 600);
}

#[test]
fn ablation_schema_and_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "demo.toml", 800, 3);
    let out = dir.path().join("ablate");
    ok(
        dir.path(),
        &["ablate-subjects", "--data", data.to_str().unwrap(), "--grid", "6,2,4", "--seeds", "1", "--epochs", "1", "--out", out.to_str().unwrap()],
    );
    let curve = fs::read_to_string(out.join("curve.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next().unwrap(), "m,f1_baseline,f1_cisnet");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), vec![2.0, 4.0, 6.0]);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r[1]) && (0.0..=1.0).contains(&r[2])));
    assert!(out.join("spearman.csv").exists());

    let svg = dir.path().join("curve.svg");
    ok(dir.path(), &["plot", "--input", out.join("curve.csv").to_str().unwrap(), "--out", svg.to_str().unwrap()]);
    assert!(fs::read_to_string(svg).unwrap().starts_with("<svg"));

    // m beyond the subjects left after holding out the test set.
    let err = cisnet(dir.path(), &["ablate-subjects", "--data", data.to_str().unwrap(), "--grid", "8", "--seeds", "1"]);
    assert_eq!(err.status.code(), Some(2));
}

#[test]
fn spearman_matches_hand_values() {
    assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[0.1, 0.2, 0.3, 0.4]), 1.0);
    assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[0.4, 0.3, 0.2, 0.1]), -1.0);
    // Ranks (1, 2, 3, 4) against (1, 3, 2, 4): 1 − 6·2/(4·15).
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]) - 0.8).abs() < 1e-12);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]), 0.0);
}

#[test]
fn ablation_point_reproduces_a_training_job() {
    use cis_cli::run::run_job;
    use cis_cli::{AblateArgs, TrainingFlags};
    use cis_core::{ModelConfig, ScmSpec, TrainConfig, Variant};

    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "demo.toml", 500, 4);
    let flags = TrainingFlags {
        config: None,
        spec: None,
        head: None,
        alpha: None,
        epochs: Some(2),
        lr: None,
        batch_size: None,
        patience: None,
    };
    let ablation = cis_cli::commands::ablate::run(AblateArgs {
        data: Some(data.clone()),
        grid: vec![3, 6],
        seeds: vec![5],
        test_subjects: None,
        out: Some(dir.path().join("ablate")),
        flags,
    })
    .unwrap();
    let split = &ablation.splits[0];
    assert_eq!(split.test.len(), 2);

    let dataset = cis_core::load_dataset(&data).unwrap();
    assert_eq!(dataset.num_subjects, ScmSpec::demo().num_subjects);
    let train = TrainConfig { max_epochs: 2, ..TrainConfig::default() };
    let model = ModelConfig::for_dataset(&dataset);
    let mut pool = split.pool.clone();
    pool.sort_unstable();
    for (variant, got) in [(Variant::Baseline, ablation.per_seed[1].f1_baseline), (Variant::Cisnet, ablation.per_seed[1].f1_cisnet)] {
        let job = run_job(&dataset, None, variant, &model, &train, &pool, &split.test, 5, 0).unwrap();
        assert_eq!(job.report.macro_f1, got, "{variant}");
    }
}
