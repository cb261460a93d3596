use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use als_cli::config::{load_config, Overrides};
use als_core::trainer::presets::{copy_data, copy_model, mixture_data, mixture_model};
use als_core::trainer::{Method, TrainConfig};

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> PathBuf {
    repo().join("configs").join(name)
}

fn als(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_als"))
        .args(args)
        .env_remove("ALS_OUTPUT_ROOT")
        .output()
        .expect("spawn als")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> toml::Table {
    std::fs::read_to_string(dir.join("manifest.toml")).unwrap().parse().unwrap()
}

fn artifact_paths(m: &toml::Table) -> BTreeSet<String> {
    m["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["path"].as_str().unwrap().to_string())
        .collect()
}

fn files_under(root: &Path) -> BTreeSet<String> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeSet<String>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                let rel: Vec<String> = p
                    .strip_prefix(root)
                    .unwrap()
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect();
                acc.insert(rel.join("/"));
            }
        }
    }
    let mut acc = BTreeSet::new();
    walk(root, root, &mut acc);
    acc
}

/// Every file on disk is the manifest or listed in it, and vice versa.
fn assert_no_orphans(dir: &Path) {
    let m = manifest(dir);
    let mut listed = artifact_paths(&m);
    listed.insert("manifest.toml".into());
    assert_eq!(files_under(dir), listed);
}

fn out(tmp: &tempfile::TempDir, name: &str) -> String {
    tmp.path().join(name).to_string_lossy().into_owned()
}

const SHORT: &[&str] = &["--set", "training.epochs=4", "--set", "data.test=300"];

#[test]
fn train_writes_a_complete_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out(&tmp, "run");
    let cfg = config("mixture.toml");
    let mut args = vec!["train", "-c", cfg.to_str().unwrap(), "--out", &dir];
    args.extend_from_slice(SHORT);
    let o = als(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = PathBuf::from(dir);
    assert_no_orphans(&dir);
    let m = manifest(&dir);
    assert_eq!(m["command"].as_str(), Some("train"));
    let kinds: BTreeSet<&str> = m["artifacts"].as_array().unwrap().iter().map(|a| a["kind"].as_str().unwrap()).collect();
    for k in ["config", "diagnostics", "calibration_csv", "calibration_report", "test_predictions", "registry_index", "checkpoint"] {
        assert!(kinds.contains(k), "missing {k}");
    }
    assert_eq!(m["config"]["training"]["epochs"].as_integer(), Some(4));
    let diag = std::fs::read_to_string(dir.join("diagnostics.csv")).unwrap();
    assert_eq!(diag.lines().count(), 5);
}

#[test]
fn snapshot_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let first = out(&tmp, "first");
    let cfg = config("mixture.toml");
    let mut args = vec!["train", "-c", cfg.to_str().unwrap(), "--out", &first];
    args.extend_from_slice(SHORT);
    assert!(als(&args).status.success());
    let snap = Path::new(&first).join("config.toml");
    let second = out(&tmp, "second");
    let o = als(&["train", "-c", snap.to_str().unwrap(), "--out", &second]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["diagnostics.csv", "calibration.csv", "test_predictions.csv", "checkpoints/index.csv"] {
        let a = std::fs::read(Path::new(&first).join(f)).unwrap();
        let b = std::fs::read(Path::new(&second).join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn unknown_method_is_a_config_error_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out(&tmp, "x");
    let o = als(&["train", "-c", config("mixture.toml").to_str().unwrap(), "--set", "training.method=adaptive", "--out", &dir]);
    assert_eq!(o.status.code(), Some(als_cli::exit::CONFIG));
    assert!(stderr(&o).contains("training.method"), "{}", stderr(&o));
    assert!(!Path::new(&dir).exists());
}

#[test]
fn seed_override_reaches_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out(&tmp, "s");
    let cfg = config("mixture.toml");
    let mut args = vec!["train", "-c", cfg.to_str().unwrap(), "--seed", "3333", "--out", &dir];
    args.extend_from_slice(SHORT);
    assert!(als(&args).status.success());
    let m = manifest(Path::new(&dir));
    assert_eq!(m["seed"].as_integer(), Some(3333));
    assert_eq!(m["config"]["run"]["seed"].as_integer(), Some(3333));
}

#[test]
fn divergence_exits_with_its_own_code_and_cleans_up() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out(&tmp, "d");
    let o = als(&["train", "-c", config("mixture.toml").to_str().unwrap(), "--set", "training.learning_rate=1e38", "--out", &dir]);
    assert_eq!(o.status.code(), Some(als_cli::exit::DIVERGENCE), "{}", stderr(&o));
    assert!(!Path::new(&dir).exists());
}

#[test]
fn io_failures_have_their_own_code() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.toml");
    let o = als(&["train", "-c", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(als_cli::exit::IO));

    std::fs::write(tmp.path().join("occupant"), "x").unwrap();
    let o = als(&["gradlab", "flipmap", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(als_cli::exit::IO));
    assert!(stderr(&o).contains("not empty"));
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(als(&["frobnicate"]).status.code(), Some(als_cli::exit::USAGE));
    assert_eq!(als(&["gradlab", "ratios", "--alpha", "x"]).status.code(), Some(als_cli::exit::USAGE));
    let tmp = tempfile::tempdir().unwrap();
    let dir = out(&tmp, "g");
    assert_eq!(als(&["gradlab", "flipmap", "--grid", "0", "--out", &dir]).status.code(), Some(als_cli::exit::USAGE));
    assert_eq!(als(&["gradlab", "ratios", "--alpha", "1.5", "--out", &dir]).status.code(), Some(als_cli::exit::USAGE));
    assert_eq!(als(&["--help"]).status.code(), Some(0));
}

#[test]
fn proposition_reports_no_violations() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out(&tmp, "p");
    let o = als(&["gradlab", "proposition", "--trials", "10000", "--classes", "10", "--seed", "0", "--out", &dir]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("violations=0"));
    let m = manifest(Path::new(&dir));
    assert_eq!(m["summary"]["violations"].as_integer(), Some(0));
    assert_eq!(m["summary"]["valid_pairs"].as_integer(), Some(10_000));
    let csv = std::fs::read_to_string(Path::new(&dir).join("proposition.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10_001);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",false")));
    assert_no_orphans(Path::new(&dir));
}

#[test]
fn flipmap_at_zero_alpha_never_flips() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out(&tmp, "f");
    assert!(als(&["gradlab", "flipmap", "--alpha", "0", "--grid", "20", "--out", &dir]).status.success());
    let csv = std::fs::read_to_string(Path::new(&dir).join("flipmap.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("student_target,teacher_target,flip"));
    assert_eq!(csv.lines().count() - 1, 20 * 21 / 2);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",false")));
}

#[test]
fn ratios_at_zero_alpha_are_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out(&tmp, "r");
    assert!(als(&["gradlab", "ratios", "--alpha", "0", "--draws", "50", "--classes", "6", "--out", &dir]).status.success());
    let csv = std::fs::read_to_string(Path::new(&dir).join("ratios.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 300);
    assert!(rows.iter().all(|r| r[5] == "1" && r[6] == "false"));
}

#[test]
fn env_var_relocates_the_default_root() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_als"))
        .args(["gradlab", "flipmap", "--grid", "4"])
        .env("ALS_OUTPUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("flipmap/flipmap.csv").exists());
    assert!(tmp.path().join("flipmap/manifest.toml").exists());
}

#[test]
fn calibrate_agrees_with_the_training_report() {
    let tmp = tempfile::tempdir().unwrap();
    let run = out(&tmp, "run");
    let cfg = config("mixture.toml");
    let mut args = vec!["train", "-c", cfg.to_str().unwrap(), "--out", &run];
    args.extend_from_slice(SHORT);
    assert!(als(&args).status.success());
    let preds = Path::new(&run).join("test_predictions.csv");
    let cal = out(&tmp, "cal");
    let o = als(&["calibrate", "--pairs", preds.to_str().unwrap(), "--out", &cal]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = std::fs::read(Path::new(&run).join("calibration.csv")).unwrap();
    let b = std::fs::read(Path::new(&cal).join("calibration.csv")).unwrap();
    assert_eq!(a, b);
    let train_m = manifest(Path::new(&run));
    let cal_m = manifest(Path::new(&cal));
    assert_eq!(train_m["summary"]["test_ece"], cal_m["summary"]["ece"]);
    assert_eq!(cal_m["summary"]["count"].as_integer(), Some(300));
}

#[test]
fn calibrate_rejects_malformed_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("pairs.csv");
    std::fs::write(&p, "confidence,correct\n0.5,maybe\n").unwrap();
    let o = als(&["calibrate", "--pairs", p.to_str().unwrap(), "--out", &out(&tmp, "c")]);
    assert_eq!(o.status.code(), Some(als_cli::exit::USAGE));
    assert!(stderr(&o).contains("maybe"));
}

fn two_variant_config(tmp: &tempfile::TempDir) -> PathBuf {
    let text = std::fs::read_to_string(config("mixture.toml")).unwrap();
    let text = format!(
        "{text}\n[[ablation.variants]]\nlabel = \"base\"\nmethod = \"base_ce\"\n\n[[ablation.variants]]\nlabel = \"ours\"\nmethod = \"adaptive_skd\"\n"
    );
    let p = tmp.path().join("two.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn two_variant_ablation_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = two_variant_config(&tmp);
    let mut tables = Vec::new();
    for name in ["a", "b"] {
        let dir = out(&tmp, name);
        let mut args = vec!["ablation", "-c", cfg.to_str().unwrap(), "--out", &dir];
        args.extend_from_slice(SHORT);
        let o = als(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        assert_no_orphans(Path::new(&dir));
        tables.push(std::fs::read_to_string(Path::new(&dir).join("ablation.csv")).unwrap());
    }
    assert_eq!(tables[0], tables[1]);
    let labels: Vec<&str> = tables[0].lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["base", "ours"]);
}

#[test]
fn ablation_failure_names_the_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = two_variant_config(&tmp);
    let dir = out(&tmp, "fail");
    let o = als(&["ablation", "-c", cfg.to_str().unwrap(), "--set", "training.learning_rate=1e38", "--out", &dir]);
    assert_eq!(o.status.code(), Some(als_cli::exit::DIVERGENCE));
    assert!(stderr(&o).contains("ablation variant `base`"), "{}", stderr(&o));
    assert!(!Path::new(&dir).exists());
}

#[test]
fn ablation_without_variants_is_a_config_error() {
    let o = als(&["ablation", "-c", config("mixture.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(als_cli::exit::CONFIG));
}

#[test]
fn shipped_configs_match_the_presets() {
    let none = Overrides::default();
    let mix = load_config(&config("mixture.toml"), &none).unwrap();
    assert_eq!(mix.data, mixture_data());
    assert_eq!(mix.model_config(), mixture_model(0));
    assert_eq!(mix.train_config().unwrap(), TrainConfig::new(Method::AdaptiveSkd));

    let ab = load_config(&config("ablation.toml"), &none).unwrap();
    assert_eq!(ab.data, mixture_data());
    assert_eq!(ab.ablation.unwrap().variants.len(), 6);

    let copy = load_config(&config("copy.toml"), &none).unwrap();
    assert_eq!(copy.data, copy_data());
    assert_eq!(copy.model_config(), copy_model(0));
}

#[test]
fn sequence_config_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = out(&tmp, "seq");
    let o = als(&["train", "-c", config("copy.toml").to_str().unwrap(), "--set", "training.epochs=3", "--out", &dir]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(Path::new(&dir));
    assert!(m["summary"]["test_mini_bleu"].as_float().is_some());
    assert_no_orphans(Path::new(&dir));
}
