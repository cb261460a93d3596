use std::fs;
use std::path::{Path, PathBuf};

use als_core::calibration::{calibration_report, write_reliability_csv, CalibrationReport};
use als_core::grad_analysis::{
    flip_region_census, proposition1_validate, sample_ratio_rows, write_census_csv, write_proposition_csv,
    write_ratio_csv,
};
use als_core::prob::AlphaValue;
use als_core::registry::{evaluate_g, GKind};
use als_core::trainer::{evaluate, train, write_diagnostics_csv, ModelConfig, Network, Splits, Task, TrainConfig};
use rayon::prelude::*;
use toml::Value;

use crate::config::{default_output_dir, load_config, Overrides, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::{OutputDir, RunManifest};

pub const ABLATION_HEADER: &str = "label,method,g_kind,val_accuracy,test_accuracy,test_ece,test_mce";
pub const PREDICTIONS_HEADER: &str = "confidence,correct";

fn int(n: impl TryInto<i64>) -> Value {
    Value::Integer(n.try_into().unwrap_or(i64::MAX))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

/// Runs `body` against a fresh output directory and removes everything on
/// failure, so a failed command leaves no partial artifacts behind.
fn in_output_dir<F>(root: &Path, command: &str, body: F) -> CliResult<RunManifest>
where
    F: FnOnce(&mut OutputDir) -> CliResult<(Option<u64>, toml::Table, Option<toml::Table>)>,
{
    let mut out = OutputDir::prepare(root)?;
    match body(&mut out) {
        Ok((seed, summary, config)) => out.finish(command, seed, summary, config),
        Err(e) => {
            out.abandon();
            Err(e)
        }
    }
}

/// Metrics of one finished training run.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub val_score: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_nll: f64,
    pub test_ece: f64,
    pub test_mce: f64,
    pub test_mini_bleu: Option<f64>,
    pub teacher_refreshes: usize,
    pub final_mean_alpha: f64,
}

impl RunMetrics {
    fn table(&self, epochs: u32) -> toml::Table {
        let mut t = toml::Table::new();
        t.insert("epochs".into(), int(epochs));
        t.insert("val_score".into(), Value::Float(self.val_score));
        t.insert("val_accuracy".into(), Value::Float(self.val_accuracy));
        t.insert("test_accuracy".into(), Value::Float(self.test_accuracy));
        t.insert("test_nll".into(), Value::Float(self.test_nll));
        t.insert("test_ece".into(), Value::Float(self.test_ece));
        t.insert("test_mce".into(), Value::Float(self.test_mce));
        if let Some(b) = self.test_mini_bleu {
            t.insert("test_mini_bleu".into(), Value::Float(b));
        }
        t.insert("teacher_refreshes".into(), int(self.teacher_refreshes));
        t.insert("final_mean_alpha".into(), Value::Float(self.final_mean_alpha));
        t
    }
}

/// Files written by one training run, relative to the output root.
struct TrainedRun {
    metrics: RunMetrics,
    artifacts: Vec<(String, PathBuf)>,
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn calibration_toml(report: &CalibrationReport<f64>) -> CliResult<String> {
    toml::to_string(report).map_err(|e| CliError::Usage(format!("cannot serialise calibration report: {e}")))
}

/// Trains into `dir` and evaluates the final parameters.
fn train_into(
    dir: &Path,
    label: &str,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    splits: &Splits,
    bins: usize,
) -> CliResult<TrainedRun> {
    let ctx = |what: &str| format!("{what} ({label})");
    let ckpt_dir = dir.join("checkpoints");
    let outcome = train(model_cfg, cfg, splits, Some(&ckpt_dir)).map_err(|e| CliError::core(ctx("training failed"), e))?;
    let net = Network::from_config(model_cfg).map_err(|e| CliError::core(ctx("model"), e))?;
    let test = evaluate(&net, &outcome.params, &splits.test).map_err(|e| CliError::core(ctx("test evaluation"), e))?;
    let val = evaluate(&net, &outcome.params, &splits.validation)
        .map_err(|e| CliError::core(ctx("validation evaluation"), e))?;
    let report = calibration_report(&test.pairs, bins).map_err(|e| CliError::core(ctx("calibration"), e))?;
    let test_mini_bleu = match model_cfg.task {
        Task::SeqTransduction => {
            Some(evaluate_g(&test.predictions, GKind::MiniBleu).map_err(|e| CliError::core(ctx("mini-BLEU"), e))?)
        }
        Task::Classification => None,
    };

    let mut artifacts = Vec::new();
    let mut emit = |kind: &str, name: &str, bytes: Vec<u8>| -> CliResult<()> {
        let p = dir.join(name);
        write_file(&p, &bytes)?;
        artifacts.push((kind.to_string(), p));
        Ok(())
    };
    emit(
        "diagnostics",
        "diagnostics.csv",
        csv_bytes(|b| write_diagnostics_csv(b, &outcome.diagnostics)),
    )?;
    emit("calibration_csv", "calibration.csv", csv_bytes(|b| write_reliability_csv(b, &report)))?;
    emit("calibration_report", "calibration.toml", calibration_toml(&report)?.into_bytes())?;
    let mut preds = format!("{PREDICTIONS_HEADER}\n");
    for (c, ok) in &test.pairs {
        preds.push_str(&format!("{c},{ok}\n"));
    }
    emit("test_predictions", "test_predictions.csv", preds.into_bytes())?;
    let mut files = outcome.registry.files().into_iter();
    if let Some(index) = files.next() {
        artifacts.push(("registry_index".into(), index));
    }
    artifacts.extend(files.map(|f| ("checkpoint".to_string(), f)));

    let last = outcome.diagnostics.last();
    Ok(TrainedRun {
        metrics: RunMetrics {
            val_score: last.map_or(f64::NAN, |d| d.val_score),
            val_accuracy: val.accuracy,
            test_accuracy: test.accuracy,
            test_nll: test.mean_nll,
            test_ece: report.ece,
            test_mce: report.mce,
            test_mini_bleu,
            teacher_refreshes: outcome.refreshes.len(),
            final_mean_alpha: last.map_or(0.0, |d| d.mean_alpha),
        },
        artifacts,
    })
}

fn record(out: &mut OutputDir, artifacts: &[(String, PathBuf)]) -> CliResult<()> {
    for (kind, path) in artifacts {
        out.record_all(kind, std::slice::from_ref(path))?;
    }
    Ok(())
}

fn snapshot_table(cfg: &RunConfig) -> CliResult<(String, toml::Table)> {
    let snap = cfg.snapshot()?;
    let text = snap.to_toml()?;
    let table = toml::Table::try_from(&snap).map_err(|e| CliError::Config(format!("cannot serialise config: {e}")))?;
    Ok((text, table))
}

fn generate(cfg: &RunConfig) -> CliResult<Splits> {
    cfg.data
        .generate(cfg.model.classes, cfg.run.seed)
        .map_err(|e| CliError::Config(format!("data: {e}")))
}

pub fn cmd_train(config: &Path, overrides: &Overrides, out: Option<&Path>) -> CliResult<RunManifest> {
    let cfg = load_config(config, overrides)?;
    if cfg.training.method.is_none() {
        return Err(CliError::Config("training.method: missing field `method`".into()));
    }
    let train_cfg = cfg.train_config()?;
    let model_cfg = cfg.model_config();
    let splits = generate(&cfg)?;
    let (text, table) = snapshot_table(&cfg)?;
    in_output_dir(&cfg.output_dir(out), "train", |dir| {
        dir.write("config", "config.toml", text.as_bytes())?;
        let run = train_into(dir.root(), &cfg.run.name, &model_cfg, &train_cfg, &splits, cfg.run.calibration_bins)?;
        record(dir, &run.artifacts)?;
        let mut summary = run.metrics.table(train_cfg.epochs);
        summary.insert("method".into(), Value::String(train_cfg.method.name().into()));
        summary.insert("g_kind".into(), Value::String(train_cfg.g_kind.name().into()));
        Ok((Some(cfg.run.seed), summary, Some(table)))
    })
}

/// One finished row of the ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub method: String,
    pub g_kind: String,
    pub epochs: u32,
    pub metrics: RunMetrics,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label,
            r.method,
            r.g_kind,
            r.metrics.val_accuracy,
            r.metrics.test_accuracy,
            r.metrics.test_ece,
            r.metrics.test_mce
        ));
    }
    s
}

pub fn cmd_ablation(config: &Path, overrides: &Overrides, out: Option<&Path>) -> CliResult<RunManifest> {
    let cfg = load_config(config, overrides)?;
    let variants = match &cfg.ablation {
        Some(ab) => ab.variants.clone(),
        None => return Err(CliError::Config("ablation: missing section `[ablation]`".into())),
    };
    let model_cfg = cfg.model_config();
    let splits = generate(&cfg)?;
    let (text, table) = snapshot_table(&cfg)?;
    in_output_dir(&cfg.output_dir(out), "ablation", |dir| {
        dir.write("config", "config.toml", text.as_bytes())?;
        let root = dir.root().to_path_buf();
        let results: Vec<CliResult<TrainedRun>> = variants
            .par_iter()
            .map(|v| {
                let tc = cfg.variant_config(v);
                let vdir = root.join("variants").join(&v.label);
                train_into(&vdir, &v.label, &model_cfg, &tc, &splits, cfg.run.calibration_bins)
            })
            .collect();
        let mut rows = Vec::with_capacity(variants.len());
        for (v, res) in variants.iter().zip(results) {
            let run = res.map_err(|e| match e {
                CliError::Core { source, .. } => {
                    CliError::core(format!("ablation variant `{}` ({}) failed", v.label, v.method.name()), source)
                }
                other => other,
            })?;
            record(dir, &run.artifacts)?;
            let tc = cfg.variant_config(v);
            rows.push(AblationRow {
                label: v.label.clone(),
                method: tc.method.name().into(),
                g_kind: tc.g_kind.name().into(),
                epochs: tc.epochs,
                metrics: run.metrics,
            });
        }
        dir.write("ablation_table", "ablation.csv", ablation_csv(&rows).as_bytes())?;
        let mut summary = toml::Table::new();
        summary.insert("variants".into(), int(rows.len()));
        for r in &rows {
            let mut t = r.metrics.table(r.epochs);
            t.insert("method".into(), Value::String(r.method.clone()));
            t.insert("g_kind".into(), Value::String(r.g_kind.clone()));
            summary.insert(r.label.clone(), Value::Table(t));
        }
        Ok((Some(cfg.run.seed), summary, Some(table)))
    })
}

fn alpha_arg(a: f64) -> CliResult<AlphaValue<f64>> {
    AlphaValue::new(a).map_err(|e| CliError::Usage(format!("--alpha: {e}")))
}

fn usage(e: als_core::Error) -> CliError {
    match e {
        als_core::Error::InvalidArgument(msg) => CliError::Usage(msg),
        other => CliError::core("gradient lab", other),
    }
}

fn out_or_default(out: Option<&Path>, name: &str) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| default_output_dir(name))
}

pub fn cmd_ratios(draws: usize, classes: usize, alpha: f64, seed: u64, out: Option<&Path>) -> CliResult<RunManifest> {
    if draws == 0 {
        return Err(CliError::Usage("--draws must be positive".into()));
    }
    let rows = sample_ratio_rows(draws, classes, alpha_arg(alpha)?, seed).map_err(usage)?;
    in_output_dir(&out_or_default(out, "ratios"), "gradlab ratios", |dir| {
        dir.write("ratios_csv", "ratios.csv", &csv_bytes(|b| write_ratio_csv(b, &rows)))?;
        let mut s = toml::Table::new();
        s.insert("draws".into(), int(draws));
        s.insert("classes".into(), int(classes));
        s.insert("alpha".into(), Value::Float(alpha));
        s.insert("rows".into(), int(rows.len()));
        s.insert("flips".into(), int(rows.iter().filter(|r| r.flip).count()));
        s.insert("undefined".into(), int(rows.iter().filter(|r| !r.ratio.is_defined()).count()));
        Ok((Some(seed), s, None))
    })
}

pub fn cmd_proposition(trials: usize, classes: usize, seed: u64, out: Option<&Path>) -> CliResult<RunManifest> {
    let report = proposition1_validate(trials, classes, seed).map_err(usage)?;
    in_output_dir(&out_or_default(out, "proposition"), "gradlab proposition", |dir| {
        dir.write(
            "proposition_csv",
            "proposition.csv",
            &csv_bytes(|b| write_proposition_csv(b, &report)),
        )?;
        let mut s = toml::Table::new();
        s.insert("trials".into(), int(trials));
        s.insert("classes".into(), int(classes));
        s.insert("valid_pairs".into(), int(report.valid_pairs));
        s.insert("violations".into(), int(report.violations));
        s.insert("rejected".into(), int(report.rejected));
        Ok((Some(seed), s, None))
    })
}

pub fn cmd_flipmap(grid: usize, alpha: f64, out: Option<&Path>) -> CliResult<RunManifest> {
    let cells = flip_region_census(grid, alpha_arg(alpha)?).map_err(usage)?;
    in_output_dir(&out_or_default(out, "flipmap"), "gradlab flipmap", |dir| {
        dir.write("flipmap_csv", "flipmap.csv", &csv_bytes(|b| write_census_csv(b, &cells)))?;
        let mut s = toml::Table::new();
        s.insert("grid".into(), int(grid));
        s.insert("alpha".into(), Value::Float(alpha));
        s.insert("cells".into(), int(cells.len()));
        s.insert("flips".into(), int(cells.iter().filter(|c| c.flip).count()));
        Ok((None, s, None))
    })
}

/// Reads `confidence,correct` rows; `correct` is `true`/`false` or `1`/`0`.
pub fn parse_pairs(text: &str, origin: &Path) -> CliResult<Vec<(f64, bool)>> {
    let bad = |line: usize, what: String| CliError::Usage(format!("{}:{line}: {what}", origin.display()));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == PREDICTIONS_HEADER => {}
        _ => return Err(bad(1, format!("expected header `{PREDICTIONS_HEADER}`"))),
    }
    lines
        .map(|(i, l)| {
            let (c, ok) = l.split_once(',').ok_or_else(|| bad(i + 1, "expected two fields".into()))?;
            let c: f64 = c
                .trim()
                .parse()
                .map_err(|_| bad(i + 1, format!("bad confidence `{}`", c.trim())))?;
            let ok = match ok.trim() {
                "true" | "1" => true,
                "false" | "0" => false,
                other => return Err(bad(i + 1, format!("bad correctness flag `{other}`"))),
            };
            Ok((c, ok))
        })
        .collect()
}

pub fn cmd_calibrate(pairs_path: &Path, bins: usize, out: Option<&Path>) -> CliResult<RunManifest> {
    let text = fs::read_to_string(pairs_path).map_err(|e| CliError::io(pairs_path, e))?;
    let pairs = parse_pairs(&text, pairs_path)?;
    let report = calibration_report(&pairs, bins).map_err(usage)?;
    in_output_dir(&out_or_default(out, "calibrate"), "calibrate", |dir| {
        dir.write("calibration_csv", "calibration.csv", &csv_bytes(|b| write_reliability_csv(b, &report)))?;
        dir.write("calibration_report", "calibration.toml", calibration_toml(&report)?.as_bytes())?;
        let mut s = toml::Table::new();
        s.insert("pairs".into(), Value::String(pairs_path.display().to_string()));
        s.insert("bins".into(), int(bins));
        s.insert("count".into(), int(report.total_count));
        s.insert("ece".into(), Value::Float(report.ece));
        s.insert("mce".into(), Value::Float(report.mce));
        Ok((None, s, None))
    })
}
