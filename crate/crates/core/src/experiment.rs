//! Declarative experiments: scene suites, ablation modes, N_t sweeps and
//! gradient checks, with their CSV/JSON artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_scenes, EvalConfig, EvalReport};
use crate::gradcheck::{run_gradcheck, FDConfig, GradcheckSummary};
use crate::nms_loss::LossConfig;
use crate::par::Execution;
use crate::scenegen::{generate_suite, scenes_from_json, scenes_to_json, Scene, SceneSpec};
use crate::trainer::{train_suite, TrainConfig, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Baseline,
    Pull,
    Push,
    Full,
    NtSweep,
    Gradcheck,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Pull => "pull",
            Mode::Push => "push",
            Mode::Full => "full",
            Mode::NtSweep => "nt-sweep",
            Mode::Gradcheck => "gradcheck",
        }
    }

    /// `(enable_pull, enable_push)` for the training modes.
    fn flags(self) -> Option<(bool, bool)> {
        match self {
            Mode::Baseline => Some((false, false)),
            Mode::Pull => Some((true, false)),
            Mode::Push => Some((false, true)),
            Mode::Full => Some((true, true)),
            Mode::NtSweep | Mode::Gradcheck => None,
        }
    }
}

/// Optimiser settings shared by every mode of an experiment.
/// `lambda_reg` is small: SmoothL1 on pixel corners has unit-scale gradients
/// while IoU terms scale with 1 / box size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub lr: f64,
    pub iters: usize,
    pub lambda_reg: f64,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self { lr: 30.0, iters: 100, lambda_reg: 0.005, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneSpec,
    pub n_scenes: usize,
    /// Load scenes from this file instead of generating them.
    pub input_scenes: Option<PathBuf>,
    pub train: TrainParams,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub gradcheck: FDConfig,
    pub modes: Vec<Mode>,
    pub nt_values: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            n_scenes: 50,
            input_scenes: None,
            train: TrainParams::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: FDConfig::default(),
            modes: vec![Mode::Baseline, Mode::Pull, Mode::Push, Mode::Full],
            nt_values: vec![0.4, 0.45, 0.5, 0.55],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.loss.validate()?;
        self.eval.validate()?;
        self.gradcheck.validate()?;
        self.train_config(Mode::Full, self.loss).validate()?;
        if self.n_scenes == 0 && self.input_scenes.is_none() {
            return Err(Error::Config("n_scenes must be at least 1".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("at least one mode is required".into()));
        }
        if self.modes.contains(&Mode::NtSweep) {
            if self.nt_values.is_empty() {
                return Err(Error::Config("nt-sweep needs at least one value in nt_values".into()));
            }
            for &nt in &self.nt_values {
                LossConfig { nt, ..self.loss }.validate()?;
            }
        }
        Ok(())
    }

    pub fn train_config(&self, mode: Mode, loss: LossConfig) -> TrainConfig {
        let (enable_pull, enable_push) = mode.flags().unwrap_or((true, true));
        TrainConfig {
            lr: self.train.lr,
            iters: self.train.iters,
            lambda_reg: self.train.lambda_reg,
            loss_cfg: loss,
            enable_pull,
            enable_push,
            seed: self.train.seed,
        }
    }

    /// Defaults, overlaid with an optional JSON document, overlaid with
    /// `dotted.path=value` overrides. Values parse as JSON, else as strings.
    pub fn load(document: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut v = serde_json::to_value(ExperimentConfig::default())?;
        if let Some(text) = document {
            let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
            merge(&mut v, doc);
        }
        for (key, raw) in overrides {
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut v, key, parsed)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key '{key}'")));
    }
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(Error::Config(format!("'{}' is not an object", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

/// What the runner should do; each maps to a CLI subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Gen,
    Train,
    Eval,
    Sweep,
    Gradcheck,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub mode: String,
    pub nt: f64,
    pub lambda_pull: f64,
    pub lambda_push: f64,
    pub mr_log_average: f64,
    pub nms_fp_count: usize,
    pub nms_fn_count: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    #[serde(skip)]
    pub report: Option<EvalReport>,
}

impl MetricsRow {
    fn new(mode: &str, loss: &LossConfig, report: EvalReport) -> Self {
        Self {
            mode: mode.to_string(),
            nt: loss.nt,
            lambda_pull: loss.lambda_pull,
            lambda_push: loss.lambda_push,
            mr_log_average: report.mr_log_average,
            nms_fp_count: report.nms_fp_count,
            nms_fn_count: report.nms_fn_count,
            tp: report.tp,
            fp: report.fp,
            fn_: report.fn_,
            report: Some(report),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutcome {
    pub success: bool,
    pub rows: Vec<MetricsRow>,
    pub gradcheck: Option<GradcheckSummary>,
    /// `(file name, contents)` in write order.
    pub files: Vec<(String, String)>,
}

impl RunOutcome {
    pub fn row(&self, mode: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

pub const SUMMARY_HEADER: &str = "mode,nt,lambda_pull,lambda_push,mr_log_average,nms_fp,nms_fn,tp,fp,fn";
pub const LOSS_CURVES_HEADER: &str = "scene_id,iter,l_reg,l_pull,l_push,l_total";

pub fn summary_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.mode,
            r.nt,
            r.lambda_pull,
            r.lambda_push,
            r.mr_log_average,
            r.nms_fp_count,
            r.nms_fn_count,
            r.tp,
            r.fp,
            r.fn_
        );
    }
    out
}

fn curves_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("mode,nt,fppi,miss_rate\n");
    for r in rows {
        if let Some(rep) = &r.report {
            for (f, m) in &rep.curve {
                let _ = writeln!(out, "{},{},{f},{m}", r.mode, r.nt);
            }
        }
    }
    out
}

fn append_loss_curves(out: &mut String, tag: &str, trained: &[(TrainState, Scene)]) {
    for (state, scene) in trained {
        for r in &state.history {
            let _ = writeln!(out, "{tag}:{},{},{},{},{},{}", scene.id, r.iter, r.l_reg, r.l_pull, r.l_push, r.l_total);
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<Vec<Scene>> {
    match &cfg.input_scenes {
        Some(path) => {
            let text =
                fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            scenes_from_json(&text)
        }
        None => generate_suite(&cfg.scene, cfg.n_scenes),
    }
}

/// Trains every scene under `mode` and evaluates the result.
pub fn run_mode(
    cfg: &ExperimentConfig,
    scenes: &[Scene],
    mode: Mode,
    loss: LossConfig,
    exec: Execution,
) -> Result<(MetricsRow, Vec<(TrainState, Scene)>)> {
    let tc = cfg.train_config(mode, loss);
    let trained = train_suite(scenes, &tc, exec)?;
    let out_scenes: Vec<Scene> = trained.iter().map(|(_, s)| s.clone()).collect();
    let report = evaluate_scenes(&out_scenes, &loss, &cfg.eval, exec)?;
    let row = MetricsRow::new(mode.name(), &tc.gated_loss_cfg(), report);
    log::info!(
        "{} (nt={}): mr={:.4} nms_fp={} nms_fn={}",
        row.mode,
        row.nt,
        row.mr_log_average,
        row.nms_fp_count,
        row.nms_fn_count
    );
    Ok((row, trained))
}

/// Computes every artifact of `command` in memory. Nothing touches the disk
/// except reading `input_scenes`.
pub fn plan(cfg: &ExperimentConfig, command: Command, exec: Execution) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut outcome = RunOutcome { success: true, ..Default::default() };

    if command == Command::Gradcheck {
        let summary = run_gradcheck(cfg.train.seed, &cfg.loss, &cfg.gradcheck, exec)?;
        outcome.success = summary.passed;
        outcome.files.push(("gradcheck.json".into(), to_json(&summary)));
        outcome.files.push(("gradcheck.txt".into(), format!("{}{}", summary.geometry, summary.nms_loss)));
        outcome.gradcheck = Some(summary);
        return Ok(outcome);
    }

    let scenes = load_or_generate(cfg)?;
    outcome.files.push(("scenes.json".into(), scenes_to_json(&scenes) + "\n"));
    if command == Command::Gen {
        return Ok(outcome);
    }

    if command == Command::Eval {
        let report = evaluate_scenes(&scenes, &cfg.loss, &cfg.eval, exec)?;
        outcome.files.push(("eval_report.json".into(), to_json(&report)));
        outcome.files.push(("curve.csv".into(), report.curve_csv()));
        outcome.rows.push(MetricsRow::new("eval", &cfg.loss, report));
    } else {
        let modes: Vec<Mode> = if command == Command::Sweep { vec![Mode::NtSweep] } else { cfg.modes.clone() };
        let mut curves = format!("{LOSS_CURVES_HEADER}\n");
        let comparative = modes.iter().any(|m| *m != Mode::Baseline && *m != Mode::Gradcheck);
        let mut train_modes: Vec<Mode> = modes.iter().copied().filter(|m| m.flags().is_some()).collect();
        if comparative && !train_modes.contains(&Mode::Baseline) {
            train_modes.insert(0, Mode::Baseline);
        }
        for mode in train_modes {
            let (row, trained) = run_mode(cfg, &scenes, mode, cfg.loss, exec)?;
            append_loss_curves(&mut curves, mode.name(), &trained);
            outcome.rows.push(row);
        }
        if modes.contains(&Mode::NtSweep) {
            for &nt in &cfg.nt_values {
                let loss = LossConfig { nt, ..cfg.loss };
                let (mut row, trained) = run_mode(cfg, &scenes, Mode::Full, loss, exec)?;
                row.mode = "nt-sweep".into();
                append_loss_curves(&mut curves, &format!("nt-sweep@{nt}"), &trained);
                outcome.rows.push(row);
            }
        }
        if modes.contains(&Mode::Gradcheck) {
            let summary = run_gradcheck(cfg.train.seed, &cfg.loss, &cfg.gradcheck, exec)?;
            outcome.success &= summary.passed;
            outcome.files.push(("gradcheck.json".into(), to_json(&summary)));
            outcome.gradcheck = Some(summary);
        }
        outcome.files.push(("loss_curves.csv".into(), curves));
    }

    outcome.files.push(("metrics.json".into(), to_json(&outcome.rows)));
    outcome.files.push(("summary.csv".into(), summary_csv(&outcome.rows)));
    outcome.files.push(("curves.csv".into(), curves_csv(&outcome.rows)));
    Ok(outcome)
}

/// Writes the planned files into `out_dir`. Files already written are
/// removed again if a later write fails.
pub fn write_outputs(outcome: &RunOutcome, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut written: Vec<PathBuf> = Vec::new();
    for (name, contents) in &outcome.files {
        let path = out_dir.join(name);
        if let Err(e) = fs::write(&path, contents) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            return Err(e.into());
        }
        written.push(path);
    }
    Ok(())
}

pub fn run_experiment(cfg: &ExperimentConfig, command: Command, out_dir: &Path, exec: Execution) -> Result<RunOutcome> {
    let outcome = plan(cfg, command, exec)?;
    write_outputs(&outcome, out_dir)?;
    Ok(outcome)
}
