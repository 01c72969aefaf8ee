//! Experiment execution, output files, result tables and the parameter
//! audit against the published reference tables.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{task_data, TaskData};
use crate::error::{Error, Result};
use crate::models::{Family, Model, ModelSpec};
use crate::sparse::Backend;
use crate::train::{run_model, select_dropout, ModelRun, SweepChoice};
use crate::tree::ParamCount;

pub const SUMMARY_HEADER: &str =
    "family,b_or_h,p,train_acc_mean,train_acc_std,val_acc_mean,val_acc_std,params,trials,config_hash";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceParams {
    pub family: Family,
    pub width: usize,
    pub weights: usize,
    pub biases: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceAccuracy {
    pub family: Family,
    pub width: usize,
    pub p: f64,
    pub train_mean: f64,
    pub train_std: f64,
    pub val_mean: f64,
    pub val_std: f64,
}

/// Published parameter counts and accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTables {
    pub parameters: Vec<ReferenceParams>,
    pub accuracy: Vec<ReferenceAccuracy>,
}

impl ReferenceTables {
    pub fn params(&self, family: Family, width: usize) -> Option<&ReferenceParams> {
        self.parameters
            .iter()
            .find(|r| r.family == family && r.width == width)
    }

    pub fn accuracy(&self, family: Family, width: usize, p: f64) -> Option<&ReferenceAccuracy> {
        self.accuracy
            .iter()
            .find(|r| r.family == family && r.width == width && (r.p - p).abs() < 1e-9)
    }
}

pub fn reference_tables() -> &'static ReferenceTables {
    static TABLES: OnceLock<ReferenceTables> = OnceLock::new();
    TABLES.get_or_init(|| {
        serde_json::from_str(include_str!("../data/reference_tables.json")).expect("embedded tables parse")
    })
}

/// Closed-form, allocated and published counts of one model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditRow {
    pub family: Family,
    pub width: usize,
    pub closed_form: ParamCount,
    pub allocated: ParamCount,
    /// CNN trunk parameters, reported separately.
    pub trunk: Option<ParamCount>,
    pub reference: Option<ParamCount>,
}

impl AuditRow {
    pub fn discrepancy(&self) -> bool {
        self.reference.is_some_and(|r| r != self.closed_form)
    }
}

/// Audits one family and width. The model is built on `backend` to count
/// the allocated parameters.
pub fn audit(family: Family, width: usize, backend: Backend) -> Result<AuditRow> {
    let spec = ModelSpec::new(family, width, 0.0);
    let closed_form = spec.classifier_parameters()?;
    let model = Model::<f32>::build(&spec, 0, backend)?;
    let trunk = model.trunk_parameter_count();
    Ok(AuditRow {
        family,
        width,
        closed_form,
        allocated: model.classifier_parameter_count(),
        trunk: (trunk.total > 0).then_some(trunk),
        reference: reference_tables()
            .params(family, width)
            .map(|r| ParamCount::new(r.weights, r.biases)),
    })
}

/// Every row of the published parameter tables.
pub fn audit_reference_rows(backend: Backend) -> Result<Vec<AuditRow>> {
    reference_tables()
        .parameters
        .iter()
        .map(|r| audit(r.family, r.width, backend))
        .collect()
}

pub fn render_audit(rows: &[AuditRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<11} {:>6} {:>8} {:>7} {:>7} {:>9} {:>21}  flag",
        "family", "b/h", "weights", "biases", "total", "allocated", "reference (w/b/t)"
    );
    for r in rows {
        let key = if r.family.is_dendritic() { "b" } else { "h" };
        let reference = r.reference.map_or_else(
            || "-".to_string(),
            |p| format!("{}/{}/{}", p.weights, p.biases, p.total),
        );
        let mut flag = String::new();
        if r.discrepancy() {
            flag.push_str("DISCREPANCY vs reference");
        }
        if r.allocated != r.closed_form {
            flag.push_str(" ALLOCATION MISMATCH");
        }
        let _ = writeln!(
            s,
            "{:<11} {:>6} {:>8} {:>7} {:>7} {:>9} {:>21}  {}",
            r.family.name(),
            format!("{key}={}", r.width),
            r.closed_form.weights,
            r.closed_form.biases,
            r.closed_form.total,
            r.allocated.total,
            reference,
            flag.trim()
        );
        if let Some(t) = r.trunk {
            let _ = writeln!(s, "{:<11} {:>6} trunk: {} weights, {} biases, {} total (not included above)", "", "", t.weights, t.biases, t.total);
        }
    }
    s
}

/// Dropout variants of one family and width, and which one wins.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepGroup {
    pub family: Family,
    pub width: usize,
    /// Indices into [`ExperimentOutcome::runs`].
    pub members: Vec<usize>,
    /// Positions within `members`.
    pub choice: SweepChoice,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub runs: Vec<ModelRun>,
    pub sweeps: Vec<SweepGroup>,
}

/// Trains every (expanded) model of `config` on the task's datasets.
pub fn run_experiment(config: &ExperimentConfig, mnist: &TaskData) -> Result<ExperimentOutcome> {
    config.validate()?;
    let data = task_data(mnist, config.task)?;
    let mut runs = Vec::new();
    for spec in config.expanded_models() {
        info!("{}: training {spec}", config.name);
        let run = run_model(&config.train_config(spec), &data)?;
        info!(
            "{}: {spec} val acc {:.4} +- {:.4}",
            config.name, run.summary.val_acc.mean, run.summary.val_acc.std
        );
        runs.push(run);
    }
    let sweeps = sweep_groups(&runs);
    Ok(ExperimentOutcome {
        config_hash: config.content_hash(),
        config: config.clone(),
        runs,
        sweeps,
    })
}

fn sweep_groups(runs: &[ModelRun]) -> Vec<SweepGroup> {
    let mut groups: Vec<SweepGroup> = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        let (family, width) = (r.config.spec.family(), r.config.spec.width());
        match groups.iter_mut().find(|g| g.family == family && g.width == width) {
            Some(g) => g.members.push(i),
            None => groups.push(SweepGroup {
                family,
                width,
                members: vec![i],
                choice: SweepChoice {
                    by_val_acc: 0,
                    by_val_loss: 0,
                },
            }),
        }
    }
    groups.retain(|g| g.members.len() > 1);
    for g in &mut groups {
        let summaries: Vec<_> = g.members.iter().map(|&i| runs[i].summary.clone()).collect();
        g.choice = select_dropout(&summaries).expect("non-empty group");
    }
    groups
}

pub fn summary_csv(outcome: &ExperimentOutcome) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for run in &outcome.runs {
        let spec = &run.config.spec;
        let m = &run.summary;
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            spec.family(),
            spec.width(),
            spec.dropout(),
            m.train_acc.mean,
            m.train_acc.std,
            m.val_acc.mean,
            m.val_acc.std,
            m.params.total,
            m.trials,
            outcome.config_hash
        );
    }
    s
}

#[derive(Serialize)]
struct EpochLine<'a> {
    experiment: &'a str,
    family: Family,
    b_or_h: usize,
    p: f64,
    trial: usize,
    seed: u64,
    epoch: usize,
    train_loss: f64,
    train_acc: f64,
    val_loss: f64,
    val_acc: f64,
    best: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    grad_norms: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    failure: Option<&'a str>,
}

/// One JSON object per epoch per trial.
pub fn epochs_jsonl(outcome: &ExperimentOutcome) -> String {
    let mut s = String::new();
    for run in &outcome.runs {
        let spec = &run.config.spec;
        for r in &run.reports {
            for e in &r.epochs {
                let line = EpochLine {
                    experiment: &outcome.config.name,
                    family: spec.family(),
                    b_or_h: spec.width(),
                    p: spec.dropout(),
                    trial: r.trial,
                    seed: r.seed,
                    epoch: e.epoch,
                    train_loss: e.train_loss,
                    train_acc: e.train_acc,
                    val_loss: e.val_loss,
                    val_acc: e.val_acc,
                    best: r.best_epoch == Some(e.epoch),
                    grad_norms: e.grad_norms.as_deref(),
                    failure: r.failure.as_deref(),
                };
                s.push_str(&serde_json::to_string(&line).expect("epoch line serializes"));
                s.push('\n');
            }
        }
    }
    s
}

/// Text table: model number, b or h, p, train and val accuracy
/// (mean +- std over best epochs), with the published value alongside.
pub fn render_table(outcome: &ExperimentOutcome) -> String {
    let c = &outcome.config;
    let mut s = String::new();
    let _ = writeln!(s, "Experiment: {} (task {}, config {})", c.name, c.task, &outcome.config_hash[..12]);
    let _ = writeln!(
        s,
        "Validation set: official 10k MNIST test split. {} trials x {} epochs, batch {}, backend {}.",
        c.train.trials, c.train.epochs, c.train.batch, c.train.backend
    );
    let _ = writeln!(s, "Metrics taken at the epoch of lowest validation loss in each trial.");
    let refs = reference_tables();
    let mut by_family: Vec<Family> = Vec::new();
    for run in &outcome.runs {
        let f = run.config.spec.family();
        if !by_family.contains(&f) {
            by_family.push(f);
        }
    }
    for family in by_family {
        let key = if family.is_dendritic() { "b" } else { "h" };
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<12} {:>4} {:>4} {:>14} {:>14} {:>8} {:>14}  sweep",
            family.name(),
            key,
            "p",
            "Train Acc.",
            "Val. Acc.",
            "params",
            "reference val"
        );
        for (n, (i, run)) in outcome
            .runs
            .iter()
            .enumerate()
            .filter(|(_, r)| r.config.spec.family() == family)
            .enumerate()
        {
            let spec = &run.config.spec;
            let m = &run.summary;
            let reference = refs
                .accuracy(family, spec.width(), spec.dropout())
                .map_or_else(|| "-".to_string(), |r| format!("{:.2} +- {:.2}", r.val_mean, r.val_std));
            let mut marks = Vec::new();
            for g in &outcome.sweeps {
                if g.members[g.choice.by_val_acc] == i {
                    marks.push("best val acc");
                }
                if g.members[g.choice.by_val_loss] == i {
                    marks.push("best val loss");
                }
            }
            let failed = if m.failed > 0 {
                format!(" ({} failed)", m.failed)
            } else {
                String::new()
            };
            let _ = writeln!(
                s,
                "{:<12} {:>4} {:>4} {:>14} {:>14} {:>8} {:>14}  {}{}",
                n + 1,
                spec.width(),
                spec.dropout(),
                format!("{:.2} +- {:.2}", m.train_acc.mean, m.train_acc.std),
                format!("{:.2} +- {:.2}", m.val_acc.mean, m.val_acc.std),
                m.params.total,
                reference,
                marks.join(", "),
                failed
            );
        }
    }
    s
}

/// Writes `summary.csv`, `epochs.jsonl`, `table.txt` and the effective
/// `config.json` into `dir`.
pub fn write_outputs(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, content: String| {
        let path = dir.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))
    };
    write("summary.csv", summary_csv(outcome))?;
    write("epochs.jsonl", epochs_jsonl(outcome))?;
    write("table.txt", render_table(outcome))?;
    write("config.json", outcome.config.render())?;
    Ok(())
}
