// SPDX-License-Identifier: MIT OR Apache-2.0

//! Composite experiments: stage graphs that skip work already on disk,
//! the explainer x target matrices, the data-fraction sweep, the
//! alignment study and the summary report.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::manifest::{RunManifest, Workspace};
use super::stages::{
    self, explainer_path, stage_align, stage_eval, stage_gen_ablate, stage_gen_patch, stage_label_features,
    stage_pretrain_proj, stage_train_explainer, stage_train_sae, stage_train_target, stage_world, twin_of, AlignRow,
    Baseline, EvalSummary, ExplainerSpec, Subject, MODEL_IDS,
};
use super::Task;
use crate::error::{Error, Result};
use crate::metrics::{mean_stderr, paired_t_test, welch_t_test, TTest};
use crate::projection::ProjectionMode;

fn ensure(ws: &Workspace, stage: &str, key: &str, f: impl FnOnce() -> Result<RunManifest>) -> Result<()> {
    if !ws.is_done(stage, key)? {
        f()?;
    }
    Ok(())
}

pub fn ensure_world(ws: &Workspace) -> Result<()> {
    ensure(ws, "world", "world", || stage_world(ws))
}

/// Target model plus everything derived from it alone.
pub fn ensure_target(ws: &Workspace, id: &str) -> Result<()> {
    ensure_world(ws)?;
    ensure(ws, "train-target", id, || stage_train_target(ws, id))?;
    ensure(ws, "train-sae", id, || stage_train_sae(ws, id))?;
    ensure(ws, "label-features", id, || stage_label_features(ws, id))?;
    ensure(ws, "gen-patch-data", id, || stage_gen_patch(ws, id))?;
    ensure(ws, "gen-ablate-data", id, || stage_gen_ablate(ws, id))
}

pub fn ensure_explainer(ws: &Workspace, spec: &ExplainerSpec) -> Result<EvalSummary> {
    ensure_target(ws, &spec.target)?;
    if spec.explainer != spec.target {
        ensure_target(ws, &spec.explainer)?;
    }
    if matches!(spec.mode, ProjectionMode::Joint | ProjectionMode::Frozen) && spec.task != Task::Ablate {
        let key = format!("{}-to-{}", spec.target, spec.explainer);
        ensure(ws, "pretrain-proj", &key, || stage_pretrain_proj(ws, &spec.target, &spec.explainer))?;
    }
    let key = spec.key();
    ensure(ws, "train-explainer", &key, || stage_train_explainer(ws, spec))?;
    let subject = Subject::Explainer(spec.clone());
    ensure(ws, "eval", &key, || stage_eval(ws, &subject))?;
    stages::read_eval(ws, &key)
}

pub fn ensure_baseline(ws: &Workspace, baseline: Baseline, target: &str) -> Result<EvalSummary> {
    ensure_target(ws, target)?;
    let subject = Subject::Baseline {
        baseline,
        target: target.into(),
    };
    let key = subject.key();
    ensure(ws, "baseline", &key, || stage_eval(ws, &subject))?;
    stages::read_eval(ws, &key)
}

/// Main per-item metric of a task.
pub fn primary_metric(task: Task) -> &'static str {
    match task {
        Task::Feat => "judge",
        Task::Patch | Task::Ablate | Task::Location => "exact",
    }
}

/// Self cell against one cross cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `target` (fix target, vary explainer) or `explainer` (fix explainer, vary target).
    pub view: String,
    pub fixed: String,
    pub self_cell: String,
    pub cross_cell: String,
    pub metric: String,
    pub self_mean: f64,
    pub self_stderr: f64,
    pub cross_mean: f64,
    pub cross_stderr: f64,
    pub test: String,
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixReport {
    pub task: Task,
    pub metric: String,
    pub cells: BTreeMap<(String, String), EvalSummary>,
    pub comparisons: Vec<Comparison>,
}

impl MatrixReport {
    pub fn cell(&self, explainer: &str, target: &str) -> Result<&EvalSummary> {
        self.cells
            .get(&(explainer.to_string(), target.to_string()))
            .ok_or_else(|| Error::Dataset(format!("matrix has no cell {explainer} on {target}")))
    }

    pub fn comparison(&self, view: &str, fixed: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.view == view && c.fixed == fixed)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "view,fixed,self_cell,cross_cell,metric,self_mean,self_stderr,cross_mean,cross_stderr,test,t,df,p\n",
        );
        for c in &self.comparisons {
            s.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.3},{:.6e}\n",
                c.view,
                c.fixed,
                c.self_cell,
                c.cross_cell,
                c.metric,
                c.self_mean,
                c.self_stderr,
                c.cross_mean,
                c.cross_stderr,
                c.test,
                c.t,
                c.df,
                c.p
            ));
        }
        s
    }
}

/// Explainer spec of one matrix cell; cross cells use the configured
/// projection mode.
pub fn matrix_spec(ws: &Workspace, task: Task, explainer: &str, target: &str) -> ExplainerSpec {
    if explainer == target {
        ExplainerSpec::self_explainer(task, target)
    } else {
        ExplainerSpec::cross(task, explainer, target, ws.config.mode)
    }
}

fn compare(view: &str, fixed: &str, metric: &str, s: &EvalSummary, c: &EvalSummary, paired: bool) -> Result<Comparison> {
    let a = s.item(metric)?;
    let b = c.item(metric)?;
    let (test, tt): (&str, TTest) = if paired {
        if s.item_ids != c.item_ids {
            return Err(Error::Dataset(format!("{} and {} score different items", s.subject, c.subject)));
        }
        ("paired", paired_t_test(a, b)?)
    } else {
        ("welch", welch_t_test(a, b)?)
    };
    let (sm, se) = mean_stderr(a);
    let (cm, ce) = mean_stderr(b);
    Ok(Comparison {
        view: view.into(),
        fixed: fixed.into(),
        self_cell: s.subject.clone(),
        cross_cell: c.subject.clone(),
        metric: metric.into(),
        self_mean: sm,
        self_stderr: se,
        cross_mean: cm,
        cross_stderr: ce,
        test: test.into(),
        t: tt.t,
        df: tt.df,
        p: tt.p,
    })
}

/// Trains and scores every explainer x target cell of one task and
/// writes `reports/matrix-{task}.csv` with both views.
pub fn run_matrix(ws: &Workspace, task: Task) -> Result<MatrixReport> {
    let mut cells = BTreeMap::new();
    for e in MODEL_IDS {
        for t in MODEL_IDS {
            let spec = matrix_spec(ws, task, e, t);
            cells.insert((e.to_string(), t.to_string()), ensure_explainer(ws, &spec)?);
        }
    }
    let metric = primary_metric(task);
    let mut run = ws.begin("matrix", task.name());
    for s in cells.values() {
        run.read(&stages::eval_path(&s.subject))?;
    }
    let mut comparisons = Vec::new();
    for t in MODEL_IDS {
        let other = twin_of(t)?;
        let s = &cells[&(t.to_string(), t.to_string())];
        let c = &cells[&(other.to_string(), t.to_string())];
        comparisons.push(compare("target", t, metric, s, c, true)?);
    }
    for e in MODEL_IDS {
        let other = twin_of(e)?;
        let s = &cells[&(e.to_string(), e.to_string())];
        let c = &cells[&(e.to_string(), other.to_string())];
        comparisons.push(compare("explainer", e, metric, s, c, false)?);
    }
    let report = MatrixReport {
        task,
        metric: metric.into(),
        cells,
        comparisons,
    };
    let mut grid = String::from("explainer,target,metric,mean,stderr,n\n");
    for ((e, t), s) in &report.cells {
        let (m, se) = s.mean_stderr(metric)?;
        grid.push_str(&format!("{e},{t},{metric},{m:.6},{se:.6},{}\n", s.item_ids.len()));
    }
    run.write(&format!("reports/matrix-{task}-cells.csv"), grid.as_bytes())?;
    run.write(&format!("reports/matrix-{task}.csv"), report.to_csv().as_bytes())?;
    run.finish()?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub explainer: String,
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub target: String,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn get(&self, explainer: &str, fraction: f64, metric: &str) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.explainer == explainer && r.fraction == fraction && r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fraction,explainer,metric,mean,stderr\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{:.6},{:.6}\n", r.fraction, r.explainer, r.metric, r.mean, r.stderr));
        }
        s
    }
}

/// Self-explainer of `target` trained on growing fractions of its
/// feature data, next to the all-layer nearest neighbour on the full
/// dictionary. Every row is scored on the same held-out features.
pub fn sweep_data_fraction(ws: &Workspace, target: &str) -> Result<SweepReport> {
    let mut summaries = Vec::new();
    for &f in &ws.config.fractions {
        let mut spec = ExplainerSpec::self_explainer(Task::Feat, target);
        spec.fraction = f;
        summaries.push((f, "self".to_string(), ensure_explainer(ws, &spec)?));
    }
    summaries.push((1.0, Baseline::NnAll.name().to_string(), ensure_baseline(ws, Baseline::NnAll, target)?));
    let mut run = ws.begin("sweep", target);
    let ids = &summaries[0].2.item_ids;
    let mut rows = Vec::new();
    for (f, name, s) in &summaries {
        run.read(&stages::eval_path(&s.subject))?;
        if &s.item_ids != ids {
            return Err(Error::Dataset(format!("{} scored a different held-out set", s.subject)));
        }
        for metric in ["judge", "simulator"] {
            let (mean, stderr) = s.mean_stderr(metric)?;
            rows.push(SweepRow {
                fraction: *f,
                explainer: name.clone(),
                metric: metric.into(),
                mean,
                stderr,
            });
        }
    }
    let report = SweepReport {
        target: target.into(),
        rows,
    };
    run.write(&format!("sweep/{target}.csv"), report.to_csv().as_bytes())?;
    run.finish()?;
    Ok(report)
}

/// Explainer variants of the alignment study for one target.
pub fn align_variants(target: &str) -> Result<Vec<(String, ExplainerSpec)>> {
    let twin = twin_of(target)?;
    Ok(vec![
        ("self".into(), ExplainerSpec::self_explainer(Task::Feat, target)),
        ("twin-raw".into(), ExplainerSpec::cross(Task::Feat, twin, target, ProjectionMode::Identity)),
        ("twin-random".into(), ExplainerSpec::cross(Task::Feat, twin, target, ProjectionMode::Random)),
        ("twin-pretrained".into(), ExplainerSpec::cross(Task::Feat, twin, target, ProjectionMode::Joint)),
    ])
}

/// Alignment metrics against judge scores; returns the rows and their
/// rank correlation.
pub fn run_align(ws: &Workspace, target: &str) -> Result<(Vec<AlignRow>, f64)> {
    let variants = align_variants(target)?;
    for (_, spec) in &variants {
        ensure_explainer(ws, spec)?;
    }
    let (_, rows, rho) = stage_align(ws, target, &variants)?;
    Ok((rows, rho))
}

/// Location probe: self-explainer trained to name the patched position
/// and layers.
pub fn run_location(ws: &Workspace, target: &str) -> Result<EvalSummary> {
    ensure_explainer(ws, &ExplainerSpec::self_explainer(Task::Location, target))
}

/// Feature-task comparison of the self-explainer with every feature
/// baseline on one target.
pub fn run_baselines(ws: &Workspace, target: &str) -> Result<Vec<(EvalSummary, Comparison)>> {
    let s = ensure_explainer(ws, &ExplainerSpec::self_explainer(Task::Feat, target))?;
    let mut out = Vec::new();
    for b in [Baseline::NnAll, Baseline::NnLayer, Baseline::Selfie] {
        let c = ensure_baseline(ws, b, target)?;
        let cmp = compare("baseline", target, "judge", &s, &c, true)?;
        out.push((c, cmp));
    }
    Ok(out)
}

/// Collects every evaluation summary into `reports/summary.csv`.
pub fn write_report(ws: &Workspace) -> Result<String> {
    let mut run = ws.begin("report", "summary");
    let mut keys = BTreeSet::new();
    for m in ws.manifests()? {
        if m.stage == "eval" || m.stage == "baseline" {
            keys.insert(m.key);
        }
    }
    let mut csv = String::from("subject,task,target,metric,mean,stderr,n\n");
    for key in &keys {
        let s: EvalSummary = serde_json::from_slice(&run.read(&stages::eval_path(key))?)?;
        let mut metrics: BTreeSet<&String> = s.metrics.keys().collect();
        metrics.extend(s.items.keys());
        for metric in metrics {
            let (mean, stderr, n) = match s.items.get(metric) {
                Some(v) => {
                    let (m, e) = mean_stderr(v);
                    (m, e, v.len())
                }
                None => (s.metrics[metric], f64::NAN, s.item_ids.len()),
            };
            csv.push_str(&format!("{key},{},{},{metric},{mean:.6},{stderr:.6},{n}\n", s.task, s.target));
        }
    }
    for extra in ["reports/matrix-feat.csv", "reports/matrix-patch.csv", "reports/matrix-ablate.csv"] {
        if ws.exists(extra) {
            run.read(extra)?;
        }
    }
    run.write("reports/summary.csv", csv.as_bytes())?;
    run.finish()?;
    Ok(csv)
}

/// Everything computed by [`run_all`].
#[derive(Clone, Debug)]
pub struct RunResults {
    pub baselines: Vec<(EvalSummary, Comparison)>,
    pub matrices: Vec<MatrixReport>,
    pub sweep: SweepReport,
    pub align: (Vec<AlignRow>, f64),
    pub location: EvalSummary,
}

/// The full experiment set of one run directory, from the world onward.
pub fn run_all(ws: &Workspace) -> Result<RunResults> {
    for id in MODEL_IDS {
        ensure_target(ws, id)?;
    }
    let target = MODEL_IDS[0];
    let baselines = run_baselines(ws, target)?;
    let mut matrices = Vec::new();
    for name in &ws.config.matrix_tasks {
        matrices.push(run_matrix(ws, Task::parse(name)?)?);
    }
    let sweep = sweep_data_fraction(ws, target)?;
    let align = run_align(ws, target)?;
    let location = run_location(ws, target)?;
    write_report(ws)?;
    Ok(RunResults {
        baselines,
        matrices,
        sweep,
        align,
        location,
    })
}

/// Whether an explainer checkpoint exists for `spec`.
pub fn is_trained(ws: &Workspace, spec: &ExplainerSpec) -> bool {
    ws.exists(&explainer_path(&spec.key()))
}
