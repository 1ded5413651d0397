//! Experiment runner: executes configured runs and writes their artifacts.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! pretrain-<digest>/     init.orbt, metrics.jsonl, config.json, summary.json
//! <run_id>-<digest>/     config.json, metrics.jsonl, merge_events.jsonl,
//!                        checkpoints/step-<n>.orbt, final.orbt,
//!                        schedule.csv, schedule.svg, summary.json
//! ```
//!
//! `summary.json` is written last and marks a directory as complete.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use orbit_core::analysis::{
    checkpoint_rows, dtip, interpolation_sweep, line_svg, merge_schedule_trace, pareto_indices,
    scatter_svg, select_index, write_csv, write_trace_csv, NormBounds, PerfPoint, Series, SweepRow,
};
use orbit_core::distance::{DistanceMetric, MetricKind, OriginProbe};
use orbit_core::merge::interpolate as interpolate_params;
use orbit_core::model::ModelConfig;
use orbit_core::params::{Checkpoint, MaskKind};
use orbit_core::tasks::{
    read_jsonl, CapabilityTask, EvalReport, RetrievalEvalOptions, RetrievalWorld,
};
use orbit_core::train::{self, EvalContext, MergeEvent, PretrainReport, RegularizerSpec};
use orbit_core::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Data, RunConfig};

pub const SUMMARY: &str = "summary.json";
pub const METRICS: &str = "metrics.jsonl";
pub const MERGE_EVENTS: &str = "merge_events.jsonl";
pub const CONFIG: &str = "config.json";
pub const INIT: &str = "init.orbt";
pub const FINAL: &str = "final.orbt";
pub const CHECKPOINTS: &str = "checkpoints";

/// What to do when a run directory already exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Existing {
    /// Fail with a validation error.
    Refuse,
    /// Use the stored results if the directory is complete.
    Reuse,
    /// Delete and recompute.
    Overwrite,
}

/// Prepares `dir` according to `policy`; returns true when a complete
/// previous result should be reused.
fn claim_dir(dir: &Path, policy: Existing) -> Result<bool> {
    if dir.exists() {
        let complete = dir.join(SUMMARY).is_file();
        match policy {
            Existing::Reuse if complete => return Ok(true),
            Existing::Overwrite | Existing::Reuse => fs::remove_dir_all(dir)?,
            Existing::Refuse => {
                return Err(Error::InvalidConfig(format!(
                    "run directory {} already exists; pass --force to overwrite",
                    dir.display()
                )))
            }
        }
    }
    fs::create_dir_all(dir)?;
    Ok(false)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Model configuration stored in a checkpoint's tag.
pub fn model_config_of(checkpoint: &Checkpoint) -> Result<ModelConfig> {
    serde_json::from_str(&checkpoint.tag).map_err(|e| {
        Error::InvalidConfig(format!(
            "checkpoint tag does not hold a model configuration: {e}"
        ))
    })
}

// ---------------------------------------------------------------------------
// Data export

/// Manifest of a `gen-data` directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub key_count: u32,
    pub sid_size: u32,
    pub capability_seed: u64,
    pub retrieval_seed: u64,
}

pub const CAPABILITY_FILE: &str = "capability.jsonl";
pub const DATA_MANIFEST: &str = "data.json";

pub fn write_data(config: &RunConfig, data: &Data, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    data.capability.save_jsonl(&dir.join(CAPABILITY_FILE))?;
    data.world.save_jsonl(dir)?;
    write_json(
        &dir.join(DATA_MANIFEST),
        &DataManifest {
            key_count: config.model.vocab.key_count,
            sid_size: config.model.vocab.sid_size,
            capability_seed: config.capability.seed,
            retrieval_seed: config.retrieval.seed,
        },
    )
}

pub fn read_data(dir: &Path) -> Result<Data> {
    let manifest: DataManifest = read_json(&dir.join(DATA_MANIFEST))?;
    let capability = CapabilityTask::load_jsonl(&dir.join(CAPABILITY_FILE), manifest.key_count)?;
    let world = RetrievalWorld::load_jsonl(dir)?;
    Ok(Data { capability, world })
}

// ---------------------------------------------------------------------------
// Pretraining

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub digest: String,
    pub stopped_at: u64,
    pub final_report: PretrainReport,
}

pub struct PretrainRun {
    pub dir: PathBuf,
    pub checkpoint: Checkpoint,
    pub reports: Vec<PretrainReport>,
    pub reused: bool,
}

pub fn pretrain(config: &RunConfig, data: &Data, policy: Existing) -> Result<PretrainRun> {
    let dir = config.pretrain_dir();
    if claim_dir(&dir, policy)? {
        return Ok(PretrainRun {
            checkpoint: Checkpoint::load(dir.join(INIT))?,
            reports: read_jsonl(&dir.join(METRICS))?,
            dir,
            reused: true,
        });
    }
    write_json(
        &dir.join(CONFIG),
        &serde_json::json!({
            "model": config.model,
            "capability": config.capability,
            "pretrain": config.pretrain,
        }),
    )?;
    let outcome = train::pretrain(
        config.model,
        &data.capability,
        &config.pretrain.train,
        config.pretrain.target,
    );
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            fs::remove_dir_all(&dir)?;
            return Err(e);
        }
    };
    write_jsonl(&dir.join(METRICS), &outcome.reports)?;
    outcome.checkpoint.save(dir.join(INIT))?;
    write_json(
        &dir.join(SUMMARY),
        &PretrainSummary {
            digest: config.pretrain_digest(),
            stopped_at: outcome.checkpoint.step,
            final_report: *outcome
                .reports
                .last()
                .expect("pretraining evaluates at least once"),
        },
    )?;
    Ok(PretrainRun {
        dir,
        checkpoint: outcome.checkpoint,
        reports: outcome.reports,
        reused: false,
    })
}

// ---------------------------------------------------------------------------
// Fine-tuning

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub digest: String,
    pub regularizer: RegularizerSpec,
    pub steps: u64,
    pub cumulative_merges: u64,
    pub merge_events: usize,
    pub max_merges_per_step: u32,
    pub max_recovery_bound: u32,
    /// Pretraining directory, relative to the run's parent directory.
    pub pretrain_dir: PathBuf,
    pub final_report: EvalReport,
}

/// A completed fine-tuning run as stored on disk.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub reports: Vec<EvalReport>,
    pub events: Vec<MergeEvent>,
    pub summary: RunSummary,
}

impl RunRecord {
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.join(SUMMARY).is_file() {
            return Err(Error::InvalidConfig(format!(
                "{} is not a completed run directory",
                dir.display()
            )));
        }
        let config: RunConfig = read_json(&dir.join(CONFIG))?;
        Ok(RunRecord {
            dir: dir.to_owned(),
            config,
            reports: read_jsonl(&dir.join(METRICS))?,
            events: read_jsonl(&dir.join(MERGE_EVENTS))?,
            summary: read_json(&dir.join(SUMMARY))?,
        })
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.dir
            .parent()
            .unwrap_or(Path::new("."))
            .join(&self.summary.pretrain_dir)
    }

    pub fn points(&self) -> Vec<PerfPoint> {
        self.reports
            .iter()
            .map(|r| PerfPoint::from_report(r, self.config.run_id.clone()))
            .collect()
    }

    /// Checkpoint files written by the run, in step order.
    pub fn checkpoint_paths(&self) -> Result<Vec<PathBuf>> {
        let mut paths: Vec<PathBuf> = fs::read_dir(self.dir.join(CHECKPOINTS))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.sort();
        Ok(paths)
    }
}

pub fn checkpoint_file_name(step: u64) -> String {
    format!("step-{step:08}.orbt")
}

pub fn eval_context<'a>(data: &'a Data, opts: RetrievalEvalOptions) -> EvalContext<'a> {
    EvalContext {
        world: &data.world,
        capability: &data.capability,
        retrieval: opts,
    }
}

/// Runs (or reuses) the pretraining stage, then fine-tunes under the
/// configured regulariser and writes all artifacts.
pub fn finetune(config: &RunConfig, data: &Data, policy: Existing) -> Result<RunRecord> {
    config.validate()?;
    let dir = config.run_dir();
    if claim_dir(&dir, policy)? {
        return RunRecord::load(&dir);
    }
    let result = finetune_into(config, data, &dir);
    if result.is_err() {
        let _ = fs::remove_dir_all(&dir);
    }
    result
}

fn finetune_into(config: &RunConfig, data: &Data, dir: &Path) -> Result<RunRecord> {
    fs::write(dir.join(CONFIG), config.to_json())?;
    let init = pretrain(config, data, Existing::Reuse)?;
    let ctx = eval_context(data, config.eval);
    let outcome = train::finetune(
        config.model,
        &init.checkpoint,
        &ctx,
        &config.finetune.train,
        &config.finetune.regularizer,
    )?;

    write_jsonl(&dir.join(METRICS), &outcome.reports)?;
    write_jsonl(&dir.join(MERGE_EVENTS), &outcome.events)?;
    let ckpt_dir = dir.join(CHECKPOINTS);
    fs::create_dir_all(&ckpt_dir)?;
    for c in &outcome.checkpoints {
        c.save(ckpt_dir.join(checkpoint_file_name(c.step)))?;
    }
    outcome.final_checkpoint.save(dir.join(FINAL))?;
    let gaps = merge_schedule_trace(&outcome.events)?;
    write_trace_csv(File::create(dir.join("schedule.csv"))?, &gaps)?;
    let gap_values: Vec<f64> = gaps.iter().map(|&g| g as f64).collect();
    fs::write(
        dir.join("schedule.svg"),
        line_svg(
            &format!("{}: steps between merge events", config.run_id),
            "merge event",
            "gap (steps)",
            &gap_values,
        ),
    )?;
    let summary = RunSummary {
        run_id: config.run_id.clone(),
        digest: config.run_digest(),
        regularizer: config.finetune.regularizer,
        steps: config.finetune.train.steps,
        cumulative_merges: outcome.final_checkpoint.cumulative_merges,
        merge_events: outcome.events.len(),
        max_merges_per_step: outcome.max_merges_per_step,
        max_recovery_bound: outcome.max_recovery_bound,
        pretrain_dir: init
            .dir
            .file_name()
            .map(PathBuf::from)
            .unwrap_or(init.dir.clone()),
        final_report: *outcome
            .reports
            .last()
            .expect("fine-tuning evaluates at step 0"),
    };
    write_json(&dir.join(SUMMARY), &summary)?;
    Ok(RunRecord {
        dir: dir.to_owned(),
        config: config.clone(),
        reports: outcome.reports,
        events: outcome.events,
        summary,
    })
}

// ---------------------------------------------------------------------------
// Distances

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub sd: f64,
    pub l2: f64,
    pub included_params: usize,
}

pub fn distance(a: &Checkpoint, b: &Checkpoint) -> Result<DistanceReport> {
    let probe = OriginProbe::new(b.store.clone());
    Ok(DistanceReport {
        sd: probe.sd(&a.store)?,
        l2: probe.l2(&a.store)?,
        included_params: a.store.included_count(MaskKind::Distance),
    })
}

/// Largest logged-checkpoint distance to the origin, recomputed from the
/// checkpoint files of a run.
pub fn max_checkpoint_distance(record: &RunRecord, kind: MetricKind) -> Result<(f64, usize)> {
    let init = Checkpoint::load(record.pretrain_dir().join(INIT))?;
    let probe = OriginProbe::new(init.store);
    let mut worst = 0.0f64;
    let paths = record.checkpoint_paths()?;
    for p in &paths {
        worst = worst.max(probe.measure(kind, &Checkpoint::load(p)?.store)?);
    }
    Ok((worst, paths.len()))
}

// ---------------------------------------------------------------------------
// Pareto analysis

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub step: u64,
    pub text: f64,
    pub recall: f64,
    pub dtip: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParetoSummary {
    pub bounds: NormBounds,
    /// Minimum-DTIP front member of each run.
    pub per_run: Vec<Selection>,
    /// Minimum-DTIP member of the front over all runs together.
    pub overall: Selection,
}

/// Bounds from a no-intervention run: origin and final capability, zero and
/// final recall.
pub fn bounds_from_baseline(baseline: &RunRecord) -> Result<NormBounds> {
    let first = baseline.reports.first().ok_or(Error::EmptyEvalSet)?;
    NormBounds::from_specialists(
        first.capability_accuracy,
        baseline.summary.final_report.capability_accuracy,
        baseline.summary.final_report.recall_at_k,
    )
}

fn selection(record: &RunRecord, p: &PerfPoint, bounds: &NormBounds) -> Selection {
    Selection {
        run_id: record.config.run_id.clone(),
        run_dir: record.dir.clone(),
        step: p.step,
        text: p.text,
        recall: p.retrieval,
        dtip: dtip(p, bounds),
    }
}

/// Per-run checkpoint CSVs, a combined scatter plot and the DTIP selection.
/// Without explicit `bounds`, one of `runs` must be a no-intervention run.
pub fn pareto(runs: &[RunRecord], bounds: Option<NormBounds>, out: &Path) -> Result<ParetoSummary> {
    if runs.is_empty() {
        return Err(Error::InvalidConfig("no runs given".to_owned()));
    }
    let bounds = match bounds {
        Some(b) => b,
        None => {
            let baseline = runs
                .iter()
                .find(|r| r.summary.regularizer == RegularizerSpec::None)
                .ok_or_else(|| {
                    Error::InvalidConfig(
                        "bounds need a no-intervention run (or explicit --bounds)".to_owned(),
                    )
                })?;
            bounds_from_baseline(baseline)?
        }
    };
    fs::create_dir_all(out)?;
    let mut per_run = Vec::new();
    let mut series = Vec::new();
    let mut all = Vec::new();
    let mut owner = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        let points = run.points();
        let name = run.dir.file_name().map_or_else(
            || run.config.run_id.clone(),
            |n| n.to_string_lossy().into_owned(),
        );
        write_csv(
            File::create(out.join(format!("{name}.checkpoints.csv")))?,
            &checkpoint_rows(&points, &bounds)?,
        )?;
        let best = select_index(&points, &bounds)?;
        per_run.push(selection(run, &points[best], &bounds));
        series.push(Series {
            name: run.config.run_id.clone(),
            points: points.iter().map(|p| (p.text, p.retrieval)).collect(),
        });
        owner.extend(std::iter::repeat_n(i, points.len()));
        all.extend(points);
    }
    let front = pareto_indices(&all)?;
    series.push(Series {
        name: "pareto front".to_owned(),
        points: front
            .iter()
            .map(|&i| (all[i].text, all[i].retrieval))
            .collect(),
    });
    fs::write(
        out.join("pareto.svg"),
        scatter_svg("Checkpoints", "capability accuracy", "Recall@K", &series),
    )?;
    let best = select_index(&all, &bounds)?;
    let summary = ParetoSummary {
        bounds,
        per_run,
        overall: selection(&runs[owner[best]], &all[best], &bounds),
    };
    write_json(&out.join("pareto.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Interpolation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpolationEntry {
    pub lambda: f64,
    pub file: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpolationManifest {
    pub init: PathBuf,
    pub ft: PathBuf,
    pub entries: Vec<InterpolationEntry>,
}

pub fn lambda_file_name(lambda: f64) -> String {
    format!("lambda-{lambda:.4}.orbt")
}

/// Writes one interpolated checkpoint per `lambda` plus a manifest; with
/// evaluation data, also the sweep CSV and scatter plot.
pub fn interpolate(
    init_path: &Path,
    ft_path: &Path,
    lambdas: &[f64],
    out: &Path,
    eval: Option<(&Data, RetrievalEvalOptions)>,
) -> Result<InterpolationManifest> {
    if lambdas.is_empty() {
        return Err(Error::InvalidConfig("empty lambda grid".to_owned()));
    }
    let init = Checkpoint::load(init_path)?;
    let ft = Checkpoint::load(ft_path)?;
    let model = model_config_of(&ft)?;
    let rows: Option<Vec<SweepRow>> = match eval {
        Some((data, opts)) => Some(interpolation_sweep(
            model,
            &init.store,
            &ft.store,
            lambdas,
            &eval_context(data, opts),
        )?),
        None => None,
    };
    fs::create_dir_all(out)?;
    let mut entries = Vec::new();
    for (i, &lambda) in lambdas.iter().enumerate() {
        let store = interpolate_params(&init.store, &ft.store, lambda)?;
        let file = PathBuf::from(lambda_file_name(lambda));
        let mut c = Checkpoint::new(store, ft.step);
        c.cumulative_merges = ft.cumulative_merges;
        c.rng_seed = ft.rng_seed;
        c.tag = ft.tag.clone();
        c.save(out.join(&file))?;
        let row = rows.as_ref().map(|r| r[i]);
        entries.push(InterpolationEntry {
            lambda,
            file,
            text: row.map(|r| r.text),
            recall: row.map(|r| r.recall),
        });
    }
    if let Some(rows) = &rows {
        write_csv(File::create(out.join("sweep.csv"))?, rows)?;
        let series = Series {
            name: "interpolation".to_owned(),
            points: rows.iter().map(|r| (r.text, r.recall)).collect(),
        };
        fs::write(
            out.join("sweep.svg"),
            scatter_svg(
                "Post-hoc interpolation",
                "capability accuracy",
                "Recall@K",
                &[series],
            ),
        )?;
    }
    let manifest = InterpolationManifest {
        init: init_path.to_owned(),
        ft: ft_path.to_owned(),
        entries,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Epsilon calibration

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsRow {
    pub eps: f64,
    pub metric: MetricKind,
    pub merges: u64,
    pub merge_events: usize,
    pub final_text: f64,
    pub final_recall: f64,
    pub selected_step: u64,
    pub selected_dtip: f64,
    pub run_dir: PathBuf,
}

/// Runs the no-intervention baseline and one ORBIT run per threshold in
/// `grid` (in parallel on the current rayon pool) and tabulates them.
pub fn sweep_eps(
    config: &RunConfig,
    data: &Data,
    metric: MetricKind,
    grid: &[f64],
    policy: Existing,
) -> Result<Vec<EpsRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty epsilon grid".to_owned()));
    }
    let mut configs = Vec::new();
    for &eps in grid {
        let metric = DistanceMetric {
            kind: metric,
            threshold: eps,
        };
        metric.validate()?;
        let mut c = config.clone();
        c.finetune.regularizer = RegularizerSpec::orbit(metric);
        c.run_id = format!(
            "{}-{}",
            config.run_id,
            regularizer_label(&c.finetune.regularizer)
        );
        configs.push(c);
    }
    let mut base = config.clone();
    base.run_id = format!("{}-none", config.run_id);
    base.finetune.regularizer = RegularizerSpec::None;
    // The origin is shared; make sure it exists before the parallel section.
    pretrain(config, data, Existing::Reuse)?;
    let baseline = finetune(&base, data, policy)?;
    let bounds = bounds_from_baseline(&baseline)?;
    let records: Vec<RunRecord> = configs
        .par_iter()
        .map(|c| finetune(c, data, policy))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (eps, r) in grid.iter().zip(&records) {
        let points = r.points();
        let best = &points[select_index(&points, &bounds)?];
        rows.push(EpsRow {
            eps: *eps,
            metric,
            merges: r.summary.cumulative_merges,
            merge_events: r.summary.merge_events,
            final_text: r.summary.final_report.capability_accuracy,
            final_recall: r.summary.final_report.recall_at_k,
            selected_step: best.step,
            selected_dtip: dtip(best, &bounds),
            run_dir: r.dir.clone(),
        });
    }
    Ok(rows)
}

/// Short run-id suffix naming a regulariser and its parameter.
pub fn regularizer_label(spec: &RegularizerSpec) -> String {
    match spec {
        RegularizerSpec::None => "none".to_owned(),
        RegularizerSpec::L2sp { lambda } => format!("l2sp-{lambda}"),
        RegularizerSpec::SoupToGo { cadence } => format!("soup-{cadence}"),
        RegularizerSpec::Orbit { metric, .. } => {
            format!("orbit-{}-{}", metric.kind.as_str(), metric.threshold)
        }
    }
}

/// Thread pool honouring `--jobs` and the `ORBIT_LAB_THREADS` cap.
pub fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let cap = std::env::var("ORBIT_LAB_THREADS")
        .ok()
        .map(|v| {
            v.parse::<usize>().ok().filter(|n| *n > 0).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "ORBIT_LAB_THREADS must be a positive integer, got `{v}`"
                ))
            })
        })
        .transpose()?;
    let n = match (jobs, cap) {
        (Some(j), Some(c)) => j.min(c),
        (Some(j), None) => j,
        (None, Some(c)) => c,
        (None, None) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot build thread pool: {e}")))
}
