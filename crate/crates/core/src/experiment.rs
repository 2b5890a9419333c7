//! End-to-end runs: initial training, every incremental step, evaluation on
//! a held-out split, and the files a run directory contains.

use std::fs;
use std::hash::Hasher;
use std::io::Write;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::Serialize;

use crate::data::{save_checkpoint, Dataset, DatasetManifest, Sample};
use crate::distill::{DistillVariant, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::metrics::{write_metrics_csv, MetricsRow, Summary};
use crate::scenario::{
    build_splits, find_scenario, order_classes, relabel, ClassId, ClassOrdering, ClassSchedule, ClassSet,
    ScenarioMode,
};
use crate::segnet::{FreezePolicy, SegModel};
use crate::trainer::{self, TrainConfig, TrainReport};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "train.log";
pub const PLAN_FILE: &str = "plan.txt";

/// One in `HOLDOUT_MODULUS` ids goes to the evaluation split.
const HOLDOUT_MODULUS: u64 = 5;

pub fn checkpoint_name(k: usize) -> String {
    format!("M{k}.ckpt")
}

/// Deterministic 80/20 split on the FNV-1a hash of the id.
pub fn is_held_out(id: &str) -> bool {
    let mut h = FnvHasher::default();
    h.write(id.as_bytes());
    h.finish() % HOLDOUT_MODULUS == 0
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub mode: ScenarioMode,
    pub ordering: ClassOrdering,
    /// Settings for `M_0`. Its distillation and freeze fields are unused.
    pub initial: TrainConfig,
    /// Settings for every incremental step.
    pub incremental: TrainConfig,
    pub eval_batch: usize,
    /// Row label in metrics tables; derived from the method when absent.
    pub method: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: "add-last-1".into(),
            mode: ScenarioMode::Learning,
            ordering: ClassOrdering::Given,
            initial: TrainConfig::default(),
            incremental: TrainConfig { lr_start: 0.05, ..TrainConfig::default() },
            eval_batch: 16,
            method: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        find_scenario(&self.scenario)?;
        self.initial.validate().map_err(|e| e.context("initial training"))?;
        self.incremental.validate().map_err(|e| e.context("incremental training"))?;
        if self.eval_batch == 0 {
            return Err(Error::Param("evaluation batch must be at least 1".into()));
        }
        Ok(())
    }

    /// `finetune`, or the distillation variants joined by `+`, with an
    /// `E_F`/`E_2LF` prefix when part of the encoder is frozen.
    pub fn method_name(&self) -> String {
        if let Some(m) = &self.method {
            return m.clone();
        }
        let d = &self.incremental.distill;
        let mut parts = Vec::new();
        match self.incremental.freeze {
            FreezePolicy::None => {}
            FreezePolicy::EncoderFrozen => parts.push("E_F".to_string()),
            FreezePolicy::FirstTwoLayersFrozen => parts.push("E_2LF".to_string()),
        }
        if !d.is_fine_tuning() {
            let names: Vec<String> = d.active_variants().iter().map(DistillVariant::to_string).collect();
            parts.push(names.join("+"));
        }
        if parts.is_empty() {
            "finetune".into()
        } else {
            parts.join(" ")
        }
    }
}

/// Class-id → output-channel table; unmapped entries are `IGNORE_INDEX`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMap([u8; 256]);

impl ChannelMap {
    pub fn new(schedule: &ClassSchedule, k: usize) -> Self {
        let mut table = [IGNORE_INDEX; 256];
        for (ch, c) in schedule.seen(k).into_iter().enumerate() {
            table[c] = ch as u8;
        }
        ChannelMap(table)
    }

    pub fn apply(&self, labels: &[u8]) -> Vec<u8> {
        labels.iter().map(|&l| if l == IGNORE_INDEX { l } else { self.0[l as usize] }).collect()
    }
}

/// Everything fixed before training starts.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub class_names: Vec<String>,
    pub schedule: ClassSchedule,
    /// Per step, samples with labels relabelled and mapped to channels.
    pub train: Vec<Vec<Sample>>,
    /// Held-out samples with dataset class ids.
    pub test: Vec<Sample>,
}

impl Prepared {
    /// Held-out samples with classes outside `S_k` ignored.
    pub fn test_for_step(&self, k: usize) -> Vec<Sample> {
        let map = ChannelMap::new(&self.schedule, k);
        self.test.iter().map(|s| Sample { labels: map.apply(&s.labels), ..s.clone() }).collect()
    }
}

pub fn prepare(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (test, train): (Vec<&Sample>, Vec<&Sample>) =
        dataset.samples.iter().partition(|s| is_held_out(&s.id));
    let train_set = Dataset {
        class_names: dataset.class_names.clone(),
        samples: train.iter().map(|&s| s.clone()).collect(),
    };
    let index = train_set.index()?;
    let ordered = order_classes(&index, cfg.ordering)?;
    let schedule = find_scenario(&cfg.scenario)?.build(&ordered, cfg.ordering)?;
    let splits = build_splits(&index, &schedule, cfg.mode)?;
    if splits[0].sample_ids.is_empty() {
        return Err(Error::Scenario("no training samples for the initial step".into()));
    }

    let mut per_step = Vec::with_capacity(splits.len());
    for split in &splits {
        let k = split.k;
        let map = ChannelMap::new(&schedule, k);
        let prev: ClassSet = if k == 0 { ClassSet::new() } else { schedule.seen_set(k - 1) };
        let added: ClassSet = schedule.added(k).iter().copied().collect();
        let mut samples = Vec::with_capacity(split.sample_ids.len());
        for id in &split.sample_ids {
            let s = train_set.get(id).expect("split ids come from the index");
            let labels = relabel(&s.labels, cfg.mode, &prev, &added)?;
            samples.push(Sample { labels: map.apply(&labels), ..s.clone() });
        }
        per_step.push(samples);
    }
    Ok(Prepared {
        class_names: dataset.class_names.clone(),
        schedule,
        train: per_step,
        test: test.into_iter().cloned().collect(),
    })
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub k: usize,
    pub model: SegModel,
    pub report: TrainReport,
    /// Over channels of `S_k`.
    pub summary: Summary,
    pub row: MetricsRow,
}

fn channels(schedule: &ClassSchedule, classes: &[ClassId]) -> Vec<usize> {
    classes.iter().map(|&c| schedule.channel_of(c).expect("scheduled class")).collect()
}

/// Evaluates `model` after step `k` and lays the result out in dataset
/// class order.
pub fn evaluate_step(
    prepared: &Prepared,
    model: &SegModel,
    k: usize,
    method: &str,
    eval_batch: usize,
) -> Result<(Summary, MetricsRow)> {
    let sched = &prepared.schedule;
    let cm = trainer::evaluate(model, &prepared.test_for_step(k), eval_batch)?;
    let (old, new) = if k == 0 {
        (sched.initial.clone(), Vec::new())
    } else {
        (sched.seen(k - 1), sched.added(k).to_vec())
    };
    let summary = cm.summary(&channels(sched, &old), &channels(sched, &new));
    let seen = sched.seen_set(k);
    let class_iou = (0..prepared.class_names.len())
        .map(|c| if seen.contains(c) { summary.per_class_iou[sched.channel_of(c).unwrap()] } else { None })
        .collect();
    let row = MetricsRow {
        method: method.to_string(),
        step: k,
        class_iou,
        m_iou_old: summary.m_iou_old,
        m_iou_new: summary.m_iou_new,
        m_iou: summary.m_iou,
        m_pa: summary.m_pa,
        m_ca: summary.m_ca,
    };
    Ok((summary, row))
}

/// Trains `M_0` (unless `initial` is given) and every incremental step,
/// calling `on_step` after each one.
pub fn run_steps(
    prepared: &Prepared,
    cfg: &ExperimentConfig,
    initial: Option<SegModel>,
    mut on_step: impl FnMut(&StepOutcome) -> Result<()>,
) -> Result<Vec<StepOutcome>> {
    let sched = &prepared.schedule;
    let method = cfg.method_name();
    let mut outcomes: Vec<StepOutcome> = Vec::new();
    for k in 0..=sched.num_steps() {
        let data = &prepared.train[k];
        let (model, report) = if k == 0 {
            match &initial {
                Some(m) => {
                    if m.num_classes() != sched.initial.len() {
                        return Err(Error::Scenario(format!(
                            "initial model has {} classes, schedule starts with {}",
                            m.num_classes(),
                            sched.initial.len()
                        )));
                    }
                    (m.clone(), TrainReport::default())
                }
                None => {
                    let mut m = SegModel::new(sched.initial.len(), cfg.initial.seed)?;
                    let r = trainer::train_initial(&mut m, data, &cfg.initial)
                        .map_err(|e| e.context("step 0"))?;
                    (m, r)
                }
            }
        } else {
            let prev = &outcomes[k - 1].model;
            let teacher = prev.snapshot();
            let added = sched.added(k).len();
            let mut student = prev.extend_classifier(added, cfg.incremental.seed.wrapping_add(k as u64))?;
            let r = trainer::train_incremental(&teacher, &mut student, data, added, &cfg.incremental)
                .map_err(|e| e.context(format!("step {k}")))?;
            (student, r)
        };
        let (summary, row) = evaluate_step(prepared, &model, k, &method, cfg.eval_batch)?;
        let outcome = StepOutcome { k, model, report, summary, row };
        on_step(&outcome)?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// The resolved settings written next to a run's results.
#[derive(Serialize)]
struct ResolvedConfig<'a> {
    data: String,
    method: String,
    scenario: &'a str,
    mode: String,
    order: String,
    eval_batch: usize,
    holdout: String,
    plan: Vec<Vec<&'a str>>,
    initial: ResolvedTrain,
    incremental: ResolvedTrain,
}

#[derive(Serialize)]
struct ResolvedTrain {
    lr_start: f64,
    lr_end: f64,
    power: f64,
    steps_per_class: usize,
    weight_decay: f64,
    momentum: f64,
    batch_size: usize,
    crop: usize,
    seed: u64,
    distill: Vec<String>,
    lambda: f64,
    temperature: f64,
    dec_branches: Vec<usize>,
    freeze: String,
    flip_prob: f64,
    scale_min: f64,
    scale_max: f64,
}

impl From<&TrainConfig> for ResolvedTrain {
    fn from(c: &TrainConfig) -> Self {
        ResolvedTrain {
            lr_start: c.lr_start,
            lr_end: c.lr_end,
            power: c.power,
            steps_per_class: c.steps_per_class,
            weight_decay: c.weight_decay,
            momentum: c.momentum,
            batch_size: c.batch_size,
            crop: c.crop,
            seed: c.seed,
            distill: c.distill.active_variants().iter().map(|v| v.to_string()).collect(),
            lambda: c.distill.lambda_d,
            temperature: c.distill.temperature,
            dec_branches: c.distill.dec_branches.indices().collect(),
            freeze: c.freeze.to_string(),
            flip_prob: c.augment.flip_prob,
            scale_min: c.augment.scale_min,
            scale_max: c.augment.scale_max,
        }
    }
}

/// Runs an experiment on the dataset at `data` and writes checkpoints,
/// metrics, log, plan and resolved config into `out`.
///
/// Everything that can be checked up front is checked before `out` is
/// created; `out` must not already contain files.
pub fn run_to_dir(data: &Path, out: &Path, cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    if out.exists() && fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some() {
        return Err(Error::Param(format!("output directory {} is not empty", out.display())));
    }
    let manifest = DatasetManifest::load(data)?;
    let dataset = manifest.load_all(true)?;
    let prepared = prepare(&dataset, cfg)?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let names = &prepared.class_names;
    let plan = prepared.schedule.to_plan_text(names);
    write_file(&out.join(PLAN_FILE), plan.as_bytes())?;
    let resolved = ResolvedConfig {
        data: data.display().to_string(),
        method: cfg.method_name(),
        scenario: &cfg.scenario,
        mode: cfg.mode.to_string(),
        order: cfg.ordering.to_string(),
        eval_batch: cfg.eval_batch,
        holdout: format!("fnv1a(id) % {HOLDOUT_MODULUS} == 0"),
        plan: (0..=prepared.schedule.num_steps())
            .map(|k| prepared.schedule.added(k).iter().map(|&c| names[c].as_str()).collect())
            .collect(),
        initial: (&cfg.initial).into(),
        incremental: (&cfg.incremental).into(),
    };
    let text = toml::to_string(&resolved).map_err(|e| Error::Report(format!("config: {e}")))?;
    write_file(&out.join(CONFIG_FILE), text.as_bytes())?;

    let log_path = out.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut rows = Vec::new();
    run_steps(&prepared, cfg, None, |o| {
        for line in &o.report.log {
            writeln!(log, "[M{}] {line}", o.k).map_err(|e| Error::io(&log_path, e))?;
        }
        save_checkpoint(&o.model, &out.join(checkpoint_name(o.k)))?;
        rows.push(o.row.clone());
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, names, &rows)?;
        write_file(&out.join(METRICS_FILE), &buf)
    })?;
    Ok(rows)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Paths of a run directory.
pub fn metrics_path(run: &Path) -> PathBuf {
    run.join(METRICS_FILE)
}
