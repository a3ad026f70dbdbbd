//! Staged binding of encoders into one joint space.
//!
//! A stage trains one encoder (`trainable`) with InfoNCE against a frozen
//! encoder (`target`) over a paired dataset. Target embeddings enter the tape
//! as constants, so no gradient reaches frozen weights. When a stage
//! completes, [`run_pipeline`] freezes its encoder, which makes it available
//! as the target of later stages.
//!
//! Training is resumable at any step. The only randomness inside a stage is
//! the per-epoch shuffle, derived from `(stage seed, epoch)`, so the cursor
//! `(epoch, batch)` plus optimizer state and temperature fully determine the
//! rest of the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{Reader, Writer};
use crate::encoder::{EncoderGraph, MlpEncoder};
use crate::error::{Error, Result};
use crate::loss::{infonce, infonce_value, LossOutput, LossVariant, Temperature};
use crate::matrix::Matrix;
use crate::optim::{lr_at, AdamWConfig, AdamWState, ScheduleConfig};
use crate::seed::rng_for;
use crate::tape::{NodeId, Tape};
use crate::world::PairedDataset;

pub const PIPELINE_MAGIC: &[u8; 4] = b"GBPL";
pub const PIPELINE_VERSION: u32 = 1;
pub const METRICS_CSV_HEADER: &str = "stage,step,epoch,loss,lr,tau";

const REC_ENCODER: u8 = 1;
const REC_COMPLETED: u8 = 2;
const REC_TEMPERATURE: u8 = 3;
const REC_DATASET: u8 = 4;
const REC_ACTIVE: u8 = 5;
const REC_METRICS: u8 = 6;

/// One binding stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    /// Encoder id trained by this stage.
    pub trainable: String,
    /// Frozen encoder id the trainable encoder is aligned to.
    pub target: String,
    pub loss: LossVariant,
    pub dataset: String,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    /// Embed the whole training split with the frozen target once per stage.
    #[serde(default)]
    pub cache_target: bool,
    /// Shuffle seed; derived from the run's master seed, not read from config.
    #[serde(skip)]
    pub seed: u64,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trainable == self.target {
            return Err(Error::config(format!(
                "stage {:?} trains and targets the same encoder {:?}",
                self.name, self.trainable
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!(
                "stage {:?} needs batch_size >= 2, got {}",
                self.name, self.batch_size
            )));
        }
        self.optimizer.validate()?;
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub stage: String,
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
}

/// Which dataset (by id and content hash) a stage trained on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRef {
    pub dataset: String,
    pub sha256: [u8; 32],
}

impl DatasetRef {
    pub fn of(dataset: &PairedDataset) -> Self {
        DatasetRef {
            dataset: dataset.id.clone(),
            sha256: Sha256::digest(dataset.to_gbds()).into(),
        }
    }
}

/// Progress of a stage that has started but not finished.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveStage {
    pub stage: String,
    pub epoch: u64,
    /// Next batch within `epoch`.
    pub batch: u64,
    /// Optimizer steps taken so far in this stage.
    pub step: u64,
    pub temperature: Temperature,
    pub optimizer: AdamWState,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineState {
    pub encoders: BTreeMap<String, MlpEncoder>,
    pub temperatures: BTreeMap<String, Temperature>,
    pub metrics: Vec<StepRecord>,
    pub completed: Vec<String>,
    pub dataset_refs: BTreeMap<String, DatasetRef>,
    pub active: Option<ActiveStage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Completed,
    /// Stopped at the step budget; the state holds a resumable cursor.
    Suspended,
}

impl PipelineState {
    pub fn new(encoders: BTreeMap<String, MlpEncoder>) -> Self {
        PipelineState {
            encoders,
            ..Default::default()
        }
    }

    pub fn encoder(&self, id: &str) -> Result<&MlpEncoder> {
        self.encoders
            .get(id)
            .ok_or_else(|| Error::config(format!("unknown encoder {id:?}")))
    }

    pub fn is_completed(&self, stage: &str) -> bool {
        self.completed.iter().any(|s| s == stage)
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        for m in &self.metrics {
            let _ = writeln!(out, "{},{},{},{},{},{}", m.stage, m.step, m.epoch, m.loss, m.lr, m.tau);
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(PIPELINE_MAGIC);
        w.u32(PIPELINE_VERSION);
        for (id, enc) in &self.encoders {
            let mut p = Writer::new();
            p.str(id);
            p.bytes(&enc.serialize());
            w.record(REC_ENCODER, &p.into_bytes());
        }
        for stage in &self.completed {
            let mut p = Writer::new();
            p.str(stage);
            w.record(REC_COMPLETED, &p.into_bytes());
        }
        for (stage, t) in &self.temperatures {
            let mut p = Writer::new();
            p.str(stage);
            p.f64(t.log_inv_tau());
            w.record(REC_TEMPERATURE, &p.into_bytes());
        }
        for (stage, d) in &self.dataset_refs {
            let mut p = Writer::new();
            p.str(stage);
            p.str(&d.dataset);
            p.bytes(&d.sha256);
            w.record(REC_DATASET, &p.into_bytes());
        }
        if let Some(a) = &self.active {
            let mut p = Writer::new();
            p.str(&a.stage);
            p.u64(a.epoch);
            p.u64(a.batch);
            p.u64(a.step);
            p.f64(a.temperature.log_inv_tau());
            a.optimizer.write_to(&mut p);
            w.record(REC_ACTIVE, &p.into_bytes());
        }
        let mut p = Writer::new();
        p.u64(self.metrics.len() as u64);
        for m in &self.metrics {
            p.str(&m.stage);
            p.u64(m.step);
            p.u64(m.epoch);
            p.f64s(&[m.loss, m.lr, m.tau]);
        }
        w.record(REC_METRICS, &p.into_bytes());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(PIPELINE_MAGIC)?;
        r.version(PIPELINE_VERSION)?;
        let mut state = PipelineState::default();
        let mut saw_metrics = false;
        while r.remaining() > 0 {
            let at = r.offset();
            let (tag, mut p) = r.record()?;
            match tag {
                REC_ENCODER => {
                    let id = p.str("encoder id")?;
                    let enc = MlpEncoder::read_from(&mut p)?;
                    if state.encoders.insert(id.clone(), enc).is_some() {
                        return Err(Error::format(at, format!("duplicate encoder {id:?}")));
                    }
                }
                REC_COMPLETED => {
                    let s = p.str("stage name")?;
                    if state.is_completed(&s) {
                        return Err(Error::format(at, format!("stage {s:?} completed twice")));
                    }
                    state.completed.push(s);
                }
                REC_TEMPERATURE => {
                    let s = p.str("stage name")?;
                    let t = Temperature::from_log_inv_tau(p.f64("temperature")?);
                    state.temperatures.insert(s, t);
                }
                REC_DATASET => {
                    let s = p.str("stage name")?;
                    let dataset = p.str("dataset id")?;
                    let sha256 = p.take(32, "dataset hash")?.try_into().unwrap();
                    state.dataset_refs.insert(s, DatasetRef { dataset, sha256 });
                }
                REC_ACTIVE => {
                    if state.active.is_some() {
                        return Err(Error::format(at, "more than one active stage"));
                    }
                    state.active = Some(ActiveStage {
                        stage: p.str("stage name")?,
                        epoch: p.u64("epoch")?,
                        batch: p.u64("batch cursor")?,
                        step: p.u64("step")?,
                        temperature: Temperature::from_log_inv_tau(p.f64("temperature")?),
                        optimizer: AdamWState::read_from(&mut p)?,
                    });
                }
                REC_METRICS => {
                    if saw_metrics {
                        return Err(Error::format(at, "duplicate metrics record"));
                    }
                    saw_metrics = true;
                    let n = p.count("metric count", 44)?;
                    for _ in 0..n {
                        let stage = p.str("metric stage")?;
                        let step = p.u64("metric step")?;
                        let epoch = p.u64("metric epoch")?;
                        let v = p.f64s(3, "metric values")?;
                        state.metrics.push(StepRecord {
                            stage,
                            step,
                            epoch,
                            loss: v[0],
                            lr: v[1],
                            tau: v[2],
                        });
                    }
                }
                other => return Err(Error::format(at, format!("unknown record tag {other}"))),
            }
            p.finish()?;
        }
        if !saw_metrics {
            return Err(r.error("missing metrics record"));
        }
        Ok(state)
    }
}

/// Writes the full state to `path`.
pub fn checkpoint(state: &PipelineState, path: &Path) -> Result<()> {
    std::fs::write(path, state.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a state written by [`checkpoint`]. Unreadable files are format errors.
pub fn resume(path: &Path) -> Result<PipelineState> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::format(0, format!("cannot read checkpoint {}: {e}", path.display())))?;
    PipelineState::from_bytes(&bytes)
}

/// Everything recorded for one training step.
pub struct StepGraph {
    pub tape: Tape,
    pub loss: LossOutput,
    pub trainable: EncoderGraph,
    /// `None` when target embeddings were supplied precomputed.
    pub target: Option<EncoderGraph>,
    pub log_inv_tau: NodeId,
}

/// Where target embeddings for a batch come from.
pub enum TargetInput<'a> {
    /// Raw observations run through the frozen encoder on the tape.
    Observations(&'a MlpEncoder, Matrix),
    /// Embeddings computed earlier.
    Embeddings(Matrix),
}

/// Records forward pass and loss for one batch.
pub fn build_step_graph(
    variant: LossVariant,
    trainable: &MlpEncoder,
    inputs: Matrix,
    target: TargetInput<'_>,
    temperature: &Temperature,
) -> Result<StepGraph> {
    let mut tape = Tape::new();
    let x = tape.constant(inputs);
    let trainable_graph = trainable.forward_tape(&mut tape, x)?;
    let (target_out, target_graph) = match target {
        TargetInput::Observations(enc, obs) => {
            let y = tape.constant(obs);
            let g = enc.forward_tape(&mut tape, y)?;
            (g.output, Some(g))
        }
        TargetInput::Embeddings(e) => (tape.constant(e), None),
    };
    let s = temperature.param(&mut tape);
    let loss = infonce(&mut tape, variant, trainable_graph.output, target_out, s)?;
    Ok(StepGraph {
        tape,
        loss,
        trainable: trainable_graph,
        target: target_graph,
        log_inv_tau: s,
    })
}

/// Batches of one epoch: a seeded shuffle of the training rows, cut into
/// `batch_size` chunks; a final chunk smaller than two is dropped.
pub fn epoch_batches(seed: u64, epoch: u64, train: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    order.shuffle(&mut rng_for(seed, &format!("epoch:{epoch}")));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn check_stage(spec: &StageSpec, state: &PipelineState, dataset: &PairedDataset) -> Result<()> {
    spec.validate()?;
    if dataset.id != spec.dataset {
        return Err(Error::config(format!(
            "stage {:?} expects dataset {:?} but was given {:?}",
            spec.name, spec.dataset, dataset.id
        )));
    }
    let trainable = state.encoder(&spec.trainable)?;
    let target = state.encoder(&spec.target)?;
    if !target.is_frozen() {
        return Err(Error::contract(format!(
            "stage {:?}: target encoder {:?} is not frozen",
            spec.name, spec.target
        )));
    }
    if trainable.is_frozen() {
        return Err(Error::contract(format!(
            "stage {:?}: trainable encoder {:?} is frozen",
            spec.name, spec.trainable
        )));
    }
    if state.is_completed(&spec.name) {
        return Err(Error::contract(format!("stage {:?} already completed", spec.name)));
    }
    for (id, enc) in [(&spec.trainable, trainable), (&spec.target, target)] {
        let obs = dataset.side(id).ok_or_else(|| {
            Error::config(format!(
                "stage {:?}: dataset {:?} has no {id:?} observations",
                spec.name, dataset.id
            ))
        })?;
        if obs.cols() != enc.input_dim() {
            return Err(Error::Dimension {
                op: "stage input",
                left: obs.shape(),
                right: crate::error::Shape(enc.input_dim(), enc.output_dim()),
            });
        }
    }
    if trainable.output_dim() != target.output_dim() {
        return Err(Error::Dimension {
            op: "stage joint width",
            left: crate::error::Shape(trainable.input_dim(), trainable.output_dim()),
            right: crate::error::Shape(target.input_dim(), target.output_dim()),
        });
    }
    Ok(())
}

/// Runs (or resumes) one stage to completion.
pub fn run_stage(spec: &StageSpec, state: &mut PipelineState, dataset: &PairedDataset) -> Result<()> {
    run_stage_bounded(spec, state, dataset, None).map(|_| ())
}

/// Runs (or resumes) one stage, stopping after `max_steps` optimizer steps.
pub fn run_stage_bounded(
    spec: &StageSpec,
    state: &mut PipelineState,
    dataset: &PairedDataset,
    max_steps: Option<u64>,
) -> Result<Progress> {
    check_stage(spec, state, dataset)?;
    if let Some(a) = &state.active {
        if a.stage != spec.name {
            return Err(Error::contract(format!(
                "stage {:?} cannot start while stage {:?} is in progress",
                spec.name, a.stage
            )));
        }
    }
    if spec.epochs == 0 {
        state.active = None;
        state.completed.push(spec.name.clone());
        return Ok(Progress::Completed);
    }

    let reference = DatasetRef::of(dataset);
    let mut active = match state.active.take() {
        Some(a) => {
            if state.dataset_refs.get(&spec.name) != Some(&reference) {
                state.active = Some(a);
                return Err(Error::config(format!(
                    "stage {:?} was started on different contents of dataset {:?}",
                    spec.name, spec.dataset
                )));
            }
            a
        }
        None => {
            let enc = &state.encoders[&spec.trainable];
            let mut sizes: Vec<usize> = enc.parameters().iter().map(|p| p.len()).collect();
            sizes.push(1);
            state.dataset_refs.insert(spec.name.clone(), reference);
            ActiveStage {
                stage: spec.name.clone(),
                epoch: 0,
                batch: 0,
                step: 0,
                temperature: Temperature::default(),
                optimizer: AdamWState::new(spec.optimizer, &sizes),
            }
        }
    };

    let target = state.encoders[&spec.target].clone();
    let mut trainable = state.encoders[&spec.trainable].clone();
    let x_all = dataset.side(&spec.trainable).expect("checked");
    let y_all = dataset.side(&spec.target).expect("checked");
    let cached = if spec.cache_target {
        Some(target.forward(y_all)?)
    } else {
        None
    };
    let train = dataset.train_indices();
    let mut budget = max_steps;

    let outcome = loop {
        if active.epoch >= spec.epochs as u64 {
            break Progress::Completed;
        }
        let batches = epoch_batches(spec.seed, active.epoch, &train, spec.batch_size);
        while (active.batch as usize) < batches.len() {
            if budget == Some(0) {
                break;
            }
            let idx = &batches[active.batch as usize];
            let record = train_step(spec, &mut trainable, &target, x_all, y_all, cached.as_ref(), idx, &mut active)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!(
                        "stage {:?} aborted at step {}: {msg}",
                        spec.name, active.step
                    )),
                    other => other,
                })?;
            state.metrics.push(record);
            active.batch += 1;
            budget = budget.map(|b| b - 1);
        }
        if (active.batch as usize) < batches.len() {
            break Progress::Suspended;
        }
        active.epoch += 1;
        active.batch = 0;
    };

    state.encoders.insert(spec.trainable.clone(), trainable);
    match outcome {
        Progress::Completed => {
            state.temperatures.insert(spec.name.clone(), active.temperature);
            state.completed.push(spec.name.clone());
            state.active = None;
        }
        Progress::Suspended => state.active = Some(active),
    }
    Ok(outcome)
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    spec: &StageSpec,
    trainable: &mut MlpEncoder,
    target: &MlpEncoder,
    x_all: &Matrix,
    y_all: &Matrix,
    cached: Option<&Matrix>,
    idx: &[usize],
    active: &mut ActiveStage,
) -> Result<StepRecord> {
    let lr = lr_at(&spec.schedule, active.step)?;
    let tau = active.temperature.tau();
    let target_input = match cached {
        Some(c) => TargetInput::Embeddings(c.select_rows(idx)),
        None => TargetInput::Observations(target, y_all.select_rows(idx)),
    };
    let graph = build_step_graph(spec.loss, trainable, x_all.select_rows(idx), target_input, &active.temperature)?;
    let loss = graph.tape.scalar_value(graph.loss.loss)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    let grads = graph.tape.backward(graph.loss.loss)?;

    let mut grad_list: Vec<&Matrix> = Vec::with_capacity(graph.trainable.params.len() + 1);
    for &p in &graph.trainable.params {
        grad_list.push(grads.wrt(p)?);
    }
    grad_list.push(grads.wrt(graph.log_inv_tau)?);

    let mut s = Matrix::scalar(active.temperature.log_inv_tau())?;
    let mut params = trainable.parameters_mut();
    params.push(&mut s);
    let mut decay = vec![true; params.len()];
    *decay.last_mut().unwrap() = false;
    active.optimizer.step(&mut params, &grad_list, &decay, lr)?;

    trainable.round_to_storage();
    active.temperature.set_log_inv_tau(s.value()?);
    active.temperature.clamp();
    active.step += 1;

    Ok(StepRecord {
        stage: spec.name.clone(),
        step: active.step - 1,
        epoch: active.epoch,
        loss,
        lr,
        tau,
    })
}

/// Mean loss over held-out batches (in index order) for a stage's encoders.
pub fn heldout_loss(
    spec: &StageSpec,
    encoders: &BTreeMap<String, MlpEncoder>,
    dataset: &PairedDataset,
    temperature: &Temperature,
) -> Result<f64> {
    let get = |id: &str| {
        encoders
            .get(id)
            .ok_or_else(|| Error::config(format!("unknown encoder {id:?}")))
    };
    let (trainable, target) = (get(&spec.trainable)?, get(&spec.target)?);
    let missing = || Error::config(format!("dataset {:?} lacks a stage modality", dataset.id));
    let x = dataset.side(&spec.trainable).ok_or_else(missing)?;
    let y = dataset.side(&spec.target).ok_or_else(missing)?;
    let held = dataset.heldout_indices();
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in held.chunks(spec.batch_size).filter(|c| c.len() >= 2) {
        let o = trainable.forward(&x.select_rows(chunk))?;
        let c = target.forward(&y.select_rows(chunk))?;
        total += infonce_value(spec.loss, &o, &c, temperature)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::contract(format!("dataset {:?} has no held-out batch", dataset.id)));
    }
    Ok(total / n as f64)
}

/// Checks that every stage's target is either an initially frozen encoder
/// that no stage trains, or the encoder of an earlier stage.
pub fn check_dependencies(stages: &[StageSpec], initial: &BTreeMap<String, MlpEncoder>) -> Result<()> {
    for (i, s) in stages.iter().enumerate() {
        if stages[..i].iter().any(|o| o.name == s.name) {
            return Err(Error::config(format!("duplicate stage name {:?}", s.name)));
        }
        if !initial.contains_key(&s.trainable) {
            return Err(Error::config(format!(
                "stage {:?} trains unknown encoder {:?}",
                s.name, s.trainable
            )));
        }
        let trained_before = stages[..i].iter().any(|o| o.trainable == s.target);
        let trained_ever = stages.iter().any(|o| o.trainable == s.target);
        let reference = initial.get(&s.target).is_some_and(|e| e.is_frozen()) && !trained_ever;
        if !(trained_before || reference) {
            return Err(Error::config(format!(
                "stage {:?} targets {:?}, which is neither a frozen reference nor trained by an earlier stage",
                s.name, s.target
            )));
        }
        if stages[..i].iter().any(|o| o.trainable == s.trainable) {
            return Err(Error::config(format!(
                "stage {:?} retrains {:?}, already bound by an earlier stage",
                s.name, s.trainable
            )));
        }
    }
    Ok(())
}

fn dataset_for<'a>(spec: &StageSpec, datasets: &'a BTreeMap<String, PairedDataset>) -> Result<&'a PairedDataset> {
    datasets
        .get(&spec.dataset)
        .ok_or_else(|| Error::config(format!("stage {:?} needs missing dataset {:?}", spec.name, spec.dataset)))
}

/// Runs every stage in order, freezing each trained encoder before the next
/// stage starts. Completed stages are skipped, so a resumed state picks up
/// where it stopped.
pub fn run_pipeline(
    stages: &[StageSpec],
    state: &mut PipelineState,
    datasets: &BTreeMap<String, PairedDataset>,
) -> Result<()> {
    run_pipeline_bounded(stages, state, datasets, None).map(|_| ())
}

pub fn run_pipeline_bounded(
    stages: &[StageSpec],
    state: &mut PipelineState,
    datasets: &BTreeMap<String, PairedDataset>,
    max_steps: Option<u64>,
) -> Result<Progress> {
    let mut initial = state.encoders.clone();
    // Encoders bound by already-completed stages count as trainable for the
    // dependency check.
    for s in stages.iter().filter(|s| state.is_completed(&s.name)) {
        if let Some(e) = initial.get_mut(&s.trainable) {
            e.unfreeze();
        }
    }
    check_dependencies(stages, &initial)?;
    if let Some(a) = &state.active {
        if !stages.iter().any(|s| s.name == a.stage) {
            return Err(Error::config(format!("state is mid-way through unknown stage {:?}", a.stage)));
        }
    }

    let mut budget = max_steps;
    for spec in stages {
        if state.is_completed(&spec.name) {
            continue;
        }
        let dataset = dataset_for(spec, datasets)?;
        let before = state.metrics.len() as u64;
        let progress = run_stage_bounded(spec, state, dataset, budget)?;
        budget = budget.map(|b| b.saturating_sub(state.metrics.len() as u64 - before));
        if progress == Progress::Suspended {
            return Ok(Progress::Suspended);
        }
        if let Some(e) = state.encoders.get_mut(&spec.trainable) {
            e.freeze();
        }
    }
    Ok(Progress::Completed)
}
