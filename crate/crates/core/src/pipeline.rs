//! The two-stage incremental loop: new-task training with patch distillation,
//! prototype recording, and classifier alignment on real plus pseudo features.
//!
//! One run trains a single adapter trunk. Alignment only touches classifier
//! rows, so several replay variants can share the trunk: each keeps its own
//! classifier and is aligned and evaluated separately.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::alignment::{gaussian_baseline_sample, pdl_loss_tape, pfr_reconstruct, ClassStats, PdlVariant, PfrDiagnostics, TokenPool};
use crate::checkpoint::Checkpoint;
use crate::classifier::{cosine_logits_tape, CosineClassifier, MarginLossConfig};
use crate::config::{ExperimentConfig, FeatureReplay, Method, TrainConfig};
use crate::data::{Dataset, TaskSplit};
use crate::error::{Error, Result};
use crate::metrics::{self, Evaluation, MetricsRecord};
use crate::optim::{cosine_lr, Sgd};
use crate::seeds::{self, Purpose};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tsai::{AdapterBank, BankHook, Integration};
use crate::vit::{self, BackboneConfig, BackboneParams, TokenBatch};

pub const LOG_SCHEMA_VERSION: u32 = 1;
const ENCODE_CHUNK: usize = 64;

/// Train and eval data with the class order of the run.
#[derive(Clone, Debug)]
pub struct TaskStream {
    pub split: TaskSplit,
    pub train: Dataset,
    pub eval: Dataset,
}

impl TaskStream {
    pub fn new(split: TaskSplit, train: Dataset, eval: Dataset) -> Result<Self> {
        let classes: usize = split.groups().iter().map(Vec::len).sum();
        for (name, d) in [("train", &train), ("eval", &eval)] {
            if d.classes != classes {
                return Err(Error::Dataset(format!("{name} set has {} classes, split has {classes}", d.classes)));
            }
        }
        if (train.height, train.width, train.channels) != (eval.height, eval.width, eval.channels) {
            return Err(Error::Dataset("train and eval geometry differ".into()));
        }
        Ok(Self { split, train, eval })
    }

    /// Loads or generates the data named by `cfg` and orders classes by its seed.
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let (train, eval) = match (&cfg.data.train_file, &cfg.data.eval_file) {
            (Some(t), Some(e)) => (Dataset::load_raw(t)?, Dataset::load_raw(e)?),
            _ => crate::data::generate_synthetic(&cfg.data.synthetic, cfg.seed)?,
        };
        let split = TaskSplit::new(train.classes, cfg.data.tasks, cfg.seed)?;
        Self::new(split, train, eval)
    }

    pub fn tasks(&self) -> usize {
        self.split.tasks()
    }
}

/// Wraps the training set and counts reads per task, flagging every read of
/// a sample whose task has already been completed.
#[derive(Clone, Debug)]
pub struct AccessAuditor {
    task_of_sample: Vec<Option<usize>>,
    current: usize,
    reads: Vec<u64>,
    old_task_reads: u64,
}

impl AccessAuditor {
    pub fn new(split: &TaskSplit, data: &Dataset) -> Self {
        Self {
            task_of_sample: (0..data.len()).map(|i| split.task_of(data.label(i))).collect(),
            current: 0,
            reads: vec![0; split.tasks()],
            old_task_reads: 0,
        }
    }

    pub fn begin_task(&mut self, task: usize) {
        self.current = task;
    }

    pub fn read<'d>(&mut self, data: &'d Dataset, i: usize) -> &'d [u8] {
        if let Some(t) = self.task_of_sample[i] {
            self.reads[t] += 1;
            if t < self.current {
                self.old_task_reads += 1;
            }
        }
        data.image(i)
    }

    /// Reads of samples belonging to tasks finished before the reading task.
    pub fn old_task_reads(&self) -> u64 {
        self.old_task_reads
    }

    pub fn reads(&self) -> &[u64] {
        &self.reads
    }
}

/// Class-token mean and diagonal variance of one class, recorded once.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub task: usize,
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrototypeMemory {
    entries: BTreeMap<usize, Prototype>,
}

impl PrototypeMemory {
    /// Stores a prototype; a class can be written only once.
    pub fn insert(&mut self, class: usize, proto: Prototype) -> Result<()> {
        if self.entries.contains_key(&class) {
            return Err(Error::Dataset(format!("prototype for class {class} already recorded")));
        }
        self.entries.insert(class, proto);
        Ok(())
    }

    pub fn get(&self, class: usize) -> Option<&Prototype> {
        self.entries.get(&class)
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        for (k, p) in &self.entries {
            c.insert(format!("class{k}/mean"), p.mean.clone())?;
            c.insert(format!("class{k}/var"), p.var.clone())?;
            c.set_meta(format!("class{k}/task"), p.task.to_string());
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let mut out = Self::default();
        for name in c.names() {
            let Some(class) = name.strip_prefix("class").and_then(|s| s.strip_suffix("/mean")) else {
                continue;
            };
            let k: usize = class.parse().map_err(|_| Error::usage(format!("bad prototype entry `{name}`")))?;
            let task = c.meta(&format!("class{k}/task"))?.parse().map_err(|_| Error::usage("bad prototype task"))?;
            out.insert(
                k,
                Prototype {
                    task,
                    mean: c.get(&format!("class{k}/mean"))?.clone(),
                    var: c.get(&format!("class{k}/var"))?.clone(),
                },
            )?;
        }
        Ok(out)
    }
}

/// Per-class mean and variance of `features` `[n, d]` for each of `classes`.
/// A class without samples is an error.
pub fn compute_prototypes(task: usize, features: &Tensor, labels: &[usize], classes: &[usize]) -> Result<Vec<(usize, Prototype)>> {
    let d = features.cols();
    classes
        .iter()
        .map(|&k| {
            let rows: Vec<&[f64]> = labels.iter().enumerate().filter(|(_, &l)| l == k).map(|(i, _)| features.row(i)).collect();
            if rows.is_empty() {
                return Err(Error::Dataset(format!("class {k} has no training samples")));
            }
            let n = rows.len() as f64;
            let mut mean = vec![0.0; d];
            for r in &rows {
                mean.iter_mut().zip(*r).for_each(|(m, x)| *m += x);
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; d];
            for r in &rows {
                var.iter_mut().zip(*r).zip(&mean).for_each(|((v, x), m)| *v += (x - m) * (x - m));
            }
            var.iter_mut().for_each(|v| *v /= n);
            Ok((
                k,
                Prototype {
                    task,
                    mean: Tensor::new([d], mean)?,
                    var: Tensor::new([d], var)?,
                },
            ))
        })
        .collect()
}

/// Frozen copy of the adapters of tasks `0..tasks`, used to produce the
/// reference tokens for distillation.
#[derive(Clone, Debug)]
pub struct ModelSnapshot {
    bank: AdapterBank,
}

impl ModelSnapshot {
    pub fn capture(bank: &AdapterBank) -> Self {
        let mut bank = bank.clone();
        bank.freeze_all();
        Self { bank }
    }

    pub fn tasks(&self) -> usize {
        self.bank.task_count()
    }

    pub fn tokens(&self, backbone: &BackboneParams, patches: &Tensor, batch: usize) -> Result<Tensor> {
        encode(backbone, &self.bank, self.tasks(), Integration::Routed, patches, batch)
    }
}

/// Final-norm tokens `[B*(L+1), d]` of `batch` images under the backbone and
/// the first `tasks` adapters of `bank`.
pub fn encode(
    backbone: &BackboneParams,
    bank: &AdapterBank,
    tasks: usize,
    integration: Integration,
    patches: &Tensor,
    batch: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = backbone.bind(&mut tape, false);
    let mut hook = BankHook::bind(bank, &mut tape, tasks, false, integration);
    let x = tape.constant(patches.clone());
    let out = vit::forward(&mut tape, &backbone.config, &vars, x, batch, &mut hook)?;
    Ok(tape.value(out).clone())
}

/// [`encode`] over many images in fixed-size chunks.
fn encode_all(
    backbone: &BackboneParams,
    bank: &AdapterBank,
    tasks: usize,
    integration: Integration,
    images: &[Vec<f64>],
) -> Result<Tensor> {
    let cfg = &backbone.config;
    let mut data = Vec::with_capacity(images.len() * cfg.seq_len() * cfg.dim);
    for chunk in images.chunks(ENCODE_CHUNK) {
        let patches = stack_patches(cfg, chunk.iter().map(Vec::as_slice))?;
        data.extend_from_slice(encode(backbone, bank, tasks, integration, &patches, chunk.len())?.data());
    }
    Tensor::new([images.len() * cfg.seq_len(), cfg.dim], data)
}

fn stack_patches<'a>(cfg: &BackboneConfig, images: impl Iterator<Item = &'a [f64]>) -> Result<Tensor> {
    let mut out = Vec::new();
    let mut n = 0;
    for img in images {
        out.extend_from_slice(img);
        n += 1;
    }
    Tensor::new([n * cfg.patches(), cfg.patch_dim()], out)
}

fn patches_of(cfg: &BackboneConfig, pixels: &[u8]) -> Result<Vec<f64>> {
    let normalized: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0 - 0.5).collect();
    vit::patchify(cfg, &normalized)
}

/// Rows `idx` of a per-image token matrix with `seq` rows per image.
fn gather_images(all: &Tensor, idx: &[usize], seq: usize) -> Tensor {
    let d = all.cols();
    let mut out = Vec::with_capacity(idx.len() * seq * d);
    for &i in idx {
        out.extend_from_slice(&all.data()[i * seq * d..(i + 1) * seq * d]);
    }
    Tensor::from_parts(vec![idx.len() * seq, d], out)
}

fn class_tokens(all: &Tensor, seq: usize) -> Tensor {
    let d = all.cols();
    let n = all.rows() / seq;
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        out.extend_from_slice(all.row(i * seq));
    }
    Tensor::from_parts(vec![n, d], out)
}

/// What one run trains and how alignment is carried out.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPlan {
    pub method: Method,
    pub lambda: f64,
    pub pdl_variant: PdlVariant,
    /// Classifier variants aligned on the shared trunk; empty for no
    /// alignment.
    pub replays: Vec<FeatureReplay>,
}

impl RunPlan {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        let replays = if cfg.ablation.method == Method::Finetune || cfg.ablation.skip_alignment {
            Vec::new()
        } else {
            vec![cfg.ablation.replay()]
        };
        Self {
            method: cfg.ablation.method,
            lambda: cfg.effective_lambda(),
            pdl_variant: cfg.ablation.pdl_variant,
            replays,
        }
    }

    fn variant_names(&self) -> Vec<String> {
        if self.replays.is_empty() {
            vec!["none".to_string()]
        } else {
            self.replays.iter().map(|r| r.name().to_string()).collect()
        }
    }
}

/// Trunk-level record of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTrainLog {
    /// Mean total loss of each epoch.
    pub train_loss: Vec<f64>,
    /// Mean distillation term of each epoch (empty when unused).
    pub pdl_loss: Vec<f64>,
    pub samples_read: u64,
}

/// Variant-level record of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    /// Counted from 1.
    pub task: usize,
    pub classes: Vec<usize>,
    pub accuracy: f64,
    pub average_accuracy: f64,
    pub train_loss: Vec<f64>,
    pub pdl_loss: Vec<f64>,
    pub align_loss: Vec<f64>,
    pub alignment: AlignmentSummary,
    pub samples_read: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub pseudo_features: usize,
    pub pool_tokens: usize,
    pub retrieved: usize,
    pub excluded: usize,
    pub fallbacks: usize,
}

impl AlignmentSummary {
    fn add(&mut self, d: &PfrDiagnostics) {
        self.pseudo_features += 1;
        self.pool_tokens += d.pool;
        self.retrieved += d.retrieved;
        self.excluded += d.excluded;
        self.fallbacks += usize::from(d.fallback);
    }
}

/// JSON metric log of one variant of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub schema_version: u32,
    pub method: Method,
    pub variant: String,
    pub seed: u64,
    pub lambda: f64,
    pub pdl_variant: PdlVariant,
    pub tasks: Vec<TaskEntry>,
    pub metrics: Option<MetricsRecord>,
    pub old_task_reads: u64,
}

impl RunLog {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug)]
struct Variant {
    replay: Option<FeatureReplay>,
    classifier: CosineClassifier,
    evaluations: Vec<Evaluation>,
    log: RunLog,
}

/// Per-task training data decoded once at the start of the task.
struct TaskData {
    classes: Vec<usize>,
    patches: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

/// State of an incremental run between tasks.
pub struct Experiment<'a> {
    cfg: TrainConfig,
    seed: u64,
    plan: RunPlan,
    backbone: &'a BackboneParams,
    stream: &'a TaskStream,
    pub auditor: AccessAuditor,
    pub bank: AdapterBank,
    /// Rows as trained in the first stage; alignment never touches them.
    pub trunk_classifier: CosineClassifier,
    pub prototypes: PrototypeMemory,
    variants: Vec<Variant>,
    completed: usize,
}

impl<'a> Experiment<'a> {
    pub fn new(cfg: &ExperimentConfig, plan: RunPlan, backbone: &'a BackboneParams, stream: &'a TaskStream) -> Result<Self> {
        cfg.validate()?;
        let bc = &backbone.config;
        if (stream.train.height, stream.train.width, stream.train.channels) != (bc.image_size, bc.image_size, bc.channels) {
            return Err(Error::Dataset(format!(
                "images are {}x{}x{}, backbone expects {}x{}x{}",
                stream.train.height, stream.train.width, stream.train.channels, bc.image_size, bc.image_size, bc.channels
            )));
        }
        let dim = bc.dim;
        let variants = plan
            .variant_names()
            .into_iter()
            .enumerate()
            .map(|(i, name)| Variant {
                replay: plan.replays.get(i).copied(),
                classifier: CosineClassifier::new(dim),
                evaluations: Vec::new(),
                log: RunLog {
                    schema_version: LOG_SCHEMA_VERSION,
                    method: plan.method,
                    variant: name,
                    seed: cfg.seed,
                    lambda: plan.lambda,
                    pdl_variant: plan.pdl_variant,
                    tasks: Vec::new(),
                    metrics: None,
                    old_task_reads: 0,
                },
            })
            .collect();
        Ok(Self {
            cfg: cfg.train.clone(),
            seed: cfg.seed,
            bank: AdapterBank::new(bc.depth, dim, cfg.train.rank)?,
            auditor: AccessAuditor::new(&stream.split, &stream.train),
            trunk_classifier: CosineClassifier::new(dim),
            prototypes: PrototypeMemory::default(),
            plan,
            backbone,
            stream,
            variants,
            completed: 0,
        })
    }

    pub fn completed_tasks(&self) -> usize {
        self.completed
    }

    fn integration(&self) -> Integration {
        match self.plan.method {
            Method::Dia => Integration::Routed,
            Method::Finetune => Integration::Unrouted,
        }
    }

    /// Adapters used for inference after the current task.
    fn active_tasks(&self) -> usize {
        self.bank.task_count()
    }

    pub fn logs(&self) -> Vec<RunLog> {
        self.variants.iter().map(|v| v.log.clone()).collect()
    }

    pub fn classifier(&self, variant: &str) -> Option<&CosineClassifier> {
        self.variants.iter().find(|v| v.log.variant == variant).map(|v| &v.classifier)
    }

    /// Runs every remaining task, saving a checkpoint after each one when
    /// `checkpoint_dir` is given.
    pub fn run(&mut self, checkpoint_dir: Option<&Path>) -> Result<Vec<RunLog>> {
        while self.completed < self.stream.tasks() {
            let t = self.completed;
            self.run_task(t).map_err(|e| e.in_task(t + 1))?;
            if let Some(dir) = checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                self.checkpoint()?.save(dir.join(format!("task{}.ckpt", t + 1)))?;
            }
        }
        Ok(self.logs())
    }

    pub fn run_task(&mut self, t: usize) -> Result<()> {
        if t != self.completed {
            return Err(Error::usage(format!("expected task {} next, got {}", self.completed + 1, t + 1)));
        }
        let reads_before = self.auditor.reads()[t];
        let data = self.begin_task(t)?;
        let snapshot_tokens = self.snapshot_tokens(t, &data)?;
        self.add_task_parameters(t, &data.classes)?;
        let mut train_log = self.train_new_task(t, &data, snapshot_tokens.as_ref())?;
        if self.plan.method == Method::Dia {
            self.bank.freeze_all();
        }
        let tokens = encode_all(self.backbone, &self.bank, self.active_tasks(), self.integration(), &data.patches)?;
        let seq = self.backbone.config.seq_len();
        if self.plan.method == Method::Dia {
            for (k, p) in compute_prototypes(t, &class_tokens(&tokens, seq), &data.labels, &data.classes)? {
                self.prototypes.insert(k, p)?;
            }
        }
        train_log.samples_read = self.auditor.reads()[t] - reads_before;
        let eval = self.eval_features(t)?;
        let new_rows = self.trunk_classifier.new_rows();
        let all_rows = self.trunk_classifier.rows();
        for vi in 0..self.variants.len() {
            match self.plan.method {
                Method::Dia => self.variants[vi].classifier.append_classes(&data.classes, &new_rows)?,
                Method::Finetune => self.variants[vi].classifier = self.trunk_classifier.clone(),
            }
            let (align_loss, summary) = match self.variants[vi].replay {
                Some(replay) => self.run_alignment_stage(t, vi, replay, &tokens, &data)?,
                None => (Vec::new(), AlignmentSummary::default()),
            };
            let v = &mut self.variants[vi];
            let evaluation = metrics::evaluate(&v.classifier, &eval.0, &eval.1)?;
            let accuracy = evaluation.accuracy();
            v.evaluations.push(evaluation);
            let accs: Vec<f64> = v.evaluations.iter().map(Evaluation::accuracy).collect();
            v.log.tasks.push(TaskEntry {
                task: t + 1,
                classes: data.classes.clone(),
                accuracy,
                average_accuracy: metrics::mean(&accs),
                train_loss: train_log.train_loss.clone(),
                pdl_loss: train_log.pdl_loss.clone(),
                align_loss,
                alignment: summary,
                samples_read: train_log.samples_read,
            });
            v.log.old_task_reads = self.auditor.old_task_reads();
            v.log.metrics = Some(metrics::summarize(&v.evaluations, self.stream.split.groups(), self.stream.train.classes)?);
        }
        debug_assert_eq!(all_rows, self.trunk_classifier.rows());
        self.completed = t + 1;
        Ok(())
    }

    /// Decodes task `t`'s training samples through the auditor.
    fn begin_task(&mut self, t: usize) -> Result<TaskData> {
        self.auditor.begin_task(t);
        let classes = self.stream.split.classes(t).to_vec();
        if let Some(c) = classes.iter().find(|&&c| self.trunk_classifier.index_of(c).is_some()) {
            return Err(Error::Dataset(format!("class {c} was already learned by an earlier task")));
        }
        let cfg = &self.backbone.config;
        let idx = self.stream.train.indices_of(&classes);
        let mut patches = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in &idx {
            patches.push(patches_of(cfg, self.auditor.read(&self.stream.train, i))?);
            labels.push(self.stream.train.label(i));
        }
        if patches.is_empty() {
            return Err(Error::Dataset(format!("task {} has no training samples", t + 1)));
        }
        Ok(TaskData { classes, patches, labels })
    }

    fn snapshot_tokens(&self, t: usize, data: &TaskData) -> Result<Option<Tensor>> {
        if t == 0 || self.plan.lambda == 0.0 || self.plan.method != Method::Dia {
            return Ok(None);
        }
        let snapshot = ModelSnapshot::capture(&self.bank);
        encode_all(self.backbone, &snapshot.bank, snapshot.tasks(), Integration::Routed, &data.patches).map(Some)
    }

    fn add_task_parameters(&mut self, t: usize, classes: &[usize]) -> Result<()> {
        match self.plan.method {
            Method::Dia => self.bank.add_task(t, &mut seeds::stream(self.seed, Purpose::AdapterInit, &[t as u64]))?,
            Method::Finetune if t == 0 => self.bank.add_task(0, &mut seeds::stream(self.seed, Purpose::AdapterInit, &[0]))?,
            Method::Finetune => {}
        }
        let rows = CosineClassifier::initial_rows(
            classes.len(),
            self.backbone.config.dim,
            &mut seeds::stream(self.seed, Purpose::ClassifierInit, &[t as u64]),
        );
        self.trunk_classifier.append_classes(classes, &rows)
    }

    /// First stage: margin cross-entropy on the current classes plus
    /// weighted patch distillation against `snapshot` tokens.
    fn train_new_task(&mut self, t: usize, data: &TaskData, snapshot: Option<&Tensor>) -> Result<TaskTrainLog> {
        let cfg = self.cfg.clone();
        let bc = self.backbone.config.clone();
        let seq = bc.seq_len();
        let finetune = self.plan.method == Method::Finetune;
        let mut rows = if finetune { self.trunk_classifier.rows() } else { self.trunk_classifier.new_rows() };
        let offset = if finetune { 0 } else { self.trunk_classifier.old_count() };
        let targets: Vec<usize> = data
            .labels
            .iter()
            .map(|&c| self.trunk_classifier.index_of(c).expect("row added") - offset)
            .collect();
        let loss_cfg: MarginLossConfig = cfg.margin_loss();
        let mut opt = Sgd::new(cfg.momentum);
        let n = data.patches.len();
        let batches = n.div_ceil(cfg.batch);
        let total = cfg.epochs * batches;
        let mut log = TaskTrainLog {
            train_loss: Vec::with_capacity(cfg.epochs),
            pdl_loss: Vec::new(),
            samples_read: 0,
        };
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut seeds::stream(self.seed, Purpose::TrainShuffle, &[t as u64, epoch as u64]));
            let (mut sum, mut pdl_sum) = (0.0, 0.0);
            for (b, idx) in order.chunks(cfg.batch).enumerate() {
                let mut tape = Tape::new();
                let vars = self.backbone.bind(&mut tape, false);
                let mut hook = BankHook::bind(&self.bank, &mut tape, self.bank.task_count(), true, self.integration());
                let x = tape.constant(stack_patches(&bc, idx.iter().map(|&i| data.patches[i].as_slice()))?);
                let tokens = vit::forward(&mut tape, &bc, &vars, x, idx.len(), &mut hook)?;
                let cls = tape.gather_rows(tokens, vit::class_rows(idx.len(), seq))?;
                let w = tape.param(rows.clone());
                let logits = cosine_logits_tape(&mut tape, cls, w)?;
                let batch_targets: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
                let mut loss = tape.margin_cross_entropy(logits, &batch_targets, loss_cfg.effective_scale(), loss_cfg.margin, None)?;
                if let Some(old) = snapshot {
                    let old = tape.constant(gather_images(old, idx, seq));
                    let pdl = pdl_loss_tape(&mut tape, tokens, old, seq, self.plan.pdl_variant)?;
                    pdl_sum += tape.value(pdl).data()[0];
                    let weighted = tape.scale(pdl, self.plan.lambda)?;
                    loss = tape.add(loss, weighted)?;
                }
                sum += tape.value(loss).data()[0];
                tape.backward(loss)?;
                let mut grads: Vec<Option<Tensor>> = hook.trainable_vars(&tape).into_iter().map(|v| tape.grad(v)).collect();
                grads.push(tape.grad(w));
                let mut params = self.bank.trainable_mut();
                params.push(&mut rows);
                opt.step(params, &grads, cosine_lr(cfg.lr, epoch * batches + b, total))?;
            }
            log.train_loss.push(sum / batches as f64);
            if snapshot.is_some() {
                log.pdl_loss.push(pdl_sum / batches as f64);
            }
        }
        if finetune {
            self.trunk_classifier.set_rows(&rows)?;
        } else {
            self.trunk_classifier.set_new_rows(&rows)?;
        }
        Ok(log)
    }

    /// Second stage for one variant: plain cross-entropy over every row on
    /// each batch's real class tokens plus pseudo-features of sampled
    /// classes.
    fn run_alignment_stage(
        &mut self,
        t: usize,
        vi: usize,
        replay: FeatureReplay,
        tokens: &Tensor,
        data: &TaskData,
    ) -> Result<(Vec<f64>, AlignmentSummary)> {
        let cfg = self.cfg.clone();
        let seq = self.backbone.config.seq_len();
        let per_image = TokenBatch::split(tokens, seq)?;
        let seen = self.prototypes.classes();
        if seen.is_empty() {
            return Err(Error::usage("alignment needs recorded prototypes"));
        }
        let n = per_image.len();
        let batches = n.div_ceil(cfg.batch);
        let total = cfg.align_epochs * batches;
        let mut opt = Sgd::new(cfg.momentum);
        let mut curve = Vec::with_capacity(cfg.align_epochs);
        let mut summary = AlignmentSummary::default();
        let d = self.backbone.config.dim;
        for epoch in 0..cfg.align_epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut seeds::stream(self.seed, Purpose::AlignShuffle, &[t as u64, epoch as u64]));
            let mut sum = 0.0;
            for (b, idx) in order.chunks(cfg.batch).enumerate() {
                let key = [t as u64, epoch as u64, b as u64];
                let mut pick = seeds::stream(self.seed, Purpose::PrototypeSample, &key);
                let mut noise = seeds::stream(self.seed, Purpose::GaussianSample, &key);
                let images: Vec<TokenBatch> = idx.iter().map(|&i| per_image[i].clone()).collect();
                let pool = if replay == FeatureReplay::Reconstructed { Some(TokenPool::new(&images)?) } else { None };
                let mut features = Vec::with_capacity((idx.len() + cfg.prototypes) * d);
                let mut labels = Vec::with_capacity(idx.len() + cfg.prototypes);
                for (img, &i) in images.iter().zip(idx) {
                    features.extend_from_slice(img.class_token());
                    labels.push(data.labels[i]);
                }
                for _ in 0..cfg.prototypes {
                    let class = seen[pick.random_range(0..seen.len())];
                    let proto = self.prototypes.get(class).expect("listed class");
                    let feature = match replay {
                        FeatureReplay::Prototype => proto.mean.clone(),
                        FeatureReplay::Gaussian => gaussian_baseline_sample(
                            &ClassStats {
                                mean: proto.mean.clone(),
                                var: proto.var.clone(),
                            },
                            &mut noise,
                        ),
                        FeatureReplay::Reconstructed => {
                            let (f, diag) = pfr_reconstruct(proto.mean.data(), pool.as_ref().expect("pool built"), cfg.beta)?;
                            summary.add(&diag);
                            f
                        }
                    };
                    features.extend_from_slice(feature.data());
                    labels.push(class);
                }
                let x = Tensor::new([labels.len(), d], features)?;
                let lr = cosine_lr(cfg.align_lr, epoch * batches + b, total);
                sum += self.variants[vi].classifier.align_step(&x, &labels, cfg.margin_loss().effective_scale(), &mut opt, lr)?;
            }
            curve.push(sum / batches as f64);
        }
        Ok((curve, summary))
    }

    /// Re-scores `variant` on the eval samples of every class seen so far.
    pub fn evaluate(&self, variant: &str) -> Result<Evaluation> {
        if self.completed == 0 {
            return Err(Error::usage("no task has been trained yet"));
        }
        let classifier = self
            .classifier(variant)
            .ok_or_else(|| Error::usage(format!("run has no variant `{variant}`")))?;
        let (features, labels) = self.eval_features(self.completed - 1)?;
        metrics::evaluate(classifier, &features, &labels)
    }

    pub fn variant_names(&self) -> Vec<String> {
        self.variants.iter().map(|v| v.log.variant.clone()).collect()
    }

    /// Class tokens and labels of every eval sample of the seen classes,
    /// under all adapters trained so far.
    fn eval_features(&self, t: usize) -> Result<(Tensor, Vec<usize>)> {
        let cfg = &self.backbone.config;
        let seen = self.stream.split.seen(t);
        let idx = self.stream.eval.indices_of(&seen);
        let images = idx
            .iter()
            .map(|&i| patches_of(cfg, self.stream.eval.image(i)))
            .collect::<Result<Vec<_>>>()?;
        let tokens = encode_all(self.backbone, &self.bank, self.active_tasks(), self.integration(), &images)?;
        Ok((class_tokens(&tokens, cfg.seq_len()), idx.iter().map(|&i| self.stream.eval.label(i)).collect()))
    }

    /// Everything needed to continue the run after the last completed task.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.merge_prefixed("backbone/", self.backbone.to_checkpoint()?)?;
        c.merge_prefixed("bank/", self.bank.to_checkpoint()?)?;
        c.merge_prefixed("trunk/", self.trunk_classifier.to_checkpoint()?)?;
        c.merge_prefixed("prototypes/", self.prototypes.to_checkpoint()?)?;
        for v in &self.variants {
            c.merge_prefixed(&format!("variant/{}/", v.log.variant), v.classifier.to_checkpoint()?)?;
            c.set_meta(format!("variant/{}/evaluations", v.log.variant), serde_json::to_string(&v.evaluations)?);
            c.set_meta(format!("variant/{}/log", v.log.variant), serde_json::to_string(&v.log)?);
        }
        c.set_meta("completed_tasks", self.completed.to_string());
        c.set_meta("seed", self.seed.to_string());
        c.set_meta("method", self.plan.method.to_string());
        c.set_meta("auditor", serde_json::to_string(&(self.auditor.reads.clone(), self.auditor.old_task_reads))?);
        Ok(c)
    }

    /// Rebuilds the run state saved by [`Experiment::checkpoint`]. The
    /// backbone must be the one the checkpoint was trained with.
    pub fn resume(
        cfg: &ExperimentConfig,
        plan: RunPlan,
        backbone: &'a BackboneParams,
        stream: &'a TaskStream,
        c: &Checkpoint,
    ) -> Result<Self> {
        let mut exp = Self::new(cfg, plan, backbone, stream)?;
        if BackboneParams::from_checkpoint(&c.sub("backbone/"))? != *backbone {
            return Err(Error::usage("checkpoint was trained with a different backbone"));
        }
        let seed: u64 = c.meta("seed")?.parse().map_err(|_| Error::usage("bad seed metadata"))?;
        if seed != cfg.seed || c.meta("method")? != exp.plan.method.to_string() {
            return Err(Error::usage("checkpoint seed or method differs from the config"));
        }
        exp.completed = c.meta("completed_tasks")?.parse().map_err(|_| Error::usage("bad task count"))?;
        exp.bank = AdapterBank::from_checkpoint(&c.sub("bank/"))?;
        exp.trunk_classifier = CosineClassifier::from_checkpoint(&c.sub("trunk/"))?;
        exp.prototypes = PrototypeMemory::from_checkpoint(&c.sub("prototypes/"))?;
        for v in &mut exp.variants {
            let name = v.log.variant.clone();
            v.classifier = CosineClassifier::from_checkpoint(&c.sub(&format!("variant/{name}/")))?;
            v.evaluations = serde_json::from_str(c.meta(&format!("variant/{name}/evaluations"))?)?;
            v.log = serde_json::from_str(c.meta(&format!("variant/{name}/log"))?)?;
        }
        let (reads, old): (Vec<u64>, u64) = serde_json::from_str(c.meta("auditor")?)?;
        exp.auditor.reads = reads;
        exp.auditor.old_task_reads = old;
        Ok(exp)
    }
}
