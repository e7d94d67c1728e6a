//! Training loop for the alignment objective.
//!
//! Each step encodes a batch through both branches on one tape, blends
//! the contrastive and grounding losses, backpropagates, and applies
//! AdamW with a warmup-plus-cosine schedule to every trainable
//! parameter. After the update the bank's projected rows are refreshed
//! so the grounding term always sees the current projection head while
//! the pooled description cache stays frozen.
//!
//! Runs are resumable: the shuffle order of epoch e depends only on
//! (seed, e), and `TrainState` persists the optimizer moments, so an
//! interrupted run continued from disk replays the exact step sequence
//! of an uninterrupted one.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::checkpoint::{save_checkpoint, Precision};
use crate::data::{ensure_category_match, Dataset, PairedSample, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, image_global_features, ScoreOptions, ScoringMode, ThresholdPolicy};
use crate::features::{build_bundle_on_tape, ProjectionSet, TapeBundle};
use crate::knowledge::KnowledgeBank;
use crate::kv::KvFile;
use crate::linalg::Matrix;
use crate::losses::{
    build_soft_targets, info_nce_pair, loss_ca, loss_cg, loss_total, similarity, LossConfig,
    Reduction,
};
use crate::model::{
    encode_image_branch, encode_text_branch, OverflowPolicy, ParamBinding, ParamStore,
    TinyDecoder,
};
use crate::autodiff::Tape;
use crate::tensorio::{read_tensors, write_tensors, StorageDtype};

/// Which feature pairings feed the contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// Crossed global/local pairings, the full objective.
    Both,
    GlobalOnly,
    LocalOnly,
}

impl FeatureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::Both => "both",
            FeatureMode::GlobalOnly => "global_only",
            FeatureMode::LocalOnly => "local_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(FeatureMode::Both),
            "global_only" => Ok(FeatureMode::GlobalOnly),
            "local_only" => Ok(FeatureMode::LocalOnly),
            other => Err(Error::config(format!("unknown feature mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Fraction of max_steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub tau: f64,
    pub lambda: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Global-norm clip; None disables clipping.
    pub clip_norm: Option<f64>,
    pub feature_mode: FeatureMode,
    /// Validation cadence in steps.
    pub val_interval: usize,
    pub image_prompt: String,
    pub text_prompt: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-3,
            weight_decay: 0.0,
            warmup_fraction: 0.03,
            batch_size: 16,
            max_steps: 500,
            tau: 0.05,
            lambda: 0.5,
            seed: 7,
            precision: Precision::Fp64,
            clip_norm: Some(1.0),
            feature_mode: FeatureMode::Both,
            val_interval: 50,
            image_prompt: "What disease is indicated by the chest X-ray?".to_string(),
            text_prompt: "What disease is described in this text?".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config(format!(
                "warmup fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!(
                "batch size must be at least 2 for the contrastive term, got {}",
                self.batch_size
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config(format!(
                    "clip norm must be positive when set, got {c}"
                )));
            }
        }
        if self.val_interval == 0 {
            return Err(Error::config("val interval must be at least 1"));
        }
        Ok(())
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda: self.lambda,
            reduction: Reduction::Mean,
        }
    }

    fn score_options(&self) -> ScoreOptions {
        ScoreOptions {
            mode: ScoringMode::PosNegSoftmax,
            tau: self.tau,
            image_prompt: self.image_prompt.clone(),
            text_prompt: self.text_prompt.clone(),
            ..ScoreOptions::default()
        }
    }
}

/// Linear warmup to `lr`, then cosine decay to zero at `max_steps`.
/// step 0 maps to 0 (when warmup is active), the last warmup step maps
/// to exactly `lr`, and `max_steps` maps to exactly 0.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.max_steps {
        return Err(Error::config(format!(
            "step {step} is outside the schedule (max_steps {})",
            cfg.max_steps
        )));
    }
    if step == cfg.max_steps {
        return Ok(0.0);
    }
    let warmup = (cfg.warmup_fraction * cfg.max_steps as f64).round() as usize;
    if step < warmup {
        return Ok(cfg.lr * step as f64 / warmup as f64);
    }
    let span = (cfg.max_steps - warmup) as f64;
    let t = (step - warmup) as f64 / span;
    Ok(cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub l_total: f64,
    pub l_ca: f64,
    pub l_cg: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
struct AdamSlot {
    t: u64,
    m: Matrix,
    v: Matrix,
}

/// AdamW with decoupled weight decay. Moments are keyed by parameter
/// name, created on first touch, so parameters that never receive a
/// gradient (an unused head at a lambda endpoint) are never moved.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    slots: BTreeMap<String, AdamSlot>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            slots: BTreeMap::new(),
        }
    }

    /// Update every parameter that has a gradient entry.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Matrix>, lr: f64) {
        for (name, g) in grads {
            let p = params.get_mut(name);
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for {name}");
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                t: 0,
                m: Matrix::zeros(g.rows(), g.cols()),
                v: Matrix::zeros(g.rows(), g.cols()),
            });
            slot.t += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
            let ms = slot.m.as_mut_slice();
            let vs = slot.v.as_mut_slice();
            let ps = p.as_mut_slice();
            let gs = g.as_slice();
            for i in 0..gs.len() {
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gs[i];
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gs[i] * gs[i];
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * ps[i]);
            }
        }
    }
}

fn similarity_extrema(tape: &Tape, bundle: &TapeBundle, tau: f64) -> (f64, f64) {
    let xg = tape.value(bundle.x_g);
    let xl = tape.value(bundle.x_l);
    let yg = tape.value(bundle.y_g);
    let yl = tape.value(bundle.y_l);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in [
        xg.matmul_transpose_b(yl),
        xl.matmul_transpose_b(yg),
        xg.matmul_transpose_b(yg),
    ] {
        for v in s.as_slice() {
            let v = v / tau;
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
    }
    (lo, hi)
}

/// One optimizer step over `batch`. `labels` holds the batch's
/// multi-hot rows in bank category order.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut TinyDecoder,
    projections: &mut ProjectionSet,
    bank: &mut KnowledgeBank,
    adam: &mut AdamW,
    batch: &[&PairedSample],
    labels: &Matrix,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepLog> {
    let lr = lr_at(step, cfg)?;
    let layer = bank.layer_index;

    let mut tape = Tape::new();
    let binding = ParamBinding::merged(vec![model.bind(&mut tape), projections.bind(&mut tape)]);

    let mut img_views = Vec::with_capacity(batch.len());
    let mut txt_views = Vec::with_capacity(batch.len());
    for s in batch {
        let input = encode_image_branch(model, s.patches.clone(), &cfg.image_prompt)?;
        img_views.push(model.forward_on_tape(&mut tape, &binding, &input, layer)?);
        let (tin, _) =
            encode_text_branch(model, &s.report, &cfg.text_prompt, OverflowPolicy::TruncateContent)?;
        txt_views.push(model.forward_on_tape(&mut tape, &binding, &tin, layer)?);
    }
    let bundle = build_bundle_on_tape(&mut tape, projections, &binding, &img_views, &txt_views)?;

    let loss_cfg = cfg.loss_config();
    let ca = match cfg.feature_mode {
        FeatureMode::Both => loss_ca(&mut tape, &bundle, &loss_cfg)?,
        FeatureMode::GlobalOnly => {
            let s = similarity(&mut tape, bundle.x_g, bundle.y_g, cfg.tau)?;
            info_nce_pair(&mut tape, s, Reduction::Mean)?
        }
        FeatureMode::LocalOnly => {
            let s = similarity(&mut tape, bundle.x_l, bundle.y_l, cfg.tau)?;
            info_nce_pair(&mut tape, s, Reduction::Mean)?
        }
    };
    let d_hat = bank.d_hat_on_tape(&mut tape, projections, &binding)?;
    let (targets, participating) = build_soft_targets(labels);
    let cg = loss_cg(
        &mut tape,
        bundle.x_g,
        bundle.y_g,
        d_hat,
        &targets,
        participating,
        &loss_cfg,
    )?;

    // at an endpoint the unused term stays off the loss path entirely,
    // so its head receives no gradient and is never touched
    let total = if cfg.lambda == 1.0 {
        ca
    } else if cfg.lambda == 0.0 {
        cg
    } else {
        loss_total(&mut tape, ca, cg, cfg.lambda)
    };

    let l_ca = tape.scalar(ca);
    let l_cg = tape.scalar(cg);
    let l_total = tape.scalar(total);
    if !l_total.is_finite() {
        let (lo, hi) = similarity_extrema(&tape, &bundle, cfg.tau);
        return Err(Error::numeric(format!(
            "non-finite loss at step {step}: l_ca={l_ca}, l_cg={l_cg}, \
             scaled similarity range [{lo:.4}, {hi:.4}]"
        )));
    }

    let grads = tape.backward(total);
    let mut model_grads: BTreeMap<String, Matrix> = BTreeMap::new();
    for name in model.params.names() {
        if !model.is_trainable(&name) {
            continue;
        }
        if let Some(g) = grads.wrt(binding.var(&name)) {
            model_grads.insert(name, g.clone());
        }
    }
    let mut proj_grads: BTreeMap<String, Matrix> = BTreeMap::new();
    for name in projections.params.names() {
        if let Some(g) = grads.wrt(binding.var(&name)) {
            proj_grads.insert(name, g.clone());
        }
    }

    let mut sq = 0.0;
    for g in model_grads.values().chain(proj_grads.values()) {
        for v in g.as_slice() {
            sq += v * v;
        }
    }
    let grad_norm = sq.sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite gradient norm at step {step}"
        )));
    }
    if let Some(c) = cfg.clip_norm {
        if grad_norm > c {
            let scale = c / grad_norm;
            for g in model_grads.values_mut().chain(proj_grads.values_mut()) {
                for v in g.as_mut_slice() {
                    *v *= scale;
                }
            }
        }
    }

    adam.apply(&mut model.params, &model_grads, lr);
    adam.apply(&mut projections.params, &proj_grads, lr);
    cfg.precision.constrain(&mut model.params);
    cfg.precision.constrain(&mut projections.params);
    bank.refresh_projection(projections)?;

    Ok(StepLog {
        step,
        lr,
        l_total,
        l_ca,
        l_cg,
        grad_norm,
    })
}

/// Resumable optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub next_step: usize,
    pub adam: AdamW,
    pub best_val: Option<f64>,
    pub best_step: Option<usize>,
}

impl TrainState {
    pub fn new(weight_decay: f64) -> Self {
        TrainState {
            next_step: 0,
            adam: AdamW::new(weight_decay),
            best_val: None,
            best_step: None,
        }
    }
}

fn f64_field(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn f64_parse(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|e| Error::data(format!("bad f64 bit field '{s}': {e}")))
}

pub fn save_train_state(dir: &Path, state: &TrainState) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut kv = KvFile::new();
    kv.set("schema", 1);
    kv.set("kind", "train_state");
    kv.set("next_step", state.next_step);
    kv.set("beta1", f64_field(state.adam.beta1));
    kv.set("beta2", f64_field(state.adam.beta2));
    kv.set("eps", f64_field(state.adam.eps));
    kv.set("weight_decay", f64_field(state.adam.weight_decay));
    kv.set(
        "best_val",
        state.best_val.map_or("none".to_string(), f64_field),
    );
    kv.set(
        "best_step",
        state.best_step.map_or("none".to_string(), |s| s.to_string()),
    );
    kv.save(&dir.join("state.txt"))?;

    let mut entries: Vec<(String, &Matrix)> = Vec::new();
    let one_by_one: Vec<(String, Matrix)> = state
        .adam
        .slots
        .iter()
        .map(|(name, slot)| (format!("t.{name}"), Matrix::from_rows(&[vec![slot.t as f64]])))
        .collect();
    for (name, slot) in &state.adam.slots {
        entries.push((format!("m.{name}"), &slot.m));
        entries.push((format!("v.{name}"), &slot.v));
    }
    for (name, t) in &one_by_one {
        entries.push((name.clone(), t));
    }
    write_tensors(&dir.join("optimizer.bin"), &entries, StorageDtype::F64)
}

pub fn load_train_state(dir: &Path) -> Result<TrainState> {
    let kv = KvFile::load(&dir.join("state.txt"))?;
    if kv.require("kind")? != "train_state" {
        return Err(Error::data(format!(
            "{} is not a train state",
            dir.display()
        )));
    }
    let mut adam = AdamW::new(0.0);
    adam.beta1 = f64_parse(kv.require("beta1")?)?;
    adam.beta2 = f64_parse(kv.require("beta2")?)?;
    adam.eps = f64_parse(kv.require("eps")?)?;
    adam.weight_decay = f64_parse(kv.require("weight_decay")?)?;

    let (_, tensors) = read_tensors(&dir.join("optimizer.bin"))?;
    let mut ms: BTreeMap<String, Matrix> = BTreeMap::new();
    let mut vs: BTreeMap<String, Matrix> = BTreeMap::new();
    let mut ts: BTreeMap<String, u64> = BTreeMap::new();
    for (name, m) in tensors {
        if let Some(p) = name.strip_prefix("m.") {
            ms.insert(p.to_string(), m);
        } else if let Some(p) = name.strip_prefix("v.") {
            vs.insert(p.to_string(), m);
        } else if let Some(p) = name.strip_prefix("t.") {
            ts.insert(p.to_string(), m.get(0, 0) as u64);
        } else {
            return Err(Error::data(format!("unexpected optimizer tensor '{name}'")));
        }
    }
    if ms.len() != vs.len() || ms.len() != ts.len() {
        return Err(Error::data("optimizer tensors are incomplete"));
    }
    for (name, m) in ms {
        let v = vs
            .remove(&name)
            .ok_or_else(|| Error::data(format!("missing second moment for '{name}'")))?;
        let t = ts
            .remove(&name)
            .ok_or_else(|| Error::data(format!("missing step count for '{name}'")))?;
        adam.slots.insert(name, AdamSlot { t, m, v });
    }

    Ok(TrainState {
        next_step: kv.require_usize("next_step")?,
        adam,
        best_val: match kv.require("best_val")? {
            "none" => None,
            s => Some(f64_parse(s)?),
        },
        best_step: match kv.require("best_step")? {
            "none" => None,
            s => Some(s.parse().map_err(|e| {
                Error::data(format!("bad best_step '{s}': {e}"))
            })?),
        },
    })
}

/// Shuffle seed for one epoch; depends only on the run seed and the
/// epoch index so resumed runs replay the same order.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
    pub best_step: Option<usize>,
    pub best_val_metric: Option<f64>,
    pub completed: bool,
}

fn val_metric(
    model: &TinyDecoder,
    projections: &ProjectionSet,
    bank: &KnowledgeBank,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<f64> {
    let report = evaluate(
        model,
        projections,
        bank,
        dataset,
        Split::Val,
        ThresholdPolicy::Fixed(0.5),
        &cfg.score_options(),
    )?;
    Ok(report.macro_auc.unwrap_or(report.macro_acc))
}

/// Run the training loop from `resume` (or step 0) to `stop_at_step`
/// (or `max_steps`). When `out_dir` is given, writes `last/` and
/// `best/` checkpoints, `bank/`, `state/`, and appends to
/// `train_log.jsonl`. Completing the schedule rebuilds the bank's
/// pooled cache against the final backbone so saved artifacts agree.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &mut TinyDecoder,
    projections: &mut ProjectionSet,
    bank: &mut KnowledgeBank,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<TrainState>,
    stop_at_step: Option<usize>,
) -> Result<(TrainReport, TrainState)> {
    cfg.validate()?;
    ensure_category_match(dataset, &bank.corpus)?;
    let train_len = dataset.split_indices(Split::Train).len();
    if train_len == 0 {
        return Err(Error::data("train split is empty"));
    }
    let batches_per_epoch = train_len.div_ceil(cfg.batch_size);
    let has_val = !dataset.split_indices(Split::Val).is_empty();

    let mut state = resume.unwrap_or_else(|| TrainState::new(cfg.weight_decay));
    let end = stop_at_step.map_or(cfg.max_steps, |s| s.min(cfg.max_steps));
    let mut logs = Vec::new();
    let mut epoch_order: Option<(usize, Vec<usize>)> = None;

    for step in state.next_step..end {
        let epoch = step / batches_per_epoch;
        let slot = step % batches_per_epoch;
        if epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let order = dataset.shuffled_split_indices(Split::Train, epoch_seed(cfg.seed, epoch));
            epoch_order = Some((epoch, order));
        }
        let order = &epoch_order.as_ref().expect("epoch order cached").1;
        let lo = slot * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(order.len());
        let batch_idx = &order[lo..hi];
        let batch: Vec<&PairedSample> = batch_idx.iter().map(|&i| &dataset.samples[i]).collect();
        let labels = dataset.labels_matrix(batch_idx);

        let log = train_step(
            model,
            projections,
            bank,
            &mut state.adam,
            &batch,
            &labels,
            cfg,
            step,
        )?;
        logs.push(log);
        state.next_step = step + 1;

        let at_val = state.next_step % cfg.val_interval == 0 || state.next_step == end;
        if at_val && has_val {
            let metric = val_metric(model, projections, bank, dataset, cfg)?;
            if state.best_val.is_none_or(|b| metric > b) {
                state.best_val = Some(metric);
                state.best_step = Some(state.next_step);
                if let Some(dir) = out_dir {
                    save_checkpoint(&dir.join("best"), model, projections, cfg.precision)?;
                }
            }
        }
    }

    // the pooled description cache stays frozen for the whole run;
    // only its projection tracks the trained head, so the saved bank
    // is exactly what the grounding term optimized against
    let completed = state.next_step >= cfg.max_steps;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&dir.join("last"), model, projections, cfg.precision)?;
        bank.save_dir(&dir.join("bank"))?;
        save_train_state(&dir.join("state"), &state)?;
        let log_path = dir.join("train_log.jsonl");
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        for entry in &logs {
            let line = serde_json::to_string(entry).expect("step log serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(&log_path, e))?;
        }
    }

    Ok((
        TrainReport {
            log: logs,
            best_step: state.best_step,
            best_val_metric: state.best_val,
            completed,
        },
        state,
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneReport {
    pub train_size: usize,
    pub epochs: usize,
    /// Fraction of test samples whose argmax logit is a true label.
    pub accuracy: f64,
    pub macro_auc: Option<f64>,
}

fn append_ones_column(x: &Matrix) -> Matrix {
    let (r, c) = x.shape();
    let mut out = Matrix::zeros(r, c + 1);
    for i in 0..r {
        for j in 0..c {
            out.set(i, j, x.get(i, j));
        }
        out.set(i, c, 1.0);
    }
    out
}

/// Fit a linear softmax head on frozen projected image features from
/// `train_indices` and report test-split metrics. Measures how far
/// labels alone go on top of the learned representation.
#[allow(clippy::too_many_arguments)]
pub fn finetune_classifier(
    model: &TinyDecoder,
    projections: &ProjectionSet,
    dataset: &Dataset,
    layer_index: usize,
    train_indices: &[usize],
    epochs: usize,
    lr: f64,
    image_prompt: &str,
) -> Result<FinetuneReport> {
    if train_indices.is_empty() {
        return Err(Error::data("classifier head needs training samples"));
    }
    let n = dataset.manifest.category_names.len();
    let train_samples: Vec<&PairedSample> =
        train_indices.iter().map(|&i| &dataset.samples[i]).collect();
    let x = append_ones_column(&image_global_features(
        model,
        projections,
        &train_samples,
        image_prompt,
        layer_index,
    )?);
    let (targets, participating) = build_soft_targets(&dataset.labels_matrix(train_indices));
    if participating == 0 {
        return Err(Error::data("no training sample has a positive label"));
    }

    let mut store = ParamStore::new();
    store.insert("clf.w", Matrix::zeros(x.cols(), n));
    let mut adam = AdamW::new(0.0);
    for _ in 0..epochs {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let w = binding.var("clf.w");
        let xv = tape.constant(x.clone());
        let logits = tape.matmul(xv, w);
        let lsm = tape.log_softmax_rows(logits);
        let weighted = tape.mul_const(lsm, targets.clone());
        let summed = tape.sum_all(weighted);
        let loss = tape.scale(summed, -1.0 / participating as f64);
        let grads = tape.backward(loss);
        let g = grads
            .wrt(w)
            .expect("classifier weights are on the loss path")
            .clone();
        let mut gm = BTreeMap::new();
        gm.insert("clf.w".to_string(), g);
        adam.apply(&mut store, &gm, lr);
    }

    let test_idx = dataset.split_indices(Split::Test);
    if test_idx.is_empty() {
        return Err(Error::data("test split is empty"));
    }
    let test_samples: Vec<&PairedSample> =
        test_idx.iter().map(|&i| &dataset.samples[i]).collect();
    let xt = append_ones_column(&image_global_features(
        model,
        projections,
        &test_samples,
        image_prompt,
        layer_index,
    )?);
    let logits = xt.matmul(store.get("clf.w"));
    let labels = dataset.labels_matrix(&test_idx);

    let hits = (0..logits.rows())
        .filter(|&i| {
            let row = logits.row(i);
            let best = (0..n).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            labels.get(i, best) > 0.5
        })
        .count();
    let accuracy = hits as f64 / logits.rows() as f64;

    let mut aucs = Vec::new();
    for j in 0..n {
        let col: Vec<f64> = (0..logits.rows()).map(|i| logits.get(i, j)).collect();
        let lab: Vec<bool> = (0..logits.rows()).map(|i| labels.get(i, j) > 0.5).collect();
        if let Some(a) = crate::eval::auc(&col, &lab) {
            aucs.push(a);
        }
    }
    let macro_auc = if aucs.is_empty() {
        None
    } else {
        Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
    };

    Ok(FinetuneReport {
        train_size: train_indices.len(),
        epochs,
        accuracy,
        macro_auc,
    })
}
