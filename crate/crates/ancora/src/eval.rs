//! Zero-shot scoring and metrics.
//!
//! Two scoring modes produce an M x N score matrix over test images
//! and categories:
//!
//! * `bank_cosine`: cosine between the image's global feature and each
//!   knowledge-bank row.
//! * `pos_neg_softmax` (default): per category, a positive and a
//!   negative prompt go through the text branch; the score is the
//!   positive component of a softmax over the two temperature-scaled
//!   similarities, so it lies in [0, 1].
//!
//! AUC uses the rank-statistic definition with tied scores counted
//! half; F1/ACC binarize at a fixed threshold or one picked on a
//! validation split by Youden's J. Every metric has a brute-force
//! oracle in the test suite.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{ensure_category_match, Dataset, PairedSample, Split};
use crate::error::{Error, Result};
use crate::features::{pool_global, ProjectionSet, HEAD_IMG, HEAD_TXT};
use crate::knowledge::KnowledgeBank;
use crate::linalg::Matrix;
use crate::model::{encode_image_branch, encode_text_branch, Backbone, OverflowPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoringMode {
    PosNegSoftmax,
    BankCosine,
}

impl ScoringMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoringMode::PosNegSoftmax => "pos_neg_softmax",
            ScoringMode::BankCosine => "bank_cosine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pos_neg_softmax" => Ok(ScoringMode::PosNegSoftmax),
            "bank_cosine" => Ok(ScoringMode::BankCosine),
            other => Err(Error::config(format!("unknown scoring mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ThresholdPolicy {
    Fixed(f64),
    /// Per-class threshold maximizing TPR - FPR on validation scores.
    YoudenOnVal,
}

impl ThresholdPolicy {
    pub fn describe(self) -> String {
        match self {
            ThresholdPolicy::Fixed(t) => format!("fixed({t})"),
            ThresholdPolicy::YoudenOnVal => "youden_on_val".to_string(),
        }
    }
}

/// Prompt templates; `{class}` is replaced by the category name.
#[derive(Debug, Clone)]
pub struct EvalPrompts {
    pub positive: String,
    pub negative: String,
}

impl Default for EvalPrompts {
    fn default() -> Self {
        EvalPrompts {
            positive: "Findings suggesting {class}.".to_string(),
            negative: "No evidence of {class}.".to_string(),
        }
    }
}

impl EvalPrompts {
    fn render(template: &str, class: &str) -> String {
        template.replace("{class}", class)
    }
}

#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    /// M x N; rows follow the scored samples, columns the bank order.
    pub scores: Matrix,
    pub mode: ScoringMode,
    pub checkpoint_fingerprint: String,
    pub bank_fingerprint: String,
}

/// Hash of the bank's category names and projected rows.
pub fn bank_fingerprint(bank: &KnowledgeBank) -> String {
    let mut h = Sha256::new();
    for name in bank.corpus.names() {
        h.update(name.as_bytes());
        h.update([0u8]);
    }
    for v in bank.d_hat.as_slice() {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Projected global image features, one row per sample.
pub fn image_global_features(
    model: &dyn Backbone,
    projections: &ProjectionSet,
    samples: &[&PairedSample],
    image_prompt: &str,
    layer_index: usize,
) -> Result<Matrix> {
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let input = encode_image_branch(model, s.patches.clone(), image_prompt)?;
        let view = model.forward_hidden(&input, layer_index)?;
        rows.push(pool_global(&view)?);
    }
    let refs: Vec<&Matrix> = rows.iter().collect();
    projections.project(HEAD_IMG, &Matrix::vstack(&refs))
}

/// Projected global feature of one text through the text branch.
fn text_global_feature(
    model: &dyn Backbone,
    projections: &ProjectionSet,
    content: &str,
    text_prompt: &str,
    layer_index: usize,
) -> Result<Matrix> {
    let (input, _) = encode_text_branch(model, content, text_prompt, OverflowPolicy::Error)?;
    let view = model.forward_hidden(&input, layer_index)?;
    projections.project(HEAD_TXT, &pool_global(&view)?)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

#[derive(Debug, Clone)]
pub struct ScoreOptions {
    pub mode: ScoringMode,
    pub tau: f64,
    pub prompts: EvalPrompts,
    pub image_prompt: String,
    pub text_prompt: String,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            mode: ScoringMode::PosNegSoftmax,
            tau: 0.05,
            prompts: EvalPrompts::default(),
            image_prompt: "What disease is indicated by the chest X-ray?".to_string(),
            text_prompt: "What disease is described in this text?".to_string(),
        }
    }
}

pub fn score_images(
    model: &dyn Backbone,
    projections: &ProjectionSet,
    bank: &KnowledgeBank,
    samples: &[&PairedSample],
    opts: &ScoreOptions,
) -> Result<ScoreMatrix> {
    if samples.is_empty() {
        return Err(Error::data("no samples to score"));
    }
    if !(opts.tau > 0.0) {
        return Err(Error::config(format!(
            "temperature must be positive, got {}",
            opts.tau
        )));
    }
    let k = projections.out_dim();
    if bank.d_hat.cols() != k {
        return Err(Error::config(format!(
            "bank feature dim {} does not match projection output dim {k}",
            bank.d_hat.cols()
        )));
    }
    let layer = bank.layer_index;
    let x_g = image_global_features(model, projections, samples, &opts.image_prompt, layer)?;
    let n = bank.num_categories();
    let m = samples.len();
    let mut scores = Matrix::zeros(m, n);

    match opts.mode {
        ScoringMode::BankCosine => {
            for i in 0..m {
                for j in 0..n {
                    scores.set(i, j, cosine(x_g.row(i), bank.d_hat.row(j)));
                }
            }
        }
        ScoringMode::PosNegSoftmax => {
            for (j, name) in bank.corpus.names().enumerate() {
                let pos_text = EvalPrompts::render(&opts.prompts.positive, name);
                let neg_text = EvalPrompts::render(&opts.prompts.negative, name);
                let y_pos =
                    text_global_feature(model, projections, &pos_text, &opts.text_prompt, layer)?;
                let y_neg =
                    text_global_feature(model, projections, &neg_text, &opts.text_prompt, layer)?;
                for i in 0..m {
                    let sp: f64 =
                        x_g.row(i).iter().zip(y_pos.row(0)).map(|(a, b)| a * b).sum::<f64>()
                            / opts.tau;
                    let sn: f64 =
                        x_g.row(i).iter().zip(y_neg.row(0)).map(|(a, b)| a * b).sum::<f64>()
                            / opts.tau;
                    let hi = sp.max(sn);
                    let ep = (sp - hi).exp();
                    let en = (sn - hi).exp();
                    scores.set(i, j, ep / (ep + en));
                }
            }
        }
    }
    if !scores.all_finite() {
        return Err(Error::numeric("score matrix contains non-finite entries"));
    }
    Ok(ScoreMatrix {
        scores,
        mode: opts.mode,
        checkpoint_fingerprint: model.fingerprint(),
        bank_fingerprint: bank_fingerprint(bank),
    })
}

/// Rank-statistic AUC with tied scores counted half. None when only
/// one class is present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the same score; average them
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum_pos - (pos as f64) * (pos as f64 + 1.0) / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

/// F1 and accuracy after binarizing at `threshold` (score >= threshold
/// predicts positive).
pub fn f1_acc(scores: &[f64], labels: &[bool], threshold: f64) -> Result<(f64, f64)> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::data("f1_acc needs matching non-empty inputs"));
    }
    let (mut tp, mut fp, mut tn, mut fun) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fun += 1,
        }
    }
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fun == 0 {
        0.0
    } else {
        tp as f64 / (tp + fun) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let acc = (tp + tn) as f64 / scores.len() as f64;
    Ok((f1, acc))
}

/// Threshold maximizing Youden's J = TPR - FPR; the smallest maximizer
/// wins ties, so the choice is deterministic.
pub fn youden_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::data(
            "youden threshold needs both classes on the validation split",
        ));
    }
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for &t in &candidates {
        let tpr = scores
            .iter()
            .zip(labels)
            .filter(|(&s, &l)| l && s >= t)
            .count() as f64
            / pos;
        let fpr = scores
            .iter()
            .zip(labels)
            .filter(|(&s, &l)| !l && s >= t)
            .count() as f64
            / neg;
        let j = tpr - fpr;
        if j > best.0 {
            best = (j, t);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub name: String,
    pub auc: Option<f64>,
    /// Why AUC is absent, when it is.
    pub auc_note: Option<String>,
    pub f1: f64,
    pub acc: f64,
    pub threshold: f64,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub mode: String,
    pub threshold_policy: String,
    pub per_class: Vec<ClassMetrics>,
    pub macro_auc: Option<f64>,
    pub macro_f1: f64,
    pub macro_acc: f64,
    /// Fraction of samples whose top-scoring category is a true
    /// label; present only when every sample is single-label.
    pub argmax_accuracy: Option<f64>,
    pub samples: usize,
    pub checkpoint_fingerprint: String,
    pub bank_fingerprint: String,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned table: one row per category plus a macro row.
    pub fn to_text_table(&self) -> String {
        let name_w = self
            .per_class
            .iter()
            .map(|c| c.name.len())
            .chain(["macro".len()].into_iter())
            .max()
            .unwrap_or(5)
            .max(8);
        let fmt_auc = |a: Option<f64>| match a {
            Some(v) => format!("{:7.4}", v),
            None => format!("{:>7}", "-"),
        };
        let mut out = String::new();
        out.push_str(&format!(
            "{:<name_w$}  {:>7}  {:>7}  {:>7}  {:>7}\n",
            "category", "auc", "f1", "acc", "thr"
        ));
        for c in &self.per_class {
            out.push_str(&format!(
                "{:<name_w$}  {}  {:7.4}  {:7.4}  {:7.4}\n",
                c.name,
                fmt_auc(c.auc),
                c.f1,
                c.acc,
                c.threshold
            ));
        }
        out.push_str(&format!(
            "{:<name_w$}  {}  {:7.4}  {:7.4}  {:>7}\n",
            "macro",
            fmt_auc(self.macro_auc),
            self.macro_f1,
            self.macro_acc,
            ""
        ));
        out
    }
}

fn column(scores: &Matrix, j: usize) -> Vec<f64> {
    (0..scores.rows()).map(|i| scores.get(i, j)).collect()
}

/// Metric block for scored samples with known labels.
pub fn report_from_scores(
    matrix: &ScoreMatrix,
    labels: &Matrix,
    category_names: &[String],
    policy: ThresholdPolicy,
    val: Option<(&ScoreMatrix, &Matrix)>,
) -> Result<EvalReport> {
    let (m, n) = matrix.scores.shape();
    if labels.shape() != (m, n) {
        return Err(Error::data(format!(
            "labels are {:?} but scores are {m}x{n}",
            labels.shape()
        )));
    }
    if category_names.len() != n {
        return Err(Error::data("category name count mismatch"));
    }
    let mut per_class = Vec::with_capacity(n);
    for j in 0..n {
        let col = column(&matrix.scores, j);
        let lab: Vec<bool> = (0..m).map(|i| labels.get(i, j) > 0.5).collect();
        let positives = lab.iter().filter(|&&l| l).count();
        let negatives = m - positives;
        let (auc_val, note) = match auc(&col, &lab) {
            Some(a) => (Some(a), None),
            None => (
                None,
                Some(format!(
                    "undefined: split has {positives} positives and {negatives} negatives"
                )),
            ),
        };
        let threshold = match policy {
            ThresholdPolicy::Fixed(t) => t,
            ThresholdPolicy::YoudenOnVal => {
                let (vs, vl) = val.ok_or_else(|| {
                    Error::config("youden_on_val needs validation scores")
                })?;
                let vcol = column(&vs.scores, j);
                let vlab: Vec<bool> = (0..vs.scores.rows())
                    .map(|i| vl.get(i, j) > 0.5)
                    .collect();
                youden_threshold(&vcol, &vlab)?
            }
        };
        let (f1, acc) = f1_acc(&col, &lab, threshold)?;
        per_class.push(ClassMetrics {
            name: category_names[j].clone(),
            auc: auc_val,
            auc_note: note,
            f1,
            acc,
            threshold,
            positives,
            negatives,
        });
    }
    let present: Vec<f64> = per_class.iter().filter_map(|c| c.auc).collect();
    let macro_auc = if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    };
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / n as f64;
    let macro_acc = per_class.iter().map(|c| c.acc).sum::<f64>() / n as f64;

    let single_label = (0..m).all(|i| {
        (0..n)
            .filter(|&j| labels.get(i, j) > 0.5)
            .count()
            == 1
    });
    let argmax_accuracy = if single_label {
        let hits = (0..m)
            .filter(|&i| {
                let row = matrix.scores.row(i);
                let best = (0..n)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .expect("n > 0");
                labels.get(i, best) > 0.5
            })
            .count();
        Some(hits as f64 / m as f64)
    } else {
        None
    };

    Ok(EvalReport {
        mode: matrix.mode.as_str().to_string(),
        threshold_policy: policy.describe(),
        per_class,
        macro_auc,
        macro_f1,
        macro_acc,
        argmax_accuracy,
        samples: m,
        checkpoint_fingerprint: matrix.checkpoint_fingerprint.clone(),
        bank_fingerprint: matrix.bank_fingerprint.clone(),
    })
}

/// Score a dataset split against the bank and compute the full report.
pub fn evaluate(
    model: &dyn Backbone,
    projections: &ProjectionSet,
    bank: &KnowledgeBank,
    dataset: &Dataset,
    split: Split,
    policy: ThresholdPolicy,
    opts: &ScoreOptions,
) -> Result<EvalReport> {
    ensure_category_match(dataset, &bank.corpus)?;
    let indices = dataset.split_indices(split);
    if indices.is_empty() {
        return Err(Error::data(format!(
            "{} split is empty",
            split.as_str()
        )));
    }
    let samples: Vec<&PairedSample> = indices.iter().map(|&i| &dataset.samples[i]).collect();
    let matrix = score_images(model, projections, bank, &samples, opts)?;
    let labels = dataset.labels_matrix(&indices);

    let val_pack = if matches!(policy, ThresholdPolicy::YoudenOnVal) {
        let vidx = dataset.split_indices(Split::Val);
        if vidx.is_empty() {
            return Err(Error::data(
                "youden_on_val requested but the val split is empty",
            ));
        }
        let vsamples: Vec<&PairedSample> = vidx.iter().map(|&i| &dataset.samples[i]).collect();
        let vmatrix = score_images(model, projections, bank, &vsamples, opts)?;
        let vlabels = dataset.labels_matrix(&vidx);
        Some((vmatrix, vlabels))
    } else {
        None
    };
    report_from_scores(
        &matrix,
        &labels,
        &dataset.manifest.category_names,
        policy,
        val_pack.as_ref().map(|(s, l)| (s, l)),
    )
}
