//! Alignment objectives.
//!
//! Two pieces, combined by a single mixing weight:
//!
//! * Cross-feature contrastive alignment: symmetric InfoNCE over the
//!   crossed pairings (image-global vs text-local) and (image-local vs
//!   text-global). Crossing the granularities is the point; it couples
//!   the summary tokens of one modality to the token-level content of
//!   the other.
//! * Category grounding: cross-entropy of each sample's global feature
//!   (both modalities) against the knowledge bank's category rows,
//!   with a uniform soft target over the sample's positive labels.
//!
//! All softmaxes subtract the row max before exponentiating; at the
//! default temperature of 0.05 logits are scaled by 20, so the naive
//! form overflows long before training diverges for real reasons.

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::features::{FeatureBundle, TapeBundle};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

impl Reduction {
    pub fn as_str(self) -> &'static str {
        match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(Error::config(format!("unknown reduction '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Softmax temperature; similarities are divided by it.
    pub tau: f64,
    /// Weight of the contrastive term; 1 - lambda goes to grounding.
    pub lambda: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.05,
            lambda: 0.5,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
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
        Ok(())
    }
}

/// Temperature-scaled similarity matrix: (a b^T) / tau. a is B x K,
/// b is M x K, result B x M.
pub fn similarity(tape: &mut Tape, a: VarId, b: VarId, tau: f64) -> Result<VarId> {
    if !(tau > 0.0) {
        return Err(Error::config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (ka, kb) = (tape.value(a).cols(), tape.value(b).cols());
    if ka != kb {
        return Err(Error::config(format!(
            "similarity inputs disagree on feature dim: {ka} vs {kb}"
        )));
    }
    let s = tape.matmul_transpose_b(a, b);
    Ok(tape.scale(s, 1.0 / tau))
}

/// Symmetric InfoNCE over one square similarity matrix whose diagonal
/// holds the positive pairs: (1/2) sum_i of the row-wise and
/// column-wise cross-entropies, then the reduction.
pub fn info_nce_pair(tape: &mut Tape, s: VarId, reduction: Reduction) -> Result<VarId> {
    let (b, cols) = tape.value(s).shape();
    if b != cols {
        return Err(Error::config(format!(
            "info_nce needs a square matrix, got {b}x{cols}"
        )));
    }
    if b == 0 {
        return Err(Error::config("info_nce on an empty batch"));
    }
    let lsm_rows = tape.log_softmax_rows(s);
    let diag_rows = tape.trace(lsm_rows);
    let st = tape.transpose(s);
    let lsm_cols = tape.log_softmax_rows(st);
    let diag_cols = tape.trace(lsm_cols);
    let total = tape.add(diag_rows, diag_cols);
    let coef = match reduction {
        Reduction::Mean => -0.5 / b as f64,
        Reduction::Sum => -0.5,
    };
    Ok(tape.scale(total, coef))
}

/// Contrastive alignment: mean of InfoNCE over the two crossed
/// global/local pairings.
pub fn loss_ca(tape: &mut Tape, bundle: &TapeBundle, cfg: &LossConfig) -> Result<VarId> {
    cfg.validate()?;
    let s1 = similarity(tape, bundle.x_g, bundle.y_l, cfg.tau)?;
    let s2 = similarity(tape, bundle.x_l, bundle.y_g, cfg.tau)?;
    let n1 = info_nce_pair(tape, s1, cfg.reduction)?;
    let n2 = info_nce_pair(tape, s2, cfg.reduction)?;
    let sum = tape.add(n1, n2);
    Ok(tape.scale(sum, 0.5))
}

/// Uniform soft targets over each sample's positive labels. Rows with
/// no positive label stay all-zero and are excluded from the mean;
/// the second value counts participating samples.
pub fn build_soft_targets(labels: &Matrix) -> (Matrix, usize) {
    let (b, n) = labels.shape();
    let mut targets = Matrix::zeros(b, n);
    let mut participating = 0;
    for r in 0..b {
        let pos: Vec<usize> = (0..n).filter(|&c| labels.get(r, c) > 0.5).collect();
        if pos.is_empty() {
            continue;
        }
        participating += 1;
        let w = 1.0 / pos.len() as f64;
        for c in pos {
            targets.set(r, c, w);
        }
    }
    (targets, participating)
}

/// Category grounding: soft-target cross-entropy of image-global and
/// text-global features against the bank rows, averaged over the two
/// modality terms.
pub fn loss_cg(
    tape: &mut Tape,
    x_g: VarId,
    y_g: VarId,
    d_hat: VarId,
    targets: &Matrix,
    participating: usize,
    cfg: &LossConfig,
) -> Result<VarId> {
    cfg.validate()?;
    let b = tape.value(x_g).rows();
    let n = tape.value(d_hat).rows();
    if targets.shape() != (b, n) {
        return Err(Error::config(format!(
            "targets shape {:?} does not match batch {b} x categories {n}",
            targets.shape()
        )));
    }
    if participating == 0 {
        // every sample was skipped; grounding contributes nothing
        let zero = tape.constant(Matrix::zeros(1, 1));
        return Ok(zero);
    }
    let ce = |tape: &mut Tape, feats: VarId| -> Result<VarId> {
        let s = similarity(tape, feats, d_hat, cfg.tau)?;
        let lsm = tape.log_softmax_rows(s);
        let weighted = tape.mul_const(lsm, targets.clone());
        Ok(tape.sum_all(weighted))
    };
    let ce_img = ce(tape, x_g)?;
    let ce_txt = ce(tape, y_g)?;
    let total = tape.add(ce_img, ce_txt);
    let divisor = match cfg.reduction {
        Reduction::Mean => participating as f64,
        Reduction::Sum => 1.0,
    };
    Ok(tape.scale(total, -0.5 / divisor))
}

/// lambda * ca + (1 - lambda) * cg.
pub fn loss_total(tape: &mut Tape, ca: VarId, cg: VarId, lambda: f64) -> VarId {
    let a = tape.scale(ca, lambda);
    let b = tape.scale(cg, 1.0 - lambda);
    tape.add(a, b)
}

pub fn loss_total_value(ca: f64, cg: f64, lambda: f64) -> f64 {
    lambda * ca + (1.0 - lambda) * cg
}

/// Value-level contrastive loss for a computed bundle.
pub fn loss_ca_value(bundle: &FeatureBundle, cfg: &LossConfig) -> Result<f64> {
    bundle.validate()?;
    let mut tape = Tape::new();
    let tb = TapeBundle {
        x_g: tape.constant(bundle.x_g.clone()),
        x_l: tape.constant(bundle.x_l.clone()),
        y_g: tape.constant(bundle.y_g.clone()),
        y_l: tape.constant(bundle.y_l.clone()),
    };
    let l = loss_ca(&mut tape, &tb, cfg)?;
    Ok(tape.scalar(l))
}

/// Value-level grounding loss from multi-hot labels.
pub fn loss_cg_value(
    x_g: &Matrix,
    y_g: &Matrix,
    d_hat: &Matrix,
    labels: &Matrix,
    cfg: &LossConfig,
) -> Result<f64> {
    let (targets, participating) = build_soft_targets(labels);
    let mut tape = Tape::new();
    let xg = tape.constant(x_g.clone());
    let yg = tape.constant(y_g.clone());
    let dh = tape.constant(d_hat.clone());
    let l = loss_cg(&mut tape, xg, yg, dh, &targets, participating, cfg)?;
    Ok(tape.scalar(l))
}
