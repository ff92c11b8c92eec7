//! Loss terms: source cross-entropy, the domain-adversarial loss, the
//! transport loss and its cosine / embedded variants, minimum class
//! confusion, and their weighted total.
//!
//! Every function builds nodes on a caller-supplied [`Tape`] and returns a
//! `1×1` node, so the terms can be summed and differentiated together.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Distance kept from 0 and 1 inside the adversarial log terms.
pub const ADV_CLAMP: f64 = 1e-7;
/// Added to row norms in the cosine transport loss.
pub const COS_EPS: f64 = 1e-8;
/// Guards the row normalisation of the class-confusion matrix.
pub const MCC_EPS: f64 = 1e-12;
pub const DEFAULT_TEMPERATURE: f64 = 2.5;

/// Transport weight used for the 31-class benchmark.
pub const OFFICE31_LAMBDA2: f64 = 0.0016;
/// Transport weight used for the 65-class benchmark.
pub const OFFICE_HOME_LAMBDA2: f64 = 0.0002;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassInfo {
    Identity,
    Custom(Matrix),
}

impl ClassInfo {
    pub fn matrix(&self, classes: usize) -> Matrix {
        match self {
            ClassInfo::Identity => Matrix::identity(classes),
            ClassInfo::Custom(m) => m.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Adversarial weight.
    pub lambda1: f64,
    /// Transport weight.
    pub lambda2: f64,
    pub temperature: f64,
    pub class_info: ClassInfo,
    /// Fixed matrix for the embedded transport variant.
    pub confusion_embed: Option<Matrix>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            temperature: DEFAULT_TEMPERATURE,
            class_info: ClassInfo::Identity,
            confusion_embed: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::param("lambda1", "must be a non-negative real"));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::param("lambda2", "must be a non-negative real"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::param("temperature", "must be positive"));
        }
        if let ClassInfo::Custom(m) = &self.class_info {
            if m.shape() != (classes, classes) {
                return Err(Error::shape("class_info", m.shape(), (classes, classes)));
            }
        }
        if let Some(m) = &self.confusion_embed {
            if m.shape() != (classes, classes) {
                return Err(Error::shape(
                    "confusion_embed",
                    m.shape(),
                    (classes, classes),
                ));
            }
        }
        Ok(())
    }
}

/// Scalar values of every loss term for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_adv: f64,
    pub l_tl: f64,
    pub l_mcc: f64,
    pub l_total: f64,
}

/// Tape handles of the individual terms feeding [`total_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_c: Var,
    pub l_adv: Var,
    pub l_tl: Var,
    pub l_mcc: Var,
}

/// Mean cross-entropy of `logits` against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = tape.shape(logits);
    if labels.len() != b {
        return Err(Error::shape("cross_entropy", (b, c), (labels.len(), 1)));
    }
    if b == 0 {
        return Err(Error::param("labels", "empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Index {
            op: "cross_entropy",
            index: bad,
            bound: c,
        });
    }
    let onehot = Matrix::from_fn(b, c, |i, j| if labels[i] == j { 1.0 } else { 0.0 });
    let onehot = tape.constant(onehot);
    let logp = tape.log_softmax_rows(logits, 1.0)?;
    let picked = tape.mul(logp, onehot)?;
    let s = tape.sum_all(picked);
    Ok(tape.scale(s, -1.0 / b as f64))
}

// NaN passes so that it surfaces later as a non-finite loss.
#[allow(clippy::manual_range_contains)]
fn check_probabilities(tape: &Tape, v: Var) -> Result<()> {
    if let Some(bad) = tape.value(v).data().iter().find(|&&p| p < 0.0 || p > 1.0) {
        return Err(Error::Domain {
            op: "adversarial_loss",
            detail: format!("discriminator output {bad} outside [0,1]"),
        });
    }
    Ok(())
}

/// Binary cross-entropy of the discriminator, source labelled 1 and
/// target labelled 0, each half averaged over its own batch.
pub fn adversarial_loss(tape: &mut Tape, disc_src: Var, disc_tgt: Var) -> Result<Var> {
    for v in [disc_src, disc_tgt] {
        let s = tape.shape(v);
        if s.1 != 1 || s.0 == 0 {
            return Err(Error::shape("adversarial_loss", s, (s.0.max(1), 1)));
        }
        check_probabilities(tape, v)?;
    }
    let src = tape.clamp(disc_src, ADV_CLAMP, 1.0 - ADV_CLAMP);
    let log_src = tape.log(src)?;
    let term_src = tape.mean(log_src);

    let tgt = tape.clamp(disc_tgt, ADV_CLAMP, 1.0 - ADV_CLAMP);
    let neg = tape.neg(tgt);
    let one_minus = tape.add_scalar(neg, 1.0);
    let log_tgt = tape.log(one_minus)?;
    let term_tgt = tape.mean(log_tgt);

    let sum = tape.add(term_src, term_tgt)?;
    Ok(tape.neg(sum))
}

/// Bilinear yield `Y = t1 · class_info · t2ᵀ`, a `B×B` matrix.
pub fn transport_yield(tape: &mut Tape, t1: Var, class_info: &Matrix, t2: Var) -> Result<Var> {
    let (s1, s2) = (tape.shape(t1), tape.shape(t2));
    if s1.1 != s2.1 {
        return Err(Error::shape("transport_yield", s1, s2));
    }
    if class_info.shape() != (s1.1, s1.1) {
        return Err(Error::shape(
            "transport_yield",
            class_info.shape(),
            (s1.1, s1.1),
        ));
    }
    let ci = tape.constant(class_info.clone());
    let left = tape.matmul(t1, ci)?;
    let t2t = tape.transpose(t2);
    tape.matmul(left, t2t)
}

/// `|Σ(Y) - Tr(Y)|`, the absolute off-diagonal sum.
pub fn transport_loss(tape: &mut Tape, y: Var) -> Result<Var> {
    let total = tape.sum_all(y);
    let diag = tape.trace(y)?;
    let off = tape.sub(total, diag)?;
    Ok(tape.abs(off))
}

/// Transport loss over pairwise cosine similarities of the rows.
pub fn transport_loss_cos(tape: &mut Tape, t1: Var, t2: Var) -> Result<Var> {
    let (s1, s2) = (tape.shape(t1), tape.shape(t2));
    if s1 != s2 {
        return Err(Error::shape("transport_loss_cos", s1, s2));
    }
    let n1 = unit_rows(tape, t1)?;
    let n2 = unit_rows(tape, t2)?;
    let n2t = tape.transpose(n2);
    let y = tape.matmul(n1, n2t)?;
    transport_loss(tape, y)
}

fn unit_rows(tape: &mut Tape, t: Var) -> Result<Var> {
    let norms = tape.row_norms(t);
    let padded = tape.add_scalar(norms, COS_EPS);
    tape.div_col_broadcast(t, padded)
}

/// Transport loss with a fixed class-confusion matrix inside the bilinear form.
pub fn transport_loss_embedded(tape: &mut Tape, t1: Var, t2: Var, m: &Matrix) -> Result<Var> {
    let y = transport_yield(tape, t1, m, t2)?;
    transport_loss(tape, y)
}

/// Minimum class confusion on a batch of logits.
pub fn mcc_loss(tape: &mut Tape, logits: Var, temperature: f64) -> Result<Var> {
    let (b, c) = tape.shape(logits);
    if b == 0 {
        return Err(Error::param("logits", "empty batch"));
    }
    let probs = tape.softmax_rows(logits, temperature)?;
    let logp = tape.log_softmax_rows(logits, temperature)?;
    let plogp = tape.mul(probs, logp)?;
    // row_sum(p·log p) is the negative entropy
    let neg_entropy = tape.row_sum(plogp);
    let as_row = tape.transpose(neg_entropy);
    let soft = tape.softmax_rows(as_row, 1.0)?;
    let soft = tape.transpose(soft);
    let weights = tape.scale(soft, b as f64);

    let weighted = tape.mul_col_broadcast(probs, weights)?;
    let probs_t = tape.transpose(probs);
    let confusion = tape.matmul(probs_t, weighted)?;
    let row_totals = tape.row_sum(confusion);
    let row_totals = tape.add_scalar(row_totals, MCC_EPS);
    let normalized = tape.div_col_broadcast(confusion, row_totals)?;

    let total = tape.sum_all(normalized);
    let diag = tape.trace(normalized)?;
    let off = tape.sub(total, diag)?;
    Ok(tape.scale(off, 1.0 / c as f64))
}

/// `l_c + λ1·l_adv + λ2·l_tl (+ l_mcc)`.
pub fn total_loss(
    tape: &mut Tape,
    parts: &LossTerms,
    weights: &LossWeights,
    mcc_enabled: bool,
) -> Result<(Var, LossBreakdown)> {
    let adv = tape.scale(parts.l_adv, weights.lambda1);
    let tl = tape.scale(parts.l_tl, weights.lambda2);
    let mut total = tape.add(parts.l_c, adv)?;
    total = tape.add(total, tl)?;
    if mcc_enabled {
        total = tape.add(total, parts.l_mcc)?;
    }
    let breakdown = LossBreakdown {
        l_c: tape.value(parts.l_c).item(),
        l_adv: tape.value(parts.l_adv).item(),
        l_tl: tape.value(parts.l_tl).item(),
        l_mcc: tape.value(parts.l_mcc).item(),
        l_total: tape.value(total).item(),
    };
    Ok((total, breakdown))
}

/// MCC loss value of a fixed logit matrix.
pub fn mcc_value(logits: &Matrix, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let l = mcc_loss(&mut tape, z, temperature)?;
    Ok(tape.value(l).item())
}
