//! Training objectives: BCE on fused logits, label-aware contrastive separation on
//! logits, alignment of main representations with burn-in vectors, and their sum.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::{stable_sigmoid, AutodiffError, Real, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Distance between a label and a logit inside the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DisKind {
    /// `(y - sigmoid(l))^2`
    #[default]
    SquaredProb,
    /// Binary cross-entropy of the logit against the label.
    Bce,
}

impl fmt::Display for DisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DisKind::SquaredProb => "squared-prob",
            DisKind::Bce => "bce",
        })
    }
}

impl FromStr for DisKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "squared-prob" => Ok(DisKind::SquaredProb),
            "bce" => Ok(DisKind::Bce),
            other => Err(format!("unknown distance '{other}' (squared-prob | bce)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub tau: f64,
    pub dis: DisKind,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 1e-5,
            lambda: 1e-5,
            tau: 1.0,
            dis: DisKind::SquaredProb,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: &str| Err(ObjectiveError::Weights(m.to_string()));
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad("tau must be positive");
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(ObjectiveError::Weights(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss values of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub main: f64,
    pub sccl: f64,
    pub align: f64,
    /// `lambda * ||theta||^2` over the trained parameters.
    pub decay: f64,
    pub total: f64,
    pub batch_size: usize,
}

impl LossReport {
    /// Size-weighted running mean with another report.
    pub fn merge(&mut self, other: &LossReport) {
        let n = (self.batch_size + other.batch_size) as f64;
        if n == 0.0 {
            return;
        }
        let (a, b) = (self.batch_size as f64 / n, other.batch_size as f64 / n);
        self.main = a * self.main + b * other.main;
        self.sccl = a * self.sccl + b * other.sccl;
        self.align = a * self.align + b * other.align;
        self.decay = a * self.decay + b * other.decay;
        self.total = a * self.total + b * other.total;
        self.batch_size += other.batch_size;
    }
}

/// Mean BCE of `[N x 1]` logits against labels.
pub fn bce_main<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[T]) -> Result<Var, AutodiffError> {
    let per = tape.bce_with_logits(logits, labels)?;
    tape.mean(per)
}

/// Per-row distances of `[N x 1]` logits to their labels.
pub fn dis<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[T], kind: DisKind) -> Result<Var, AutodiffError> {
    match kind {
        DisKind::SquaredProb => {
            let p = tape.sigmoid(logits);
            let y = tape.constant(Tensor::column(labels.to_vec()));
            let diff = tape.sub(y, p)?;
            Ok(tape.square(diff))
        }
        DisKind::Bce => tape.bce_with_logits(logits, labels),
    }
}

/// Mean contrastive separation loss over the batch.
///
/// For target `i` with augmented logit `l_i` and negative logits `n_k` (rows
/// `neg_offsets[i]..neg_offsets[i + 1]` of `neg_logits`), the loss is
/// `-ln(exp(-d_a/tau) / (exp(-d_a/tau) + sum_k exp(-d_k/tau)))`. Targets without
/// negatives contribute exactly zero.
pub fn sccl<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    neg_logits: Option<Var>,
    neg_offsets: &[usize],
    labels: &[T],
    tau: f64,
    kind: DisKind,
) -> Result<Var, AutodiffError> {
    let b = labels.len();
    let d_a = dis(tape, logits, labels, kind)?;
    let Some(neg) = neg_logits else {
        let z = tape.scale(d_a, 0.0);
        return tape.mean(z);
    };
    let mut neg_labels = Vec::with_capacity(neg_offsets[b]);
    for (i, w) in neg_offsets.windows(2).enumerate() {
        neg_labels.extend(std::iter::repeat_n(labels[i], w[1] - w[0]));
    }
    let d_n = dis(tape, neg, &neg_labels, kind)?;
    let s_a = tape.scale(d_a, -1.0 / tau);
    let s_n = tape.scale(d_n, -1.0 / tau);
    let all = tape.concat_rows(&[s_a, s_n])?;
    let mut index = Vec::with_capacity(b + neg_offsets[b]);
    let mut offsets = Vec::with_capacity(b + 1);
    offsets.push(0);
    for (i, w) in neg_offsets.windows(2).enumerate() {
        index.push(i);
        index.extend((w[0]..w[1]).map(|r| b + r));
        offsets.push(index.len());
    }
    let grouped = tape.gather_rows(all, &index)?;
    let lse = tape.segment_logsumexp(grouped, &offsets)?;
    let pos = tape.scale(d_a, 1.0 / tau);
    let per = tape.add(lse, pos)?;
    tape.mean(per)
}

/// Mean squared Euclidean distance between rows of `e` and `h`.
pub fn align<T: Real>(tape: &mut Tape<T>, e: Var, h: Var) -> Result<Var, AutodiffError> {
    let diff = tape.sub(e, h)?;
    let sq = tape.square(diff);
    let per = tape.row_sum(sq)?;
    tape.mean(per)
}

/// `main + alpha * sccl + beta * align`; decay is applied by the optimiser.
pub fn total<T: Real>(tape: &mut Tape<T>, main: Var, sccl: Var, align: Var, w: &LossWeights) -> Result<Var, AutodiffError> {
    let a = tape.scale(sccl, w.alpha);
    let b = tape.scale(align, w.beta);
    let t = tape.add(main, a)?;
    tape.add(t, b)
}

/// Plain-value forms of the objectives.
pub mod value {
    use super::*;

    pub fn dis(y: f64, logit: f64, kind: DisKind) -> f64 {
        match kind {
            DisKind::SquaredProb => (y - stable_sigmoid(logit)).powi(2),
            DisKind::Bce => logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p(),
        }
    }

    pub fn bce_main(logits: &[f64], labels: &[f64]) -> Result<f64, AutodiffError> {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::column(logits.to_vec()));
        let v = super::bce_main(&mut tape, l, labels)?;
        Ok(tape.scalar(v))
    }

    /// Contrastive loss of one sample.
    pub fn sccl(y: f64, aug_logit: f64, neg_logits: &[f64], tau: f64, kind: DisKind) -> Result<f64, AutodiffError> {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::column(vec![aug_logit]));
        let n = (!neg_logits.is_empty()).then(|| tape.constant(Tensor::column(neg_logits.to_vec())));
        let v = super::sccl(&mut tape, l, n, &[0, neg_logits.len()], &[y], tau, kind)?;
        Ok(tape.scalar(v))
    }

    /// Contrastive loss from precomputed distances.
    pub fn sccl_from_distances(d_a: f64, d_neg: &[f64], tau: f64) -> f64 {
        if d_neg.is_empty() {
            return 0.0;
        }
        let s: Vec<f64> = std::iter::once(-d_a / tau).chain(d_neg.iter().map(|d| -d / tau)).collect();
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + d_a / tau
    }

    pub fn align(e: &[Vec<f64>], h: &[Vec<f64>]) -> Result<f64, AutodiffError> {
        let dim = e.first().map_or(0, Vec::len);
        let flat = |rows: &[Vec<f64>]| -> Result<Tensor<f64>, AutodiffError> {
            Tensor::new(vec![rows.len(), dim], rows.iter().flatten().copied().collect())
        };
        let mut tape = Tape::<f64>::new();
        let ev = tape.constant(flat(e)?);
        let hv = tape.constant(flat(h)?);
        let v = super::align(&mut tape, ev, hv)?;
        Ok(tape.scalar(v))
    }

    pub fn total(main: f64, sccl: f64, align: f64, w: &LossWeights) -> f64 {
        main + w.alpha * sccl + w.beta * align
    }
}

#[cfg(test)]
mod tests {
    use super::value;
    use super::*;

    #[test]
    fn bce_examples() {
        assert!((value::bce_main(&[0.0], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((value::bce_main(&[20.0], &[1.0]).unwrap() - 2.061e-9).abs() < 1e-11);
        assert!((value::bce_main(&[0.0, 0.0], &[1.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn dis_examples() {
        assert_eq!(value::dis(1.0, 0.0, DisKind::SquaredProb), 0.25);
        assert!(value::dis(1.0, 1e3, DisKind::SquaredProb) < 1e-300);
        assert!((value::dis(0.0, 3f64.ln(), DisKind::SquaredProb) - 0.5625).abs() < 1e-12);
    }

    #[test]
    fn sccl_examples() {
        assert_eq!(value::sccl(1.0, 0.3, &[], 1.0, DisKind::SquaredProb).unwrap(), 0.0);
        let sym = value::sccl(1.0, 0.7, &[0.7; 5], 1.0, DisKind::SquaredProb).unwrap();
        assert!((sym - 6f64.ln()).abs() < 1e-12);
        let two = value::sccl_from_distances(0.0, &[1.0, 1.0], 1.0);
        assert!((two - (1.0 + 2.0 * (-1f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn align_examples() {
        assert_eq!(value::align(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]).unwrap(), 0.0);
        assert_eq!(value::align(&[vec![1.0; 4]], &[vec![0.0; 4]]).unwrap(), 4.0);
        let e = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        let h = vec![vec![0.0, 0.0], vec![0.0, 1.0 - 2f64.sqrt()]];
        assert!((value::align(&e, &h).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert!((value::total(1.0, 2.0, 3.0, &w) - 1.00203).abs() < 1e-12);
        let z = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            lambda: 0.0,
            ..w
        };
        assert_eq!(value::total(0.8, 5.0, 7.0, &z), 0.8);
        assert_eq!((w.alpha, w.beta, w.tau), (1e-3, 1e-5, 1.0));
    }

    #[test]
    fn weights_validation() {
        let w = LossWeights {
            tau: 0.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
        let w = LossWeights {
            alpha: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn batched_sccl_mixes_empty_and_full_samples() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::column(vec![0.2, -0.5]));
        let n = tape.constant(Tensor::column(vec![1.0, -1.0]));
        let v = sccl(&mut tape, l, Some(n), &[0, 0, 2], &[1.0, 0.0], 1.0, DisKind::SquaredProb).unwrap();
        let one = value::sccl(0.0, -0.5, &[1.0, -1.0], 1.0, DisKind::SquaredProb).unwrap();
        assert!((tape.scalar(v) - one / 2.0).abs() < 1e-12);
    }
}
