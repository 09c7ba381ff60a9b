//! Regression losses between a prediction and a target matrix, plus the
//! two classification objectives used for fine-tuning and AdaMerging.
//!
//! Every loss is mean-reduced. The element-wise losses average over all
//! `N·k` entries; `NegCosine` averages over the `N` rows.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    Mse,
    SmoothL1,
    NegCosine,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::L1,
        LossKind::Mse,
        LossKind::SmoothL1,
        LossKind::NegCosine,
    ];

    /// Smallest value the loss can take; the offset used when comparing
    /// relative reductions.
    pub fn lower_bound(self) -> f64 {
        match self {
            LossKind::NegCosine => -1.0,
            _ => 0.0,
        }
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::Mse => "mse",
            LossKind::SmoothL1 => "smoothl1",
            LossKind::NegCosine => "negcos",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossKind::L1),
            "mse" => Ok(LossKind::Mse),
            "smoothl1" | "smooth_l1" => Ok(LossKind::SmoothL1),
            "negcos" | "neg_cosine" => Ok(LossKind::NegCosine),
            other => Err(Error::Config(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// A loss kind together with its tunable constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Loss {
    pub kind: LossKind,
    /// Transition point between the quadratic and linear parts of `SmoothL1`.
    pub smooth_l1_delta: f32,
}

impl Loss {
    pub const DEFAULT_SMOOTH_L1_DELTA: f32 = 1.0;

    pub fn new(kind: LossKind) -> Self {
        Loss {
            kind,
            smooth_l1_delta: Self::DEFAULT_SMOOTH_L1_DELTA,
        }
    }

    fn check(&self, pred: &Tensor, target: &Tensor) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::shape("loss", pred.shape(), target.shape()));
        }
        if pred.is_empty() {
            return Err(Error::Degenerate("loss over an empty batch".into()));
        }
        if self.kind == LossKind::SmoothL1 && !(self.smooth_l1_delta > 0.0) {
            return Err(Error::Config("smooth_l1 delta must be positive".into()));
        }
        Ok(())
    }

    pub fn value(&self, pred: &Tensor, target: &Tensor) -> Result<f64> {
        self.check(pred, target)?;
        let n = pred.len() as f64;
        let pairs = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| p as f64 - t as f64);
        let v = match self.kind {
            LossKind::L1 => pairs.map(f64::abs).sum::<f64>() / n,
            LossKind::Mse => pairs.map(|d| d * d).sum::<f64>() / n,
            LossKind::SmoothL1 => {
                let delta = self.smooth_l1_delta as f64;
                pairs
                    .map(|d| {
                        if d.abs() < delta {
                            0.5 * d * d / delta
                        } else {
                            d.abs() - 0.5 * delta
                        }
                    })
                    .sum::<f64>()
                    / n
            }
            LossKind::NegCosine => {
                let rows = pred.rows();
                let mut total = 0.0;
                for i in 0..rows {
                    let (dot, pn, tn) = row_stats(pred.row(i), target.row(i));
                    if pn == 0.0 || tn == 0.0 {
                        return Err(Error::Degenerate(format!(
                            "zero-norm row {i} under neg_cosine"
                        )));
                    }
                    total -= dot / (pn * tn);
                }
                total / rows as f64
            }
        };
        Ok(v)
    }

    /// Gradient of [`Loss::value`] with respect to `pred`.
    pub fn grad(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        self.check(pred, target)?;
        let n = pred.len() as f64;
        let p = pred.data();
        let t = target.data();
        let mut g = vec![0.0f32; p.len()];
        match self.kind {
            LossKind::L1 => {
                for i in 0..p.len() {
                    let d = p[i] as f64 - t[i] as f64;
                    g[i] = (sign(d) / n) as f32;
                }
            }
            LossKind::Mse => {
                for i in 0..p.len() {
                    g[i] = (2.0 * (p[i] as f64 - t[i] as f64) / n) as f32;
                }
            }
            LossKind::SmoothL1 => {
                let delta = self.smooth_l1_delta as f64;
                for i in 0..p.len() {
                    let d = p[i] as f64 - t[i] as f64;
                    let gi = if d.abs() < delta { d / delta } else { sign(d) };
                    g[i] = (gi / n) as f32;
                }
            }
            LossKind::NegCosine => {
                let rows = pred.rows();
                let cols = pred.cols();
                for r in 0..rows {
                    let (pr, tr) = (pred.row(r), target.row(r));
                    let (dot, pn, tn) = row_stats(pr, tr);
                    if pn == 0.0 || tn == 0.0 {
                        return Err(Error::Degenerate(format!(
                            "zero-norm row {r} under neg_cosine"
                        )));
                    }
                    let inv = 1.0 / (pn * tn);
                    let proj = dot / (pn * pn * pn * tn);
                    for j in 0..cols {
                        let d = -(tr[j] as f64 * inv - pr[j] as f64 * proj);
                        g[r * cols + j] = (d / rows as f64) as f32;
                    }
                }
            }
        }
        Ok(Tensor::from_parts(pred.shape().to_vec(), g))
    }
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn row_stats(p: &[f32], t: &[f32]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut pn = 0.0;
    let mut tn = 0.0;
    for (&a, &b) in p.iter().zip(t) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        pn += a * a;
        tn += b * b;
    }
    (dot, pn.sqrt(), tn.sqrt())
}

/// Row-wise softmax computed in `f64`.
pub(crate) fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        })
        .collect()
}

/// Mean softmax cross-entropy of `logits` (N×c) against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = (logits.rows(), logits.cols());
    if labels.len() != n || n == 0 {
        return Err(Error::shape(
            "cross_entropy",
            logits.shape(),
            &[labels.len()],
        ));
    }
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = vec![0.0f32; n * c];
    for (i, (p, &y)) in probs.iter().zip(labels).enumerate() {
        if y >= c {
            return Err(Error::Usage(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        for j in 0..c {
            let onehot = if j == y { 1.0 } else { 0.0 };
            grad[i * c + j] = ((p[j] - onehot) / n as f64) as f32;
        }
    }
    Ok((
        loss / n as f64,
        Tensor::from_parts(logits.shape().to_vec(), grad),
    ))
}

/// Mean Shannon entropy of the row-wise softmax of `logits`, with its gradient.
pub fn prediction_entropy(logits: &Tensor) -> Result<(f64, Tensor)> {
    let (n, c) = (logits.rows(), logits.cols());
    if n == 0 || c == 0 {
        return Err(Error::Degenerate("entropy over an empty batch".into()));
    }
    let probs = softmax_rows(logits);
    let mut total = 0.0;
    let mut grad = vec![0.0f32; n * c];
    for (i, p) in probs.iter().enumerate() {
        let h: f64 = -p
            .iter()
            .filter(|&&q| q > 0.0)
            .map(|&q| q * q.ln())
            .sum::<f64>();
        total += h;
        for j in 0..c {
            let lp = if p[j] > 0.0 { p[j].ln() } else { 0.0 };
            grad[i * c + j] = (-p[j] * (lp + h) / n as f64) as f32;
        }
    }
    Ok((
        total / n as f64,
        Tensor::from_parts(logits.shape().to_vec(), grad),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identical_inputs_give_zero_l1() {
        let a = m(&[&[1.0, -2.0], &[0.5, 3.0]]);
        assert_eq!(Loss::new(LossKind::L1).value(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn l1_hand_value() {
        let v = Loss::new(LossKind::L1)
            .value(&m(&[&[1.0, 2.0]]), &m(&[&[0.0, 4.0]]))
            .unwrap();
        assert_eq!(v, 1.5);
    }

    #[test]
    fn parallel_rows_give_minus_one() {
        let v = Loss::new(LossKind::NegCosine)
            .value(&m(&[&[1.0, 2.0, 3.0]]), &m(&[&[2.0, 4.0, 6.0]]))
            .unwrap();
        assert!((v + 1.0).abs() < 1e-12);
    }

    #[test]
    fn neg_cosine_zero_row_is_degenerate() {
        let err = Loss::new(LossKind::NegCosine)
            .value(&m(&[&[0.0, 0.0]]), &m(&[&[1.0, 0.0]]))
            .unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let err = Loss::new(LossKind::Mse)
            .value(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2, 3]))
            .unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn smooth_l1_switches_at_delta() {
        let loss = Loss::new(LossKind::SmoothL1);
        let small = loss.value(&m(&[&[0.5]]), &m(&[&[0.0]])).unwrap();
        let large = loss.value(&m(&[&[3.0]]), &m(&[&[0.0]])).unwrap();
        assert_eq!(small, 0.125);
        assert_eq!(large, 2.5);
    }

    #[test]
    fn uniform_logits_have_log_c_entropy() {
        let (h, g) = prediction_entropy(&Tensor::zeros(&[3, 4])).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-12);
        assert!(g.data().iter().all(|v| v.abs() < 1e-7));
    }

    #[test]
    fn parse_round_trip() {
        for kind in LossKind::ALL {
            assert_eq!(kind.cli_name().parse::<LossKind>().unwrap(), kind);
        }
        assert!("huber".parse::<LossKind>().is_err());
    }
}
