//! Reconstruction, velocity and classification losses.
//!
//! Squared-error terms are mean squares over all elements. The array functions
//! here are the reference implementations; the `*_graph` versions record the
//! same quantities on the tape for training.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::BlendshapeSequence;
use crate::error::{Error, Result};

/// Probability floor applied before the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cross: f64,
    pub self_rec: f64,
    pub velocity: f64,
    pub classification: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cross: 1.0,
            self_rec: 1.0,
            velocity: 0.5,
            classification: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            cross: 0.0,
            self_rec: 0.0,
            velocity: 0.0,
            classification: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} = {w}, expected finite and >= 0"
                )));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("cross", self.cross),
            ("self_rec", self.self_rec),
            ("velocity", self.velocity),
            ("classification", self.classification),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cross: f64,
    pub self_rec: f64,
    pub velocity: f64,
    pub classification: f64,
    pub total: f64,
}

fn check_same(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Alignment(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn mean_square_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.len() as f64;
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

pub fn cross_reconstruction_loss(
    pred_c1e1: &BlendshapeSequence,
    pred_c2e2: &BlendshapeSequence,
    gt_c1e1: &BlendshapeSequence,
    gt_c2e2: &BlendshapeSequence,
) -> Result<f64> {
    check_same(pred_c1e1.coeffs(), gt_c1e1.coeffs())?;
    check_same(pred_c2e2.coeffs(), gt_c2e2.coeffs())?;
    Ok(mean_square_diff(pred_c1e1.coeffs(), gt_c1e1.coeffs()) + mean_square_diff(pred_c2e2.coeffs(), gt_c2e2.coeffs()))
}

pub fn self_reconstruction_loss(pred: &BlendshapeSequence, gt: &BlendshapeSequence) -> Result<f64> {
    check_same(pred.coeffs(), gt.coeffs())?;
    Ok(mean_square_diff(pred.coeffs(), gt.coeffs()))
}

pub fn velocity_loss(pred: &BlendshapeSequence, gt: &BlendshapeSequence) -> Result<f64> {
    let (p, g) = (pred.coeffs(), gt.coeffs());
    check_same(p, g)?;
    let t = p.nrows();
    if t < 2 {
        return Err(Error::Length(format!("velocity loss needs at least 2 frames, got {t}")));
    }
    let vp = &p.slice(s![1.., ..]) - &p.slice(s![..t - 1, ..]);
    let vg = &g.slice(s![1.., ..]) - &g.slice(s![..t - 1, ..]);
    Ok(mean_square_diff(&vp, &vg))
}

/// Mean negative log-likelihood of `labels` under row distributions `probs`.
pub fn classification_loss(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(probs.dim(), labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &c)| -probs[[i, c]].max(LOG_FLOOR).ln())
        .sum::<f64>()
        / labels.len() as f64)
}

fn check_labels((rows, m): (usize, usize), labels: &[usize]) -> Result<()> {
    if rows != labels.len() || rows == 0 {
        return Err(Error::Alignment(format!(
            "{rows} probability rows, {} labels",
            labels.len()
        )));
    }
    if let Some(&c) = labels.iter().find(|&&c| c >= m) {
        return Err(Error::range("label", c, m));
    }
    Ok(())
}

/// Weighted sum of the four components; non-finite components are rejected by name.
pub fn total_loss(
    cross: f64,
    self_rec: f64,
    velocity: f64,
    classification: f64,
    weights: &LossWeights,
) -> Result<LossReport> {
    for (name, v) in [
        ("cross", cross),
        ("self_rec", self_rec),
        ("velocity", velocity),
        ("classification", classification),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: name.into(),
                value: v,
            });
        }
    }
    Ok(LossReport {
        cross,
        self_rec,
        velocity,
        classification,
        total: weights.cross * cross
            + weights.self_rec * self_rec
            + weights.velocity * velocity
            + weights.classification * classification,
    })
}

pub fn mean_square_diff_graph(g: &mut Graph, pred: Var, gt: Var) -> Var {
    let d = g.sub(pred, gt);
    g.mean_square(d)
}

pub fn velocity_graph(g: &mut Graph, pred: Var, gt: Var) -> Var {
    let vp = g.row_diff(pred);
    let vg = g.row_diff(gt);
    mean_square_diff_graph(g, vp, vg)
}

pub fn classification_graph(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    check_labels(g.value(probs).dim(), labels)?;
    Ok(g.nll(probs, labels, LOG_FLOOR))
}
