//! Task and contrastive objectives.
//!
//! The differentiable versions live on the [`Tape`](crate::tape::Tape)
//! (`mae`, `graphcl`); the functions here evaluate the same quantities on
//! plain arrays for reporting and checks.

use ndarray::{Array2, ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UrclError};
use crate::tape::{graphcl_from_sym, graphcl_parts};

/// Cosine similarity of `p` and `z` with `z` treated as a constant.
/// A zero vector on either side yields 0.
pub fn cosine_similarity_stopgrad(p: &[f64], z: &[f64]) -> f64 {
    assert_eq!(p.len(), z.len(), "cosine similarity of unequal lengths");
    let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if np == 0.0 || nz == 0.0 {
        log::warn!("cosine similarity with a zero-norm vector; returning 0");
        return 0.0;
    }
    p.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / (np * nz)
}

/// Projected (`p`) and encoded (`z`) vectors for both augmented views, `[S, D]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPairEmbeddings {
    pub p1: Array2<f64>,
    pub p2: Array2<f64>,
    pub z1: Array2<f64>,
    pub z2: Array2<f64>,
}

/// Symmetric contrastive batch loss. The positive pair appears only in the
/// numerator; the denominator runs over the other samples.
pub fn graphcl_batch_loss(pairs: &ViewPairEmbeddings, tau: f64) -> Result<f64> {
    let s = pairs.p1.nrows();
    if s < 2 {
        return Err(UrclError::contract(format!(
            "contrastive loss needs at least 2 pairs, got {s}"
        )));
    }
    if !(tau > 0.0) {
        return Err(UrclError::contract("temperature must be positive"));
    }
    for m in [&pairs.p2, &pairs.z1, &pairs.z2] {
        if m.dim() != pairs.p1.dim() {
            return Err(UrclError::contract("view embeddings differ in shape"));
        }
    }
    let parts = graphcl_parts(
        pairs.p1.view(),
        pairs.p2.view(),
        pairs.z1.view(),
        pairs.z2.view(),
    );
    Ok(graphcl_from_sym(&parts.sym, tau).0)
}

/// Contrastive loss from a precomputed symmetric similarity matrix.
pub fn graphcl_loss_from_similarities(sym: &Array2<f64>, tau: f64) -> Result<f64> {
    if sym.nrows() < 2 || sym.nrows() != sym.ncols() {
        return Err(UrclError::contract("similarity matrix must be square with S >= 2"));
    }
    Ok(graphcl_from_sym(sym, tau).0)
}

pub fn task_loss_mae(prediction: &ArrayD<f64>, target: &ArrayD<f64>) -> Result<f64> {
    if prediction.shape() != target.shape() {
        return Err(UrclError::contract(format!(
            "prediction shape {:?} vs target shape {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    if prediction.is_empty() {
        return Err(UrclError::contract("empty prediction"));
    }
    let total = Zip::from(prediction)
        .and(target)
        .fold(0.0, |acc, &p, &t| acc + (p - t).abs());
    Ok(total / prediction.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub ssl: f64,
    pub total: f64,
}

pub fn total_loss(task: f64, ssl: f64) -> Result<LossBreakdown> {
    if !task.is_finite() || !ssl.is_finite() {
        return Err(UrclError::Numerical(format!(
            "non-finite loss component (task {task}, ssl {ssl})"
        )));
    }
    Ok(LossBreakdown {
        task,
        ssl,
        total: task + ssl,
    })
}
