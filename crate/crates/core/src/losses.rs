//! Training objectives for the novelty head.
//!
//! - [`supcon_loss`]: supervised contrastive loss on the embeddings, with
//!   cosine similarity and the binary id/ood set as the positive relation.
//! - [`bce_head_loss`]: binary cross entropy on the 1D projection of a
//!   stop-gradient embedding; it only ever produces a gradient for `w`.
//! - [`joint_objective`]: the sum of the two.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::ndnet::sigmoid;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// `dL/dZ`. Exactly zero for the BCE head.
    pub grad_embeddings: Array2<f64>,
    /// `dL/dw`; `None` when the loss does not involve the projection.
    pub grad_projection: Option<Array1<f64>>,
    /// `dL/d(w . z_i)` per sample, for backpropagating the score path.
    pub grad_logits: Option<Array1<f64>>,
    pub mean_positive_similarity: f64,
    pub mean_negative_similarity: f64,
}

fn binary_labels(y: &[f64]) -> Result<Vec<bool>> {
    y.iter()
        .map(|&v| {
            if v == 1.0 {
                Ok(true)
            } else if v == 0.0 {
                Ok(false)
            } else {
                Err(Error::NonBinaryLabel(v))
            }
        })
        .collect()
}

/// Supervised contrastive loss over a batch of embeddings.
///
/// `labels` are id (1) / ood (0) set memberships. Anchors without any
/// same-label partner are left out of the outer mean but still appear in
/// every other anchor's denominator.
pub fn supcon_loss(z: ArrayView2<f64>, labels: &[f64], temperature: f64) -> Result<LossOutput> {
    let n = z.nrows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} embeddings", labels.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature {temperature} must be > 0")));
    }
    if n < 2 {
        return Err(Error::Insufficient("contrastive batch needs at least 2 samples".into()));
    }
    let labels = binary_labels(labels)?;

    let norms: Array1<f64> = z.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    if let Some(index) = norms.iter().position(|&v| v == 0.0 || !v.is_finite()) {
        return Err(Error::ZeroNorm { index });
    }
    let unit = &z / &norms.view().insert_axis(Axis(1));
    let cos = unit.dot(&unit.t());

    let positives: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && labels[j] == labels[i]).count())
        .collect();
    let contributing = positives.iter().filter(|&&p| p > 0).count();
    if contributing == 0 {
        return Err(Error::NoPositivePairs);
    }
    let scale = 1.0 / contributing as f64;

    // dL/dsim_ij, before the 1/tau factor of the logits.
    let mut g = Array2::<f64>::zeros((n, n));
    let mut value = 0.0;
    let (mut pos_sum, mut pos_n, mut neg_sum, mut neg_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                pos_sum += cos[[i, j]];
                pos_n += 1;
            } else {
                neg_sum += cos[[i, j]];
                neg_n += 1;
            }
        }
        if positives[i] == 0 {
            continue;
        }
        let logits = cos.row(i).mapv(|c| c / temperature);
        let max = (0..n).filter(|&j| j != i).map(|j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&j| j != i).map(|j| (logits[j] - max).exp()).sum();
        let log_denom = max + denom.ln();
        let inv_p = 1.0 / positives[i] as f64;
        let mut term = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let soft = (logits[j] - log_denom).exp();
            let pos = if labels[j] == labels[i] { inv_p } else { 0.0 };
            if pos > 0.0 {
                term -= pos * (logits[j] - log_denom);
            }
            g[[i, j]] = scale * (soft - pos) / temperature;
        }
        value += scale * term;
    }

    // sim_ij = u_i . u_j, so dL/du_i = sum_j (g_ij + g_ji) u_j.
    let sym = &g + &g.t();
    let d_unit = sym.dot(&unit);
    // Through u = z / |z|: dz = (d_u - (d_u . u) u) / |z|.
    let mut grad = d_unit.clone();
    for ((mut row, u), &norm) in grad.rows_mut().into_iter().zip(unit.rows()).zip(norms.iter()) {
        let radial = row.dot(&u);
        row.scaled_add(-radial, &u);
        row /= norm;
    }

    Ok(LossOutput {
        value,
        grad_embeddings: grad,
        grad_projection: None,
        grad_logits: None,
        mean_positive_similarity: if pos_n > 0 { pos_sum / pos_n as f64 } else { 0.0 },
        mean_negative_similarity: if neg_n > 0 { neg_sum / neg_n as f64 } else { 0.0 },
    })
}

/// Mean BCE of `sigmoid(logit)` against targets in `[0, 1]`, with
/// `dL/dlogit`.
///
/// Soft targets come from mixup; callers wanting strict binary labels go
/// through [`bce_head_loss`].
pub fn bce_with_logits(logits: ArrayView1<f64>, targets: &[f64]) -> Result<(f64, Array1<f64>)> {
    let n = logits.len();
    if targets.len() != n {
        return Err(Error::ShapeMismatch(format!("{} targets for {n} logits", targets.len())));
    }
    if n == 0 {
        return Err(Error::Empty("batch"));
    }
    if let Some(&bad) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::NonBinaryLabel(bad));
    }
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Array1::zeros(n);
    for (i, (&s, &y)) in logits.iter().zip(targets).enumerate() {
        let nu = sigmoid(s);
        let p = nu.clamp(PROB_EPS, 1.0 - PROB_EPS);
        value -= inv_n * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        grad[i] = inv_n * (nu - y);
    }
    Ok((value, grad))
}

/// BCE on the projection `nu_i = sigmoid(w . st(z_i))`.
///
/// The embedding is treated as a constant: `grad_embeddings` is all zeros
/// and only `grad_projection` is populated.
pub fn bce_head_loss(z: ArrayView2<f64>, y: &[f64], w: ArrayView1<f64>) -> Result<LossOutput> {
    if z.ncols() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            found: z.ncols(),
        });
    }
    binary_labels(y)?;
    let logits = z.dot(&w);
    let (value, grad_logits) = bce_with_logits(logits.view(), y)?;
    let grad_projection = z.t().dot(&grad_logits);
    Ok(LossOutput {
        value,
        grad_embeddings: Array2::zeros(z.raw_dim()),
        grad_projection: Some(grad_projection),
        grad_logits: Some(grad_logits),
        mean_positive_similarity: 0.0,
        mean_negative_similarity: 0.0,
    })
}

/// SupCon plus detached BCE. `dL/dZ` comes only from the contrastive term,
/// `dL/dw` only from the BCE term.
pub fn joint_objective(z: ArrayView2<f64>, y: &[f64], w: ArrayView1<f64>, temperature: f64) -> Result<LossOutput> {
    let con = supcon_loss(z, y, temperature)?;
    let bce = bce_head_loss(z, y, w)?;
    Ok(LossOutput {
        value: con.value + bce.value,
        grad_embeddings: con.grad_embeddings,
        grad_projection: bce.grad_projection,
        grad_logits: bce.grad_logits,
        mean_positive_similarity: con.mean_positive_similarity,
        mean_negative_similarity: con.mean_negative_similarity,
    })
}
