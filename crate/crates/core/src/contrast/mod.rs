//! Siamese contrast: distances, the two-term suppressed-contrast loss,
//! momentum updates and MSE-based mutual-information diagnostics.

mod siamese;

pub use siamese::{HeadCache, SiameseNet, StepSettings, Targets, ViewOutputs};

use crate::config::Mode;
use crate::error::{Error, Result};
use crate::nn::{Mat, Param, Real};

/// `B x D` projected or predicted representations.
pub type EmbeddingBatch<T> = Mat<T>;

/// `(1/2) ln(2 pi) + 1/2`, the Gaussian constant in the MSE bound.
pub const GAUSSIAN_CONST: f64 = 1.418_938_533_204_672_7;

/// One step's loss decomposition and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    /// Base contrast term (symmetrised over the two views).
    pub d_orig: f64,
    /// Contrast between the top-branch target and the suppressed view.
    pub d_supp: f64,
    pub lambda: f64,
    pub total: f64,
    /// Mean squared difference of normalised target and unsuppressed output.
    pub mse_orig: f64,
    /// Mean squared difference of normalised target and suppressed output.
    pub mse_supp: f64,
}

fn check_pair<T: Real>(p: &EmbeddingBatch<T>, z: &EmbeddingBatch<T>) -> Result<()> {
    if p.rows == 0 || p.cols == 0 {
        return Err(Error::validation("embedding batch must be non-empty"));
    }
    if (p.rows, p.cols) != (z.rows, z.cols) {
        return Err(Error::validation(format!(
            "embedding shapes differ: {}x{} vs {}x{}",
            p.rows, p.cols, z.rows, z.cols
        )));
    }
    for (what, m) in [("prediction", p), ("target", z)] {
        if let Some(index) = m.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: if what == "prediction" { "prediction" } else { "target" },
                index,
            });
        }
    }
    Ok(())
}

fn row_norm<T: Real>(row: &[T]) -> f64 {
    row.iter()
        .map(|v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Per-row cosine similarities, failing on zero-norm rows.
fn cosines<T: Real>(p: &EmbeddingBatch<T>, z: &EmbeddingBatch<T>) -> Result<Vec<f64>> {
    check_pair(p, z)?;
    (0..p.rows)
        .map(|r| {
            let (a, b) = (p.row(r), z.row(r));
            let (na, nb) = (row_norm(a), row_norm(b));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::validation(format!(
                    "degenerate embedding: row {r} has zero norm"
                )));
            }
            let dot: f64 = a
                .iter()
                .zip(b)
                .map(|(x, y)| x.to_f64().unwrap() * y.to_f64().unwrap())
                .sum();
            Ok(dot / (na * nb))
        })
        .collect()
}

/// Mean negative cosine similarity.
pub fn simsiam_distance<T: Real>(p: &EmbeddingBatch<T>, z: &EmbeddingBatch<T>) -> Result<f64> {
    let c = cosines(p, z)?;
    Ok(-c.iter().sum::<f64>() / c.len() as f64)
}

/// Mean squared distance between L2-normalised rows, `2 - 2 cos`.
pub fn byol_distance<T: Real>(p: &EmbeddingBatch<T>, z: &EmbeddingBatch<T>) -> Result<f64> {
    check_pair(p, z)?;
    let mut total = 0.0;
    for r in 0..p.rows {
        let (a, b) = (p.row(r), z.row(r));
        let (na, nb) = (row_norm(a), row_norm(b));
        if na == 0.0 || nb == 0.0 {
            return Err(Error::validation(format!(
                "degenerate embedding: row {r} has zero norm"
            )));
        }
        total += a
            .iter()
            .zip(b)
            .map(|(x, y)| {
                let d = x.to_f64().unwrap() / na - y.to_f64().unwrap() / nb;
                d * d
            })
            .sum::<f64>();
    }
    Ok(total / p.rows as f64)
}

pub fn distance<T: Real>(mode: Mode, p: &EmbeddingBatch<T>, z: &EmbeddingBatch<T>) -> Result<f64> {
    match mode {
        Mode::Byol => byol_distance(p, z),
        Mode::Simsiam => simsiam_distance(p, z),
    }
}

/// The distance and its gradient with respect to `p`; `z` is a constant.
pub fn distance_with_grad<T: Real>(
    mode: Mode,
    p: &EmbeddingBatch<T>,
    z: &EmbeddingBatch<T>,
) -> Result<(f64, EmbeddingBatch<T>)> {
    let cos = cosines(p, z)?;
    let b = p.rows as f64;
    // D = scale * mean(cos) + offset
    let (scale, offset) = match mode {
        Mode::Simsiam => (-1.0, 0.0),
        Mode::Byol => (-2.0, 2.0),
    };
    let value = offset + scale * cos.iter().sum::<f64>() / b;
    let mut grad = Mat::zeros(p.rows, p.cols);
    for r in 0..p.rows {
        let (a, t) = (p.row(r), z.row(r));
        let (na, nt) = (row_norm(a), row_norm(t));
        let c = cos[r];
        for (g, (x, y)) in grad.row_mut(r).iter_mut().zip(a.iter().zip(t)) {
            let x = x.to_f64().unwrap();
            let y = y.to_f64().unwrap();
            let dcos = y / (na * nt) - c * x / (na * na);
            *g = T::lit(scale * dcos / b);
        }
    }
    Ok((value, grad))
}

/// `d_orig + lambda * d_supp`.
pub fn feasc_total_loss(d_orig: f64, d_supp: f64, lambda: f64) -> Result<f64> {
    if !(d_orig.is_finite() && d_supp.is_finite() && lambda.is_finite()) {
        return Err(Error::validation("loss terms must be finite"));
    }
    if lambda < 0.0 {
        return Err(Error::validation(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    Ok(d_orig + lambda * d_supp)
}

/// `target <- tau * target + (1 - tau) * online`, parameter by parameter.
pub fn ema_update<T: Real>(target: &mut [&mut Param<T>], online: &[&Param<T>], tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::validation(format!("tau must lie in [0, 1], got {tau}")));
    }
    if target.len() != online.len() {
        return Err(Error::validation(format!(
            "target has {} parameters, online has {}",
            target.len(),
            online.len()
        )));
    }
    if let Some(i) = target
        .iter()
        .zip(online)
        .position(|(t, o)| t.shape != o.shape)
    {
        return Err(Error::validation(format!(
            "parameter {i} shape mismatch: {:?} vs {:?}",
            target[i].shape, online[i].shape
        )));
    }
    let keep = T::lit(tau);
    let take = T::lit(1.0 - tau);
    for (t, o) in target.iter_mut().zip(online) {
        for (tv, &ov) in t.value.iter_mut().zip(&o.value) {
            *tv = keep * *tv + take * ov;
        }
    }
    Ok(())
}

/// MSE between two embedding batches and the corresponding Gaussian lower
/// bound term `-(1/2) ln(mse) - C` (the entropy term is not estimated).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiTerms {
    pub mse: f64,
    /// `None` when `mse == 0`: identical inputs leave the bound undefined.
    pub bound_term: Option<f64>,
}

impl MiTerms {
    pub fn is_degenerate(&self) -> bool {
        self.bound_term.is_none()
    }
}

/// Mean over batch and dimensions of squared differences of L2-normalised rows.
pub fn normalized_mse<T: Real>(a: &EmbeddingBatch<T>, b: &EmbeddingBatch<T>) -> Result<f64> {
    Ok(byol_distance(a, b)? / a.cols as f64)
}

pub fn mi_lower_bound_terms<T: Real>(
    za: &EmbeddingBatch<T>,
    zb: &EmbeddingBatch<T>,
) -> Result<MiTerms> {
    let mse = normalized_mse(za, zb)?;
    let bound_term = (mse > 0.0).then(|| -0.5 * mse.ln() - GAUSSIAN_CONST);
    Ok(MiTerms { mse, bound_term })
}
