//! Latent morphing and first-frame edit propagation.
//!
//! Morphing blends two codes linearly, `z* = z_s + alpha (z_t - z_s)`, and
//! serves as the geometry-blind interpolation baseline. Edit propagation
//! applies a direction to the initial state only and re-integrates, so the
//! whole edited sequence follows the learned dynamics.

use crate::error::{Error, Result};
use crate::trajectory::{FittedModel, LatentSequence, Prediction};

/// A user-supplied latent edit: `z0 + scale * direction`.
#[derive(Debug, Clone, PartialEq)]
pub struct EditDirection {
    pub direction: Vec<f64>,
    pub scale: f64,
    pub label: String,
}

impl EditDirection {
    pub fn new(direction: Vec<f64>, scale: f64, label: impl Into<String>) -> Result<Self> {
        if direction.iter().any(|x| !x.is_finite()) || !scale.is_finite() {
            return Err(Error::invalid("edit direction must be finite"));
        }
        if direction.iter().map(|x| x * x).sum::<f64>() == 0.0 {
            return Err(Error::invalid("edit direction must be non-zero"));
        }
        Ok(EditDirection {
            direction,
            scale,
            label: label.into(),
        })
    }
}

/// Linear blends `z_s + alpha (z_t - z_s)`, one per alpha.
pub fn morph(z_s: &[f64], z_t: &[f64], alphas: &[f64]) -> Result<Vec<Vec<f64>>> {
    if z_s.len() != z_t.len() {
        return Err(Error::invalid(format!(
            "dim mismatch: {} vs {}",
            z_s.len(),
            z_t.len()
        )));
    }
    Ok(alphas
        .iter()
        .map(|&a| {
            z_s.iter()
                .zip(z_t)
                .map(|(s, t)| s + a * (t - s))
                .collect()
        })
        .collect())
}

/// Predict the trajectory of the edited initial state `z0 + scale * direction`
/// at the requested raw times. Only the first frame is touched; every later
/// state comes from re-integration. A zero scale reproduces
/// [`FittedModel::predict`] bit for bit.
pub fn propagate_edit(
    m: &FittedModel,
    e: &EditDirection,
    raw_times: &[f64],
) -> Result<Prediction> {
    if e.direction.len() != m.z0.len() {
        return Err(Error::invalid(format!(
            "direction dim {} does not match model dim {}",
            e.direction.len(),
            m.z0.len()
        )));
    }
    let z0 = if e.scale == 0.0 {
        m.z0.clone()
    } else {
        m.z0
            .iter()
            .zip(&e.direction)
            .map(|(z, d)| z + e.scale * d)
            .collect()
    };
    m.predict_from(&z0, raw_times)
}

/// One held-out time compared under both interpolation routes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpRow {
    pub time: f64,
    /// Euclidean error of the model prediction against the true code.
    pub ode_err: f64,
    /// Euclidean error of the linear morph between the bracketing observed
    /// codes, with alpha = (t - t_s) / (t_t - t_s).
    pub morph_err: f64,
}

/// Morph-vs-trajectory comparison at held-out times. Each time must be a
/// timestamp of `seq` (its code is the ground truth) and must lie strictly
/// between two observed timestamps.
pub fn compare_interp(
    m: &FittedModel,
    seq: &LatentSequence,
    heldout_times: &[f64],
) -> Result<Vec<InterpRow>> {
    seq.validate()?;
    if heldout_times.is_empty() {
        return Err(Error::invalid("at least one held-out time required"));
    }
    for (i, w) in heldout_times.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(Error::invalid(format!(
                "times not strictly increasing at index {}",
                i + 1
            )));
        }
    }

    let pred = m.predict(heldout_times)?;
    let mut rows = Vec::with_capacity(heldout_times.len());
    for (k, &t) in heldout_times.iter().enumerate() {
        let idx = seq
            .times
            .iter()
            .position(|&st| st == t)
            .ok_or_else(|| Error::invalid(format!("time {t} is not a sequence timestamp")))?;
        let truth = &seq.codes[idx];

        let left = (0..idx)
            .rev()
            .find(|&i| !seq.heldout[i])
            .ok_or_else(|| Error::invalid(format!("no observed time before {t}")))?;
        let right = (idx + 1..seq.len())
            .find(|&i| !seq.heldout[i])
            .ok_or_else(|| Error::invalid(format!("no observed time after {t}")))?;

        let alpha = (t - seq.times[left]) / (seq.times[right] - seq.times[left]);
        let blended = morph(&seq.codes[left], &seq.codes[right], &[alpha])?.remove(0);

        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        rows.push(InterpRow {
            time: t,
            ode_err: dist(&pred.states[k], truth),
            morph_err: dist(&blended, truth),
        });
    }
    Ok(rows)
}
