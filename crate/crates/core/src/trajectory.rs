//! The fitted continuous-time model and its evaluation.
//!
//! Raw frame timestamps are affinely normalized to [0, 1] for conditioning;
//! the mapping is stored in the model so that callers work in raw units
//! throughout. Prediction integrates the learned field once over the merged
//! time grid with the model's (adaptive) solver configuration.

use crate::decoder::ToyDecoder;
use crate::dynamics::{MlpField, MlpParams};
use crate::error::{Error, Result};
use crate::metrics::{self, SsimConfig};
use crate::solver::{self, SolverConfig};

/// Timestamped sequence of latent codes, optionally with a held-out mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub dim: usize,
    pub times: Vec<f64>,
    pub codes: Vec<Vec<f64>>,
    /// `heldout[i]` marks index i as unobserved (evaluation-only).
    pub heldout: Vec<bool>,
}

impl LatentSequence {
    pub fn new(
        dim: usize,
        times: Vec<f64>,
        codes: Vec<Vec<f64>>,
        heldout: Option<Vec<bool>>,
    ) -> Result<Self> {
        let heldout = heldout.unwrap_or_else(|| vec![false; times.len()]);
        let seq = LatentSequence {
            dim,
            times,
            codes,
            heldout,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() < 2 {
            return Err(Error::invalid("sequence needs at least 2 observations"));
        }
        if self.codes.len() != self.times.len() || self.heldout.len() != self.times.len() {
            return Err(Error::invalid(format!(
                "length mismatch: {} times, {} codes, {} mask entries",
                self.times.len(),
                self.codes.len(),
                self.heldout.len()
            )));
        }
        if self.times.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("times must be finite"));
        }
        for (i, w) in self.times.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::invalid(format!(
                    "times not strictly increasing at index {}",
                    i + 1
                )));
            }
        }
        for (i, code) in self.codes.iter().enumerate() {
            if code.len() != self.dim {
                return Err(Error::invalid(format!(
                    "codes[{}] has dim {}, expected {}",
                    i,
                    code.len(),
                    self.dim
                )));
            }
            if code.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("codes[{i}] contains a non-finite value")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.heldout[i]).collect()
    }

    pub fn heldout_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.heldout[i]).collect()
    }

    /// The observed sub-sequence (times and codes where the mask is false).
    pub fn observed_subsequence(&self) -> Result<LatentSequence> {
        let idx = self.observed_indices();
        LatentSequence::new(
            self.dim,
            idx.iter().map(|&i| self.times[i]).collect(),
            idx.iter().map(|&i| self.codes[i].clone()).collect(),
            None,
        )
    }
}

/// Invertible affine map from raw time units onto [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeNorm {
    pub t_first: f64,
    pub t_last: f64,
}

impl TimeNorm {
    pub fn new(t_first: f64, t_last: f64) -> Result<Self> {
        if !(t_first.is_finite() && t_last.is_finite() && t_last > t_first) {
            return Err(Error::invalid("time span must be finite with t_last > t_first"));
        }
        Ok(TimeNorm { t_first, t_last })
    }

    pub fn span(&self) -> f64 {
        self.t_last - self.t_first
    }

    pub fn normalize(&self, t: f64) -> f64 {
        (t - self.t_first) / self.span()
    }

    pub fn denormalize(&self, u: f64) -> f64 {
        self.t_first + u * self.span()
    }
}

/// Trained dynamics plus the initial state and time normalization.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub params: MlpParams,
    pub z0: Vec<f64>,
    pub time_norm: TimeNorm,
    /// Inference solver settings, in normalized time units.
    pub solver: SolverConfig,
}

/// States returned by [`FittedModel::predict`]; `extrapolated[i]` flags
/// requested times beyond the fitted span.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub extrapolated: Vec<bool>,
}

/// Per-split reconstruction metrics of [`FittedModel::evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SplitMetrics {
    pub mse_latent: f64,
    pub mse_image: f64,
    pub ssim: f64,
}

/// Evaluation report split by observed/held-out indices. A split with no
/// indices is absent, not zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub observed: Option<SplitMetrics>,
    pub unobserved: Option<SplitMetrics>,
    pub n_observed: usize,
    pub n_unobserved: usize,
}

impl FittedModel {
    /// States of the learned trajectory at the requested raw times.
    /// `predict(t_first)` returns the stored initial state bit for bit.
    pub fn predict(&self, raw_times: &[f64]) -> Result<Prediction> {
        self.predict_from(&self.z0, raw_times)
    }

    pub(crate) fn predict_from(&self, z0: &[f64], raw_times: &[f64]) -> Result<Prediction> {
        if raw_times.is_empty() {
            return Err(Error::invalid("at least one time required"));
        }
        if raw_times.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("times must be finite"));
        }
        for (i, w) in raw_times.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::invalid(format!(
                    "times not strictly increasing at index {}",
                    i + 1
                )));
            }
        }
        if raw_times[0] < self.time_norm.t_first {
            return Err(Error::invalid(format!(
                "time {} precedes the trajectory start {}",
                raw_times[0], self.time_norm.t_first
            )));
        }

        let mut grid: Vec<f64> = Vec::with_capacity(raw_times.len() + 1);
        let starts_at_origin = raw_times[0] == self.time_norm.t_first;
        if !starts_at_origin {
            grid.push(0.0);
        }
        grid.extend(raw_times.iter().map(|&t| self.time_norm.normalize(t)));

        let field = MlpField::new(&self.params);
        let states = solver::integrate(&field, z0, &grid, &self.solver)?;
        let skip = usize::from(!starts_at_origin);

        Ok(Prediction {
            times: raw_times.to_vec(),
            states: states.into_iter().skip(skip).collect(),
            extrapolated: raw_times.iter().map(|&t| t > self.time_norm.t_last).collect(),
        })
    }

    /// Divide the fitted span into k uniform intervals and predict the k+1
    /// boundary states.
    pub fn interpolate(&self, k: usize) -> Result<Prediction> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let times: Vec<f64> = (0..=k)
            .map(|j| {
                if j == 0 {
                    self.time_norm.t_first
                } else if j == k {
                    self.time_norm.t_last
                } else {
                    self.time_norm
                        .denormalize(j as f64 / k as f64)
                }
            })
            .collect();
        self.predict(&times)
    }

    /// Reconstruction metrics against a sequence, split by the held-out mask.
    /// Image metrics compare decoder renderings of predicted and target codes.
    pub fn evaluate(
        &self,
        seq: &LatentSequence,
        decoder: &ToyDecoder,
        ssim_cfg: &SsimConfig,
    ) -> Result<EvalReport> {
        seq.validate()?;
        if seq.dim != self.z0.len() {
            return Err(Error::invalid(format!(
                "sequence dim {} does not match model dim {}",
                seq.dim,
                self.z0.len()
            )));
        }
        if decoder.latent_dim() != seq.dim {
            return Err(Error::invalid("decoder latent dim does not match sequence"));
        }

        let pred = self.predict(&seq.times)?;
        let mut split_rows: [Vec<(f64, f64, f64)>; 2] = [Vec::new(), Vec::new()];
        for i in 0..seq.len() {
            let z_hat = &pred.states[i];
            let z_ref = &seq.codes[i];
            let mse_latent = z_hat
                .iter()
                .zip(z_ref)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / seq.dim as f64;
            let img_hat = decoder.decode(z_hat)?;
            let img_ref = decoder.decode(z_ref)?;
            let mse_image = metrics::mse(&img_hat.data, &img_ref.data)?;
            let ssim = metrics::ssim(&img_hat, &img_ref, ssim_cfg)?;
            split_rows[usize::from(seq.heldout[i])].push((mse_latent, mse_image, ssim));
        }

        let summarize = |rows: &[(f64, f64, f64)]| -> Option<SplitMetrics> {
            if rows.is_empty() {
                return None;
            }
            let n = rows.len() as f64;
            Some(SplitMetrics {
                mse_latent: rows.iter().map(|r| r.0).sum::<f64>() / n,
                mse_image: rows.iter().map(|r| r.1).sum::<f64>() / n,
                ssim: rows.iter().map(|r| r.2).sum::<f64>() / n,
            })
        };

        Ok(EvalReport {
            observed: summarize(&split_rows[0]),
            unobserved: summarize(&split_rows[1]),
            n_observed: split_rows[0].len(),
            n_unobserved: split_rows[1].len(),
        })
    }
}

impl EvalReport {
    /// JSON form; MSE values are reported both raw and scaled by 1e3.
    pub fn to_json(&self) -> serde_json::Value {
        let split = |m: &Option<SplitMetrics>| -> serde_json::Value {
            match m {
                None => serde_json::Value::Null,
                Some(s) => serde_json::json!({
                    "mse_latent": s.mse_latent,
                    "mse_latent_x1e3": s.mse_latent * 1e3,
                    "mse_image": s.mse_image,
                    "mse_image_x1e3": s.mse_image * 1e3,
                    "ssim": s.ssim,
                }),
            }
        };
        serde_json::json!({
            "observed": split(&self.observed),
            "unobserved": split(&self.unobserved),
            "n_observed": self.n_observed,
            "n_unobserved": self.n_unobserved,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Layer;

    /// Model whose field is exactly z' = A z for a 2x2 matrix, built from a
    /// single linear layer with a zeroed time column.
    fn linear_model(a: [f64; 4]) -> FittedModel {
        let layer = Layer {
            w: vec![a[0], a[1], 0.0, a[2], a[3], 0.0],
            b: vec![0.0, 0.0],
            in_dim: 3,
            out_dim: 2,
        };
        FittedModel {
            params: MlpParams::from_layers(vec![layer], 2, true).unwrap(),
            z0: vec![1.0, 0.0],
            time_norm: TimeNorm::new(0.0, 1.0).unwrap(),
            solver: SolverConfig::default(),
        }
    }

    #[test]
    fn sequence_validation_messages() {
        let err = LatentSequence::new(1, vec![0.0, 0.0], vec![vec![1.0], vec![2.0]], None)
            .unwrap_err();
        assert_eq!(
            err.to_string(),
            "invalid argument: times not strictly increasing at index 1"
        );
    }

    #[test]
    fn predict_at_start_returns_z0_bitwise() {
        let m = linear_model([0.0, -1.0, 1.0, 0.0]);
        let p = m.predict(&[0.0]).unwrap();
        assert_eq!(p.states[0], m.z0);
        assert_eq!(p.extrapolated, vec![false]);
    }

    #[test]
    fn predict_rotation_matches_analytic_solution() {
        // z' = (-z2, z1) from (1, 0): z(t) = (cos t, sin t); span is [0, 1]
        // in raw units so normalized and raw time coincide.
        let m = linear_model([0.0, -1.0, 1.0, 0.0]);
        let p = m.predict(&[0.0, 0.5, 1.0]).unwrap();
        for (i, &t) in [0.0f64, 0.5, 1.0].iter().enumerate() {
            assert!((p.states[i][0] - t.cos()).abs() <= 1e-5);
            assert!((p.states[i][1] - t.sin()).abs() <= 1e-5);
        }
    }

    #[test]
    fn predict_respects_raw_time_units() {
        // Same rotation but fitted span [10, 12]: normalized time u = (t-10)/2
        // and the field acts per unit of u.
        let mut m = linear_model([0.0, -1.0, 1.0, 0.0]);
        m.time_norm = TimeNorm::new(10.0, 12.0).unwrap();
        let p = m.predict(&[10.0, 11.0, 12.0]).unwrap();
        assert!((p.states[1][0] - 0.5f64.cos()).abs() <= 1e-5);
        assert!((p.states[2][1] - 1.0f64.sin()).abs() <= 1e-5);
    }

    #[test]
    fn predict_flags_extrapolation_and_rejects_pre_start() {
        let m = linear_model([0.0, 0.0, 0.0, 0.0]);
        let p = m.predict(&[0.5, 1.0, 1.5]).unwrap();
        assert_eq!(p.extrapolated, vec![false, false, true]);
        assert!(m.predict(&[-0.1, 0.5]).is_err());
    }

    #[test]
    fn predict_alone_or_merged_is_consistent() {
        let m = linear_model([0.0, -1.0, 1.0, 0.0]);
        let alone = m.predict(&[0.7]).unwrap();
        let merged = m.predict(&[0.2, 0.5, 0.7, 0.9]).unwrap();
        for i in 0..2 {
            let z = merged.states[2][i];
            let tol = 10.0 * (m.solver.atol + m.solver.rtol * z.abs());
            assert!((alone.states[0][i] - z).abs() <= tol);
        }
    }

    #[test]
    fn interpolate_k1_returns_endpoints() {
        let m = linear_model([0.0, -1.0, 1.0, 0.0]);
        let p = m.interpolate(1).unwrap();
        assert_eq!(p.times, vec![0.0, 1.0]);
        assert_eq!(p.states[0], m.z0);
        assert!(m.interpolate(0).is_err());
    }

    #[test]
    fn interpolate_midpoint_on_rotation_field() {
        let m = linear_model([0.0, -1.0, 1.0, 0.0]);
        let p = m.interpolate(2).unwrap();
        assert!((p.states[1][0] - 0.5f64.cos()).abs() <= 1e-5);
        assert!((p.states[1][1] - 0.5f64.sin()).abs() <= 1e-5);
    }

    #[test]
    fn interpolation_grids_nest_within_tolerance() {
        let m = linear_model([0.0, -1.0, 1.0, 0.0]);
        let p4 = m.interpolate(4).unwrap();
        let p8 = m.interpolate(8).unwrap();
        for j in 0..=4 {
            assert_eq!(p4.times[j], p8.times[2 * j]);
            for i in 0..2 {
                let z = p8.states[2 * j][i];
                let tol = 10.0 * (m.solver.atol + m.solver.rtol * z.abs());
                assert!((p4.states[j][i] - z).abs() <= tol);
            }
        }
    }

    #[test]
    fn evaluate_ground_truth_field_and_splits() {
        let m = linear_model([0.0, -1.0, 1.0, 0.0]);
        let times: Vec<f64> = (0..5).map(|i| i as f64 / 4.0).collect();
        let codes: Vec<Vec<f64>> = times.iter().map(|&t| vec![t.cos(), t.sin()]).collect();
        let seq = LatentSequence::new(
            2,
            times,
            codes,
            Some(vec![false, false, true, false, false]),
        )
        .unwrap();
        let dec = ToyDecoder::with_shape(crate::decoder::DecoderKind::Linear, 0, 2, (1, 8, 8), 8)
            .unwrap();
        let report = m.evaluate(&seq, &dec, &SsimConfig::default()).unwrap();
        assert_eq!(report.n_observed, 4);
        assert_eq!(report.n_unobserved, 1);
        let tol = 10.0 * (m.solver.atol + m.solver.rtol);
        assert!(report.observed.as_ref().unwrap().mse_latent <= tol);
        assert!(report.unobserved.as_ref().unwrap().mse_latent <= tol);
    }

    #[test]
    fn evaluate_without_heldout_has_absent_split() {
        let m = linear_model([0.0, 0.0, 0.0, 0.0]);
        let seq = LatentSequence::new(
            2,
            vec![0.0, 1.0],
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            None,
        )
        .unwrap();
        let dec = ToyDecoder::with_shape(crate::decoder::DecoderKind::Linear, 0, 2, (1, 8, 8), 8)
            .unwrap();
        let report = m.evaluate(&seq, &dec, &SsimConfig::default()).unwrap();
        assert!(report.unobserved.is_none());
        assert_eq!(report.n_unobserved, 0);
        let json = report.to_json();
        assert!(json["unobserved"].is_null());
    }
}
