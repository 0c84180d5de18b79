//! Synthetic ground-truth trajectories with known closed forms.
//!
//! Each system evolves a planar (2d) intrinsic state and embeds it into the
//! target latent dimension through a seeded orthonormal matrix, so distances
//! in latent space equal intrinsic distances. Sampling produces a
//! [`LatentSequence`] at regular or irregular times with an optional
//! held-out mask over interior indices.

use crate::error::{Error, Result};
use crate::trajectory::LatentSequence;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemKind {
    /// s(t) = s0.
    Constant,
    /// s(t) = s0 + t v.
    AffineLine,
    /// s(t) = R(omega t) (1, 0).
    Rotation,
    /// s(t) = e^(-lambda t) (cos omega t, sin omega t).
    Spiral,
    /// s' = M s for a seeded random M with eigenvalue real parts <= 0.
    LinearRandom,
    /// Quarter-circle arc: rotation with omega = pi/2 over [0, 1].
    Arc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    Regular,
    Irregular,
}

/// A ground-truth dynamical system embedded in latent space.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub embed_dim: usize,
    pub seed: u64,
    pub lambda: f64,
    pub omega: f64,
    pub noise_sigma: f64,
    /// Column-orthonormal embed_dim x 2, column-major.
    embedding: Vec<f64>,
    s0: [f64; 2],
    line_v: [f64; 2],
    /// System matrix for [`SystemKind::LinearRandom`], row-major 2x2.
    mat: [f64; 4],
}

fn orthonormal_embedding(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    // Gram-Schmidt on two Gaussian columns; d >= 2 makes degeneracy a
    // measure-zero event, and the retry loop covers it anyway.
    loop {
        let mut cols = [vec![0.0; d], vec![0.0; d]];
        for col in &mut cols {
            for v in col.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        let norm0: f64 = cols[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm0 < 1e-8 {
            continue;
        }
        for v in &mut cols[0] {
            *v /= norm0;
        }
        let dot: f64 = cols[0].iter().zip(&cols[1]).map(|(a, b)| a * b).sum();
        let proj: Vec<f64> = cols[0].iter().map(|a| a * dot).collect();
        for (v, p) in cols[1].iter_mut().zip(&proj) {
            *v -= p;
        }
        let norm1: f64 = cols[1].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm1 < 1e-8 {
            continue;
        }
        for v in &mut cols[1] {
            *v /= norm1;
        }
        let mut e = Vec::with_capacity(2 * d);
        e.extend_from_slice(&cols[0]);
        e.extend_from_slice(&cols[1]);
        return e;
    }
}

impl SystemSpec {
    pub fn new(kind: SystemKind, embed_dim: usize, seed: u64) -> Result<Self> {
        if embed_dim < 2 {
            return Err(Error::invalid("embed dimension must be at least 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = orthonormal_embedding(&mut rng, embed_dim);

        let unit = |rng: &mut ChaCha8Rng| rng.random::<f64>() * 2.0 - 1.0;
        let (s0, line_v, lambda, omega) = match kind {
            SystemKind::Constant => ([unit(&mut rng), unit(&mut rng)], [0.0, 0.0], 0.0, 0.0),
            SystemKind::AffineLine => {
                let s0 = [unit(&mut rng), unit(&mut rng)];
                // Direction bounded away from zero so the line actually moves.
                let v = [0.5 + 0.5 * rng.random::<f64>(), unit(&mut rng)];
                (s0, v, 0.0, 0.0)
            }
            SystemKind::Rotation => ([1.0, 0.0], [0.0, 0.0], 0.0, std::f64::consts::FRAC_PI_2),
            SystemKind::Spiral => ([1.0, 0.0], [0.0, 0.0], 0.5, 2.0 * std::f64::consts::PI),
            SystemKind::LinearRandom => ([1.0, 0.0], [0.0, 0.0], 0.0, 0.0),
            SystemKind::Arc => ([1.0, 0.0], [0.0, 0.0], 0.0, std::f64::consts::FRAC_PI_2),
        };

        let mat = if kind == SystemKind::LinearRandom {
            let mut g = [0.0; 4];
            for v in &mut g {
                *v = rng.sample::<f64, _>(StandardNormal);
            }
            // Shift by the Gershgorin bound so every eigenvalue real part
            // is <= 0 (no blow-up on [0, 1]).
            let bound = (g[0] + g[1].abs()).max(g[3] + g[2].abs()).max(0.0);
            [g[0] - bound, g[1], g[2], g[3] - bound]
        } else {
            [0.0; 4]
        };

        Ok(SystemSpec {
            kind,
            embed_dim,
            seed,
            lambda,
            omega,
            noise_sigma: 0.0,
            embedding,
            s0,
            line_v,
            mat,
        })
    }

    pub fn with_rate(mut self, lambda: f64, omega: f64) -> Self {
        self.lambda = lambda;
        self.omega = omega;
        self
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    /// The embedding matrix, column-major embed_dim x 2.
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    /// The intrinsic system matrix M with s' = M s, for the linear kinds.
    pub fn intrinsic_matrix(&self) -> Option<[f64; 4]> {
        match self.kind {
            SystemKind::Rotation | SystemKind::Arc => {
                Some([0.0, -self.omega, self.omega, 0.0])
            }
            SystemKind::Spiral => Some([-self.lambda, -self.omega, self.omega, -self.lambda]),
            SystemKind::LinearRandom => Some(self.mat),
            _ => None,
        }
    }

    fn intrinsic_state(&self, t: f64) -> [f64; 2] {
        match self.kind {
            SystemKind::Constant => self.s0,
            SystemKind::AffineLine => [
                self.s0[0] + t * self.line_v[0],
                self.s0[1] + t * self.line_v[1],
            ],
            SystemKind::Rotation | SystemKind::Arc => {
                let (s, c) = (self.omega * t).sin_cos();
                [
                    c * self.s0[0] - s * self.s0[1],
                    s * self.s0[0] + c * self.s0[1],
                ]
            }
            SystemKind::Spiral => {
                let (s, c) = (self.omega * t).sin_cos();
                let r = (-self.lambda * t).exp();
                [r * c, r * s]
            }
            SystemKind::LinearRandom => {
                let e = expm2(&self.mat, t);
                [
                    e[0] * self.s0[0] + e[1] * self.s0[1],
                    e[2] * self.s0[0] + e[3] * self.s0[1],
                ]
            }
        }
    }

    /// Closed-form state at time t, embedded in latent space.
    pub fn truth(&self, t: f64) -> Vec<f64> {
        let s = self.intrinsic_state(t);
        let d = self.embed_dim;
        (0..d)
            .map(|i| self.embedding[i] * s[0] + self.embedding[d + i] * s[1])
            .collect()
    }

    /// Draw a latent sequence on [0, 1]: n timestamps (regular or irregular
    /// with a minimum gap of 1/(4n)), codes `truth(t) + noise`, and a mask
    /// holding out `ceil(heldout * n)` interior indices. Index 0 is never
    /// held out.
    pub fn sample(
        &self,
        n: usize,
        mode: SamplingMode,
        heldout: f64,
        rng: &mut impl Rng,
    ) -> Result<LatentSequence> {
        if n < 2 {
            return Err(Error::invalid("need at least 2 samples"));
        }
        if !(0.0..=0.5).contains(&heldout) {
            return Err(Error::invalid("held-out fraction must be in [0, 0.5]"));
        }

        let times = match mode {
            SamplingMode::Regular => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
            SamplingMode::Irregular => {
                let min_gap = 1.0 / (4.0 * n as f64);
                let mut attempt = 0;
                loop {
                    attempt += 1;
                    if attempt > 100 {
                        return Err(Error::invalid(
                            "could not satisfy the minimum time gap in 100 attempts",
                        ));
                    }
                    let mut ts: Vec<f64> = std::iter::once(0.0)
                        .chain((0..n - 2).map(|_| rng.random::<f64>()))
                        .chain(std::iter::once(1.0))
                        .collect();
                    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    if ts.windows(2).all(|w| w[1] - w[0] >= min_gap) {
                        break ts;
                    }
                }
            }
        };

        let codes: Vec<Vec<f64>> = times
            .iter()
            .map(|&t| {
                let mut z = self.truth(t);
                if self.noise_sigma > 0.0 {
                    for v in &mut z {
                        let eta: f64 = rng.sample(StandardNormal);
                        *v += self.noise_sigma * eta;
                    }
                }
                z
            })
            .collect();

        let n_heldout = (heldout * n as f64).ceil() as usize;
        let mut mask = vec![false; n];
        if n_heldout > 0 {
            let interior = n - 2;
            if n_heldout > interior {
                return Err(Error::invalid(format!(
                    "cannot hold out {n_heldout} of {interior} interior indices"
                )));
            }
            for chosen in index::sample(rng, interior, n_heldout) {
                mask[chosen + 1] = true;
            }
        }

        LatentSequence::new(self.embed_dim, times, codes, Some(mask))
    }
}

/// 2x2 matrix exponential of M t by Taylor series with scaling and squaring.
fn expm2(m: &[f64; 4], t: f64) -> [f64; 4] {
    let mut b = [m[0] * t, m[1] * t, m[2] * t, m[3] * t];
    let norm = b.iter().map(|x| x.abs()).fold(0.0f64, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scale = 0.5f64.powi(squarings as i32);
    for v in &mut b {
        *v *= scale;
    }

    let mut result = [1.0, 0.0, 0.0, 1.0];
    let mut term = [1.0, 0.0, 0.0, 1.0];
    for k in 1..=20 {
        term = [
            (term[0] * b[0] + term[1] * b[2]) / k as f64,
            (term[0] * b[1] + term[1] * b[3]) / k as f64,
            (term[2] * b[0] + term[3] * b[2]) / k as f64,
            (term[2] * b[1] + term[3] * b[3]) / k as f64,
        ];
        for i in 0..4 {
            result[i] += term[i];
        }
    }
    for _ in 0..squarings {
        result = [
            result[0] * result[0] + result[1] * result[2],
            result[0] * result[1] + result[1] * result[3],
            result[2] * result[0] + result[3] * result[2],
            result[2] * result[1] + result[3] * result[3],
        ];
    }
    result
}
