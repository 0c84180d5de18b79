//! Deterministic latent-to-image decoder standing in for a pretrained
//! generator, with a feature tap and optimization-based inversion.
//!
//! Two kinds: `linear` (bias-free, full column rank, admits closed-form
//! least-squares oracles) and `mlp` (one tanh hidden layer, tanh-squashed
//! output in (-1, 1)). The feature vector is the pre-output hidden
//! projection in both kinds.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Channel-major image tensor, `data[c * H * W + y * W + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone)]
enum Weights {
    /// `w_img` is the composite latent-to-pixel map (npix x d) built from
    /// the hidden projection and the output map at construction; `w_feat`
    /// (m x d) is the hidden projection exposed as the feature space.
    Linear { w_feat: Vec<f64>, w_img: Vec<f64> },
    /// h = tanh(w1 z), image = tanh(w2 h); biases are zero so z = 0 maps to
    /// the zero image for this kind too.
    Mlp { w1: Vec<f64>, w2: Vec<f64> },
}

/// Fixed-seed deterministic map from latent space to small images.
#[derive(Debug, Clone)]
pub struct ToyDecoder {
    kind: DecoderKind,
    seed: u64,
    latent_dim: usize,
    shape: (usize, usize, usize),
    feature_dim: usize,
    weights: Weights,
}

/// Settings for gradient-based inversion.
#[derive(Debug, Clone)]
pub struct InvertConfig {
    pub steps: usize,
    pub lr: f64,
    /// Seed for the random starting point.
    pub seed: u64,
    /// Explicit starting point, overriding the seeded one.
    pub init: Option<Vec<f64>>,
}

impl Default for InvertConfig {
    fn default() -> Self {
        InvertConfig {
            steps: 1000,
            lr: 0.1,
            seed: 0,
            init: None,
        }
    }
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
        .collect()
}

/// y = M x for row-major M (rows x cols).
fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        let mut s = 0.0;
        for (w, v) in row.iter().zip(x) {
            s += w * v;
        }
        y[r] = s;
    }
}

/// y = Mᵀ x.
fn matvec_t(m: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    y.fill(0.0);
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        let xr = x[r];
        for (acc, w) in y.iter_mut().zip(row) {
            *acc += w * xr;
        }
    }
}

/// Cholesky-based positive-definiteness check of the (d x d) Gram matrix.
fn gram_is_full_rank(gram: &[f64], d: usize) -> bool {
    let mut l = gram.to_vec();
    let scale = (0..d).map(|i| gram[i * d + i]).fold(0.0f64, f64::max);
    let floor = scale * 1e-12;
    for j in 0..d {
        let mut diag = l[j * d + j];
        for k in 0..j {
            diag -= l[j * d + k] * l[j * d + k];
        }
        if diag <= floor {
            return false;
        }
        let diag = diag.sqrt();
        l[j * d + j] = diag;
        for i in j + 1..d {
            let mut v = l[i * d + j];
            for k in 0..j {
                v -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = v / diag;
        }
    }
    true
}

impl ToyDecoder {
    /// Decoder with the default 3x32x32 image shape and 64 features.
    pub fn new(kind: DecoderKind, seed: u64, latent_dim: usize) -> Result<Self> {
        Self::with_shape(kind, seed, latent_dim, (3, 32, 32), 64)
    }

    pub fn with_shape(
        kind: DecoderKind,
        seed: u64,
        latent_dim: usize,
        shape: (usize, usize, usize),
        feature_dim: usize,
    ) -> Result<Self> {
        let (c, h, w) = shape;
        let npix = c * h * w;
        if latent_dim == 0 || feature_dim == 0 || npix == 0 {
            return Err(Error::invalid("decoder dimensions must be positive"));
        }
        if latent_dim >= npix {
            return Err(Error::invalid(
                "latent dimension must be smaller than the pixel count",
            ));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_feat = glorot(&mut rng, feature_dim, latent_dim);
        let w_out = glorot(&mut rng, npix, feature_dim);

        let weights = match kind {
            DecoderKind::Linear => {
                // Composite npix x d map; keeping it folded makes decode and
                // inversion one matvec instead of two.
                let mut w_img = vec![0.0; npix * latent_dim];
                for r in 0..npix {
                    for c2 in 0..latent_dim {
                        let mut s = 0.0;
                        for k in 0..feature_dim {
                            s += w_out[r * feature_dim + k] * w_feat[k * latent_dim + c2];
                        }
                        w_img[r * latent_dim + c2] = s;
                    }
                }
                let mut gram = vec![0.0; latent_dim * latent_dim];
                for i in 0..latent_dim {
                    for j in 0..latent_dim {
                        let mut s = 0.0;
                        for r in 0..npix {
                            s += w_img[r * latent_dim + i] * w_img[r * latent_dim + j];
                        }
                        gram[i * latent_dim + j] = s;
                    }
                }
                if !gram_is_full_rank(&gram, latent_dim) {
                    return Err(Error::invalid(
                        "linear decoder weights are rank deficient for this seed",
                    ));
                }
                Weights::Linear { w_feat, w_img }
            }
            DecoderKind::Mlp => Weights::Mlp {
                w1: w_feat,
                w2: w_out,
            },
        };

        Ok(ToyDecoder {
            kind,
            seed,
            latent_dim,
            shape,
            feature_dim,
            weights,
        })
    }

    pub fn kind(&self) -> DecoderKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn pixel_count(&self) -> usize {
        let (c, h, w) = self.shape;
        c * h * w
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim {
            return Err(Error::invalid(format!(
                "latent dim mismatch: expected {}, got {}",
                self.latent_dim,
                z.len()
            )));
        }
        Ok(())
    }

    /// Render a latent code to an image.
    pub fn decode(&self, z: &[f64]) -> Result<Image> {
        self.check_latent(z)?;
        let (c, h, w) = self.shape;
        Ok(Image {
            channels: c,
            height: h,
            width: w,
            data: self.decode_data(z),
        })
    }

    pub(crate) fn decode_data(&self, z: &[f64]) -> Vec<f64> {
        let npix = self.pixel_count();
        let mut out = vec![0.0; npix];
        match &self.weights {
            Weights::Linear { w_img, .. } => {
                matvec(w_img, npix, self.latent_dim, z, &mut out);
            }
            Weights::Mlp { w1, w2 } => {
                let mut hidden = vec![0.0; self.feature_dim];
                matvec(w1, self.feature_dim, self.latent_dim, z, &mut hidden);
                for v in &mut hidden {
                    *v = v.tanh();
                }
                matvec(w2, npix, self.feature_dim, &hidden, &mut out);
                for v in &mut out {
                    *v = v.tanh();
                }
            }
        }
        out
    }

    /// The pre-output hidden projection, used as the feature space.
    pub fn features(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        let mut out = vec![0.0; self.feature_dim];
        match &self.weights {
            Weights::Linear { w_feat, .. } => {
                matvec(w_feat, self.feature_dim, self.latent_dim, z, &mut out);
            }
            Weights::Mlp { w1, .. } => {
                matvec(w1, self.feature_dim, self.latent_dim, z, &mut out);
                for v in &mut out {
                    *v = v.tanh();
                }
            }
        }
        Ok(out)
    }

    /// Jᵀ v for the latent-to-image map at z.
    pub(crate) fn image_vjp(&self, z: &[f64], v: &[f64]) -> Vec<f64> {
        let npix = self.pixel_count();
        let mut out = vec![0.0; self.latent_dim];
        match &self.weights {
            Weights::Linear { w_img, .. } => {
                matvec_t(w_img, npix, self.latent_dim, v, &mut out);
            }
            Weights::Mlp { w1, w2 } => {
                let mut hidden = vec![0.0; self.feature_dim];
                matvec(w1, self.feature_dim, self.latent_dim, z, &mut hidden);
                for h in &mut hidden {
                    *h = h.tanh();
                }
                let mut pre_out = vec![0.0; npix];
                matvec(w2, npix, self.feature_dim, &hidden, &mut pre_out);
                // through the output tanh
                let vo: Vec<f64> = v
                    .iter()
                    .zip(&pre_out)
                    .map(|(vi, p)| {
                        let a = p.tanh();
                        vi * (1.0 - a * a)
                    })
                    .collect();
                let mut gh = vec![0.0; self.feature_dim];
                matvec_t(w2, npix, self.feature_dim, &vo, &mut gh);
                for (g, h) in gh.iter_mut().zip(&hidden) {
                    *g *= 1.0 - h * h;
                }
                matvec_t(w1, self.feature_dim, self.latent_dim, &gh, &mut out);
            }
        }
        out
    }

    /// Jᵀ v for the latent-to-feature map at z.
    pub(crate) fn feature_vjp(&self, z: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.latent_dim];
        match &self.weights {
            Weights::Linear { w_feat, .. } => {
                matvec_t(w_feat, self.feature_dim, self.latent_dim, v, &mut out);
            }
            Weights::Mlp { w1, .. } => {
                let mut pre = vec![0.0; self.feature_dim];
                matvec(w1, self.feature_dim, self.latent_dim, z, &mut pre);
                let vh: Vec<f64> = v
                    .iter()
                    .zip(&pre)
                    .map(|(vi, p)| {
                        let a = p.tanh();
                        vi * (1.0 - a * a)
                    })
                    .collect();
                matvec_t(w1, self.feature_dim, self.latent_dim, &vh, &mut out);
            }
        }
        out
    }

    /// Recover a latent code for `x` by Adam gradient descent on pixel MSE.
    /// Returns the best iterate seen. Raises a divergence error when the
    /// loss increases for 100 consecutive steps.
    pub fn invert(&self, x: &Image, cfg: &InvertConfig) -> Result<Vec<f64>> {
        if x.shape() != self.shape {
            return Err(Error::invalid(format!(
                "image shape mismatch: expected {:?}, got {:?}",
                self.shape,
                x.shape()
            )));
        }
        let npix = self.pixel_count();
        let d = self.latent_dim;

        let mut z = match &cfg.init {
            Some(init) => {
                self.check_latent(init)?;
                init.clone()
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
            }
        };

        let mut m = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut best_loss = f64::INFINITY;
        let mut best_z = z.clone();
        let mut prev_loss = f64::INFINITY;
        let mut rising = 0usize;

        let loss_of = |pred: &[f64]| -> f64 {
            pred.iter()
                .zip(&x.data)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / npix as f64
        };

        for step in 1..=cfg.steps {
            let pred = self.decode_data(&z);
            let loss = loss_of(&pred);
            if !loss.is_finite() {
                return Err(Error::InversionDiverged { steps: step });
            }
            if loss < best_loss {
                best_loss = loss;
                best_z = z.clone();
            }
            if loss > prev_loss {
                rising += 1;
                if rising >= 100 {
                    return Err(Error::InversionDiverged { steps: rising });
                }
            } else {
                rising = 0;
            }
            prev_loss = loss;

            let residual_grad: Vec<f64> = pred
                .iter()
                .zip(&x.data)
                .map(|(p, t)| 2.0 * (p - t) / npix as f64)
                .collect();
            let g = self.image_vjp(&z, &residual_grad);
            crate::train::adam_update_slice(&mut z, &g, &mut m, &mut v, step, cfg.lr, 0.9, 0.999, 1e-8);
        }

        let final_loss = loss_of(&self.decode_data(&z));
        if final_loss < best_loss {
            best_z = z;
        }
        Ok(best_z)
    }
}
