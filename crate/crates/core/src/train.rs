//! Fitting the dynamics network to a latent sequence.
//!
//! Each iteration samples a window of observations, integrates the current
//! field from the initial state through the window times with a fixed-step
//! scheme, and scores the predictions in latent, feature, and image space.
//! Gradients are exact for the discretized objective: the unrolled solver
//! steps are differentiated in reverse (discretize-then-optimize), not via a
//! continuous adjoint. Parameters are updated with Adam.

use crate::decoder::ToyDecoder;
use crate::dynamics::{self, MlpParams, Tape};
use crate::error::{Error, Result};
use crate::solver::{Method, SolverConfig};
use crate::trajectory::{FittedModel, LatentSequence, TimeNorm};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fixed-step scheme used for the training unroll. The adaptive method is
/// rejected here: its accept/reject control flow is not differentiable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSolver {
    pub method: Method,
    /// Number of substeps between consecutive window times.
    pub substeps: usize,
}

impl Default for TrainSolver {
    fn default() -> Self {
        TrainSolver {
            method: Method::Rk4,
            substeps: 8,
        }
    }
}

impl TrainSolver {
    pub fn validate(&self) -> Result<()> {
        if self.method == Method::Dopri5 {
            return Err(Error::UnsupportedConfig(
                "adaptive dopri5 cannot be used for training; use euler or rk4".into(),
            ));
        }
        if self.substeps == 0 {
            return Err(Error::invalid("substeps must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub latent: f64,
    pub feature: f64,
    pub image: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            latent: 1.0,
            feature: 0.1,
            image: 0.1,
        }
    }
}

/// Whether training windows always start at the first frame or at a random
/// observed index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WindowAnchor {
    #[default]
    First,
    Random,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of target observations per window (the initial state is extra).
    pub window_len: usize,
    pub weights: LossWeights,
    pub train_solver: TrainSolver,
    /// Hidden layer widths of the dynamics net.
    pub hidden: Vec<usize>,
    /// Feed the time coordinate to the field (false = autonomous variant).
    pub time_input: bool,
    /// Global-norm gradient clip; None disables (gradient-check tests).
    pub grad_clip: Option<f64>,
    pub anchor: WindowAnchor,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            // Windows of 5 make the gradient noisy enough that Adam at the
            // default lr can be kicked out of a converged basin; 8 is still
            // a small batch but trains stably.
            window_len: 8,
            weights: LossWeights::default(),
            train_solver: TrainSolver::default(),
            hidden: vec![64, 64, 64],
            time_input: true,
            grad_clip: Some(10.0),
            anchor: WindowAnchor::First,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Default window length for a sequence with `observed` training entries.
    pub fn default_window(observed: usize) -> usize {
        TrainConfig::default().window_len.min(observed.saturating_sub(1)).max(1)
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta1 and beta2 must be in [0, 1)"));
        }
        if self.window_len == 0 {
            return Err(Error::invalid("window length must be at least 1"));
        }
        let w = &self.weights;
        if w.latent < 0.0 || w.feature < 0.0 || w.image < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if w.latent == 0.0 && w.feature == 0.0 && w.image == 0.0 {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        self.train_solver.validate()
    }
}

/// One sampled training window: the anchor state, the anchor time followed by
/// the target times (sorted), and the target codes aligned with `times[1..]`.
#[derive(Debug, Clone)]
pub struct Window {
    pub z_init: Vec<f64>,
    pub times: Vec<f64>,
    pub targets: Vec<Vec<f64>>,
    /// Sequence indices of the targets (for caches and diagnostics).
    pub target_indices: Vec<usize>,
}

/// Uniformly choose `n` target observations after the first frame; the first
/// frame is always the initial state.
pub fn sample_window(seq: &LatentSequence, n: usize, rng: &mut impl Rng) -> Result<Window> {
    sample_window_at(seq, 0, n, rng)
}

fn sample_window_at(
    seq: &LatentSequence,
    anchor: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Window> {
    let len = seq.len();
    let pool = len - anchor - 1;
    if n > pool {
        return Err(Error::invalid(format!(
            "window length {n} must be smaller than the {} observations after index {anchor}",
            pool + 1
        )));
    }
    let mut chosen: Vec<usize> = index::sample(rng, pool, n)
        .into_iter()
        .map(|i| anchor + 1 + i)
        .collect();
    chosen.sort_unstable();

    let mut times = Vec::with_capacity(n + 1);
    times.push(seq.times[anchor]);
    times.extend(chosen.iter().map(|&i| seq.times[i]));
    Ok(Window {
        z_init: seq.codes[anchor].clone(),
        times,
        targets: chosen.iter().map(|&i| seq.codes[i].clone()).collect(),
        target_indices: chosen,
    })
}

/// Loss value split into its parts; `total = w_l*latent + w_f*feature + w_i*image`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub latent: f64,
    pub feature: f64,
    pub image: f64,
}

/// Precomputed decodings of target codes so the fit loop does not re-render
/// constant targets every iteration. Keyed by sequence index.
struct TargetCache {
    features: Vec<Option<Vec<f64>>>,
    images: Vec<Option<Vec<f64>>>,
}

impl TargetCache {
    fn build(
        seq: &LatentSequence,
        decoder: &ToyDecoder,
        weights: &LossWeights,
    ) -> Result<TargetCache> {
        let mut features = vec![None; seq.len()];
        let mut images = vec![None; seq.len()];
        for i in 0..seq.len() {
            if weights.feature > 0.0 {
                features[i] = Some(decoder.features(&seq.codes[i])?);
            }
            if weights.image > 0.0 {
                images[i] = Some(decoder.decode_data(&seq.codes[i]));
            }
        }
        Ok(TargetCache { features, images })
    }
}

// ---- unrolled fixed-step integration with tapes -------------------------

struct StepRecord {
    /// One tape per stage evaluation (1 for Euler, 4 for RK4).
    tapes: Vec<Tape>,
    h: f64,
}

struct Unrolled {
    /// States at every window time; `states[0]` is the initial state.
    states: Vec<Vec<f64>>,
    /// Substep records per window interval, in forward order.
    records: Vec<Vec<StepRecord>>,
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn unroll(
    p: &MlpParams,
    z0: &[f64],
    times: &[f64],
    solver: &TrainSolver,
) -> Result<Unrolled> {
    let mut states = Vec::with_capacity(times.len());
    states.push(z0.to_vec());
    let mut records = Vec::with_capacity(times.len() - 1);
    let mut z = z0.to_vec();

    for w in times.windows(2) {
        let h = (w[1] - w[0]) / solver.substeps as f64;
        let mut interval = Vec::with_capacity(solver.substeps);
        for s in 0..solver.substeps {
            let t = w[0] + s as f64 * h;
            let (z_next, tapes) = match solver.method {
                Method::Euler => {
                    let tape = dynamics::forward_tape(p, &z, t)?;
                    let mut zn = z.clone();
                    axpy(&mut zn, h, tape.output());
                    (zn, vec![tape])
                }
                Method::Rk4 => {
                    let t1 = dynamics::forward_tape(p, &z, t)?;
                    let mut in2 = z.clone();
                    axpy(&mut in2, 0.5 * h, t1.output());
                    let t2 = dynamics::forward_tape(p, &in2, t + 0.5 * h)?;
                    let mut in3 = z.clone();
                    axpy(&mut in3, 0.5 * h, t2.output());
                    let t3 = dynamics::forward_tape(p, &in3, t + 0.5 * h)?;
                    let mut in4 = z.clone();
                    axpy(&mut in4, h, t3.output());
                    let t4 = dynamics::forward_tape(p, &in4, t + h)?;
                    let mut zn = z.clone();
                    axpy(&mut zn, h / 6.0, t1.output());
                    axpy(&mut zn, h / 3.0, t2.output());
                    axpy(&mut zn, h / 3.0, t3.output());
                    axpy(&mut zn, h / 6.0, t4.output());
                    (zn, vec![t1, t2, t3, t4])
                }
                Method::Dopri5 => unreachable!("validated fixed-step"),
            };
            z = z_next;
            interval.push(StepRecord { tapes, h });
        }
        states.push(z.clone());
        records.push(interval);
    }
    Ok(Unrolled { states, records })
}

/// Pull the adjoint back through one recorded substep, accumulating the
/// parameter gradient.
fn backprop_step(
    p: &MlpParams,
    rec: &StepRecord,
    adj: &mut [f64],
    grads: &mut MlpParams,
) -> Result<()> {
    let h = rec.h;
    match rec.tapes.len() {
        1 => {
            let kbar: Vec<f64> = adj.iter().map(|a| a * h).collect();
            let (gz, _gt) = dynamics::vjp_accumulate(p, &rec.tapes[0], &kbar, grads)?;
            axpy(adj, 1.0, &gz);
        }
        4 => {
            let a = adj.to_vec();
            let k4b: Vec<f64> = a.iter().map(|x| x * h / 6.0).collect();
            let mut k3b: Vec<f64> = a.iter().map(|x| x * h / 3.0).collect();
            let mut k2b: Vec<f64> = a.iter().map(|x| x * h / 3.0).collect();
            let mut k1b: Vec<f64> = a.iter().map(|x| x * h / 6.0).collect();

            let (gz4, _) = dynamics::vjp_accumulate(p, &rec.tapes[3], &k4b, grads)?;
            axpy(adj, 1.0, &gz4);
            axpy(&mut k3b, h, &gz4);

            let (gz3, _) = dynamics::vjp_accumulate(p, &rec.tapes[2], &k3b, grads)?;
            axpy(adj, 1.0, &gz3);
            axpy(&mut k2b, 0.5 * h, &gz3);

            let (gz2, _) = dynamics::vjp_accumulate(p, &rec.tapes[1], &k2b, grads)?;
            axpy(adj, 1.0, &gz2);
            axpy(&mut k1b, 0.5 * h, &gz2);

            let (gz1, _) = dynamics::vjp_accumulate(p, &rec.tapes[0], &k1b, grads)?;
            axpy(adj, 1.0, &gz1);
        }
        n => return Err(Error::invalid(format!("unexpected stage count {n}"))),
    }
    Ok(())
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Core forward (and optionally backward) pass over one window.
fn window_pass(
    p: &MlpParams,
    window: &Window,
    decoder: &ToyDecoder,
    weights: &LossWeights,
    solver: &TrainSolver,
    cache: Option<&TargetCache>,
    want_grad: bool,
) -> Result<(LossParts, Option<MlpParams>)> {
    solver.validate()?;
    let d = window.z_init.len();
    let n = window.targets.len();
    if n == 0 {
        return Err(Error::invalid("window has no targets"));
    }
    if window.times.len() != n + 1 {
        return Err(Error::invalid("window times and targets are misaligned"));
    }

    let rolled = unroll(p, &window.z_init, &window.times, solver)?;

    let mut latent = 0.0;
    let mut feature = 0.0;
    let mut image = 0.0;
    // dL/d(pred_i) for the backward sweep
    let mut pred_grads: Vec<Vec<f64>> = Vec::with_capacity(n);

    for i in 0..n {
        let pred = &rolled.states[i + 1];
        if pred.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteLoss { time_index: i + 1 });
        }
        let target = &window.targets[i];
        let mut g = vec![0.0; d];

        let diff: Vec<f64> = pred.iter().zip(target).map(|(a, b)| a - b).collect();
        latent += sq_norm(&diff) / d as f64;
        if !latent.is_finite() {
            return Err(Error::NonFiniteLoss { time_index: i + 1 });
        }
        if weights.latent > 0.0 && want_grad {
            axpy(&mut g, weights.latent * 2.0 / (d * n) as f64, &diff);
        }

        if weights.feature > 0.0 {
            let feat_pred = decoder.features(pred)?;
            let feat_target = match cache {
                Some(c) => c.features[window.target_indices[i]]
                    .as_ref()
                    .expect("feature cache built when weight > 0")
                    .clone(),
                None => decoder.features(target)?,
            };
            let m = feat_pred.len();
            let fdiff: Vec<f64> = feat_pred
                .iter()
                .zip(&feat_target)
                .map(|(a, b)| a - b)
                .collect();
            feature += sq_norm(&fdiff) / m as f64;
            if want_grad {
                let pull = decoder.feature_vjp(pred, &fdiff);
                axpy(&mut g, weights.feature * 2.0 / (m * n) as f64, &pull);
            }
        }

        if weights.image > 0.0 {
            let img_pred = decoder.decode_data(pred);
            let img_target = match cache {
                Some(c) => c.images[window.target_indices[i]]
                    .as_ref()
                    .expect("image cache built when weight > 0")
                    .clone(),
                None => decoder.decode_data(target),
            };
            let npix = img_pred.len();
            let idiff: Vec<f64> = img_pred
                .iter()
                .zip(&img_target)
                .map(|(a, b)| a - b)
                .collect();
            image += sq_norm(&idiff) / npix as f64;
            if want_grad {
                let pull = decoder.image_vjp(pred, &idiff);
                axpy(&mut g, weights.image * 2.0 / (npix * n) as f64, &pull);
            }
        }

        pred_grads.push(g);
    }

    latent /= n as f64;
    feature /= n as f64;
    image /= n as f64;
    let total = weights.latent * latent + weights.feature * feature + weights.image * image;
    let parts = LossParts {
        total,
        latent,
        feature,
        image,
    };
    if !total.is_finite() {
        let bad = pred_grads
            .iter()
            .position(|g| g.iter().any(|x| !x.is_finite()))
            .map(|i| i + 1)
            .unwrap_or(0);
        return Err(Error::NonFiniteLoss { time_index: bad });
    }
    if !want_grad {
        return Ok((parts, None));
    }

    // Reverse sweep: walk the intervals backwards, injecting each target's
    // loss gradient as its time is passed.
    let mut grads = p.zeros_like();
    let mut adj = vec![0.0; d];
    for i in (0..n).rev() {
        axpy(&mut adj, 1.0, &pred_grads[i]);
        for rec in rolled.records[i].iter().rev() {
            backprop_step(p, rec, &mut adj, &mut grads)?;
        }
    }
    Ok((parts, Some(grads)))
}

/// Window loss in latent, feature, and image space (means over the window's
/// targets; the latent term is a per-coordinate MSE).
pub fn loss(
    p: &MlpParams,
    window: &Window,
    decoder: &ToyDecoder,
    weights: &LossWeights,
    solver: &TrainSolver,
) -> Result<LossParts> {
    Ok(window_pass(p, window, decoder, weights, solver, None, false)?.0)
}

/// Exact gradient of [`loss`] with respect to the parameters of the
/// discretized objective.
pub fn grad_loss(
    p: &MlpParams,
    window: &Window,
    decoder: &ToyDecoder,
    weights: &LossWeights,
    solver: &TrainSolver,
) -> Result<MlpParams> {
    Ok(window_pass(p, window, decoder, weights, solver, None, true)?
        .1
        .expect("grad requested"))
}

// ---- Adam ----------------------------------------------------------------

/// Adam moment accumulators, shape-matched to the parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: MlpParams,
    v: MlpParams,
    step: usize,
}

impl AdamState {
    pub fn new(p: &MlpParams) -> Self {
        AdamState {
            m: p.zeros_like(),
            v: p.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// Adam with bias correction over flat slices; shared by training and the
/// decoder inversion.
#[allow(clippy::too_many_arguments)]
pub(crate) fn adam_update_slice(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One Adam update; returns the new parameter bundle.
pub fn adam_step(
    state: &mut AdamState,
    params: &MlpParams,
    grads: &MlpParams,
    cfg: &TrainConfig,
) -> Result<MlpParams> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) {
        return Err(Error::invalid("parameter, gradient, and state shapes must match"));
    }
    state.step += 1;
    let mut next = params.clone();
    for (li, layer) in next.layers.iter_mut().enumerate() {
        adam_update_slice(
            &mut layer.w,
            &grads.layers[li].w,
            &mut state.m.layers[li].w,
            &mut state.v.layers[li].w,
            state.step,
            cfg.lr,
            cfg.beta1,
            cfg.beta2,
            cfg.eps,
        );
        adam_update_slice(
            &mut layer.b,
            &grads.layers[li].b,
            &mut state.m.layers[li].b,
            &mut state.v.layers[li].b,
            state.step,
            cfg.lr,
            cfg.beta1,
            cfg.beta2,
            cfg.eps,
        );
    }
    Ok(next)
}

// ---- fit ------------------------------------------------------------------

/// One row of the recorded loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub latent: f64,
    pub feature: f64,
    pub image: f64,
}

/// Result of [`fit`]: the trained model and the per-step loss history.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: FittedModel,
    pub history: Vec<LossRecord>,
}

/// Train the dynamics network on the observed entries of `seq`.
///
/// Held-out indices are excluded from training and only used by evaluation.
/// All randomness (initialization and window sampling) flows through a
/// single generator seeded from `cfg.seed`, so the result is a pure function
/// of `(seq, decoder, cfg)`.
pub fn fit(seq: &LatentSequence, decoder: &ToyDecoder, cfg: &TrainConfig) -> Result<FitReport> {
    seq.validate()?;
    cfg.validate()?;
    let observed = seq.observed_subsequence()?;
    if cfg.window_len >= observed.len() {
        return Err(Error::invalid(format!(
            "window length {} must be smaller than the {} observed entries",
            cfg.window_len,
            observed.len()
        )));
    }
    if (cfg.weights.feature > 0.0 || cfg.weights.image > 0.0)
        && decoder.latent_dim() != seq.dim
    {
        return Err(Error::invalid("decoder latent dim does not match sequence"));
    }

    let time_norm = TimeNorm::new(observed.times[0], *observed.times.last().unwrap())?;
    let normalized = LatentSequence::new(
        observed.dim,
        observed.times.iter().map(|&t| time_norm.normalize(t)).collect(),
        observed.codes.clone(),
        None,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params =
        MlpParams::init_from_rng(&mut rng, seq.dim, &cfg.hidden, cfg.time_input)?;
    let cache = TargetCache::build(&normalized, decoder, &cfg.weights)?;
    let mut adam = AdamState::new(&params);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let anchor = match cfg.anchor {
            WindowAnchor::First => 0,
            WindowAnchor::Random => {
                rng.random_range(0..normalized.len() - cfg.window_len)
            }
        };
        let window = sample_window_at(&normalized, anchor, cfg.window_len, &mut rng)?;
        let (parts, grads) = window_pass(
            &params,
            &window,
            decoder,
            &cfg.weights,
            &cfg.train_solver,
            Some(&cache),
            true,
        )
        .map_err(|e| match e {
            Error::NonFiniteLoss { time_index } => Error::Training {
                step,
                reason: format!("non-finite loss at window time index {time_index}"),
            },
            other => other,
        })?;
        let mut grads = grads.expect("grad requested");

        if let Some(max_norm) = cfg.grad_clip {
            let norm = grads.global_norm();
            if norm > max_norm {
                grads.scale_in_place(max_norm / norm);
            }
        }

        params = adam_step(&mut adam, &params, &grads, cfg)?;
        history.push(LossRecord {
            step,
            total: parts.total,
            latent: parts.latent,
            feature: parts.feature,
            image: parts.image,
        });
    }

    Ok(FitReport {
        model: FittedModel {
            params,
            z0: observed.codes[0].clone(),
            time_norm,
            solver: SolverConfig::default(),
        },
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderKind;
    use crate::synthetic::{SamplingMode, SystemKind, SystemSpec};

    fn tiny_decoder(d: usize) -> ToyDecoder {
        ToyDecoder::with_shape(DecoderKind::Linear, 0, d, (1, 8, 8), 8).unwrap()
    }

    fn constant_sequence(n: usize, value: &[f64]) -> LatentSequence {
        LatentSequence::new(
            value.len(),
            (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
            vec![value.to_vec(); n],
            None,
        )
        .unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn full_window_is_deterministic() {
        let seq = constant_sequence(4, &[1.0, 2.0]);
        let a = sample_window(&seq, 3, &mut rng(0)).unwrap();
        let b = sample_window(&seq, 3, &mut rng(99)).unwrap();
        assert_eq!(a.times, seq.times);
        assert_eq!(a.times, b.times);
        assert_eq!(a.targets, b.targets);
    }

    #[test]
    fn single_target_window_structure() {
        let seq = constant_sequence(5, &[0.5]);
        let w = sample_window(&seq, 1, &mut rng(1)).unwrap();
        assert_eq!(w.times.len(), 2);
        assert_eq!(w.times[0], 0.0);
        assert_eq!(w.targets.len(), 1);
        assert!(w.target_indices[0] >= 1);
    }

    #[test]
    fn window_sampling_is_uniform() {
        let seq = constant_sequence(10, &[0.0]);
        let mut counts = [0usize; 10];
        let mut r = rng(42);
        let draws = 10_000;
        for _ in 0..draws {
            let w = sample_window(&seq, 3, &mut r).unwrap();
            for &i in &w.target_indices {
                counts[i] += 1;
            }
        }
        for &c in &counts[1..] {
            let freq = c as f64 / draws as f64;
            assert!((freq - 1.0 / 3.0).abs() <= 0.02, "freq {freq}");
        }
        assert_eq!(counts[0], 0);
    }

    #[test]
    fn window_rejects_oversized_n() {
        let seq = constant_sequence(4, &[0.0]);
        assert!(sample_window(&seq, 4, &mut rng(0)).is_err());
    }

    /// f == 0 on a constant sequence predicts every target exactly.
    #[test]
    fn zero_field_on_constant_sequence_has_zero_loss() {
        let seq = constant_sequence(4, &[0.3, -0.7]);
        let mut p = MlpParams::init(0, 2, &[4]).unwrap();
        for l in &mut p.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        let w = sample_window(&seq, 3, &mut rng(0)).unwrap();
        let parts = loss(
            &p,
            &w,
            &tiny_decoder(2),
            &LossWeights::default(),
            &TrainSolver::default(),
        )
        .unwrap();
        assert_eq!(parts.total, 0.0);
    }

    #[test]
    fn latent_loss_arithmetic() {
        // Predicted minus target (0.1, -0.1) on a single target with d = 2:
        // latent part is (0.01 + 0.01) / 2 = 0.01. A zero field keeps the
        // prediction at z_init, so pick targets accordingly.
        let mut p = MlpParams::init(0, 2, &[4]).unwrap();
        for l in &mut p.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        let w = Window {
            z_init: vec![0.1, -0.1],
            times: vec![0.0, 1.0],
            targets: vec![vec![0.0, 0.0]],
            target_indices: vec![1],
        };
        let weights = LossWeights {
            latent: 1.0,
            feature: 0.0,
            image: 0.0,
        };
        let parts = loss(&p, &w, &tiny_decoder(2), &weights, &TrainSolver::default()).unwrap();
        assert!((parts.latent - 0.01).abs() <= 1e-15);
        assert!((parts.total - 0.01).abs() <= 1e-15);
    }

    #[test]
    fn loss_decomposes_into_parts() {
        let spec = SystemSpec::new(SystemKind::Spiral, 3, 1).unwrap();
        let seq = spec
            .sample(6, SamplingMode::Regular, 0.0, &mut rng(0))
            .unwrap();
        let p = MlpParams::init(1, 3, &[8]).unwrap();
        let w = sample_window(&seq, 3, &mut rng(2)).unwrap();
        let weights = LossWeights {
            latent: 0.7,
            feature: 0.2,
            image: 0.05,
        };
        let parts = loss(&p, &w, &tiny_decoder(3), &weights, &TrainSolver::default()).unwrap();
        let recomposed =
            weights.latent * parts.latent + weights.feature * parts.feature
                + weights.image * parts.image;
        assert!((parts.total - recomposed).abs() <= 1e-12);
    }

    #[test]
    fn grad_loss_rejects_adaptive_solver() {
        let seq = constant_sequence(3, &[0.0]);
        let p = MlpParams::init(0, 1, &[4]).unwrap();
        let w = sample_window(&seq, 1, &mut rng(0)).unwrap();
        let bad = TrainSolver {
            method: Method::Dopri5,
            substeps: 4,
        };
        let err = grad_loss(&p, &w, &tiny_decoder(1), &LossWeights::default(), &bad).unwrap_err();
        assert!(matches!(err, Error::UnsupportedConfig(_)));
    }

    #[test]
    fn zero_weights_give_zero_loss_and_gradient() {
        let spec = SystemSpec::new(SystemKind::Rotation, 2, 0).unwrap();
        let seq = spec
            .sample(5, SamplingMode::Regular, 0.0, &mut rng(0))
            .unwrap();
        let p = MlpParams::init(3, 2, &[6]).unwrap();
        let w = sample_window(&seq, 2, &mut rng(1)).unwrap();
        let weights = LossWeights {
            latent: 0.0,
            feature: 0.0,
            image: 0.0,
        };
        let solver = TrainSolver::default();
        let parts = loss(&p, &w, &tiny_decoder(2), &weights, &solver).unwrap();
        assert_eq!(parts.total, 0.0);
        let g = grad_loss(&p, &w, &tiny_decoder(2), &weights, &solver).unwrap();
        assert_eq!(g, p.zeros_like());
    }

    /// Prediction and target far enough apart that the squared error
    /// overflows: the bounded field cannot move 1e200 to -1e200, so the
    /// residual is ~2e200 and its square is infinite.
    fn overflowing_sequence() -> LatentSequence {
        LatentSequence::new(
            1,
            vec![0.0, 1.0],
            vec![vec![1e200], vec![-1e200]],
            None,
        )
        .unwrap()
    }

    #[test]
    fn non_finite_loss_names_the_time_index() {
        let seq = overflowing_sequence();
        let p = MlpParams::init(0, 1, &[4]).unwrap();
        let w = sample_window(&seq, 1, &mut rng(0)).unwrap();
        let err = loss(
            &p,
            &w,
            &tiny_decoder(1),
            &LossWeights {
                latent: 1.0,
                feature: 0.0,
                image: 0.0,
            },
            &TrainSolver::default(),
        )
        .unwrap_err();
        match err {
            Error::NonFiniteLoss { time_index } => assert_eq!(time_index, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn fit_wraps_non_finite_loss_with_the_step() {
        let seq = overflowing_sequence();
        let cfg = TrainConfig {
            steps: 5,
            window_len: 1,
            weights: LossWeights {
                latent: 1.0,
                feature: 0.0,
                image: 0.0,
            },
            ..TrainConfig::default()
        };
        let err = fit(&seq, &tiny_decoder(1), &cfg).unwrap_err();
        match err {
            Error::Training { step, .. } => assert_eq!(step, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn feature_only_loss_with_identical_features_has_zero_grad() {
        // With only the feature weight active and identical features the
        // gradient is exactly zero.
        let seq = constant_sequence(3, &[0.4, 0.4]);
        let mut p = MlpParams::init(0, 2, &[4]).unwrap();
        for l in &mut p.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        let w = sample_window(&seq, 2, &mut rng(0)).unwrap();
        let weights = LossWeights {
            latent: 0.0,
            feature: 1.0,
            image: 0.0,
        };
        let g = grad_loss(&p, &w, &tiny_decoder(2), &weights, &TrainSolver::default()).unwrap();
        assert_eq!(g, p.zeros_like());
    }

    #[test]
    fn doubling_latent_weight_doubles_gradient() {
        let spec = SystemSpec::new(SystemKind::Rotation, 2, 3).unwrap();
        let seq = spec
            .sample(5, SamplingMode::Regular, 0.0, &mut rng(1))
            .unwrap();
        let p = MlpParams::init(5, 2, &[6]).unwrap();
        let w = sample_window(&seq, 2, &mut rng(4)).unwrap();
        let solver = TrainSolver::default();
        let w1 = LossWeights {
            latent: 1.0,
            feature: 0.0,
            image: 0.0,
        };
        let w2 = LossWeights {
            latent: 2.0,
            feature: 0.0,
            image: 0.0,
        };
        let g1 = grad_loss(&p, &w, &tiny_decoder(2), &w1, &solver).unwrap();
        let g2 = grad_loss(&p, &w, &tiny_decoder(2), &w2, &solver).unwrap();
        for (l1, l2) in g1.layers().iter().zip(g2.layers()) {
            for (a, b) in l1.w.iter().zip(&l2.w) {
                assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = SystemSpec::new(SystemKind::Spiral, 2, 7).unwrap();
        let seq = spec
            .sample(5, SamplingMode::Regular, 0.0, &mut rng(3))
            .unwrap();
        let decoder = tiny_decoder(2);
        let weights = LossWeights {
            latent: 1.0,
            feature: 0.1,
            image: 0.1,
        };
        let solver = TrainSolver {
            method: Method::Rk4,
            substeps: 4,
        };
        let w = sample_window(&seq, 3, &mut rng(8)).unwrap();
        let p = MlpParams::init(11, 2, &[8]).unwrap();
        let g = grad_loss(&p, &w, &decoder, &weights, &solver).unwrap();

        let fd_eps = 1e-5;
        let mut max_rel: f64 = 0.0;
        let mut g_inf: f64 = 0.0;
        for l in g.layers() {
            for v in l.w.iter().chain(&l.b) {
                g_inf = g_inf.max(v.abs());
            }
        }
        for li in 0..p.layers().len() {
            for wi in 0..p.layers()[li].w.len() {
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp.layers[li].w[wi] += fd_eps;
                pm.layers[li].w[wi] -= fd_eps;
                let lp = loss(&pp, &w, &decoder, &weights, &solver).unwrap().total;
                let lm = loss(&pm, &w, &decoder, &weights, &solver).unwrap().total;
                let fd = (lp - lm) / (2.0 * fd_eps);
                let a = g.layers()[li].w[wi];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3 * g_inf);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel <= 1e-5, "max relative error {max_rel}");
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let p = MlpParams::init(0, 2, &[4]).unwrap();
        let mut state = AdamState::new(&p);
        let cfg = TrainConfig::default();
        let next = adam_step(&mut state, &p, &p.zeros_like(), &cfg).unwrap();
        assert_eq!(next, p);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_bias_correction() {
        // Scalar parameter, g = 0.5, lr = 0.01: m_hat = 0.5, v_hat = 0.25,
        // update = -0.01 * 0.5 / (0.5 + 1e-8) ~ -0.01.
        let mut p = vec![1.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_update_slice(&mut p, &[0.5], &mut m, &mut v, 1, 0.01, 0.9, 0.999, 1e-8);
        assert!((p[0] - (1.0 - 0.01)).abs() <= 1e-9, "{}", p[0]);
    }

    #[test]
    fn adam_update_magnitude_is_bounded_by_lr() {
        let mut p = vec![0.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        let mut prev = 0.0;
        for step in 1..=2 {
            adam_update_slice(&mut p, &[0.37], &mut m, &mut v, step, 0.01, 0.9, 0.999, 1e-8);
            let delta = (p[0] - prev).abs();
            assert!(delta <= 0.01 * (1.0 + 1e-6), "step {step}: {delta}");
            prev = p[0];
        }
    }

    #[test]
    fn fit_constant_sequence_reaches_tiny_mse() {
        let seq = constant_sequence(6, &[0.5, -0.25]);
        let cfg = TrainConfig {
            steps: 400,
            window_len: 3,
            hidden: vec![16, 16],
            weights: LossWeights {
                latent: 1.0,
                feature: 0.0,
                image: 0.0,
            },
            seed: 1,
            ..TrainConfig::default()
        };
        let report = fit(&seq, &tiny_decoder(2), &cfg).unwrap();
        let pred = report.model.predict(&seq.times).unwrap();
        for (i, state) in pred.states.iter().enumerate() {
            let mse: f64 = state
                .iter()
                .zip(&seq.codes[i])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / 2.0;
            assert!(mse <= 1e-6, "index {i}: mse {mse}");
        }
        // Between observations the trajectory must stay at the constant too.
        let between = report.model.predict(&[0.13, 0.37, 0.81]).unwrap();
        for state in &between.states {
            assert!((state[0] - 0.5).abs() <= 1e-3);
            assert!((state[1] + 0.25).abs() <= 1e-3);
        }
    }

    #[test]
    fn fit_is_seeded_deterministic() {
        let spec = SystemSpec::new(SystemKind::Rotation, 2, 0).unwrap();
        let seq = spec
            .sample(6, SamplingMode::Regular, 0.0, &mut rng(0))
            .unwrap();
        let cfg = TrainConfig {
            steps: 30,
            window_len: 3,
            hidden: vec![8],
            seed: 7,
            ..TrainConfig::default()
        };
        let dec = tiny_decoder(2);
        let a = fit(&seq, &dec, &cfg).unwrap();
        let b = fit(&seq, &dec, &cfg).unwrap();
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.total, y.total);
        }
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn fit_rejects_oversized_window() {
        let seq = constant_sequence(3, &[0.0]);
        let cfg = TrainConfig {
            window_len: 5,
            ..TrainConfig::default()
        };
        assert!(fit(&seq, &tiny_decoder(1), &cfg).is_err());
    }

    #[test]
    fn random_anchor_windows_train_too() {
        let spec = SystemSpec::new(SystemKind::Spiral, 2, 2).unwrap();
        let seq = spec
            .sample(8, SamplingMode::Regular, 0.0, &mut rng(0))
            .unwrap();
        let cfg = TrainConfig {
            steps: 20,
            window_len: 2,
            hidden: vec![8],
            anchor: WindowAnchor::Random,
            seed: 3,
            ..TrainConfig::default()
        };
        let report = fit(&seq, &tiny_decoder(2), &cfg).unwrap();
        assert_eq!(report.history.len(), 20);
    }
}
