//! The trainable dynamics network `f(z, t)`.
//!
//! A small fully connected net with tanh hidden layers and a linear output
//! layer. The latent vector is concatenated with the scalar time as the
//! input (a switch drops the time coordinate for autonomous fields).
//! Forward passes can record a [`Tape`] of activations from which [`vjp`]
//! computes exact reverse-mode products against the inputs and parameters.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Hidden-layer activation. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

/// One dense layer, weights row-major `[out_dim x in_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Layer {
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
            in_dim,
            out_dim,
        }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.w[r * self.in_dim..(r + 1) * self.in_dim]
    }
}

/// Parameter bundle of the dynamics network. Also used as the shape-matched
/// container for parameter gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub(crate) layers: Vec<Layer>,
    latent_dim: usize,
    activation: Activation,
    time_input: bool,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases, tanh hidden layers, time fed as
    /// an extra input coordinate. The same seed yields identical parameters.
    pub fn init(seed: u64, latent_dim: usize, hidden: &[usize]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_from_rng(&mut rng, latent_dim, hidden, true)
    }

    /// [`MlpParams::init`] with an explicit choice of whether the field sees
    /// the time coordinate (`time_input = false` gives an autonomous field).
    pub fn init_with(seed: u64, latent_dim: usize, hidden: &[usize], time_input: bool) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_from_rng(&mut rng, latent_dim, hidden, time_input)
    }

    pub(crate) fn init_from_rng(
        rng: &mut impl Rng,
        latent_dim: usize,
        hidden: &[usize],
        time_input: bool,
    ) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::invalid("latent dimension must be at least 1"));
        }
        if hidden.is_empty() {
            return Err(Error::invalid("hidden layer list must be non-empty"));
        }
        if hidden.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }

        let input_dim = latent_dim + usize::from(time_input);
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(latent_dim);

        let layers = dims
            .windows(2)
            .map(|d| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
                    .collect();
                Layer {
                    w,
                    b: vec![0.0; fan_out],
                    in_dim: fan_in,
                    out_dim: fan_out,
                }
            })
            .collect();

        Ok(MlpParams {
            layers,
            latent_dim,
            activation: Activation::Tanh,
            time_input,
        })
    }

    /// Assemble a network from explicit layers, validating the shape chain.
    /// A single layer yields a purely linear field.
    pub fn from_layers(layers: Vec<Layer>, latent_dim: usize, time_input: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("at least one layer required"));
        }
        let input_dim = latent_dim + usize::from(time_input);
        if layers[0].in_dim != input_dim {
            return Err(Error::invalid(format!(
                "first layer input dim {} does not match latent_dim{} = {}",
                layers[0].in_dim,
                if time_input { " + 1" } else { "" },
                input_dim
            )));
        }
        if layers.last().unwrap().out_dim != latent_dim {
            return Err(Error::invalid(format!(
                "last layer output dim {} does not match latent dim {}",
                layers.last().unwrap().out_dim,
                latent_dim
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].in_dim != pair[0].out_dim {
                return Err(Error::invalid(format!(
                    "layer {} output dim {} does not feed layer {} input dim {}",
                    i,
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        for layer in &layers {
            if layer.w.len() != layer.in_dim * layer.out_dim || layer.b.len() != layer.out_dim {
                return Err(Error::invalid("layer buffer sizes do not match declared dims"));
            }
            if layer.w.iter().chain(&layer.b).any(|x| !x.is_finite()) {
                return Err(Error::invalid("layer parameters must be finite"));
            }
        }
        Ok(MlpParams {
            layers,
            latent_dim,
            activation: Activation::Tanh,
            time_input,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn time_input(&self) -> bool {
        self.time_input
    }

    pub fn input_dim(&self) -> usize {
        self.latent_dim + usize::from(self.time_input)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable layer access, mainly for perturbation-based testing. Callers
    /// must keep the buffer lengths consistent with the declared dims.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.out_dim)
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// A same-shape bundle of zeros (for gradients and optimizer moments).
    pub fn zeros_like(&self) -> MlpParams {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim))
                .collect(),
            latent_dim: self.latent_dim,
            activation: self.activation,
            time_input: self.time_input,
        }
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.latent_dim == other.latent_dim
            && self.time_input == other.time_input
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.in_dim == b.in_dim && a.out_dim == b.out_dim)
    }

    /// Euclidean norm over every weight and bias.
    pub fn global_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(&l.b))
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for l in &mut self.layers {
            for x in l.w.iter_mut().chain(l.b.iter_mut()) {
                *x *= s;
            }
        }
    }
}

/// Recorded activations of one forward pass: the concatenated input and the
/// post-activation output of every layer (the last entry is the network
/// output). Replaying the tape reproduces the forward values exactly.
#[derive(Debug, Clone)]
pub struct Tape {
    input: Vec<f64>,
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape holds at least one layer")
    }
}

/// Evaluate `f(z, t)` and record the tape.
pub fn forward_tape(p: &MlpParams, z: &[f64], t: f64) -> Result<Tape> {
    if z.len() != p.latent_dim {
        return Err(Error::invalid(format!(
            "latent dim mismatch: expected {}, got {}",
            p.latent_dim,
            z.len()
        )));
    }
    if !t.is_finite() {
        return Err(Error::invalid("time must be finite"));
    }

    let mut input = Vec::with_capacity(p.input_dim());
    input.extend_from_slice(z);
    if p.time_input {
        input.push(t);
    }

    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(p.layers.len());
    for (i, layer) in p.layers.iter().enumerate() {
        let last = i + 1 == p.layers.len();
        let cur: &[f64] = if i == 0 { &input } else { &acts[i - 1] };
        let mut out = vec![0.0; layer.out_dim];
        for (r, o) in out.iter_mut().enumerate() {
            let mut s = layer.b[r];
            for (wv, xv) in layer.row(r).iter().zip(cur) {
                s += wv * xv;
            }
            *o = if last { s } else { s.tanh() };
        }
        acts.push(out);
    }
    Ok(Tape { input, acts })
}

/// Evaluate `f(z, t)`.
pub fn forward(p: &MlpParams, z: &[f64], t: f64) -> Result<Vec<f64>> {
    let mut tape = forward_tape(p, z, t)?;
    Ok(tape.acts.pop().expect("tape holds at least one layer"))
}

/// Reverse-mode products of one taped forward pass: for a cotangent `v`
/// returns `(vᵀ ∂f/∂z, vᵀ ∂f/∂t, vᵀ ∂f/∂θ)`.
pub fn vjp(p: &MlpParams, tape: &Tape, v: &[f64]) -> Result<(Vec<f64>, f64, MlpParams)> {
    let mut grads = p.zeros_like();
    let (gz, gt) = vjp_accumulate(p, tape, v, &mut grads)?;
    Ok((gz, gt, grads))
}

/// Like [`vjp`] but accumulates the parameter gradient into `grads`
/// (which must be shape-matched to `p`). Returns `(grad_z, grad_t)`.
pub fn vjp_accumulate(
    p: &MlpParams,
    tape: &Tape,
    v: &[f64],
    grads: &mut MlpParams,
) -> Result<(Vec<f64>, f64)> {
    if v.len() != p.latent_dim {
        return Err(Error::invalid(format!(
            "cotangent dim mismatch: expected {}, got {}",
            p.latent_dim,
            v.len()
        )));
    }
    if tape.acts.len() != p.layers.len() || tape.input.len() != p.input_dim() {
        return Err(Error::invalid("tape does not match network shape"));
    }
    if !p.same_shape(grads) {
        return Err(Error::invalid("gradient bundle shape mismatch"));
    }

    let last_idx = p.layers.len() - 1;
    let mut u = v.to_vec(); // gradient w.r.t. the current layer's output
    for i in (0..p.layers.len()).rev() {
        let layer = &p.layers[i];
        let a = &tape.acts[i];
        // Through the activation: tanh' = 1 - tanh^2, output layer is linear.
        let gpre: Vec<f64> = if i == last_idx {
            u.clone()
        } else {
            u.iter().zip(a).map(|(ui, ai)| ui * (1.0 - ai * ai)).collect()
        };

        let input_i: &[f64] = if i == 0 { &tape.input } else { &tape.acts[i - 1] };
        let gl = &mut grads.layers[i];
        for (r, &g) in gpre.iter().enumerate() {
            gl.b[r] += g;
            let grow = &mut gl.w[r * layer.in_dim..(r + 1) * layer.in_dim];
            for (gw, x) in grow.iter_mut().zip(input_i) {
                *gw += g * x;
            }
        }

        let mut up = vec![0.0; layer.in_dim];
        for (r, &g) in gpre.iter().enumerate() {
            for (acc, wv) in up.iter_mut().zip(layer.row(r)) {
                *acc += wv * g;
            }
        }
        u = up;
    }

    let grad_z = u[..p.latent_dim].to_vec();
    let grad_t = if p.time_input { u[p.latent_dim] } else { 0.0 };
    Ok((grad_z, grad_t))
}

/// [`crate::solver::VectorField`] view of a parameter bundle.
pub struct MlpField<'a> {
    params: &'a MlpParams,
}

impl<'a> MlpField<'a> {
    pub fn new(params: &'a MlpParams) -> Self {
        MlpField { params }
    }
}

impl crate::solver::VectorField for MlpField<'_> {
    fn eval(&self, z: &[f64], t: f64, out: &mut [f64]) {
        let tape = forward_tape(self.params, z, t).expect("field evaluated at matching dim");
        out.copy_from_slice(tape.output());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relative_close(a: f64, b: f64, scale: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(scale)
    }

    #[test]
    fn same_seed_gives_identical_params() {
        let a = MlpParams::init(7, 2, &[64, 64, 64]).unwrap();
        let b = MlpParams::init(7, 2, &[64, 64, 64]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shapes_follow_architecture() {
        let p = MlpParams::init(0, 2, &[64, 64, 64]).unwrap();
        let dims: Vec<(usize, usize)> = p.layers().iter().map(|l| (l.out_dim, l.in_dim)).collect();
        assert_eq!(dims, vec![(64, 3), (64, 64), (64, 64), (2, 64)]);
        for l in p.layers() {
            assert_eq!(l.b.len(), l.out_dim);
        }
    }

    #[test]
    fn glorot_bound_holds_for_all_layers() {
        for seed in 0..10 {
            let p = MlpParams::init(seed, 3, &[16, 8]).unwrap();
            for l in p.layers() {
                let bound = (6.0 / (l.in_dim + l.out_dim) as f64).sqrt();
                assert!(l.w.iter().all(|w| w.abs() <= bound));
                assert!(l.b.iter().all(|&b| b == 0.0));
            }
        }
    }

    #[test]
    fn rejects_degenerate_architecture() {
        assert!(MlpParams::init(0, 0, &[8]).is_err());
        assert!(MlpParams::init(0, 2, &[]).is_err());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let mut p = MlpParams::init(1, 3, &[8]).unwrap();
        for l in &mut p.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        let out = forward(&p, &[0.3, -0.8, 2.0], 0.7).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 0.0]);
    }

    /// A single layer acts as the plain linear map W (z, t) + b.
    #[test]
    fn single_linear_layer_matches_definition() {
        let layer = Layer {
            w: vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0],
            b: vec![0.25, -0.5],
            in_dim: 3,
            out_dim: 2,
        };
        let p = MlpParams::from_layers(vec![layer], 2, true).unwrap();
        let out = forward(&p, &[2.0, -1.0], 0.5).unwrap();
        // row0: 1*2 + 2*(-1) + 3*0.5 + 0.25 = 1.75
        // row1: -1*2 + 0.5*(-1) + 0*0.5 - 0.5 = -3.0
        assert!((out[0] - 1.75).abs() < 1e-15);
        assert!((out[1] + 3.0).abs() < 1e-15);
    }

    #[test]
    fn output_is_finite_and_bounded_by_last_layer() {
        let p = MlpParams::init(11, 4, &[32, 32]).unwrap();
        let last = p.layers().last().unwrap();
        let row_bound = (0..last.out_dim)
            .map(|r| last.row(r).iter().map(|w| w.abs()).sum::<f64>())
            .fold(0.0f64, f64::max);
        let bias_bound = last.b.iter().map(|b| b.abs()).fold(0.0f64, f64::max);
        let bound = row_bound + bias_bound;

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let z: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 20.0 - 10.0).collect();
            let t: f64 = rng.random::<f64>();
            let out = forward(&p, &z, t).unwrap();
            for x in &out {
                assert!(x.is_finite());
                assert!(x.abs() <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_dim_mismatch() {
        let p = MlpParams::init(0, 2, &[4]).unwrap();
        assert!(forward(&p, &[1.0, 2.0, 3.0], 0.0).is_err());
    }

    #[test]
    fn tape_replay_matches_fresh_forward() {
        let p = MlpParams::init(3, 3, &[8, 8]).unwrap();
        let tape = forward_tape(&p, &[0.1, -0.2, 0.3], 0.4).unwrap();
        let fresh = forward(&p, &[0.1, -0.2, 0.3], 0.4).unwrap();
        assert_eq!(tape.output(), fresh.as_slice());
    }

    #[test]
    fn vjp_zero_cotangent_gives_zero_gradients() {
        let p = MlpParams::init(2, 3, &[8]).unwrap();
        let tape = forward_tape(&p, &[0.5, 0.5, 0.5], 0.1).unwrap();
        let (gz, gt, gp) = vjp(&p, &tape, &[0.0, 0.0, 0.0]).unwrap();
        assert!(gz.iter().all(|&x| x == 0.0));
        assert_eq!(gt, 0.0);
        assert_eq!(gp, p.zeros_like());
    }

    #[test]
    fn vjp_linear_layer_is_transposed_weight() {
        // f(z, t) = W (z, t): grad_z must be the z-columns of W, transposed.
        let layer = Layer {
            w: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            b: vec![0.0, 0.0],
            in_dim: 3,
            out_dim: 2,
        };
        let p = MlpParams::from_layers(vec![layer], 2, true).unwrap();
        let tape = forward_tape(&p, &[1.0, 1.0], 1.0).unwrap();
        let v = [1.0, -2.0];
        let (gz, gt, _) = vjp(&p, &tape, &v).unwrap();
        // grad_z = W[:, 0..2]^T v = (1*1 + 4*(-2), 2*1 + 5*(-2))
        assert_eq!(gz, vec![-7.0, -8.0]);
        // grad_t = W[:, 2]^T v = 3*1 + 6*(-2)
        assert_eq!(gt, -9.0);
    }

    #[test]
    fn vjp_matches_central_finite_differences() {
        let d = 3;
        let h = 1e-5;
        let z = [0.3, -0.7, 0.2];
        let t = 0.35;
        let v = [0.8, -1.1, 0.4];

        for seed in 0..20 {
            let p = MlpParams::init(seed, d, &[6, 5]).unwrap();
            let tape = forward_tape(&p, &z, t).unwrap();
            let (gz, gt, gp) = vjp(&p, &tape, &v).unwrap();

            let dot = |p: &MlpParams, z: &[f64], t: f64| -> f64 {
                forward(p, z, t)
                    .unwrap()
                    .iter()
                    .zip(&v)
                    .map(|(o, vi)| o * vi)
                    .sum()
            };

            let scale = 1e-3;
            for i in 0..d {
                let mut zp = z;
                let mut zm = z;
                zp[i] += h;
                zm[i] -= h;
                let fd = (dot(&p, &zp, t) - dot(&p, &zm, t)) / (2.0 * h);
                assert!(relative_close(gz[i], fd, scale, 1e-6), "gz[{i}]: {} vs {fd}", gz[i]);
            }

            let fd_t = (dot(&p, &z, t + h) - dot(&p, &z, t - h)) / (2.0 * h);
            assert!(relative_close(gt, fd_t, scale, 1e-6), "gt: {gt} vs {fd_t}");

            for li in 0..p.layers().len() {
                for wi in 0..p.layers()[li].w.len() {
                    let mut pp = p.clone();
                    let mut pm = p.clone();
                    pp.layers[li].w[wi] += h;
                    pm.layers[li].w[wi] -= h;
                    let fd = (dot(&pp, &z, t) - dot(&pm, &z, t)) / (2.0 * h);
                    assert!(
                        relative_close(gp.layers()[li].w[wi], fd, scale, 1e-6),
                        "w[{li}][{wi}]"
                    );
                }
                for bi in 0..p.layers()[li].b.len() {
                    let mut pp = p.clone();
                    let mut pm = p.clone();
                    pp.layers[li].b[bi] += h;
                    pm.layers[li].b[bi] -= h;
                    let fd = (dot(&pp, &z, t) - dot(&pm, &z, t)) / (2.0 * h);
                    assert!(
                        relative_close(gp.layers()[li].b[bi], fd, scale, 1e-6),
                        "b[{li}][{bi}]"
                    );
                }
            }
        }
    }

    #[test]
    fn autonomous_variant_drops_time_input() {
        let p = MlpParams::init_with(0, 2, &[4], false).unwrap();
        assert_eq!(p.input_dim(), 2);
        let a = forward(&p, &[0.4, 0.6], 0.0).unwrap();
        let b = forward(&p, &[0.4, 0.6], 123.0).unwrap();
        assert_eq!(a, b);
        let tape = forward_tape(&p, &[0.4, 0.6], 0.0).unwrap();
        let (_, gt, _) = vjp(&p, &tape, &[1.0, 1.0]).unwrap();
        assert_eq!(gt, 0.0);
    }
}
