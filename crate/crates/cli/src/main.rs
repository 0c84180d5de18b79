//! `dynode` — model the dynamics of a latent-code sequence as a learned ODE.
//!
//! The pipeline: `gen` synthesizes a ground-truth sequence, `render` decodes
//! it to images, `invert` recovers latents from those images, `fit` trains
//! the dynamics network, and `predict` / `interpolate` / `edit` / `compare` /
//! `eval` query the fitted trajectory.
//!
//! Exit codes: 0 success, 1 validation error, 2 numerical failure.
//! `DYNODE_LOG` (quiet | info | debug) controls stderr logging.

mod log;

use clap::{Parser, Subcommand, ValueEnum};
use dynode::decoder::{DecoderKind, InvertConfig, ToyDecoder};
use dynode::edit::{compare_interp, propagate_edit, EditDirection};
use dynode::error::Error;
use dynode::io as dio;
use dynode::metrics::SsimConfig;
use dynode::solver::Method;
use dynode::synthetic::{SamplingMode, SystemKind, SystemSpec};
use dynode::train::{fit, LossWeights, TrainConfig, TrainSolver, WindowAnchor};
use dynode::trajectory::{LatentSequence, Prediction};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dynode", version, about = "Continuous-time latent trajectory modeling")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SystemArg {
    Constant,
    Line,
    Rotation,
    Spiral,
    LinearRandom,
    Arc,
}

impl From<SystemArg> for SystemKind {
    fn from(v: SystemArg) -> Self {
        match v {
            SystemArg::Constant => SystemKind::Constant,
            SystemArg::Line => SystemKind::AffineLine,
            SystemArg::Rotation => SystemKind::Rotation,
            SystemArg::Spiral => SystemKind::Spiral,
            SystemArg::LinearRandom => SystemKind::LinearRandom,
            SystemArg::Arc => SystemKind::Arc,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Regular,
    Irregular,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DecoderArg {
    Linear,
    Mlp,
}

impl From<DecoderArg> for DecoderKind {
    fn from(v: DecoderArg) -> Self {
        match v {
            DecoderArg::Linear => DecoderKind::Linear,
            DecoderArg::Mlp => DecoderKind::Mlp,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TrainMethodArg {
    Euler,
    Rk4,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic latent sequence with known dynamics.
    Gen {
        #[arg(long, value_enum)]
        system: SystemArg,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, value_enum, default_value = "regular")]
        mode: ModeArg,
        /// Comma-separated indices to hold out (e.g. 4,8,12,16).
        #[arg(long, value_delimiter = ',')]
        heldout: Vec<usize>,
        /// Fraction of interior indices to hold out at random instead.
        #[arg(long, conflicts_with = "heldout")]
        heldout_frac: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Contraction rate for spiral systems.
        #[arg(long)]
        lambda: Option<f64>,
        /// Angular rate for rotation/spiral/arc systems.
        #[arg(long)]
        omega: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode every frame of a sequence to raw image files.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "linear")]
        decoder: DecoderArg,
        #[arg(long, default_value_t = 0)]
        decoder_seed: u64,
        /// Also write PPM previews next to the raw frames.
        #[arg(long)]
        ppm: bool,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Invert rendered frames back to latent codes (per-frame optimization).
    Invert {
        /// Directory produced by `render`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "linear")]
        decoder: DecoderArg,
        #[arg(long, default_value_t = 0)]
        decoder_seed: u64,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dynamics network on the observed entries of a sequence.
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        /// Targets per training window; defaults to the library heuristic.
        #[arg(long)]
        window: Option<usize>,
        /// Hidden layer widths, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = vec![64, 64, 64])]
        hidden: Vec<usize>,
        #[arg(long, value_enum, default_value = "rk4")]
        train_solver: TrainMethodArg,
        #[arg(long, default_value_t = 8)]
        substeps: usize,
        #[arg(long, default_value_t = 1.0)]
        w_latent: f64,
        #[arg(long, default_value_t = 0.1)]
        w_feature: f64,
        #[arg(long, default_value_t = 0.1)]
        w_image: f64,
        #[arg(long, value_enum, default_value = "linear")]
        decoder: DecoderArg,
        #[arg(long, default_value_t = 0)]
        decoder_seed: u64,
        /// Drop the time input (autonomous field).
        #[arg(long)]
        autonomous: bool,
        /// Anchor windows at random start indices instead of frame 0.
        #[arg(long)]
        random_anchor: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the training loss history as CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the learned trajectory at explicit times.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated raw times.
        #[arg(long, value_delimiter = ',', required = true)]
        times: Vec<f64>,
        /// Output JSON path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict the k+1 states dividing the fitted span uniformly.
    Interpolate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply a direction to the first frame and re-integrate.
    Edit {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated direction vector.
        #[arg(long, value_delimiter = ',', required = true)]
        direction: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        /// Explicit times; defaults to a uniform k-division.
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare trajectory prediction against linear morphing at held-out times.
    Compare {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Times to compare; defaults to every held-out timestamp.
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write rows as CSV (time, ode_err, morph_err).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Reconstruction metrics split by observed/held-out indices.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "linear")]
        decoder: DecoderArg,
        #[arg(long, default_value_t = 0)]
        decoder_seed: u64,
        #[arg(long, default_value_t = 7)]
        ssim_window: usize,
        /// Also write the JSON report to a file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Manifest written by `render` and consumed by `invert`.
#[derive(Debug, Serialize, Deserialize)]
struct RenderManifest {
    version: u32,
    dim: usize,
    times: Vec<f64>,
    heldout: Vec<usize>,
    frames: Vec<String>,
    decoder: String,
    decoder_seed: u64,
}

fn prediction_json(pred: &Prediction, extra: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "times": pred.times,
        "states": pred.states,
        "extrapolated": pred.extrapolated,
        "meta": extra,
    })
}

fn emit_json(value: &serde_json::Value, out: Option<&Path>) -> dynode::Result<()> {
    let mut body = serde_json::to_string_pretty(value).expect("json serializes");
    body.push('\n');
    match out {
        Some(path) => std::fs::write(path, body)?,
        None => print!("{body}"),
    }
    Ok(())
}

fn run(cli: Cli) -> dynode::Result<()> {
    match cli.cmd {
        Command::Gen {
            system,
            dim,
            frames,
            mode,
            heldout,
            heldout_frac,
            noise,
            lambda,
            omega,
            seed,
            out,
        } => {
            let mut spec = SystemSpec::new(system.into(), dim, seed)?.with_noise(noise);
            let (l, o) = (lambda.unwrap_or(spec.lambda), omega.unwrap_or(spec.omega));
            spec = spec.with_rate(l, o);
            let mode = match mode {
                ModeArg::Regular => SamplingMode::Regular,
                ModeArg::Irregular => SamplingMode::Irregular,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut seq = spec.sample(frames, mode, heldout_frac.unwrap_or(0.0), &mut rng)?;
            for &i in &heldout {
                if i >= seq.len() {
                    return Err(Error::invalid(format!("held-out index {i} out of range")));
                }
                if i == 0 {
                    return Err(Error::invalid("index 0 is the initial state and cannot be held out"));
                }
                seq.heldout[i] = true;
            }
            log::info(format!("generated {} frames (dim {})", seq.len(), seq.dim));
            let meta = serde_json::json!({
                "system": format!("{:?}", spec.kind),
                "seed": seed,
                "noise": noise,
                "lambda": spec.lambda,
                "omega": spec.omega,
            });
            dio::save_sequence_with_meta(&seq, meta, &out)
        }
        Command::Render {
            input,
            decoder,
            decoder_seed,
            ppm,
            out,
        } => {
            let seq = dio::load_sequence(&input)?;
            let dec = ToyDecoder::new(decoder.into(), decoder_seed, seq.dim)?;
            std::fs::create_dir_all(&out)?;
            let mut frames = Vec::with_capacity(seq.len());
            for (i, code) in seq.codes.iter().enumerate() {
                let img = dec.decode(code)?;
                let name = format!("frame_{i:04}.f64");
                dio::save_image_raw(&img, &out.join(&name))?;
                if ppm {
                    dio::save_image_ppm(&img, &out.join(format!("frame_{i:04}.ppm")))?;
                }
                frames.push(name);
            }
            let manifest = RenderManifest {
                version: 1,
                dim: seq.dim,
                times: seq.times.clone(),
                heldout: seq.heldout_indices(),
                frames,
                decoder: format!("{:?}", DecoderKind::from(decoder)).to_lowercase(),
                decoder_seed,
            };
            std::fs::write(
                out.join("frames.json"),
                serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
            )?;
            log::info(format!("rendered {} frames to {}", seq.len(), out.display()));
            Ok(())
        }
        Command::Invert {
            input,
            decoder,
            decoder_seed,
            steps,
            lr,
            seed,
            out,
        } => {
            let manifest_path = input.join("frames.json");
            let manifest: RenderManifest = serde_json::from_str(
                &std::fs::read_to_string(&manifest_path)?,
            )
            .map_err(|e| Error::Parse {
                path: manifest_path.display().to_string(),
                reason: e.to_string(),
            })?;
            let dec = ToyDecoder::new(decoder.into(), decoder_seed, manifest.dim)?;
            let mut codes = Vec::with_capacity(manifest.frames.len());
            for (i, name) in manifest.frames.iter().enumerate() {
                let img = dio::load_image_raw(&input.join(name))?;
                let cfg = InvertConfig {
                    steps,
                    lr,
                    seed: seed.wrapping_add(i as u64),
                    init: None,
                };
                codes.push(dec.invert(&img, &cfg)?);
                log::debug(format!("inverted frame {i}"));
            }
            let mut mask = vec![false; manifest.times.len()];
            for &i in &manifest.heldout {
                if i < mask.len() {
                    mask[i] = true;
                }
            }
            let seq = LatentSequence::new(manifest.dim, manifest.times, codes, Some(mask))?;
            log::info(format!("inverted {} frames", seq.len()));
            let meta = serde_json::json!({
                "inverted_from": "images",
                "steps": steps,
                "lr": lr,
                "seed": seed,
            });
            dio::save_sequence_with_meta(&seq, meta, &out)
        }
        Command::Fit {
            input,
            steps,
            lr,
            window,
            hidden,
            train_solver,
            substeps,
            w_latent,
            w_feature,
            w_image,
            decoder,
            decoder_seed,
            autonomous,
            random_anchor,
            seed,
            loss_csv,
            out,
        } => {
            let seq = dio::load_sequence(&input)?;
            let dec = ToyDecoder::new(decoder.into(), decoder_seed, seq.dim)?;
            let observed = seq.observed_indices().len();
            let window_len = window.unwrap_or_else(|| TrainConfig::default_window(observed));
            let cfg = TrainConfig {
                steps,
                lr,
                window_len,
                weights: LossWeights {
                    latent: w_latent,
                    feature: w_feature,
                    image: w_image,
                },
                train_solver: TrainSolver {
                    method: match train_solver {
                        TrainMethodArg::Euler => Method::Euler,
                        TrainMethodArg::Rk4 => Method::Rk4,
                    },
                    substeps,
                },
                hidden,
                time_input: !autonomous,
                anchor: if random_anchor {
                    WindowAnchor::Random
                } else {
                    WindowAnchor::First
                },
                seed,
                ..TrainConfig::default()
            };
            log::info(format!(
                "fitting {steps} steps (window {window_len}, lr {lr}, seed {seed})"
            ));
            let report = fit(&seq, &dec, &cfg)?;
            if let Some(path) = loss_csv {
                dio::write_loss_csv(&report.history, &path)?;
            }
            let last = report.history.last().expect("at least one step");
            log::info(format!("final loss {:.6e}", last.total));
            dio::save_model(&report.model, &out)
        }
        Command::Predict { model, times, out } => {
            let m = dio::load_model(&model)?;
            let pred = m.predict(&times)?;
            emit_json(&prediction_json(&pred, serde_json::Value::Null), out.as_deref())
        }
        Command::Interpolate { model, k, out } => {
            let m = dio::load_model(&model)?;
            let pred = m.interpolate(k)?;
            emit_json(
                &prediction_json(&pred, serde_json::json!({ "k": k })),
                out.as_deref(),
            )
        }
        Command::Edit {
            model,
            direction,
            sigma,
            times,
            k,
            out,
        } => {
            let m = dio::load_model(&model)?;
            let e = EditDirection::new(direction, sigma, "cli")?;
            let pred = if times.is_empty() {
                let grid = m.interpolate(k)?.times;
                propagate_edit(&m, &e, &grid)?
            } else {
                propagate_edit(&m, &e, &times)?
            };
            emit_json(
                &prediction_json(&pred, serde_json::json!({ "sigma": sigma })),
                out.as_deref(),
            )
        }
        Command::Compare {
            model,
            input,
            times,
            out,
            csv,
        } => {
            let m = dio::load_model(&model)?;
            let seq = dio::load_sequence(&input)?;
            let times = if times.is_empty() {
                seq.heldout_indices()
                    .iter()
                    .map(|&i| seq.times[i])
                    .collect()
            } else {
                times
            };
            let rows = compare_interp(&m, &seq, &times)?;
            if let Some(path) = csv {
                let mut body = String::from("time,ode_err,morph_err\n");
                for r in &rows {
                    body.push_str(&format!("{},{},{}\n", r.time, r.ode_err, r.morph_err));
                }
                std::fs::write(path, body)?;
            }
            let json = serde_json::json!({
                "rows": rows
                    .iter()
                    .map(|r| serde_json::json!({
                        "time": r.time,
                        "ode_err": r.ode_err,
                        "morph_err": r.morph_err,
                    }))
                    .collect::<Vec<_>>(),
            });
            emit_json(&json, out.as_deref())
        }
        Command::Eval {
            model,
            input,
            decoder,
            decoder_seed,
            ssim_window,
            out,
        } => {
            let m = dio::load_model(&model)?;
            let seq = dio::load_sequence(&input)?;
            let dec = ToyDecoder::new(decoder.into(), decoder_seed, seq.dim)?;
            let ssim_cfg = SsimConfig {
                window: ssim_window,
                ..SsimConfig::default()
            };
            let report = m.evaluate(&seq, &dec, &ssim_cfg)?;
            let json = report.to_json();
            if let Some(path) = &out {
                emit_json(&json, Some(path))?;
            }
            println!("{}", serde_json::to_string_pretty(&json).expect("json"));
            println!();
            println!("{:<12} {:>12} {:>10}", "", "MSE(x1e3)", "SSIM(x100)");
            let table_row = |name: &str, m: &Option<dynode::trajectory::SplitMetrics>| {
                if let Some(s) = m {
                    println!(
                        "{:<12} {:>12.4} {:>10.2}",
                        name,
                        s.mse_image * 1e3,
                        s.ssim * 100.0
                    );
                }
            };
            table_row("Observed", &report.observed);
            table_row("Unobserved", &report.unobserved);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage and help requests are not failures.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
