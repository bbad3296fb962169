//! The three training regimes: semi-supervised (adversarial phase, then
//! pose regression on the frozen-score critic), supervised-only pose
//! regression, and simultaneous adversarial + supervised updates. Also
//! inference with per-frame timings and the synthetic desk-scale dataset.

use crate::dataset::{
    batch_tensor, sequences_present, BatchIterator, DatasetError, Frame, TrainingSample,
    FRAME_HEIGHT, FRAME_WIDTH, PAIR_CHANNELS,
};
use crate::geometry::{MotionLabel, Quaternion};
use crate::losses::{
    critic_loss, generator_loss, gradient_penalty, loss_beta_grad, loss_rotation,
    loss_translation,
};
use crate::model::{
    load_checkpoint, sample_latent_with, save_checkpoint, Critic, Generator, ModelConfig,
    ModelError, ParamFilter, PosePrediction,
};
use crate::nn::{Adam, AdamConfig, Batch};
use nalgebra::Vector3;
use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("hold-out violation: test sequence {sequence:?} (mirrored: {mirrored}) is present in the training data")]
    Holdout { sequence: String, mirrored: bool },
    #[error("non-finite {term} at iteration {iteration}; diagnostic checkpoint at {checkpoint}")]
    NonFinite {
        term: String,
        iteration: usize,
        checkpoint: PathBuf,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Adversarial phase, then pose regression with generator and score
    /// head frozen.
    SemiSupervised,
    /// Supervised pose regression only; no score head, no generator.
    OnlyVo,
    /// Adversarial and supervised updates in the same iteration.
    Simultaneous,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Semi-supervised phase 1 length.
    pub adversarial_iters: usize,
    /// Semi-supervised phase 2 length.
    pub pose_iters: usize,
    /// Iteration count for the only_vo and simultaneous regimes.
    pub total_iters: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub gp_lambda: f64,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    pub seed: u64,
    /// Sequence held out for testing; training refuses to start if it or
    /// its mirrored twin is present.
    pub test_sequence: Option<String>,
    pub checkpoint_interval: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::SemiSupervised,
            adversarial_iters: 10_000,
            pose_iters: 40_000,
            total_iters: 50_000,
            batch_size: 100,
            learning_rate: 1e-4,
            beta: 100.0,
            gp_lambda: 10.0,
            critic_steps: 5,
            seed: 0,
            test_sequence: None,
            checkpoint_interval: 1000,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.regime == Regime::SemiSupervised && self.critic_steps == 0 {
            return Err(TrainError::Config("critic_steps must be >= 1".into()));
        }
        if self.beta < 0.0 || self.gp_lambda < 0.0 {
            return Err(TrainError::Config("beta and gp_lambda must be >= 0".into()));
        }
        Ok(())
    }

    /// Effective model config: the score head exists only when an
    /// adversarial phase does.
    pub fn effective_model(&self) -> ModelConfig {
        ModelConfig {
            with_score_head: self.regime != Regime::OnlyVo,
            ..self.model.clone()
        }
    }
}

/// One CSV log row; absent terms are NaN-free empty cells on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub phase: &'static str,
    pub l_x: Option<f64>,
    pub l_q: Option<f64>,
    pub l_beta: Option<f64>,
    pub critic: Option<f64>,
    pub generator: Option<f64>,
    pub gp: Option<f64>,
    pub wall_ms: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str =
        "iteration,phase,l_x,l_q,l_beta,critic,generator,gp,wall_ms";

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.phase,
            cell(self.l_x),
            cell(self.l_q),
            cell(self.l_beta),
            cell(self.critic),
            cell(self.generator),
            cell(self.gp),
            self.wall_ms
        )
    }

    fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_x", self.l_x),
            ("l_q", self.l_q),
            ("l_beta", self.l_beta),
            ("critic", self.critic),
            ("generator", self.generator),
            ("gp", self.gp),
        ]
        .into_iter()
        .find(|(_, v)| v.is_some_and(|x| !x.is_finite()))
        .map(|(name, _)| name)
    }
}

pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub checkpoint_path: PathBuf,
}

struct Trainer {
    config: TrainConfig,
    critic: Critic,
    generator: Option<Generator>,
    adam_critic: Adam,
    adam_generator: Adam,
    rng: ChaCha8Rng,
}

impl Trainer {
    fn new(config: &TrainConfig) -> Self {
        let model = config.effective_model();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let critic = Critic::new(&model, &mut rng);
        let generator = (config.regime != Regime::OnlyVo).then(|| Generator::new(&model, &mut rng));
        let adam = AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        };
        Trainer {
            config: config.clone(),
            critic,
            generator,
            adam_critic: Adam::new(adam.clone()),
            adam_generator: Adam::new(adam),
            rng,
        }
    }

    /// One supervised pose update on a real batch. Returns (L_x, L_q,
    /// L_β) batch means.
    fn supervised_step(
        &mut self,
        x: &Batch,
        labels: &[MotionLabel],
        filter: ParamFilter,
    ) -> (f64, f64, f64) {
        let n = labels.len();
        let out = self.critic.forward(x, true).expect("batch shape");
        let mut dpose = Array2::zeros((n, 7));
        let (mut sx, mut sq) = (0.0, 0.0);
        for (i, label) in labels.iter().enumerate() {
            let row = out.poses.row(i);
            let pred = PosePrediction::from_row(row.as_slice().unwrap());
            sx += loss_translation(label, &pred);
            sq += loss_rotation(label, &pred);
            let (gx, gq) = loss_beta_grad(label, &pred, self.config.beta);
            for k in 0..3 {
                dpose[(i, k)] = gx[k] / n as f64;
            }
            for k in 0..4 {
                dpose[(i, 3 + k)] = gq[k] / n as f64;
            }
        }
        self.critic.zero_grad();
        self.critic.backward(None, Some(&dpose), false);
        self.adam_critic.step(|f| self.critic.visit_params(filter, f));
        let (lx, lq) = (sx / n as f64, sq / n as f64);
        (lx, lq, lx + self.config.beta * lq)
    }

    fn fake_batch(&mut self, n: usize) -> Batch {
        let z = sample_latent_with(n, &self.critic.config, &mut self.rng);
        self.generator
            .as_mut()
            .expect("generator required")
            .forward(&z, false)
            .expect("latent shape")
    }

    /// One critic update: Wasserstein loss plus exact gradient penalty.
    /// Returns (critic loss, penalty).
    fn critic_step(&mut self, real: &Batch) -> (f64, f64) {
        let n = real.shape()[0];
        let lambda = self.config.gp_lambda;
        let fake = self.fake_batch(n);

        // The input-gradient backward inside `gradient_penalty` also
        // accumulates a spurious Σ score(interp) parameter gradient, so
        // run it first and clear gradients before the exact passes. The
        // masks and upstream caches survive `zero_grad`.
        self.critic.zero_grad();
        let gp_seed = self.rng.gen();
        let gp = gradient_penalty(real, &fake, &mut self.critic, gp_seed);
        self.critic.zero_grad();
        let mut v = gp.input_grads.clone();
        for (i, &norm) in gp.grad_norms.iter().enumerate() {
            let scale = if norm > 1e-12 {
                lambda * 2.0 * (norm - 1.0) / (n as f64 * norm)
            } else {
                0.0
            };
            v.index_axis_mut(Axis(0), i).mapv_inplace(|g| g * scale);
        }
        self.critic.penalty_pass(&v);

        let real_out = self.critic.forward(real, true).expect("batch shape");
        let real_scores = real_out.scores.expect("score head");
        let d_real = ndarray::Array1::from_elem(n, -1.0 / n as f64);
        self.critic.backward(Some(&d_real), None, false);

        let fake_out = self.critic.forward(&fake, true).expect("batch shape");
        let fake_scores = fake_out.scores.expect("score head");
        let d_fake = ndarray::Array1::from_elem(n, 1.0 / n as f64);
        self.critic.backward(Some(&d_fake), None, false);

        let filter = ParamFilter {
            trunk: true,
            score_head: true,
            pose_head: false,
        };
        self.adam_critic.step(|f| self.critic.visit_params(filter, f));
        (
            critic_loss(&real_scores, &fake_scores, gp.penalty, lambda),
            gp.penalty,
        )
    }

    /// One generator update against the current critic. Returns the
    /// generator loss.
    fn generator_step(&mut self, n: usize) -> f64 {
        let z = sample_latent_with(n, &self.critic.config, &mut self.rng);
        let generator = self.generator.as_mut().expect("generator required");
        generator.zero_grad();
        let fake = generator.forward(&z, true).expect("latent shape");
        // Critic gradients accumulated here are discarded: every critic
        // update starts from zero_grad.
        self.critic.zero_grad();
        let out = self.critic.forward(&fake, true).expect("batch shape");
        let scores = out.scores.expect("score head");
        let dscore = ndarray::Array1::from_elem(n, -1.0 / n as f64);
        let dx = self.critic.backward(Some(&dscore), None, false);
        let generator = self.generator.as_mut().unwrap();
        generator.backward(&dx);
        self.adam_generator.step(|f| generator.visit_params(f));
        generator_loss(&scores)
    }

    fn save(&mut self, path: &Path, iteration: u64) -> Result<(), ModelError> {
        save_checkpoint(
            path,
            &mut self.critic,
            self.generator.as_mut(),
            iteration,
            serde_json::json!({"regime": format!("{:?}", self.config.regime)}),
        )
    }
}

/// Refuses to touch samples from the held-out sequence or its mirror.
fn check_holdout(config: &TrainConfig, samples: &[TrainingSample]) -> Result<(), TrainError> {
    let Some(test_seq) = &config.test_sequence else {
        return Ok(());
    };
    for (seq, mirrored) in sequences_present(samples) {
        if &seq == test_seq {
            return Err(TrainError::Holdout {
                sequence: seq,
                mirrored,
            });
        }
    }
    Ok(())
}

/// Runs the configured regime to completion. Writes `train_log.csv`,
/// periodic `checkpoint_<iter>.ckpt` files, and `final.ckpt` under
/// `out_dir`.
pub fn train(
    config: &TrainConfig,
    samples: &[TrainingSample],
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    check_holdout(config, samples)?;
    std::fs::create_dir_all(out_dir)?;

    let mut trainer = Trainer::new(config);
    let mut batches = BatchIterator::new(samples.len(), config.batch_size, config.seed)?;
    let mut log: Vec<LogRow> = Vec::new();
    let log_path = out_dir.join("train_log.csv");
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    writeln!(log_file, "{}", LogRow::CSV_HEADER)?;

    let phases: Vec<(&'static str, usize)> = match config.regime {
        Regime::SemiSupervised => vec![
            ("adversarial", config.adversarial_iters),
            ("pose", config.pose_iters),
        ],
        Regime::OnlyVo => vec![("pose", config.total_iters)],
        Regime::Simultaneous => vec![("both", config.total_iters)],
    };

    let mut iteration = 0usize;
    for (phase, count) in phases {
        for _ in 0..count {
            iteration += 1;
            let t0 = Instant::now();
            let mut row = LogRow {
                iteration,
                phase,
                l_x: None,
                l_q: None,
                l_beta: None,
                critic: None,
                generator: None,
                gp: None,
                wall_ms: 0.0,
            };
            if phase == "adversarial" || phase == "both" {
                let (mut c_loss, mut gp) = (0.0, 0.0);
                let steps = config.critic_steps.max(1);
                for _ in 0..steps {
                    let idx = batches.next().ok_or(DatasetError::Empty)?;
                    let (x, _) = batch_tensor(samples, &idx);
                    (c_loss, gp) = trainer.critic_step(&x);
                }
                row.critic = Some(c_loss);
                row.gp = Some(gp);
                row.generator = Some(trainer.generator_step(config.batch_size));
            }
            if phase == "pose" || phase == "both" {
                let filter = match config.regime {
                    Regime::OnlyVo => ParamFilter::all(),
                    _ => ParamFilter::trunk_and_pose(),
                };
                let idx = batches.next().ok_or(DatasetError::Empty)?;
                let (x, labels) = batch_tensor(samples, &idx);
                let (lx, lq, lb) = trainer.supervised_step(&x, &labels, filter);
                row.l_x = Some(lx);
                row.l_q = Some(lq);
                row.l_beta = Some(lb);
            }
            row.wall_ms = t0.elapsed().as_secs_f64() * 1e3;

            if let Some(term) = row.non_finite_term() {
                let diag = out_dir.join("diagnostic.ckpt");
                trainer.save(&diag, iteration as u64)?;
                writeln!(log_file, "{}", row.to_csv())?;
                log_file.flush()?;
                return Err(TrainError::NonFinite {
                    term: term.to_string(),
                    iteration,
                    checkpoint: diag,
                });
            }
            writeln!(log_file, "{}", row.to_csv())?;
            log.push(row);

            if config.checkpoint_interval > 0 && iteration % config.checkpoint_interval == 0 {
                trainer.save(
                    &out_dir.join(format!("checkpoint_{iteration:07}.ckpt")),
                    iteration as u64,
                )?;
            }
        }
    }
    log_file.flush()?;
    let final_path = out_dir.join("final.ckpt");
    trainer.save(&final_path, iteration as u64)?;
    Ok(TrainOutcome {
        log,
        checkpoint_path: final_path,
    })
}

/// One pose prediction with its wall-clock processing time.
pub struct TimedPrediction {
    pub prediction: PosePrediction,
    pub wall_ms: f64,
}

/// Runs the critic pose head over consecutive pairs one frame at a time,
/// timing each.
pub fn infer(critic: &mut Critic, pairs: &[(&Frame, &Frame)]) -> Vec<TimedPrediction> {
    let mut out = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let t0 = Instant::now();
        let mut x = Array4::zeros((1, PAIR_CHANNELS, FRAME_HEIGHT, FRAME_WIDTH));
        for (c, frame) in [(0, a), (1, b)] {
            for i in 0..FRAME_HEIGHT {
                for j in 0..FRAME_WIDTH {
                    x[(0, c, i, j)] = crate::dataset::intensity_to_unit(frame.pixels[(i, j)]);
                }
            }
        }
        let res = critic.forward(&x, false).expect("frame shape");
        let prediction = PosePrediction::from_row(res.poses.row(0).as_slice().unwrap());
        out.push(TimedPrediction {
            prediction,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    out
}

/// Loads a checkpoint and runs inference over a sample list's pairs.
pub fn infer_from_checkpoint(
    checkpoint: &Path,
    samples: &[TrainingSample],
) -> Result<Vec<TimedPrediction>, TrainError> {
    let mut ckpt = load_checkpoint(checkpoint)?;
    let pairs: Vec<(&Frame, &Frame)> = samples.iter().map(|s| (&s.pair.0, &s.pair.1)).collect();
    Ok(infer(&mut ckpt.critic, &pairs))
}

/// Converts raw predictions to motion labels (normalized quaternions).
pub fn predictions_to_labels(preds: &[TimedPrediction]) -> Vec<MotionLabel> {
    preds
        .iter()
        .map(|p| MotionLabel {
            x: p.prediction.x_hat,
            q: Quaternion {
                w: p.prediction.q_hat[0],
                x: p.prediction.q_hat[1],
                y: p.prediction.q_hat[2],
                z: p.prediction.q_hat[3],
            }
            .normalized(),
        })
        .collect()
}

/// Deterministic synthetic pair set with a linearly learnable motion cue:
/// the second frame carries 7 vertical bands whose mean intensities
/// encode the 7 label components, over a fixed texture.
pub fn synthetic_dataset(n_pairs: usize, seed: u64) -> Vec<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = |i: usize, j: usize| ((i * 31 + j * 17) % 61) as f64 - 30.0;
    (0..n_pairs)
        .map(|idx| {
            // Small random motion: translation up to ±0.5 m, rotation up
            // to ~0.2 rad about a random axis.
            let x = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0f64),
            );
            let angle: f64 = rng.gen_range(0.0..0.2);
            let axis = if axis.norm() > 1e-9 {
                axis.normalize()
            } else {
                Vector3::z()
            };
            let half = angle / 2.0;
            let q = Quaternion {
                w: half.cos(),
                x: axis.x * half.sin(),
                y: axis.y * half.sin(),
                z: axis.z * half.sin(),
            }
            .canonicalized();
            let label = MotionLabel { x, q };

            let values: [f64; 7] = [x.x, x.y, x.z, q.w, q.x, q.y, q.z];
            let band = FRAME_WIDTH / 7;
            let a_pixels = Array2::from_shape_fn((FRAME_HEIGHT, FRAME_WIDTH), |(i, j)| {
                (128.0 + texture(i, j)).clamp(0.0, 255.0) as u8
            });
            let b_pixels = Array2::from_shape_fn((FRAME_HEIGHT, FRAME_WIDTH), |(i, j)| {
                let k = (j / band).min(6);
                (128.0 + 80.0 * values[k] + 0.2 * texture(i, j)).clamp(0.0, 255.0) as u8
            });
            TrainingSample {
                pair: (
                    Frame::from_pixels(a_pixels, "synthetic", idx, false),
                    Frame::from_pixels(b_pixels, "synthetic", idx, false),
                ),
                label,
            }
        })
        .collect()
}
