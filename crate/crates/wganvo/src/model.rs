//! The generator and the two-headed critic. The generator maps a latent
//! vector to a synthetic pair of consecutive frames; the critic shares a
//! strided convolutional trunk between an unbounded scalar score head and
//! a three-layer pose head with 7 outputs (translation + quaternion).
//!
//! The trunk has no batch-coupled normalization, which gradient-penalty
//! training forbids.

use crate::dataset::{FRAME_HEIGHT, FRAME_WIDTH, PAIR_CHANNELS};
use crate::losses::BatchScorer;
use crate::nn::{Adam, Batch, Conv2d, ConvTranspose2d, LeakyRelu, Linear, ParamVisitor, Tanh};
use nalgebra::{Vector3, Vector4};
use ndarray::{Array1, Array2, Axis, Ix2, Ix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Trunk output resolution after four stride-2 stages from 96x128.
const TRUNK_H: usize = FRAME_HEIGHT / 16;
const TRUNK_W: usize = FRAME_WIDTH / 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("latent dimension mismatch: got {got}, expected {expected}")]
    LatentDim { got: usize, expected: usize },
    #[error("input shape {got:?}, expected (N, {c}, {h}, {w})")]
    InputShape {
        got: Vec<usize>,
        c: usize,
        h: usize,
        w: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentDistribution {
    /// Uniform on [-1, 1] per component (the default).
    Uniform,
    /// Standard normal per component.
    Normal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Channel count of the first critic stage; stages double from here.
    pub base_channels: usize,
    pub pose_fc1: usize,
    pub pose_fc2: usize,
    pub leaky_slope: f64,
    /// The supervised-only variant drops the probabilistic head.
    pub with_score_head: bool,
    pub latent_distribution: LatentDistribution,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 128,
            base_channels: 64,
            pose_fc1: 1024,
            pose_fc2: 128,
            leaky_slope: 0.2,
            with_score_head: true,
            latent_distribution: LatentDistribution::Uniform,
        }
    }
}

impl ModelConfig {
    /// Narrow variant used by desk-scale smoke runs.
    pub fn reduced(base_channels: usize) -> Self {
        ModelConfig {
            base_channels,
            pose_fc1: 256,
            pose_fc2: 64,
            ..ModelConfig::default()
        }
    }

    pub fn trunk_flat_dim(&self) -> usize {
        8 * self.base_channels * TRUNK_H * TRUNK_W
    }

    /// Stable digest of the architecture-defining fields.
    pub fn architecture_hash(&self) -> String {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        serde_json::to_string(self).unwrap().hash(&mut h);
        format!("{:016x}", h.finish())
    }
}

/// Draws a batch of latent vectors, deterministic under the seed.
pub fn sample_latent(
    batch: usize,
    config: &ModelConfig,
    seed: u64,
) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_latent_with(batch, config, &mut rng)
}

pub fn sample_latent_with(
    batch: usize,
    config: &ModelConfig,
    rng: &mut impl Rng,
) -> Array2<f64> {
    match config.latent_distribution {
        LatentDistribution::Uniform => {
            let d = Uniform::new(-1.0f64, 1.0);
            Array2::from_shape_fn((batch, config.latent_dim), |_| d.sample(rng))
        }
        LatentDistribution::Normal => {
            let d = Normal::new(0.0f64, 1.0).unwrap();
            Array2::from_shape_fn((batch, config.latent_dim), |_| d.sample(rng))
        }
    }
}

/// Raw network pose output: translation estimate plus unnormalized
/// quaternion in (w, x, y, z) order.
#[derive(Clone, Copy, Debug)]
pub struct PosePrediction {
    pub x_hat: Vector3<f64>,
    pub q_hat: Vector4<f64>,
}

impl PosePrediction {
    pub fn from_row(row: &[f64]) -> Self {
        PosePrediction {
            x_hat: Vector3::new(row[0], row[1], row[2]),
            q_hat: Vector4::new(row[3], row[4], row[5], row[6]),
        }
    }

    pub fn to_row(&self) -> [f64; 7] {
        [
            self.x_hat.x,
            self.x_hat.y,
            self.x_hat.z,
            self.q_hat[0],
            self.q_hat[1],
            self.q_hat[2],
            self.q_hat[3],
        ]
    }
}

/// Latent-to-frame-pair generator: linear projection to a 6x8 grid, four
/// fractionally-strided 4x4 stages, tanh output in [-1, 1].
pub struct Generator {
    pub config: ModelConfig,
    fc: Linear,
    fc_act: LeakyRelu<Ix2>,
    stages: Vec<ConvTranspose2d>,
    acts: Vec<LeakyRelu<Ix4>>,
    out: Tanh,
}

impl Generator {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let cb = config.base_channels;
        let fc = Linear::new(config.latent_dim, 8 * cb * TRUNK_H * TRUNK_W, rng);
        let stages = vec![
            ConvTranspose2d::new(8 * cb, 4 * cb, 4, 2, 1, rng),
            ConvTranspose2d::new(4 * cb, 2 * cb, 4, 2, 1, rng),
            ConvTranspose2d::new(2 * cb, cb, 4, 2, 1, rng),
            ConvTranspose2d::new(cb, PAIR_CHANNELS, 4, 2, 1, rng),
        ];
        Generator {
            config: config.clone(),
            fc,
            fc_act: LeakyRelu::new(0.0),
            stages,
            acts: (0..3).map(|_| LeakyRelu::new(0.0)).collect(),
            out: Tanh::new(),
        }
    }

    /// z: (N, latent_dim) → (N, 2, 96, 128) in [-1, 1].
    pub fn forward(&mut self, z: &Array2<f64>, train: bool) -> Result<Batch, ModelError> {
        if z.shape()[1] != self.config.latent_dim {
            return Err(ModelError::LatentDim {
                got: z.shape()[1],
                expected: self.config.latent_dim,
            });
        }
        let n = z.shape()[0];
        let cb = self.config.base_channels;
        let h = self.fc.forward(z, train);
        let h = self.fc_act.forward(&h, train);
        let mut x = h
            .into_shape_with_order((n, 8 * cb, TRUNK_H, TRUNK_W))
            .unwrap();
        for (i, stage) in self.stages.iter_mut().enumerate() {
            x = stage.forward(&x, train);
            if i < 3 {
                x = self.acts[i].forward(&x, train);
            }
        }
        Ok(self.out.forward(&x, train))
    }

    /// Accumulates parameter gradients from the output gradient.
    pub fn backward(&mut self, dout: &Batch) {
        let n = dout.shape()[0];
        let cb = self.config.base_channels;
        let mut d = self.out.backward(dout);
        for i in (0..self.stages.len()).rev() {
            if i < 3 {
                d = self.acts[i].backward(&d);
            }
            d = self.stages[i].backward(&d);
        }
        let d2 = d
            .into_shape_with_order((n, 8 * cb * TRUNK_H * TRUNK_W))
            .unwrap();
        let d2 = self.fc_act.backward(&d2);
        self.fc.backward(&d2, false);
    }

    pub fn zero_grad(&mut self) {
        self.fc.zero_grad();
        for s in &mut self.stages {
            s.zero_grad();
        }
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor) {
        f(
            "gen.fc.w",
            self.fc.w.as_slice_mut().unwrap(),
            self.fc.dw.as_slice().unwrap(),
        );
        f(
            "gen.fc.b",
            self.fc.b.as_slice_mut().unwrap(),
            self.fc.db.as_slice().unwrap(),
        );
        for (i, s) in self.stages.iter_mut().enumerate() {
            f(
                &format!("gen.deconv{i}.w"),
                s.w.as_slice_mut().unwrap(),
                s.dw.as_slice().unwrap(),
            );
            f(
                &format!("gen.deconv{i}.b"),
                s.b.as_slice_mut().unwrap(),
                s.db.as_slice().unwrap(),
            );
        }
    }
}

/// Which critic parameter groups a visitor should see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamFilter {
    pub trunk: bool,
    pub score_head: bool,
    pub pose_head: bool,
}

impl ParamFilter {
    pub fn all() -> Self {
        ParamFilter {
            trunk: true,
            score_head: true,
            pose_head: true,
        }
    }

    /// Pose-regression phase: the adversarial head stays frozen.
    pub fn trunk_and_pose() -> Self {
        ParamFilter {
            trunk: true,
            score_head: false,
            pose_head: true,
        }
    }
}

pub struct CriticOutput {
    pub scores: Option<Array1<f64>>,
    /// (N, 7) raw pose rows.
    pub poses: Array2<f64>,
}

/// Convolutional trunk with a scalar Wasserstein score head and a
/// three-layer pose head.
pub struct Critic {
    pub config: ModelConfig,
    convs: Vec<Conv2d>,
    acts: Vec<LeakyRelu<Ix4>>,
    score_fc: Option<Linear>,
    pose_fc1: Linear,
    pose_act1: LeakyRelu<Ix2>,
    pose_fc2: Linear,
    pose_act2: LeakyRelu<Ix2>,
    pose_fc3: Linear,
}

impl Critic {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let cb = config.base_channels;
        let convs = vec![
            Conv2d::new(PAIR_CHANNELS, cb, 4, 2, 1, rng),
            Conv2d::new(cb, 2 * cb, 4, 2, 1, rng),
            Conv2d::new(2 * cb, 4 * cb, 4, 2, 1, rng),
            Conv2d::new(4 * cb, 8 * cb, 4, 2, 1, rng),
        ];
        let flat = config.trunk_flat_dim();
        Critic {
            config: config.clone(),
            convs,
            acts: (0..4).map(|_| LeakyRelu::new(config.leaky_slope)).collect(),
            score_fc: config.with_score_head.then(|| Linear::new(flat, 1, rng)),
            pose_fc1: Linear::new(flat, config.pose_fc1, rng),
            pose_act1: LeakyRelu::new(config.leaky_slope),
            pose_fc2: Linear::new(config.pose_fc1, config.pose_fc2, rng),
            pose_act2: LeakyRelu::new(config.leaky_slope),
            pose_fc3: Linear::new(config.pose_fc2, 7, rng),
        }
    }

    fn check_shape(&self, x: &Batch) -> Result<(), ModelError> {
        let s = x.shape();
        if s[1] != PAIR_CHANNELS || s[2] != FRAME_HEIGHT || s[3] != FRAME_WIDTH {
            return Err(ModelError::InputShape {
                got: s.to_vec(),
                c: PAIR_CHANNELS,
                h: FRAME_HEIGHT,
                w: FRAME_WIDTH,
            });
        }
        Ok(())
    }

    /// x: (N, 2, 96, 128) → scores (if the head exists) and (N, 7) poses.
    pub fn forward(&mut self, x: &Batch, train: bool) -> Result<CriticOutput, ModelError> {
        self.check_shape(x)?;
        let n = x.shape()[0];
        let mut h = x.clone();
        for i in 0..self.convs.len() {
            h = self.convs[i].forward(&h, train);
            h = self.acts[i].forward(&h, train);
        }
        let flat = h
            .into_shape_with_order((n, self.config.trunk_flat_dim()))
            .unwrap();
        let scores = self.score_fc.as_mut().map(|fc| {
            let s = fc.forward(&flat, train);
            s.index_axis(Axis(1), 0).to_owned()
        });
        let p = self.pose_fc1.forward(&flat, train);
        let p = self.pose_act1.forward(&p, train);
        let p = self.pose_fc2.forward(&p, train);
        let p = self.pose_act2.forward(&p, train);
        let poses = self.pose_fc3.forward(&p, train);
        Ok(CriticOutput { scores, poses })
    }

    /// Accumulates parameter gradients for the given head gradients and
    /// returns the input gradient. `keep_t` caches the score-path upstream
    /// gradients for [`Critic::penalty_pass`].
    pub fn backward(
        &mut self,
        dscore: Option<&Array1<f64>>,
        dpose: Option<&Array2<f64>>,
        keep_t: bool,
    ) -> Batch {
        let n = dscore
            .map(|d| d.len())
            .or_else(|| dpose.map(|d| d.shape()[0]))
            .expect("at least one head gradient");
        let flat_dim = self.config.trunk_flat_dim();
        let mut dflat = Array2::zeros((n, flat_dim));
        if let Some(dp) = dpose {
            let d = self.pose_fc3.backward(dp, false);
            let d = self.pose_act2.backward(&d);
            let d = self.pose_fc2.backward(&d, false);
            let d = self.pose_act1.backward(&d);
            dflat += &self.pose_fc1.backward(&d, false);
        }
        if let Some(ds) = dscore {
            let fc = self.score_fc.as_mut().expect("score head absent");
            let col = ds.view().insert_axis(Axis(1)).to_owned();
            dflat += &fc.backward(&col, keep_t);
        }
        let cb = self.config.base_channels;
        let mut d = dflat
            .into_shape_with_order((n, 8 * cb, TRUNK_H, TRUNK_W))
            .unwrap();
        for i in (0..self.convs.len()).rev() {
            d = self.acts[i].backward(&d);
            d = self.convs[i].backward(&d, keep_t);
        }
        d
    }

    /// Second accumulation pass of the gradient penalty: pushes `v`
    /// through the frozen masks, adding the parameter gradient of
    /// `Σ_i v_iᵀ ∇_x score(x_i)`. Returns the per-sample products
    /// `v_iᵀ ∇_x score(x_i)`.
    ///
    /// Requires a preceding `scores_and_input_grad` (or any backward with
    /// `keep_t = true`) on the same batch.
    pub fn penalty_pass(&mut self, v: &Batch) -> Array1<f64> {
        let n = v.shape()[0];
        let mut p = v.clone();
        for i in 0..self.convs.len() {
            p = self.convs[i].penalty_step(&p);
            p = self.acts[i].mask_apply(&p);
        }
        let flat = p
            .into_shape_with_order((n, self.config.trunk_flat_dim()))
            .unwrap();
        let fc = self.score_fc.as_mut().expect("score head absent");
        fc.penalty_step(&flat).index_axis(Axis(1), 0).to_owned()
    }

    pub fn zero_grad(&mut self) {
        for c in &mut self.convs {
            c.zero_grad();
        }
        if let Some(fc) = &mut self.score_fc {
            fc.zero_grad();
        }
        self.pose_fc1.zero_grad();
        self.pose_fc2.zero_grad();
        self.pose_fc3.zero_grad();
    }

    pub fn visit_params(&mut self, filter: ParamFilter, f: &mut ParamVisitor) {
        if filter.trunk {
            for (i, c) in self.convs.iter_mut().enumerate() {
                f(
                    &format!("critic.conv{i}.w"),
                    c.w.as_slice_mut().unwrap(),
                    c.dw.as_slice().unwrap(),
                );
                f(
                    &format!("critic.conv{i}.b"),
                    c.b.as_slice_mut().unwrap(),
                    c.db.as_slice().unwrap(),
                );
            }
        }
        if filter.score_head {
            if let Some(fc) = &mut self.score_fc {
                f(
                    "critic.score.w",
                    fc.w.as_slice_mut().unwrap(),
                    fc.dw.as_slice().unwrap(),
                );
                f(
                    "critic.score.b",
                    fc.b.as_slice_mut().unwrap(),
                    fc.db.as_slice().unwrap(),
                );
            }
        }
        if filter.pose_head {
            for (name, fc) in [
                ("critic.pose1", &mut self.pose_fc1),
                ("critic.pose2", &mut self.pose_fc2),
                ("critic.pose3", &mut self.pose_fc3),
            ] {
                f(
                    &format!("{name}.w"),
                    fc.w.as_slice_mut().unwrap(),
                    fc.dw.as_slice().unwrap(),
                );
                f(
                    &format!("{name}.b"),
                    fc.b.as_slice_mut().unwrap(),
                    fc.db.as_slice().unwrap(),
                );
            }
        }
    }
}

impl BatchScorer for Critic {
    fn scores(&mut self, batch: &Batch) -> Array1<f64> {
        self.forward(batch, false)
            .expect("batch shape")
            .scores
            .expect("score head absent")
    }

    fn scores_and_input_grad(&mut self, batch: &Batch) -> (Array1<f64>, Batch) {
        let out = self.forward(batch, true).expect("batch shape");
        let scores = out.scores.expect("score head absent");
        let ones = Array1::ones(scores.len());
        let grads = self.backward(Some(&ones), None, true);
        (scores, grads)
    }
}

/// One Adam step over critic parameters selected by the filter.
pub fn adam_step_critic(adam: &mut Adam, critic: &mut Critic, filter: ParamFilter) {
    adam.step(|f| critic.visit_params(filter, f));
}

pub fn adam_step_generator(adam: &mut Adam, generator: &mut Generator) {
    adam.step(|f| generator.visit_params(f));
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture_hash: String,
    pub iteration: u64,
    pub model: ModelConfig,
    pub has_generator: bool,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"WGANVO1\n";

fn collect_tensors(
    critic: &mut Critic,
    generator: Option<&mut Generator>,
) -> Vec<(String, Vec<f64>)> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    critic.visit_params(ParamFilter::all(), &mut |name, p, _| {
        out.push((name.to_string(), p.to_vec()));
    });
    if let Some(g) = generator {
        g.visit_params(&mut |name, p, _| {
            out.push((name.to_string(), p.to_vec()));
        });
    }
    out
}

/// Writes a single-file checkpoint: magic, JSON header with metadata and
/// the tensor table, then raw little-endian f64 data.
pub fn save_checkpoint(
    path: &Path,
    critic: &mut Critic,
    generator: Option<&mut Generator>,
    iteration: u64,
    extra: serde_json::Value,
) -> Result<(), ModelError> {
    let meta = CheckpointMeta {
        architecture_hash: critic.config.architecture_hash(),
        iteration,
        model: critic.config.clone(),
        has_generator: generator.is_some(),
        extra,
    };
    let tensors = collect_tensors(critic, generator);
    let header = CheckpointHeader {
        meta,
        tensors: tensors
            .iter()
            .map(|(name, data)| TensorEntry {
                name: name.clone(),
                shape: vec![data.len()],
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    for (_, data) in &tensors {
        for v in data {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Loaded checkpoint: reconstructed networks plus metadata.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub critic: Critic,
    pub generator: Option<Generator>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;

    let mut data: HashMap<String, Vec<f64>> = HashMap::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        file.read_exact(&mut buf)?;
        let vals = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        data.insert(entry.name.clone(), vals);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut critic = Critic::new(&header.meta.model, &mut rng);
    let mut missing = Vec::new();
    critic.visit_params(ParamFilter::all(), &mut |name, p, _| {
        match data.get(name) {
            Some(vals) if vals.len() == p.len() => p.copy_from_slice(vals),
            _ => missing.push(name.to_string()),
        }
    });
    let generator = if header.meta.has_generator {
        let mut g = Generator::new(&header.meta.model, &mut rng);
        g.visit_params(&mut |name, p, _| match data.get(name) {
            Some(vals) if vals.len() == p.len() => p.copy_from_slice(vals),
            _ => missing.push(name.to_string()),
        });
        Some(g)
    } else {
        None
    };
    if !missing.is_empty() {
        return Err(ModelError::Checkpoint(format!(
            "missing or mismatched tensors: {missing:?}"
        )));
    }
    Ok(Checkpoint {
        meta: header.meta,
        critic,
        generator,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn tiny() -> ModelConfig {
        ModelConfig::reduced(4)
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn generator_shape_range_and_determinism() {
        let cfg = tiny();
        let mut gen = Generator::new(&cfg, &mut rng(1));
        let z = sample_latent(3, &cfg, 7);
        let a = gen.forward(&z, false).unwrap();
        assert_eq!(a.dim(), (3, 2, 96, 128));
        assert!(a.iter().all(|v| v.is_finite() && *v >= -1.0 && *v <= 1.0));
        let b = gen.forward(&z, false).unwrap();
        assert_eq!(a, b);

        // Different latents give different outputs at random init.
        let z2 = sample_latent(3, &cfg, 8);
        let c = gen.forward(&z2, false).unwrap();
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x != y));

        let bad = Array2::<f64>::zeros((1, cfg.latent_dim + 1));
        assert!(matches!(
            gen.forward(&bad, false),
            Err(ModelError::LatentDim { .. })
        ));
    }

    #[test]
    fn critic_shapes_and_finiteness() {
        let cfg = tiny();
        let mut critic = Critic::new(&cfg, &mut rng(2));
        let x = Array4::zeros((4, 2, 96, 128));
        let out = critic.forward(&x, false).unwrap();
        assert_eq!(out.scores.as_ref().unwrap().len(), 4);
        assert_eq!(out.poses.dim(), (4, 7));
        assert!(out.scores.unwrap().iter().all(|v| v.is_finite()));
        assert!(out.poses.iter().all(|v| v.is_finite()));

        let bad = Array4::zeros((1, 2, 96, 127));
        assert!(matches!(
            critic.forward(&bad, false),
            Err(ModelError::InputShape { .. })
        ));
    }

    #[test]
    fn latent_sampling_is_seeded_and_centered() {
        let cfg = ModelConfig::default();
        let a = sample_latent(100, &cfg, 5);
        assert_eq!(a.dim(), (100, 128));
        let b = sample_latent(100, &cfg, 5);
        assert_eq!(a, b);

        // Uniform on [-1,1]: mean 0, σ = 1/√3; 3σ/√n bound.
        let n = 100_000;
        let cfg_small = ModelConfig {
            latent_dim: 1,
            ..cfg.clone()
        };
        let s = sample_latent(n, &cfg_small, 6);
        let mean = s.sum() / n as f64;
        let sigma = (1.0f64 / 3.0).sqrt();
        assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt(), "mean {mean}");

        let cfg_norm = ModelConfig {
            latent_dim: 1,
            latent_distribution: LatentDistribution::Normal,
            ..cfg
        };
        let s = sample_latent(n, &cfg_norm, 6);
        let mean = s.sum() / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn score_input_gradient_matches_finite_differences() {
        let cfg = tiny();
        let mut critic = Critic::new(&cfg, &mut rng(3));
        let mut r = rng(4);
        let x = Array4::from_shape_fn((1, 2, 96, 128), |_| r.gen_range(-1.0..1.0f64));
        let (_, g) = critic.scores_and_input_grad(&x);
        assert!(g.iter().all(|v| v.is_finite()));

        let h = 1e-5;
        for _ in 0..10 {
            let idx = (
                0,
                r.gen_range(0..2),
                r.gen_range(0..96),
                r.gen_range(0..128),
            );
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (critic.scores(&xp)[0] - critic.scores(&xm)[0]) / (2.0 * h);
            assert!(
                (g[idx] - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                "{} vs {}",
                g[idx],
                fd
            );
        }
    }

    #[test]
    fn no_dead_parameters() {
        let cfg = tiny();
        let mut critic = Critic::new(&cfg, &mut rng(5));
        let mut gen = Generator::new(&cfg, &mut rng(6));
        let mut r = rng(7);
        let x = Array4::from_shape_fn((2, 2, 96, 128), |_| r.gen_range(-1.0..1.0f64));

        critic.zero_grad();
        let out = critic.forward(&x, true).unwrap();
        let dscore = Array1::ones(out.scores.as_ref().unwrap().len());
        let dpose = Array2::from_shape_fn(out.poses.dim(), |_| r.gen_range(-1.0..1.0f64));
        critic.backward(Some(&dscore), Some(&dpose), false);
        critic.visit_params(ParamFilter::all(), &mut |name, _, g| {
            assert!(g.iter().any(|v| *v != 0.0), "dead parameter {name}");
        });

        gen.zero_grad();
        let z = sample_latent(2, &cfg, 8);
        let y = gen.forward(&z, true).unwrap();
        let dy = Array4::from_shape_fn(y.dim(), |_| r.gen_range(-1.0..1.0f64));
        gen.backward(&dy);
        gen.visit_params(&mut |name, _, g| {
            assert!(g.iter().any(|v| *v != 0.0), "dead parameter {name}");
        });
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = tiny();
        let mut critic = Critic::new(&cfg, &mut rng(9));
        let mut gen = Generator::new(&cfg, &mut rng(10));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(
            &path,
            &mut critic,
            Some(&mut gen),
            42,
            serde_json::json!({"note": "test"}),
        )
        .unwrap();

        let mut loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta.iteration, 42);
        assert_eq!(loaded.meta.architecture_hash, cfg.architecture_hash());

        let mut r = rng(11);
        let x = Array4::from_shape_fn((2, 2, 96, 128), |_| r.gen_range(-1.0..1.0f64));
        let a = critic.forward(&x, false).unwrap();
        let b = loaded.critic.forward(&x, false).unwrap();
        assert_eq!(a.poses, b.poses);
        assert_eq!(a.scores.unwrap(), b.scores.unwrap());

        let z = sample_latent(2, &cfg, 12);
        assert_eq!(
            gen.forward(&z, false).unwrap(),
            loaded.generator.as_mut().unwrap().forward(&z, false).unwrap()
        );
    }

    #[test]
    fn no_score_head_variant() {
        let cfg = ModelConfig {
            with_score_head: false,
            ..tiny()
        };
        let mut critic = Critic::new(&cfg, &mut rng(13));
        let x = Array4::zeros((1, 2, 96, 128));
        let out = critic.forward(&x, false).unwrap();
        assert!(out.scores.is_none());
        assert_eq!(out.poses.dim(), (1, 7));
    }
}
