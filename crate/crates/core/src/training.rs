//! Optimization loop: ray batching, Adam with an exponential learning-rate
//! decay, the periodic semantic step and checkpointing.
//!
//! All randomness of iteration `i` is derived from `(seed, i)`, so a run
//! resumed from a checkpoint with optimizer state continues exactly as an
//! uninterrupted run would.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{save_checkpoint, Architecture, Checkpoint, FieldParams, OptimizerSnapshot, Real};
use crate::geometry::{panorama_ray_grid, pixel_center_dir, CameraPose, Ray, Vec3};
use crate::losses::{
    color_loss_grad, geo_loss_grad, total_loss, Embedding, EmbeddingProvider, LossWeights,
    ToyEncoder, DEFAULT_EMBED_DIM, DEPTH_VAR_FLOOR,
};
use crate::panorama::{Image, Panorama};
use crate::rendering::{
    ray_rng, render_rays_backward, render_rays_retained, RayRender, RenderGrad,
    SamplingConfig,
};
use crate::reprojection::{generate_training_set, sample_virtual_poses, TrainingFrame};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Seeds of the independent random streams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub poses: u64,
    pub rays: u64,
    pub jitter: u64,
    pub semantic: u64,
    pub embed: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            init: 0,
            poses: 1,
            rays: 2,
            jitter: 3,
            semantic: 4,
            embed: 5,
        }
    }
}

/// Virtual training poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseConfig {
    /// Number of frames, the input pose included.
    pub count: usize,
    pub radius: f64,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            count: 8,
            radius: crate::reprojection::DEFAULT_POSE_RADIUS,
        }
    }
}

/// Low-resolution unseen-view render used by the semantic term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticConfig {
    pub width: usize,
    pub height: usize,
    pub n_coarse: usize,
    pub embed_dim: usize,
    /// Radius of the ball unseen poses are drawn from; the pose radius when absent.
    pub radius: Option<f64>,
}

impl Default for SemanticConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 32,
            n_coarse: 16,
            embed_dim: DEFAULT_EMBED_DIM,
            radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iters: u64,
    pub batch_rays: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub near: f64,
    /// Far bound; `far_factor` times the largest training depth when absent.
    pub far: Option<f64>,
    pub far_factor: f64,
    pub perturb: bool,
    pub chunk_rays: usize,
    /// Zero disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub losses: LossWeights,
    pub poses: PoseConfig,
    pub semantic: SemanticConfig,
    pub arch: Architecture,
    pub seeds: Seeds,
}

impl Default for TrainConfig {
    /// Desk-scale preset: sized to run 2,000 iterations on one CPU core in
    /// a few minutes.
    fn default() -> Self {
        Self {
            iters: 2000,
            batch_rays: 256,
            lr_start: 5e-4,
            lr_end: 5e-5,
            n_coarse: 16,
            n_fine: 16,
            near: 0.05,
            far: None,
            far_factor: 1.1,
            perturb: true,
            chunk_rays: 64,
            checkpoint_every: 500,
            losses: LossWeights::default(),
            poses: PoseConfig::default(),
            semantic: SemanticConfig::default(),
            arch: Architecture::desk(),
            seeds: Seeds::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale hyperparameters: 1,400-ray batches, 64 + 128 samples,
    /// an 8×256 network and 200,000 iterations.
    pub fn full_scale() -> Self {
        Self {
            iters: 200_000,
            batch_rays: 1400,
            n_coarse: 64,
            n_fine: 128,
            arch: Architecture::default(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return Err(Error::Config(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.batch_rays == 0 || self.chunk_rays == 0 {
            return Err(Error::Config("batch_rays and chunk_rays must be >= 1".into()));
        }
        if self.n_coarse == 0 {
            return Err(Error::Config("n_coarse must be >= 1".into()));
        }
        if !(self.near > 0.0) || !(self.far_factor > 0.0) || self.far.is_some_and(|f| !(f > self.near)) {
            return Err(Error::Config("need 0 < near < far and far_factor > 0".into()));
        }
        if self.poses.count == 0 || !(self.poses.radius > 0.0) {
            return Err(Error::Config("poses.count must be >= 1 and poses.radius > 0".into()));
        }
        let s = &self.semantic;
        if s.width == 0 || s.height == 0 || s.n_coarse == 0 || s.embed_dim == 0 {
            return Err(Error::Config("semantic sizes must be positive".into()));
        }
        if s.radius.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::Config("semantic.radius must be > 0".into()));
        }
        self.losses.validate()?;
        self.arch.validate()
    }

    /// Sampling settings for training batches, given the resolved bounds.
    pub fn sampling(&self, near: f64, far: f64) -> SamplingConfig {
        SamplingConfig {
            n_coarse: self.n_coarse,
            n_fine: self.n_fine,
            near,
            far,
            perturb: self.perturb,
            seed: self.seeds.jitter,
            chunk_rays: self.chunk_rays,
        }
    }
}

/// `lr_start^(1-s) · lr_end^s` with `s = iter / iters`.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    if cfg.iters == 0 {
        return cfg.lr_start;
    }
    let s = iter.min(cfg.iters) as f64 / cfg.iters as f64;
    cfg.lr_start.powf(1.0 - s) * cfg.lr_end.powf(s)
}

/// Adam moments, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F> {
    pub step: u64,
    pub m: FieldParams<F>,
    pub v: FieldParams<F>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &FieldParams<F>) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update.
///
/// A non-finite gradient aborts before anything is modified and names the
/// offending block.
pub fn adam_step<F: Real>(
    params: &mut FieldParams<F>,
    grads: &FieldParams<F>,
    state: &mut OptimizerState<F>,
    lr: f64,
) -> Result<()> {
    if params.arch != grads.arch || params.arch != state.m.arch {
        return Err(Error::Shape("optimizer buffers do not match parameters".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Domain(format!("learning rate {lr} must be positive")));
    }
    for (name, block) in grads.blocks() {
        if block.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                block: format!("gradient {name}"),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let gs = grads.blocks();
    let ms = state.m.blocks_mut();
    let vs = state.v.blocks_mut();
    for (((p, (_, g)), m), v) in params.blocks_mut().into_iter().zip(gs).zip(ms).zip(vs) {
        for i in 0..p.len() {
            let gi = g[i].to_f64().unwrap();
            let mi = ADAM_BETA1 * m[i].to_f64().unwrap() + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v[i].to_f64().unwrap() + (1.0 - ADAM_BETA2) * gi * gi;
            m[i] = F::lit(mi);
            v[i] = F::lit(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
            p[i] = F::lit(p[i].to_f64().unwrap() - update);
        }
    }
    Ok(())
}

/// A batch of training rays with their supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub colors: Vec<[f64; 3]>,
    pub depths: Vec<f64>,
    pub valid: Vec<bool>,
    /// `(frame, pixel)` each ray was drawn from.
    pub source: Vec<(usize, usize)>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Flat index of every valid pixel across a list of frames.
#[derive(Debug, Clone)]
pub struct ValidPixels {
    entries: Vec<(u32, u32)>,
}

impl ValidPixels {
    pub fn new(frames: &[TrainingFrame]) -> Result<Self> {
        let entries: Vec<(u32, u32)> = frames
            .iter()
            .enumerate()
            .flat_map(|(f, frame)| {
                frame
                    .pano
                    .valid()
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v)
                    .map(move |(i, _)| (f as u32, i as u32))
            })
            .collect();
        if entries.is_empty() {
            return Err(Error::EmptyInput("no valid pixels in any frame".into()));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Draws `n` rays uniformly over the valid pixels.
    ///
    /// Without replacement `n` must not exceed the number of valid pixels.
    pub fn sample(
        &self,
        frames: &[TrainingFrame],
        n: usize,
        rng: &mut impl Rng,
        replacement: bool,
    ) -> Result<RayBatch> {
        let picks: Vec<usize> = if replacement {
            (0..n).map(|_| rng.random_range(0..self.entries.len())).collect()
        } else {
            if n > self.entries.len() {
                return Err(Error::Domain(format!(
                    "cannot draw {n} distinct rays from {} valid pixels",
                    self.entries.len()
                )));
            }
            index::sample(rng, self.entries.len(), n).into_vec()
        };
        let mut batch = RayBatch {
            rays: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
            depths: Vec::with_capacity(n),
            valid: Vec::with_capacity(n),
            source: Vec::with_capacity(n),
        };
        for k in picks {
            let (f, i) = self.entries[k];
            let (f, i) = (f as usize, i as usize);
            let pano = &frames[f].pano;
            let (col, row) = (i % pano.width(), i / pano.width());
            batch.rays.push(Ray {
                origin: frames[f].pose.position,
                dir: pixel_center_dir(col, row, pano.width(), pano.height()),
            });
            let c = pano.color_at(i);
            batch.colors.push([c[0] as f64, c[1] as f64, c[2] as f64]);
            batch.depths.push(pano.depth()[i] as f64);
            batch.valid.push(true);
            batch.source.push((f, i));
        }
        Ok(batch)
    }
}

/// `n` rays drawn uniformly over all valid pixels of all frames.
pub fn sample_ray_batch(
    frames: &[TrainingFrame],
    n: usize,
    seed: u64,
    replacement: bool,
) -> Result<RayBatch> {
    let mut rng = ray_rng(seed, 0, 0);
    ValidPixels::new(frames)?.sample(frames, n, &mut rng, replacement)
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub lr: f64,
    pub color_loss: f64,
    pub geo_loss: f64,
    /// Semantic loss of this iteration; zero off the semantic schedule.
    pub sc_loss: f64,
    pub total: f64,
    pub elapsed_ms: u64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "iter,lr,color_loss,geo_loss,sc_loss,total,elapsed_ms";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{}",
            self.iter, self.lr, self.color_loss, self.geo_loss, self.sc_loss, self.total, self.elapsed_ms
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Format(format!("bad metrics line: {line}"));
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            iter: f[0].parse().map_err(|_| bad())?,
            lr: num(f[1])?,
            color_loss: num(f[2])?,
            geo_loss: num(f[3])?,
            sc_loss: num(f[4])?,
            total: num(f[5])?,
            elapsed_ms: f[6].parse().map_err(|_| bad())?,
        })
    }
}

/// Similarity between the unseen-view render and the anchor at one
/// semantic step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticRecord {
    pub iter: u64,
    pub pose: CameraPose,
    pub similarity: f64,
}

/// Near and far bounds for a set of training frames.
pub fn sampling_bounds(frames: &[TrainingFrame], cfg: &TrainConfig) -> Result<(f64, f64)> {
    let max_depth = frames
        .iter()
        .filter_map(|f| f.pano.max_depth())
        .fold(0.0f32, f32::max) as f64;
    let far = match cfg.far {
        Some(far) => far,
        None if max_depth > 0.0 => cfg.far_factor * max_depth,
        None => return Err(Error::EmptyInput("no valid depth in training frames".into())),
    };
    if !(far > cfg.near) {
        return Err(Error::Config(format!("far {far} must exceed near {}", cfg.near)));
    }
    Ok((cfg.near, far))
}

const SEMANTIC_STREAM: u64 = 1 << 40;

/// Owns the state of one training run.
pub struct Trainer {
    cfg: TrainConfig,
    frames: Vec<TrainingFrame>,
    pixels: ValidPixels,
    input_pose: CameraPose,
    near: f64,
    far: f64,
    params: FieldParams<f32>,
    optimizer: OptimizerState<f32>,
    iteration: u64,
    encoder: ToyEncoder,
    /// Absent when the semantic loss is disabled.
    anchor: Option<Embedding>,
    log: Vec<MetricsRow>,
    semantic: Vec<SemanticRecord>,
    semantic_renders: u64,
    elapsed_ms: u64,
}

impl Trainer {
    /// Reprojects `input` to the configured virtual poses and initializes
    /// the field.
    pub fn new(input: &Panorama, input_pose: CameraPose, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let poses = sample_virtual_poses(&input_pose, cfg.poses.count, cfg.poses.radius, cfg.seeds.poses)?;
        let frames = generate_training_set(input, &input_pose, &poses)?;
        Self::from_frames(input, input_pose, frames, cfg)
    }

    /// Trains on precomputed frames; `input` only provides the anchor view.
    pub fn from_frames(
        input: &Panorama,
        input_pose: CameraPose,
        frames: Vec<TrainingFrame>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let pixels = ValidPixels::new(&frames)?;
        let (near, far) = sampling_bounds(&frames, &cfg)?;
        // Bounds are stored as f32 in checkpoints; round now so a resumed
        // run samples exactly the same distances.
        let (near, far) = (near as f32 as f64, far as f32 as f64);
        let params = FieldParams::init(cfg.arch, cfg.seeds.init)?;
        let optimizer = OptimizerState::new(&params);
        let s = cfg.semantic;
        let encoder = ToyEncoder::new(s.width, s.height, s.embed_dim, cfg.seeds.embed)?;
        let anchor = if cfg.losses.lambda_sc > 0.0 {
            Some(encoder.embed(&input.downsample_image(s.width, s.height)?)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            frames,
            pixels,
            input_pose,
            near,
            far,
            params,
            optimizer,
            iteration: 0,
            encoder,
            anchor,
            log: Vec::new(),
            semantic: Vec::new(),
            semantic_renders: 0,
            elapsed_ms: 0,
        })
    }

    /// Continues from a checkpoint. Without optimizer state the moments
    /// restart from zero.
    pub fn resume(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.params.arch != self.cfg.arch {
            return Err(Error::Config("checkpoint architecture differs from config".into()));
        }
        self.params = ckpt.params.clone();
        self.near = ckpt.near as f64;
        self.far = ckpt.far as f64;
        self.iteration = ckpt.iteration;
        self.optimizer = match &ckpt.optimizer {
            Some(o) => OptimizerState {
                step: o.step,
                m: o.m.clone(),
                v: o.v.clone(),
            },
            None => OptimizerState::new(&self.params),
        };
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn frames(&self) -> &[TrainingFrame] {
        &self.frames
    }

    pub fn params(&self) -> &FieldParams<f32> {
        &self.params
    }

    pub fn optimizer(&self) -> &OptimizerState<f32> {
        &self.optimizer
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.near, self.far)
    }

    pub fn log(&self) -> &[MetricsRow] {
        &self.log
    }

    pub fn semantic_history(&self) -> &[SemanticRecord] {
        &self.semantic
    }

    /// Number of low-resolution semantic renders performed so far.
    pub fn semantic_renders(&self) -> u64 {
        self.semantic_renders
    }

    pub fn anchor(&self) -> Option<&Embedding> {
        self.anchor.as_ref()
    }

    /// Sampling settings without jitter, for evaluation renders.
    pub fn eval_sampling(&self) -> SamplingConfig {
        self.cfg.sampling(self.near, self.far).deterministic()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            near: self.near as f32,
            far: self.far as f32,
            iteration: self.iteration,
            optimizer: Some(OptimizerSnapshot {
                step: self.optimizer.step,
                m: self.optimizer.m.clone(),
                v: self.optimizer.v.clone(),
            }),
        }
    }

    /// The unseen pose of semantic iteration `iter`: uniform in the ball
    /// around the input pose.
    pub fn semantic_pose(&self, iter: u64) -> Result<CameraPose> {
        let radius = self.cfg.semantic.radius.unwrap_or(self.cfg.poses.radius);
        let mut rng = ray_rng(self.cfg.seeds.semantic, iter, 0);
        loop {
            let g = Vec3::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            let n = g.norm();
            if n > 1e-12 {
                let r = radius * rng.random::<f64>().cbrt();
                return CameraPose::new(self.input_pose.position + g * (r / n));
            }
        }
    }

    /// Renders the semantic view at `pose`, backpropagates `-λ cos` into
    /// `grads` and returns the similarity.
    fn semantic_step(&mut self, grads: &mut FieldParams<f32>, pose: &CameraPose) -> Result<f64> {
        let s = self.cfg.semantic;
        let rays = panorama_ray_grid(pose, s.width, s.height);
        let cfg = SamplingConfig {
            n_coarse: s.n_coarse,
            n_fine: 0,
            ..self.cfg.sampling(self.near, self.far)
        };
        let stream = SEMANTIC_STREAM + self.iteration;
        let retained = render_rays_retained(&self.params, &rays, &cfg, stream)?;
        self.semantic_renders += 1;
        let data = retained.renders.iter().flat_map(|r| r.coarse.color).collect();
        let image = Image::new(s.width, s.height, data)?;
        let e = self.encoder.embed(&image)?;
        let anchor = self
            .anchor
            .as_ref()
            .ok_or_else(|| Error::Config("semantic step with the semantic loss disabled".into()))?;
        let similarity = e.dot(anchor)?;
        let lambda = self.cfg.losses.lambda_sc;
        let d_image = self.encoder.embed_vjp(&image, anchor.values())?;
        let mut loss = |r: usize, _: &RayRender| {
            let g = RenderGrad {
                color: [
                    -lambda * d_image[3 * r],
                    -lambda * d_image[3 * r + 1],
                    -lambda * d_image[3 * r + 2],
                ],
                ..RenderGrad::default()
            };
            (g, RenderGrad::default())
        };
        retained.backward(&self.params, grads, &mut loss);
        Ok(similarity)
    }

    /// Runs one iteration and appends its metrics row.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let started = Instant::now();
        let iter = self.iteration;
        let lr = lr_at(iter, &self.cfg);
        let mut rng = ray_rng(self.cfg.seeds.rays, iter, 0);
        let batch = self
            .pixels
            .sample(&self.frames, self.cfg.batch_rays, &mut rng, true)?;
        let n = batch.len();
        let mut grads = self.params.zeros_like();
        let lambda_geo = self.cfg.losses.lambda_geo;
        let (mut color_sum, mut geo_sum) = (0.0, 0.0);
        {
            let mut loss = |r: usize, render: &RayRender| {
                let gt = &batch.colors[r];
                let d = batch.depths[r];
                let mut branch_grad = |out: &crate::rendering::RenderOutput| {
                    color_sum += (0..3).map(|c| (out.color[c] - gt[c]).powi(2)).sum::<f64>();
                    geo_sum += (out.depth - d).abs() / out.depth_var.max(DEPTH_VAR_FLOOR).sqrt();
                    let (gd, gv) = geo_loss_grad(out.depth, out.depth_var, d, n);
                    RenderGrad {
                        color: color_loss_grad(&out.color, gt, n),
                        depth: lambda_geo * gd,
                        depth_var: lambda_geo * gv,
                    }
                };
                let gc = branch_grad(&render.coarse);
                let gf = render.fine.as_ref().map(&mut branch_grad).unwrap_or_default();
                (gc, gf)
            };
            let cfg = self.cfg.sampling(self.near, self.far);
            render_rays_backward(&self.params, &mut grads, &batch.rays, &cfg, iter, &mut loss)?;
        }
        let color = color_sum / n as f64;
        let geo = geo_sum / n as f64;
        let mut sc = 0.0;
        if self.cfg.losses.is_semantic_iter(iter) {
            let pose = self.semantic_pose(iter)?;
            let similarity = self.semantic_step(&mut grads, &pose)?;
            sc = -self.cfg.losses.lambda_sc * similarity;
            self.semantic.push(SemanticRecord {
                iter,
                pose,
                similarity,
            });
        }
        let total = total_loss(color, geo, sc, &self.cfg.losses, iter)?;
        adam_step(&mut self.params, &grads, &mut self.optimizer, lr)?;
        self.iteration += 1;
        self.elapsed_ms += started.elapsed().as_millis() as u64;
        let row = MetricsRow {
            iter,
            lr,
            color_loss: color,
            geo_loss: geo,
            sc_loss: sc,
            total,
            elapsed_ms: self.elapsed_ms,
        };
        self.log.push(row);
        Ok(row)
    }

    /// Steps until `cfg.iters`, writing metrics and checkpoints into
    /// `out_dir` when given. A failing step leaves the last checkpoint on
    /// disk untouched.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<()> {
        self.run_until(self.cfg.iters, out_dir)
    }

    /// Like [`Trainer::run`] but stops after iteration `stop` (capped at
    /// `cfg.iters`); the schedule is still that of the full run.
    pub fn run_until(&mut self, stop: u64, out_dir: Option<&Path>) -> Result<()> {
        let stop = stop.min(self.cfg.iters);
        let mut metrics = match out_dir {
            Some(dir) => Some(MetricsWriter::open(dir, self.iteration == 0)?),
            None => None,
        };
        while self.iteration < stop {
            let row = self.step()?;
            if let Some(m) = metrics.as_mut() {
                m.append(&row)?;
            }
            let every = self.cfg.checkpoint_every;
            if let Some(dir) = out_dir {
                if every > 0 && self.iteration % every == 0 && self.iteration < stop {
                    save_checkpoint(&self.checkpoint(), checkpoint_path(dir, self.iteration))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            save_checkpoint(&self.checkpoint(), checkpoint_path(dir, self.iteration))?;
            if self.iteration == self.cfg.iters {
                save_checkpoint(&self.checkpoint(), dir.join(FINAL_CHECKPOINT))?;
            }
        }
        Ok(())
    }
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("ckpt_{iteration:07}.ckpt"))
}

/// Append-only CSV metrics log.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    /// Opens `dir/metrics.csv`; `fresh` truncates it and writes the header.
    pub fn open(dir: &Path, fresh: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let mut file = OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if fresh {
            writeln!(file, "{}", MetricsRow::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { path, file })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", row.to_csv()).map_err(|e| Error::io(&self.path, e))
    }
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub params: FieldParams<f32>,
    pub near: f64,
    pub far: f64,
    pub log: Vec<MetricsRow>,
    pub semantic: Vec<SemanticRecord>,
    pub semantic_renders: u64,
}

/// Full run from an input panorama.
pub fn train(
    input: &Panorama,
    input_pose: CameraPose,
    cfg: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(input, input_pose, cfg)?;
    trainer.run(out_dir)?;
    Ok(TrainOutcome {
        near: trainer.near,
        far: trainer.far,
        semantic_renders: trainer.semantic_renders,
        params: trainer.params,
        log: trainer.log,
        semantic: trainer.semantic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{synth_box_scene, BoxScene};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            iters: 6,
            batch_rays: 16,
            n_coarse: 8,
            n_fine: 8,
            arch: Architecture {
                depth: 2,
                width: 16,
                skip: None,
                color_width: 8,
                ..Architecture::desk()
            },
            poses: PoseConfig {
                count: 3,
                radius: 0.2,
            },
            semantic: SemanticConfig {
                width: 8,
                height: 4,
                n_coarse: 4,
                ..SemanticConfig::default()
            },
            losses: LossWeights {
                k_sc: 3,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        }
    }

    fn scene() -> (Panorama, CameraPose) {
        let s = BoxScene::default();
        (synth_box_scene(&s, 16, 8).unwrap(), s.camera_pose())
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 5e-4);
        assert_eq!(lr_at(cfg.iters, &cfg), 5e-5);
        assert!((lr_at(cfg.iters / 2, &cfg) - 1.5811e-4).abs() < 1e-8);
        let full = TrainConfig::full_scale();
        assert_eq!(lr_at(full.iters, &full), 5e-5);
        assert!(lr_at(10, &cfg) < lr_at(9, &cfg));
    }

    #[test]
    fn adam_first_step_and_fixed_point() {
        let arch = Architecture {
            depth: 1,
            width: 2,
            skip: None,
            color_width: 2,
            ..Architecture::desk()
        };
        let mut p = FieldParams::<f64>::init(arch, 0).unwrap();
        let before = p.clone();
        let mut state = OptimizerState::new(&p);
        let zero = p.zeros_like();
        adam_step(&mut p, &zero, &mut state, 1e-3).unwrap();
        assert_eq!(p, before);

        let mut ones = p.zeros_like();
        for b in ones.blocks_mut() {
            b.fill(1.0);
        }
        let mut state = OptimizerState::new(&p);
        adam_step(&mut p, &ones, &mut state, 1e-3).unwrap();
        for ((_, a), (_, b)) in p.blocks().into_iter().zip(before.blocks()) {
            for (x, y) in a.iter().zip(b) {
                assert!(((y - x) - 1e-3).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let arch = Architecture::desk();
        let mut p = FieldParams::<f32>::init(arch, 0).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.fine.sigma.bias[0] = f32::NAN;
        let mut state = OptimizerState::new(&p);
        match adam_step(&mut p, &g, &mut state, 1e-3) {
            Err(Error::NonFinite { block }) => assert!(block.contains("fine.sigma.bias")),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn exhaustive_draw_without_replacement() {
        let (pano, pose) = scene();
        let frames = generate_training_set(&pano, &pose, &[pose]).unwrap();
        let n = pano.valid_count();
        let batch = sample_ray_batch(&frames, n, 9, false).unwrap();
        let mut px: Vec<usize> = batch.source.iter().map(|s| s.1).collect();
        px.sort_unstable();
        assert_eq!(px, (0..n).collect::<Vec<_>>());
        assert!(batch.valid.iter().all(|&v| v));
        assert!(sample_ray_batch(&frames, n + 1, 9, false).is_err());
    }

    #[test]
    fn batch_carries_frame_supervision() {
        let (pano, pose) = scene();
        let poses = sample_virtual_poses(&pose, 3, 0.2, 1).unwrap();
        let frames = generate_training_set(&pano, &pose, &poses).unwrap();
        let batch = sample_ray_batch(&frames, 200, 4, true).unwrap();
        for k in 0..batch.len() {
            let (f, i) = batch.source[k];
            assert!(frames[f].pano.valid()[i]);
            assert_eq!(batch.rays[k].origin, frames[f].pose.position);
            assert_eq!(batch.depths[k], frames[f].pano.depth()[i] as f64);
        }
    }

    #[test]
    fn metrics_row_csv_round_trip() {
        let row = MetricsRow {
            iter: 12,
            lr: 4.2e-4,
            color_loss: 0.0123,
            geo_loss: 1.5,
            sc_loss: -0.07,
            total: 0.1623 - 0.07,
            elapsed_ms: 345,
        };
        assert_eq!(MetricsRow::from_csv(&row.to_csv()).unwrap(), row);
        assert_eq!(MetricsRow::CSV_HEADER.split(',').count(), 7);
    }

    #[test]
    fn zero_iterations_leave_initialization() {
        let (pano, pose) = scene();
        let cfg = TrainConfig {
            iters: 0,
            ..tiny_cfg()
        };
        let out = train(&pano, pose, cfg.clone(), None).unwrap();
        assert_eq!(out.params, FieldParams::init(cfg.arch, cfg.seeds.init).unwrap());
        assert!(out.log.is_empty());
    }

    #[test]
    fn semantic_schedule_and_accounting() {
        let (pano, pose) = scene();
        let cfg = tiny_cfg();
        let out = train(&pano, pose, cfg.clone(), None).unwrap();
        assert_eq!(out.semantic_renders, 2);
        assert_eq!(out.semantic.iter().map(|s| s.iter).collect::<Vec<_>>(), vec![0, 3]);
        for row in &out.log {
            let mut expect = row.color_loss + cfg.losses.lambda_geo * row.geo_loss;
            if row.iter % 3 == 0 {
                expect += row.sc_loss;
                assert!(row.sc_loss != 0.0);
            } else {
                assert_eq!(row.sc_loss, 0.0);
            }
            assert!((row.total - expect).abs() < 1e-9);
        }

        let off = TrainConfig {
            losses: LossWeights {
                lambda_sc: 0.0,
                ..cfg.losses
            },
            ..cfg
        };
        let out = train(&pano, pose, off, None).unwrap();
        assert_eq!(out.semantic_renders, 0);
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let (pano, pose) = scene();
        let cfg = tiny_cfg();
        let a = train(&pano, pose, cfg.clone(), None).unwrap();
        let b = train(&pano, pose, cfg.clone(), None).unwrap();
        assert_eq!(a.params, b.params);

        let mut first = Trainer::new(&pano, pose, cfg.clone()).unwrap();
        first.run_until(4, None).unwrap();
        assert_eq!(first.iteration(), 4);
        let mut bytes = Vec::new();
        crate::field::write_checkpoint(&first.checkpoint(), &mut bytes).unwrap();
        let ckpt = crate::field::read_checkpoint(bytes.as_slice()).unwrap();
        let mut resumed = Trainer::new(&pano, pose, cfg).unwrap();
        resumed.resume(&ckpt).unwrap();
        resumed.run(None).unwrap();
        assert_eq!(resumed.params(), &a.params);
    }

    #[test]
    fn run_writes_metrics_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let (pano, pose) = scene();
        let cfg = TrainConfig {
            checkpoint_every: 2,
            ..tiny_cfg()
        };
        let mut t = Trainer::new(&pano, pose, cfg).unwrap();
        t.run(Some(dir.path())).unwrap();
        let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], MetricsRow::CSV_HEADER);
        assert_eq!(lines.len(), 7);
        for it in [2, 4, 6] {
            assert!(checkpoint_path(dir.path(), it).exists());
        }
        let last = crate::field::load_checkpoint(dir.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(last.iteration, 6);
        assert_eq!(&last.params, t.params());
    }
}
