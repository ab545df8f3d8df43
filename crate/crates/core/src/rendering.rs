//! Ray sampling and volumetric compositing.
//!
//! Each ray is rendered twice: the coarse network sees `n_coarse` stratified
//! samples, the fine network sees those samples merged with `n_fine` extra
//! samples drawn from the coarse weight distribution. Sample positions are
//! treated as constants by the reverse pass.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{encode_samples, Branch, FieldParams, MlpTape, Real};
use crate::geometry::{panorama_ray_grid, CameraPose, Ray, Vec3};
use crate::panorama::Panorama;

/// The last interval extends this fraction of `far - near` past `far`.
pub const FAR_CAP_FRACTION: f64 = 0.01;
/// Uniform mass added to every coarse bin before inverse-CDF sampling.
pub const IMPORTANCE_FLOOR: f64 = 1e-5;
/// Minimum gap enforced between merged samples.
pub const MERGE_SEPARATION: f64 = 1e-9;
/// Rendered depth is clamped to this when writing a [`Panorama`].
pub const MIN_PANORAMA_DEPTH: f32 = 1e-6;

/// Increasing ray distances with their interval lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub near: f64,
    pub far: f64,
}

impl SampleSet {
    /// Wraps explicit distances and intervals after checking the invariants.
    pub fn new(t: Vec<f64>, delta: Vec<f64>, near: f64, far: f64) -> Result<Self> {
        if t.is_empty() || t.len() != delta.len() {
            return Err(Error::Shape(format!(
                "{} sample distances vs {} intervals",
                t.len(),
                delta.len()
            )));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain("sample distances must be strictly increasing".into()));
        }
        if delta.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(Error::Domain("sample intervals must be positive".into()));
        }
        Ok(Self { t, delta, near, far })
    }

    /// Intervals `t[i+1] - t[i]`, with the last one running to `far` plus the cap.
    fn from_sorted(t: Vec<f64>, near: f64, far: f64) -> Self {
        let cap = FAR_CAP_FRACTION * (far - near);
        let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        let last = *t.last().expect("non-empty");
        delta.push((far - last).max(0.0) + cap);
        Self { t, delta, near, far }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

fn check_bounds(near: f64, far: f64, n: usize) -> Result<()> {
    if !(near > 0.0 && far > near && far.is_finite()) {
        return Err(Error::Domain(format!("need 0 < near < far, got {near}, {far}")));
    }
    if n == 0 {
        return Err(Error::Domain("need at least one sample".into()));
    }
    Ok(())
}

/// `n` equal bins over `[near, far]`: bin midpoints, or one uniform draw per
/// bin when `jitter` is set.
pub fn stratified_samples(
    near: f64,
    far: f64,
    n: usize,
    jitter: bool,
    rng: &mut impl Rng,
) -> Result<SampleSet> {
    check_bounds(near, far, n)?;
    let width = (far - near) / n as f64;
    let t = (0..n)
        .map(|i| {
            let u = if jitter { rng.random::<f64>() } else { 0.5 };
            near + (i as f64 + u) * width
        })
        .collect();
    Ok(SampleSet::from_sorted(t, near, far))
}

/// Inverse-CDF draws from the piecewise-constant density over the equal
/// coarse bins of `[near, far]`.
///
/// Without jitter the quantiles are `(j + 0.5) / n`; with jitter each
/// quantile is drawn uniformly inside its own `1/n` stratum.
pub fn inverse_cdf_samples(
    near: f64,
    far: f64,
    weights: &[f64],
    n: usize,
    jitter: bool,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    check_bounds(near, far, weights.len())?;
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::Domain("importance weights must be finite and >= 0".into()));
    }
    let bins = weights.len();
    let bin_width = (far - near) / bins as f64;
    let total: f64 = weights.iter().map(|w| w + IMPORTANCE_FLOOR).sum();
    let pdf: Vec<f64> = weights.iter().map(|w| (w + IMPORTANCE_FLOOR) / total).collect();
    let mut cdf = Vec::with_capacity(bins + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for p in &pdf {
        acc += p;
        cdf.push(acc);
    }
    let out = (0..n)
        .map(|j| {
            let u = (j as f64 + if jitter { rng.random::<f64>() } else { 0.5 }) / n as f64;
            // Last bin whose left CDF edge is <= u.
            let i = (cdf[1..bins].partition_point(|&c| c <= u)).min(bins - 1);
            let frac = ((u - cdf[i]) / pdf[i]).clamp(0.0, 1.0);
            near + (i as f64 + frac) * bin_width
        })
        .collect();
    Ok(out)
}

/// Fine-stage samples: `n_fine` inverse-CDF draws guided by the coarse
/// weights, merged and sorted with the coarse samples.
///
/// Near-duplicates are pushed apart to keep the distances strictly increasing.
pub fn importance_samples(
    coarse: &SampleSet,
    weights: &[f64],
    n_fine: usize,
    jitter: bool,
    rng: &mut impl Rng,
) -> Result<SampleSet> {
    if weights.len() != coarse.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} coarse samples",
            weights.len(),
            coarse.len()
        )));
    }
    let fine = inverse_cdf_samples(coarse.near, coarse.far, weights, n_fine, jitter, rng)?;
    let mut t: Vec<f64> = coarse.t.iter().copied().chain(fine).collect();
    t.sort_by(f64::total_cmp);
    for i in 1..t.len() {
        if t[i] < t[i - 1] + MERGE_SEPARATION {
            t[i] = t[i - 1] + MERGE_SEPARATION;
        }
    }
    Ok(SampleSet::from_sorted(t, coarse.near, coarse.far))
}

/// Composited quantities for one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub depth: f64,
    pub depth_var: f64,
    pub weights: Vec<f64>,
    /// `T_i`, the transmittance reaching sample `i`.
    pub transmittance: Vec<f64>,
    /// Transmittance left after the last sample.
    pub residual: f64,
}

impl RenderOutput {
    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Upstream gradient of a scalar loss with respect to one [`RenderOutput`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RenderGrad {
    pub color: [f64; 3],
    pub depth: f64,
    pub depth_var: f64,
}

impl RenderGrad {
    pub fn is_zero(&self) -> bool {
        self.color == [0.0; 3] && self.depth == 0.0 && self.depth_var == 0.0
    }
}

/// Alpha compositing of color, expected depth and depth variance.
///
/// `w_i = T_i (1 - exp(-sigma_i delta_i))`, `C = Σ w_i c_i`, `D = Σ w_i t_i`,
/// `Var = Σ w_i (D - t_i)^2`. Residual transmittance adds no color or depth.
pub fn composite(sigmas: &[f64], colors: &[[f64; 3]], samples: &SampleSet) -> Result<RenderOutput> {
    let n = samples.len();
    if sigmas.len() != n || colors.len() != n {
        return Err(Error::Shape(format!(
            "{} densities and {} colors for {n} samples",
            sigmas.len(),
            colors.len()
        )));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Domain(format!("density {s} is negative or NaN")));
    }
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let mut optical_depth = 0.0f64;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    for i in 0..n {
        let a = sigmas[i] * samples.delta[i];
        let t_i = (-optical_depth).exp();
        let w = t_i * -(-a).exp_m1();
        optical_depth += a;
        transmittance.push(t_i);
        weights.push(w);
        for c in 0..3 {
            color[c] += w * colors[i][c];
        }
        depth += w * samples.t[i];
    }
    let depth_var = weights
        .iter()
        .zip(&samples.t)
        .map(|(w, t)| w * (depth - t) * (depth - t))
        .sum();
    Ok(RenderOutput {
        color,
        depth,
        depth_var,
        weights,
        transmittance,
        residual: (-optical_depth).exp(),
    })
}

/// Reverse pass of [`composite`]: returns `dL/dsigma_i` and `dL/dc_i`.
pub fn composite_backward(
    sigmas: &[f64],
    colors: &[[f64; 3]],
    samples: &SampleSet,
    out: &RenderOutput,
    grad: &RenderGrad,
) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = samples.len();
    let wsum = out.weight_sum();
    let g_depth = grad.depth + grad.depth_var * 2.0 * out.depth * (wsum - 1.0);
    let g_w: Vec<f64> = (0..n)
        .map(|i| {
            let dt = out.depth - samples.t[i];
            (0..3).map(|c| grad.color[c] * colors[i][c]).sum::<f64>()
                + g_depth * samples.t[i]
                + grad.depth_var * dt * dt
        })
        .collect();
    let mut d_sigma = vec![0.0; n];
    let mut d_color = vec![[0.0; 3]; n];
    // suffix = Σ_{i > k} w_i g_w_i
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        let a = sigmas[k] * samples.delta[k];
        let t_next = out.transmittance[k] * (-a).exp();
        d_sigma[k] = samples.delta[k] * (t_next * g_w[k] - suffix);
        suffix += out.weights[k] * g_w[k];
        for c in 0..3 {
            d_color[k][c] = out.weights[k] * grad.color[c];
        }
    }
    (d_sigma, d_color)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_coarse: usize,
    /// Extra importance samples; `0` renders with the coarse network only.
    pub n_fine: usize,
    pub near: f64,
    pub far: f64,
    /// Jitter stratified and importance samples.
    pub perturb: bool,
    pub seed: u64,
    /// Rays processed per network call; only bounds memory.
    pub chunk_rays: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_fine: 128,
            near: 0.05,
            far: 2.0,
            perturb: true,
            seed: 0,
            chunk_rays: 64,
        }
    }
}

impl SamplingConfig {
    /// Same configuration with jitter turned off.
    pub fn deterministic(mut self) -> Self {
        self.perturb = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_bounds(self.near, self.far, self.n_coarse)?;
        if self.chunk_rays == 0 {
            return Err(Error::Config("chunk_rays must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayRender {
    pub coarse: RenderOutput,
    pub fine: Option<RenderOutput>,
    pub coarse_samples: SampleSet,
    pub fine_samples: Option<SampleSet>,
}

impl RayRender {
    /// Fine output when present, coarse otherwise.
    pub fn best(&self) -> &RenderOutput {
        self.fine.as_ref().unwrap_or(&self.coarse)
    }
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for one ray; depends only on the seed, the stream and the ray index.
pub fn ray_rng(seed: u64, stream: u64, ray: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(stream ^ mix64(ray))))
}

struct BranchPass<F> {
    samples: Vec<SampleSet>,
    /// Offset of each ray's first sample in the flat batch.
    offsets: Vec<usize>,
    tape: MlpTape<F>,
    outputs: Vec<RenderOutput>,
}

impl<F: Real> BranchPass<F> {
    fn sigmas(&self, r: usize) -> Vec<f64> {
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        (a..b).map(|k| self.tape.sigma[k].to_f64().unwrap()).collect()
    }

    fn colors(&self, r: usize) -> Vec<[f64; 3]> {
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        (a..b)
            .map(|k| {
                let c = self.tape.color.row(k);
                [c[0].to_f64().unwrap(), c[1].to_f64().unwrap(), c[2].to_f64().unwrap()]
            })
            .collect()
    }
}

fn run_branch<F: Real>(
    params: &FieldParams<F>,
    branch: Branch,
    rays: &[Ray],
    samples: Vec<SampleSet>,
) -> Result<BranchPass<F>> {
    let mut offsets = Vec::with_capacity(rays.len() + 1);
    let mut points = Vec::new();
    let mut dirs: Vec<Vec3> = Vec::new();
    offsets.push(0);
    for (ray, s) in rays.iter().zip(&samples) {
        for &t in &s.t {
            points.push(ray.at(t));
            dirs.push(ray.dir.vec());
        }
        offsets.push(points.len());
    }
    let (pos, dir) = encode_samples::<F>(&params.arch, &points, &dirs);
    let tape = params
        .branch(branch)
        .forward(&params.arch, pos, dir.view(), branch.name())?;
    let mut pass = BranchPass {
        samples,
        offsets,
        tape,
        outputs: Vec::with_capacity(rays.len()),
    };
    for r in 0..rays.len() {
        let out = composite(&pass.sigmas(r), &pass.colors(r), &pass.samples[r])?;
        pass.outputs.push(out);
    }
    Ok(pass)
}

fn backprop_branch<F: Real>(
    params: &FieldParams<F>,
    grads: &mut FieldParams<F>,
    branch: Branch,
    pass: &BranchPass<F>,
    ray_grads: &[RenderGrad],
) {
    if ray_grads.iter().all(RenderGrad::is_zero) {
        return;
    }
    let m = pass.tape.sigma.len();
    let mut d_sigma = Array1::<F>::zeros(m);
    let mut d_color = Array2::<F>::zeros((m, 3));
    for (r, g) in ray_grads.iter().enumerate() {
        if g.is_zero() {
            continue;
        }
        let sig = pass.sigmas(r);
        let col = pass.colors(r);
        let (ds, dc) = composite_backward(&sig, &col, &pass.samples[r], &pass.outputs[r], g);
        let base = pass.offsets[r];
        for k in 0..ds.len() {
            d_sigma[base + k] = F::lit(ds[k]);
            for c in 0..3 {
                d_color[[base + k, c]] = F::lit(dc[k][c]);
            }
        }
    }
    params.branch(branch).backward(
        &params.arch,
        &pass.tape,
        d_sigma.view(),
        d_color.view(),
        grads.branch_mut(branch),
    );
}

/// Supplies the loss gradient for each rendered ray: `(coarse, fine)`.
pub trait RayLossGrad {
    fn grad(&mut self, ray: usize, render: &RayRender) -> (RenderGrad, RenderGrad);
}

impl<T: FnMut(usize, &RayRender) -> (RenderGrad, RenderGrad)> RayLossGrad for T {
    fn grad(&mut self, ray: usize, render: &RayRender) -> (RenderGrad, RenderGrad) {
        self(ray, render)
    }
}

struct ChunkPass<F> {
    first: usize,
    coarse: BranchPass<F>,
    fine: Option<BranchPass<F>>,
}

fn forward_chunk<F: Real>(
    params: &FieldParams<F>,
    chunk: &[Ray],
    first: usize,
    cfg: &SamplingConfig,
    stream: u64,
) -> Result<(ChunkPass<F>, Vec<RayRender>)> {
    let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len())
        .map(|i| ray_rng(cfg.seed, stream, (first + i) as u64))
        .collect();
    let coarse_sets = rngs
        .iter_mut()
        .map(|rng| stratified_samples(cfg.near, cfg.far, cfg.n_coarse, cfg.perturb, rng))
        .collect::<Result<Vec<_>>>()?;
    let coarse = run_branch(params, Branch::Coarse, chunk, coarse_sets)?;
    let fine = if cfg.n_fine > 0 {
        let sets = (0..chunk.len())
            .map(|r| {
                importance_samples(
                    &coarse.samples[r],
                    &coarse.outputs[r].weights,
                    cfg.n_fine,
                    cfg.perturb,
                    &mut rngs[r],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Some(run_branch(params, Branch::Fine, chunk, sets)?)
    } else {
        None
    };
    let renders = (0..chunk.len())
        .map(|r| RayRender {
            coarse: coarse.outputs[r].clone(),
            fine: fine.as_ref().map(|f| f.outputs[r].clone()),
            coarse_samples: coarse.samples[r].clone(),
            fine_samples: fine.as_ref().map(|f| f.samples[r].clone()),
        })
        .collect();
    Ok((ChunkPass { first, coarse, fine }, renders))
}

fn backward_chunk<F: Real>(
    params: &FieldParams<F>,
    grads: &mut FieldParams<F>,
    pass: &ChunkPass<F>,
    renders: &[RayRender],
    loss: &mut dyn RayLossGrad,
) {
    let (gc, gf): (Vec<_>, Vec<_>) = renders
        .iter()
        .enumerate()
        .map(|(r, rr)| loss.grad(pass.first + r, rr))
        .unzip();
    backprop_branch(params, grads, Branch::Coarse, &pass.coarse, &gc);
    if let Some(f) = &pass.fine {
        backprop_branch(params, grads, Branch::Fine, f, &gf);
    }
}

fn render_chunks<F: Real>(
    params: &FieldParams<F>,
    rays: &[Ray],
    cfg: &SamplingConfig,
    stream: u64,
    mut backward: Option<(&mut FieldParams<F>, &mut dyn RayLossGrad)>,
) -> Result<Vec<RayRender>> {
    cfg.validate()?;
    let mut renders = Vec::with_capacity(rays.len());
    for (c, chunk) in rays.chunks(cfg.chunk_rays).enumerate() {
        let (pass, chunk_renders) = forward_chunk(params, chunk, c * cfg.chunk_rays, cfg, stream)?;
        if let Some((grads, loss)) = backward.as_mut() {
            backward_chunk(params, grads, &pass, &chunk_renders, *loss);
        }
        renders.extend(chunk_renders);
    }
    Ok(renders)
}

/// A forward render that keeps its activations, for losses that need every
/// ray's output before any gradient is known.
pub struct RetainedRender<F> {
    passes: Vec<ChunkPass<F>>,
    pub renders: Vec<RayRender>,
}

impl<F: Real> RetainedRender<F> {
    /// Accumulates `dL/dparams` into `grads`; `params` must be the ones
    /// that produced the render.
    pub fn backward(&self, params: &FieldParams<F>, grads: &mut FieldParams<F>, loss: &mut dyn RayLossGrad) {
        for pass in &self.passes {
            let n = pass.coarse.outputs.len();
            backward_chunk(params, grads, pass, &self.renders[pass.first..pass.first + n], loss);
        }
    }
}

pub fn render_rays_retained<F: Real>(
    params: &FieldParams<F>,
    rays: &[Ray],
    cfg: &SamplingConfig,
    stream: u64,
) -> Result<RetainedRender<F>> {
    cfg.validate()?;
    let mut out = RetainedRender {
        passes: Vec::new(),
        renders: Vec::with_capacity(rays.len()),
    };
    for (c, chunk) in rays.chunks(cfg.chunk_rays).enumerate() {
        let (pass, renders) = forward_chunk(params, chunk, c * cfg.chunk_rays, cfg, stream)?;
        out.passes.push(pass);
        out.renders.extend(renders);
    }
    Ok(out)
}

/// Coarse and (when `n_fine > 0`) fine renders for every ray.
///
/// `stream` decorrelates jitter between calls; ray `i` of a call always uses
/// the same random numbers for a given `(cfg.seed, stream)`.
pub fn render_rays<F: Real>(
    params: &FieldParams<F>,
    rays: &[Ray],
    cfg: &SamplingConfig,
    stream: u64,
) -> Result<Vec<RayRender>> {
    render_chunks(params, rays, cfg, stream, None)
}

/// Renders the rays and accumulates `dL/dparams` into `grads`, where the
/// per-ray loss gradients come from `loss`.
pub fn render_rays_backward<F: Real>(
    params: &FieldParams<F>,
    grads: &mut FieldParams<F>,
    rays: &[Ray],
    cfg: &SamplingConfig,
    stream: u64,
    loss: &mut dyn RayLossGrad,
) -> Result<Vec<RayRender>> {
    render_chunks(params, rays, cfg, stream, Some((grads, loss)))
}

/// Renders a full panorama from `pose`; color and depth from the fine
/// branch (coarse when `n_fine == 0`). Every pixel is marked valid.
pub fn render_panorama<F: Real>(
    params: &FieldParams<F>,
    pose: &CameraPose,
    width: usize,
    height: usize,
    cfg: &SamplingConfig,
) -> Result<Panorama> {
    let rays = panorama_ray_grid(pose, width, height);
    let renders = render_rays(params, &rays, cfg, 0)?;
    let mut rgb = Vec::with_capacity(3 * rays.len());
    let mut depth = Vec::with_capacity(rays.len());
    for r in &renders {
        let out = r.best();
        rgb.extend(out.color.iter().map(|&c| (c as f32).clamp(0.0, 1.0)));
        depth.push((out.depth as f32).max(MIN_PANORAMA_DEPTH));
    }
    Panorama::new(width, height, rgb, depth, vec![true; rays.len()])
}
