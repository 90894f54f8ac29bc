//! Toy latent-diffusion inpainting.
//!
//! * a linear β schedule and the closed-form forward process
//!   `z_t = √ᾱ_t · z_0 + √(1 − ᾱ_t) · ε`;
//! * a fixed latent codec: 4× area-average encoder and bilinear decoder;
//! * appearance-flow application and coarse composite assembly;
//! * a small two-level UNet-style noise predictor taking `[z_t, z_lc, m]`,
//!   with a sinusoidal timestep embedding at every stage and one
//!   cross-attention block over the garment condition tokens;
//! * the noise-prediction objective and DDIM / PLMS samplers.
//!
//! Grids are stored as [`Image`] (`h × w × c`); inside the network they are
//! `(h·w) × c` matrices with pixels row-major.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Graph, ParamSet, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::image::Image;
use crate::optim::{cosine_schedule, AdamW};
use crate::tensor::Matrix;

/// Spatial downsampling factor of the fixed encoder.
pub const LATENT_FACTOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// β linearly interpolated from `beta_start` (step 1) to `beta_end` (step
/// `steps`), with `ᾱ` as the running product of `1 − β`.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::config("diffusion.steps", "schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(
            "diffusion.beta_start",
            format!("need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"),
        ));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect(),
    };
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(DiffusionSchedule { betas, alpha_bars })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bars()[s - 1]` belongs to timestep `s`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `ᾱ_t` for `t ∈ [0, T]`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// SHA-256 of the little-endian β values.
    pub fn hash(&self) -> String {
        let bytes: Vec<u8> = self.betas.iter().flat_map(|b| b.to_le_bytes()).collect();
        sha256_hex(&bytes)
    }

    /// `steps` timesteps spread evenly over `[1, T]`, descending from `T`.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if steps == 0 || steps > t {
            return Err(Error::InvalidArgument(format!("sampling steps must be in [1, {t}], got {steps}")));
        }
        Ok((1..=steps).rev().map(|i| (i * t).div_ceil(steps)).collect())
    }
}

/// A latent grid at timestep `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub z: Image,
    pub t: usize,
}

/// `√ᾱ_t · z0 + √(1 − ᾱ_t) · ε` for `t ∈ [1, T]`.
pub fn forward_diffuse(z0: &Image, t: usize, eps: &Image, schedule: &DiffusionSchedule) -> Result<Image> {
    if !z0.same_shape(eps) {
        return Err(Error::Shape("noise and latent differ in shape".into()));
    }
    if t == 0 || t > schedule.steps() {
        return Err(Error::InvalidArgument(format!("timestep {t} outside [1, {}]", schedule.steps())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(z, e)| a * z + b * e).collect();
    Image::from_vec(z0.height(), z0.width(), z0.channels(), data)
}

/// Block mean over `LATENT_FACTOR × LATENT_FACTOR` pixels, per channel.
pub fn encode(image: &Image) -> Result<Image> {
    let f = LATENT_FACTOR;
    let (h, w) = image.dims();
    if h % f != 0 || w % f != 0 {
        return Err(Error::Shape(format!("{h}x{w} image is not divisible by the latent factor {f}")));
    }
    let inv = 1.0 / (f * f) as f64;
    Ok(Image::from_fn(h / f, w / f, image.channels(), |y, x, c| {
        let mut s = 0.0;
        for dy in 0..f {
            for dx in 0..f {
                s += image.get(y * f + dy, x * f + dx, c);
            }
        }
        s * inv
    }))
}

/// Bilinear `LATENT_FACTOR×` upsampling with half-pixel centres and edge
/// clamping.
pub fn decode(z: &Image) -> Image {
    let f = LATENT_FACTOR as f64;
    let (h, w) = z.dims();
    let axis = |i: usize, n: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) / f - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    };
    Image::from_fn(h * LATENT_FACTOR, w * LATENT_FACTOR, z.channels(), |y, x, c| {
        let (y0, y1, fy) = axis(y, h);
        let (x0, x1, fx) = axis(x, w);
        (1.0 - fy) * ((1.0 - fx) * z.get(y0, x0, c) + fx * z.get(y0, x1, c))
            + fy * ((1.0 - fx) * z.get(y1, x0, c) + fx * z.get(y1, x1, c))
    })
}

/// Pixel values `[0, 1]` ↔ network latents `[-1, 1]` around the fixed codec.
pub fn to_latent(image: &Image) -> Result<Image> {
    let z = encode(image)?;
    let data = z.data().iter().map(|v| 2.0 * v - 1.0).collect();
    Image::from_vec(z.height(), z.width(), z.channels(), data)
}

pub fn from_latent(z: &Image) -> Image {
    let data = z.data().iter().map(|v| 0.5 * v + 0.5).collect();
    decode(&Image::from_vec(z.height(), z.width(), z.channels(), data).expect("same shape"))
}

/// Backward bilinear warp: `out(y, x) = garment(y + dy, x + dx)`, sampling
/// outside the image takes the nearest border pixel. `flow` is `H × W × 2`
/// holding `(dx, dy)`.
pub fn warp_apply(garment: &Image, flow: &Image) -> Result<Image> {
    if flow.channels() != 2 || flow.dims() != garment.dims() {
        return Err(Error::Shape(format!(
            "flow {}x{}x{} does not match a {}x{} image",
            flow.height(),
            flow.width(),
            flow.channels(),
            garment.height(),
            garment.width()
        )));
    }
    if !flow.is_finite() {
        return Err(Error::InvalidArgument("flow contains non-finite values".into()));
    }
    let (h, w) = garment.dims();
    let ch = garment.channels();
    let mut out = Image::new(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            let sx = (x as f64 + flow.get(y, x, 0)).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + flow.get(y, x, 1)).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..ch {
                let v = (1.0 - fy) * ((1.0 - fx) * garment.get(y0, x0, c) + fx * garment.get(y0, x1, c))
                    + fy * ((1.0 - fx) * garment.get(y1, x0, c) + fx * garment.get(y1, x1, c));
                out.set(y, x, c, v);
            }
        }
    }
    Ok(out)
}

/// Person pixels where the mask is 0, `inside` pixels where it is 1.
/// Selection (not arithmetic blending) keeps unmasked pixels bit-exact.
pub fn composite(person: &Image, inside: &Image, mask: &Image) -> Result<Image> {
    if !person.same_shape(inside) || mask.dims() != person.dims() || mask.channels() != 1 {
        return Err(Error::Shape("composite inputs differ in shape".into()));
    }
    let mut out = person.clone();
    let (h, w) = person.dims();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x, 0) != 0.0 {
                out.pixel_mut(y, x).copy_from_slice(inside.pixel(y, x));
            }
        }
    }
    Ok(out)
}

fn check_mask(mask: &Image) -> Result<()> {
    if mask.channels() != 1 || mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument("mask must be single-channel and strictly binary".into()));
    }
    Ok(())
}

/// Inputs of one inpainting example.
#[derive(Clone, Debug, PartialEq)]
pub struct InpaintSample {
    pub person: Image,
    pub garment: Image,
    pub mask: Image,
    pub coarse: Image,
    pub flow: Image,
}

/// Builds the coarse composite of the warped garment over the person.
pub fn assemble_coarse(person: &Image, garment: &Image, mask: &Image, flow: &Image) -> Result<InpaintSample> {
    if !person.same_shape(garment) {
        return Err(Error::Shape("person and garment differ in shape".into()));
    }
    check_mask(mask)?;
    let warped = warp_apply(garment, flow)?;
    let coarse = composite(person, &warped, mask)?;
    Ok(InpaintSample {
        person: person.clone(),
        garment: garment.clone(),
        mask: mask.clone(),
        coarse,
        flow: flow.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Latent grid `(height, width)`; both must be even.
    pub latent_size: (usize, usize),
    pub latent_channels: usize,
    /// Feature width of the full-resolution stage; the bottleneck has twice this.
    pub base_channels: usize,
    pub time_dim: usize,
    pub condition_dim: usize,
    pub attention_dim: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_size: (16, 12),
            latent_channels: 3,
            base_channels: 32,
            time_dim: 64,
            condition_dim: 128,
            attention_dim: 64,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.latent_size;
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config("denoiser.latent_size", format!("{h}x{w} must be positive and even")));
        }
        for (key, v) in [
            ("denoiser.latent_channels", self.latent_channels),
            ("denoiser.base_channels", self.base_channels),
            ("denoiser.condition_dim", self.condition_dim),
            ("denoiser.attention_dim", self.attention_dim),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::config("denoiser.time_dim", "must be positive and even"));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        2 * self.latent_channels + 1
    }
}

/// `[sin(t·ω_i), cos(t·ω_i)]` with `ω_i = 10000^(−i / (dim/2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

pub fn init_denoiser_params(config: &DenoiserConfig) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.base_channels;
    let (td, hid) = (config.time_dim, 2 * config.time_dim);
    let mut ps = ParamSet::new();
    let mut dense = |ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, bias: bool| {
        let std = 1.0 / (fan_in as f64).sqrt();
        ps.insert(format!("{name}.weight"), Matrix::standard_normal(fan_in, fan_out, &mut rng).scale(std));
        if bias {
            ps.insert(format!("{name}.bias"), Matrix::zeros(1, fan_out));
        }
    };
    dense(&mut ps, "time.fc1", td, hid, true);
    dense(&mut ps, "time.enc", hid, c, true);
    dense(&mut ps, "time.mid", hid, 2 * c, true);
    dense(&mut ps, "time.dec", hid, c, true);
    dense(&mut ps, "conv_in", 9 * config.input_channels(), c, true);
    dense(&mut ps, "conv_mid", 9 * c, 2 * c, true);
    dense(&mut ps, "attn.q", 2 * c, config.attention_dim, false);
    dense(&mut ps, "attn.k", config.condition_dim, config.attention_dim, false);
    dense(&mut ps, "attn.v", config.condition_dim, config.attention_dim, false);
    dense(&mut ps, "attn.out", config.attention_dim, 2 * c, true);
    dense(&mut ps, "conv_dec", 9 * 3 * c, c, true);
    dense(&mut ps, "conv_out", 9 * c, config.latent_channels, true);
    ps
}

fn grid(image: &Image) -> Matrix {
    Matrix::from_vec(image.height() * image.width(), image.channels(), image.data().to_vec())
}

fn to_image(m: &Matrix, dims: (usize, usize)) -> Image {
    Image::from_vec(dims.0, dims.1, m.cols(), m.data().to_vec()).expect("grid shape")
}

/// Single-head cross-attention of grid features `x` (queries) over
/// condition tokens `cond` (keys and values); returns the projected update
/// that the caller adds residually.
pub fn cross_attention(graph: &mut Graph, p: &Bound, x: Var, cond: Var) -> Var {
    let q = graph.matmul(x, p.var("attn.q.weight"));
    let k = graph.matmul(cond, p.var("attn.k.weight"));
    let v = graph.matmul(cond, p.var("attn.v.weight"));
    let d = graph.value(q).cols() as f64;
    let scores = graph.matmul_nt(q, k);
    let scores = graph.scale(scores, 1.0 / d.sqrt());
    let attn = graph.softmax_rows(scores);
    let o = graph.matmul(attn, v);
    graph.linear(o, p.var("attn.out.weight"), p.var("attn.out.bias"))
}

/// Records the noise prediction for one latent on `graph`; returns an
/// `(h·w) × latent_channels` node.
pub fn denoiser_graph(
    graph: &mut Graph,
    p: &Bound,
    config: &DenoiserConfig,
    z_t: &Image,
    z_lc: &Image,
    mask: &Image,
    cond: &Matrix,
    t: usize,
) -> Result<Var> {
    let (h, w) = config.latent_size;
    let ch = config.latent_channels;
    if z_t.dims() != (h, w) || z_lc.dims() != (h, w) || mask.dims() != (h, w) {
        return Err(Error::config(
            "denoiser.latent_size",
            format!("inputs are not {h}x{w} latent grids"),
        ));
    }
    if z_t.channels() != ch || z_lc.channels() != ch || mask.channels() != 1 {
        return Err(Error::config("denoiser.latent_channels", "input channel counts do not match"));
    }
    if cond.cols() != config.condition_dim || cond.rows() == 0 {
        return Err(Error::config(
            "denoiser.condition_dim",
            format!("condition tokens have width {}, expected {}", cond.cols(), config.condition_dim),
        ));
    }
    let zt = graph.constant(grid(z_t));
    let zl = graph.constant(grid(z_lc));
    let m = graph.constant(grid(mask));
    let x = graph.concat_cols(&[zt, zl, m]);
    let c = graph.constant(cond.clone());

    let temb = graph.constant(Matrix::row_vector(timestep_embedding(t, config.time_dim)));
    let te = graph.linear(temb, p.var("time.fc1.weight"), p.var("time.fc1.bias"));
    let te = graph.silu(te);
    let stage = |graph: &mut Graph, name: &str| graph.linear(te, p.var(&format!("time.{name}.weight")), p.var(&format!("time.{name}.bias")));

    // full resolution
    let cols = graph.im2col3x3(x, h, w);
    let e1 = graph.linear(cols, p.var("conv_in.weight"), p.var("conv_in.bias"));
    let t1 = stage(graph, "enc");
    let e1 = graph.add_row(e1, t1);
    let e1 = graph.silu(e1);

    // bottleneck with cross-attention
    let (h2, w2) = (h / 2, w / 2);
    let d = graph.avg_pool2(e1, h, w);
    let cols = graph.im2col3x3(d, h2, w2);
    let e2 = graph.linear(cols, p.var("conv_mid.weight"), p.var("conv_mid.bias"));
    let t2 = stage(graph, "mid");
    let e2 = graph.add_row(e2, t2);
    let e2 = graph.silu(e2);
    let update = cross_attention(graph, p, e2, c);
    let a = graph.add(e2, update);

    // back up, with the skip connection
    let u = graph.upsample2(a, h2, w2);
    let cat = graph.concat_cols(&[u, e1]);
    let cols = graph.im2col3x3(cat, h, w);
    let e3 = graph.linear(cols, p.var("conv_dec.weight"), p.var("conv_dec.bias"));
    let t3 = stage(graph, "dec");
    let e3 = graph.add_row(e3, t3);
    let e3 = graph.silu(e3);
    let cols = graph.im2col3x3(e3, h, w);
    let out = graph.linear(cols, p.var("conv_out.weight"), p.var("conv_out.bias"));
    if !graph.value(out).is_finite() {
        return Err(Error::Numerical {
            context: "denoiser output".into(),
            index: t,
        });
    }
    Ok(out)
}

/// The noise predictor with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamSet,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let params = init_denoiser_params(&config);
        Ok(Self { config, params })
    }

    pub fn forward(&self, z_t: &Image, z_lc: &Image, mask: &Image, cond: &Matrix, t: usize) -> Result<Image> {
        let mut graph = Graph::new();
        let bound = self.params.bind(&mut graph, false);
        let out = denoiser_graph(&mut graph, &bound, &self.config, z_t, z_lc, mask, cond, t)?;
        Ok(to_image(graph.value(out), self.config.latent_size))
    }

    pub fn save(&self, path: &Path, tag: Option<&str>) -> Result<()> {
        checkpoint::save(path, &self.params, "denoiser", tag, serde_json::to_value(&self.config)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, sidecar) = checkpoint::load(path)?;
        if sidecar.kind != "denoiser" {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("expected a denoiser checkpoint, found `{}`", sidecar.kind),
            });
        }
        let config: DenoiserConfig = serde_json::from_value(sidecar.config)?;
        config.validate()?;
        let params = checkpoint::conform(path, params, &init_denoiser_params(&config))?;
        Ok(Self { config, params })
    }
}

/// One example prepared for training: latents of the person and the coarse
/// composite, the latent mask and the frozen encoder's condition tokens.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub z0: Image,
    pub z_lc: Image,
    pub mask: Image,
    pub cond: Matrix,
}

impl TrainExample {
    pub fn new(sample: &InpaintSample, cond: Matrix) -> Result<Self> {
        Ok(Self {
            z0: to_latent(&sample.person)?,
            z_lc: to_latent(&sample.coarse)?,
            mask: encode(&sample.mask)?,
            cond,
        })
    }
}

/// An example with its drawn timestep and noise.
#[derive(Clone, Debug)]
pub struct NoisedExample<'a> {
    pub example: &'a TrainExample,
    pub t: usize,
    pub eps: Image,
}

/// Mean over the batch of the per-example mean squared noise error, and
/// its gradient for every denoiser parameter.
pub fn loss_and_grads(
    denoiser: &Denoiser,
    batch: &[NoisedExample],
    schedule: &DiffusionSchedule,
) -> Result<(f64, Vec<Matrix>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut graph = Graph::new();
    let bound = denoiser.params.bind(&mut graph, true);
    let mut losses = Vec::with_capacity(batch.len());
    for item in batch {
        let ex = item.example;
        let z_t = forward_diffuse(&ex.z0, item.t, &item.eps, schedule)?;
        let pred = denoiser_graph(&mut graph, &bound, &denoiser.config, &z_t, &ex.z_lc, &ex.mask, &ex.cond, item.t)?;
        losses.push(graph.mse(pred, grid(&item.eps)));
    }
    let total = if losses.len() == 1 {
        losses[0]
    } else {
        let stacked = graph.concat_rows(&losses);
        graph.sum(stacked)
    };
    let loss = graph.scale(total, 1.0 / batch.len() as f64);
    let value = graph.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numerical {
            context: "denoiser loss".into(),
            index: 0,
        });
    }
    let grads = graph.backward(loss);
    Ok((value, bound.gradients(&grads)))
}

fn standard_normal_image<R: Rng + ?Sized>(dims: (usize, usize), channels: usize, rng: &mut R) -> Image {
    Image::from_fn(dims.0, dims.1, channels, |_, _, _| StandardNormal.sample(rng))
}

/// Draws `t ~ U{1..T}` and `ε ~ N(0, I)` for every example, then evaluates
/// the loss and gradients.
pub fn train_step<R: Rng + ?Sized>(
    denoiser: &Denoiser,
    batch: &[&TrainExample],
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(f64, Vec<Matrix>)> {
    let noised: Vec<NoisedExample> = batch
        .iter()
        .map(|ex| NoisedExample {
            example: ex,
            t: rng.random_range(1..=schedule.steps()),
            eps: standard_normal_image(ex.z0.dims(), ex.z0.channels(), rng),
        })
        .collect();
    loss_and_grads(denoiser, &noised, schedule)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for InpaintTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 8,
            learning_rate: 2e-3,
            final_learning_rate: 1e-4,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl InpaintTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("inpaint.batch_size", "must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.final_learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config("inpaint.learning_rate", "rates must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InpaintLogEntry {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Trains `denoiser` in place; `on_step` sees every log entry.
pub fn train_denoiser(
    denoiser: &mut Denoiser,
    examples: &[TrainExample],
    schedule: &DiffusionSchedule,
    config: &InpaintTrainConfig,
    mut on_step: impl FnMut(&InpaintLogEntry) -> Result<()>,
) -> Result<Vec<InpaintLogEntry>> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(&denoiser.params, config.weight_decay);
    let per_epoch = examples.len().div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = train_step(denoiser, &batch, schedule, &mut rng).map_err(|e| match e {
                Error::Numerical { context, .. } => Error::Numerical { context, index: step },
                other => other,
            })?;
            let lr = cosine_schedule(config.learning_rate, config.final_learning_rate, step, total);
            opt.step(&mut denoiser.params, &grads, lr);
            let entry = InpaintLogEntry { step, epoch, loss, lr };
            on_step(&entry)?;
            log.push(entry);
            step += 1;
        }
    }
    Ok(log)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMethod {
    Ddim,
    Plms,
}

impl std::str::FromStr for SamplerMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(SamplerMethod::Ddim),
            "plms" => Ok(SamplerMethod::Plms),
            other => Err(Error::config("sampler.method", format!("unsupported sampler `{other}`"))),
        }
    }
}

impl std::fmt::Display for SamplerMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerMethod::Ddim => "ddim",
            SamplerMethod::Plms => "plms",
        })
    }
}

/// `ẑ_prev = √ᾱ_prev · x̂0 + √(1 − ᾱ_prev) · ε`, `x̂0 = (z − √(1 − ᾱ_t) ε) / √ᾱ_t`.
fn ddim_transfer(z: &Image, eps: &Image, ab_t: f64, ab_prev: f64) -> Image {
    let (st, nt) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sp, np) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&zv, &e)| sp * (zv - nt * e) / st + np * e)
        .collect();
    Image::from_vec(z.height(), z.width(), z.channels(), data).expect("same shape")
}

fn combine(terms: &[(f64, &Image)]) -> Image {
    let first = terms[0].1;
    let mut data = vec![0.0; first.data().len()];
    for (w, img) in terms {
        for (o, v) in data.iter_mut().zip(img.data()) {
            *o += w * v;
        }
    }
    Image::from_vec(first.height(), first.width(), first.channels(), data).expect("same shape")
}

/// Runs the deterministic reverse process from `z_T`, calling `predict(z, t)`
/// for the noise estimate. PLMS combines the current and up to three
/// previous estimates (orders 1, 2, 3 during warm-up, then 4).
pub fn sample_latent(
    mut predict: impl FnMut(&Image, usize) -> Result<Image>,
    schedule: &DiffusionSchedule,
    steps: usize,
    method: SamplerMethod,
    z_t: Image,
) -> Result<Image> {
    let ts = schedule.sampling_timesteps(steps)?;
    let mut z = z_t;
    let mut history: Vec<Image> = Vec::new();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = predict(&z, t)?;
        if !eps.is_finite() {
            return Err(Error::Numerical {
                context: "sampler noise estimate".into(),
                index: t,
            });
        }
        let eps_used = match method {
            SamplerMethod::Ddim => eps,
            SamplerMethod::Plms => {
                let e = match history.len() {
                    0 => eps.clone(),
                    1 => combine(&[(1.5, &eps), (-0.5, &history[0])]),
                    2 => combine(&[(23.0 / 12.0, &eps), (-16.0 / 12.0, &history[1]), (5.0 / 12.0, &history[0])]),
                    _ => {
                        let n = history.len();
                        combine(&[
                            (55.0 / 24.0, &eps),
                            (-59.0 / 24.0, &history[n - 1]),
                            (37.0 / 24.0, &history[n - 2]),
                            (-9.0 / 24.0, &history[n - 3]),
                        ])
                    }
                };
                history.push(eps);
                if history.len() > 3 {
                    history.remove(0);
                }
                e
            }
        };
        z = ddim_transfer(&z, &eps_used, schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    }
    Ok(z)
}

/// Inputs shared by every denoising step of one image.
#[derive(Clone, Debug)]
pub struct SampleInputs {
    pub person: Image,
    pub mask: Image,
    pub coarse: Image,
    pub cond: Matrix,
}

/// Reproducibility record written next to every sampled image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub seed: u64,
    pub steps: usize,
    pub method: SamplerMethod,
    pub schedule_hash: String,
}

/// Samples a try-on image: denoise from a seeded standard-normal latent,
/// decode, and composite into the person outside the mask.
pub fn sample(
    denoiser: &Denoiser,
    inputs: &SampleInputs,
    schedule: &DiffusionSchedule,
    steps: usize,
    method: SamplerMethod,
    seed: u64,
) -> Result<(Image, SampleSidecar)> {
    check_mask(&inputs.mask)?;
    let z_lc = to_latent(&inputs.coarse)?;
    let m = encode(&inputs.mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_t = standard_normal_image(z_lc.dims(), z_lc.channels(), &mut rng);
    let z0 = sample_latent(
        |z, t| denoiser.forward(z, &z_lc, &m, &inputs.cond, t),
        schedule,
        steps,
        method,
        z_t,
    )?;
    let mut decoded = from_latent(&z0);
    decoded.clamp01();
    let image = composite(&inputs.person, &decoded, &inputs.mask)?;
    Ok((
        image,
        SampleSidecar {
            seed,
            steps,
            method,
            schedule_hash: schedule.hash(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            latent_size: (4, 2),
            latent_channels: 2,
            base_channels: 2,
            time_dim: 4,
            condition_dim: 3,
            attention_dim: 2,
            seed: 9,
        }
    }

    fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
        Image::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn schedule_examples() {
        assert!(build_schedule(10, 0.0, 0.0, ScheduleKind::Linear).is_err());
        assert!(build_schedule(10, 0.02, 0.01, ScheduleKind::Linear).is_err());
        let s = build_schedule(1, 0.5, 0.5, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
        let s = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let mut oracle = 1.0;
        for i in 0..10 {
            oracle *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bars()[9] - oracle).abs() < 1e-15);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn sampling_timesteps_cover_the_range() {
        let s = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let ts = s.sampling_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 20);
        assert_eq!(s.sampling_timesteps(1000).unwrap(), (1..=1000).rev().collect::<Vec<_>>());
        assert!(s.sampling_timesteps(1001).is_err());
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = build_schedule(1, 0.75, 0.75, ScheduleKind::Linear).unwrap();
        let z0 = Image::from_fn(2, 2, 1, |y, x, _| (y * 2 + x) as f64);
        let zero = Image::new(2, 2, 1);
        let zt = forward_diffuse(&z0, 1, &zero, &s).unwrap();
        for (a, b) in zt.data().iter().zip(z0.data()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
        assert!(forward_diffuse(&z0, 0, &zero, &s).is_err());
        assert!(forward_diffuse(&z0, 1, &Image::new(2, 3, 1), &s).is_err());
    }

    #[test]
    fn codec_examples() {
        let c = Image::filled(8, 12, 3, 0.3);
        let z = encode(&c).unwrap();
        assert_eq!(z.dims(), (2, 3));
        assert!(z.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(decode(&z).max_abs_diff(&c) < 1e-15);
        assert!(encode(&Image::new(6, 8, 1)).is_err());
        // block-mean oracle
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = rand_image(&mut rng, 8, 8, 2);
        let z = encode(&img).unwrap();
        for by in 0..2 {
            for bx in 0..2 {
                for c in 0..2 {
                    let mut s = 0.0;
                    for y in by * 4..by * 4 + 4 {
                        for x in bx * 4..bx * 4 + 4 {
                            s += img.get(y, x, c);
                        }
                    }
                    assert!((z.get(by, bx, c) - s / 16.0).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn warp_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = rand_image(&mut rng, 5, 7, 3);
        let zero = Image::new(5, 7, 2);
        assert_eq!(warp_apply(&img, &zero).unwrap(), img);
        let shift = Image::from_fn(5, 7, 2, |_, _, c| if c == 0 { 3.0 } else { 0.0 });
        let out = warp_apply(&img, &shift).unwrap();
        for y in 0..5 {
            for x in 0..7 {
                let sx = (x + 3).min(6);
                assert_eq!(out.pixel(y, x), img.pixel(y, sx));
            }
        }
        let c = Image::filled(5, 7, 3, 0.7);
        let wild = Image::from_fn(5, 7, 2, |y, x, k| (y * 3 + x * 5 + k) as f64 * 0.37 - 4.0);
        assert!(warp_apply(&c, &wild).unwrap().max_abs_diff(&c) < 1e-15);
    }

    #[test]
    fn coarse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let person = rand_image(&mut rng, 4, 6, 3);
        let garment = rand_image(&mut rng, 4, 6, 3);
        let zero_flow = Image::new(4, 6, 2);
        let s = assemble_coarse(&person, &garment, &Image::new(4, 6, 1), &zero_flow).unwrap();
        assert_eq!(s.coarse, person);
        let s = assemble_coarse(&person, &garment, &Image::filled(4, 6, 1, 1.0), &zero_flow).unwrap();
        assert_eq!(s.coarse, garment);
        let checker = Image::from_fn(4, 6, 1, |y, x, _| ((y + x) % 2) as f64);
        let s = assemble_coarse(&person, &garment, &checker, &zero_flow).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                let want = if (y + x) % 2 == 1 { garment.pixel(y, x) } else { person.pixel(y, x) };
                assert_eq!(s.coarse.pixel(y, x), want);
            }
        }
        assert!(assemble_coarse(&person, &garment, &Image::filled(4, 6, 1, 0.5), &zero_flow).is_err());
    }

    #[test]
    fn output_shape_and_zero_attention() {
        let config = tiny_config();
        let d = Denoiser::new(config.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zt = rand_image(&mut rng, 4, 2, 2);
        let zl = rand_image(&mut rng, 4, 2, 2);
        let m = Image::filled(4, 2, 1, 1.0);
        let cond = Matrix::standard_normal(5, 3, &mut rng);
        let out = d.forward(&zt, &zl, &m, &cond, 17).unwrap();
        assert!(out.same_shape(&zt));
        assert!(d.forward(&zt, &zl, &m, &Matrix::zeros(5, 4), 17).is_err());

        let mut zeroed = d.params.clone();
        for name in ["attn.q.weight", "attn.k.weight", "attn.v.weight", "attn.out.weight", "attn.out.bias"] {
            let m = zeroed.get_mut(name).unwrap();
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        let mut graph = Graph::new();
        let bound = zeroed.bind(&mut graph, false);
        let x = graph.constant(Matrix::standard_normal(2, 4, &mut rng));
        let c = graph.constant(Matrix::zeros(5, 3));
        let update = cross_attention(&mut graph, &bound, x, c);
        assert!(graph.value(update).data().iter().all(|&v| v == 0.0));
    }

    // Loop-level reimplementation on `[y][x][c]` arrays.
    type Grid = Vec<Vec<Vec<f64>>>;

    fn conv3x3(x: &Grid, w: &Matrix, b: &Matrix) -> Grid {
        let (h, wd, cin) = (x.len(), x[0].len(), x[0][0].len());
        let cout = w.cols();
        let mut out = vec![vec![vec![0.0; cout]; wd]; h];
        for y in 0..h {
            for xx in 0..wd {
                for o in 0..cout {
                    let mut s = b[(0, o)];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                continue;
                            }
                            for c in 0..cin {
                                s += x[sy as usize][sx as usize][c] * w[((ky * 3 + kx) * cin + c, o)];
                            }
                        }
                    }
                    out[y][xx][o] = s;
                }
            }
        }
        out
    }

    fn dense(v: &[f64], w: &Matrix, b: Option<&Matrix>) -> Vec<f64> {
        (0..w.cols())
            .map(|o| v.iter().enumerate().map(|(i, x)| x * w[(i, o)]).sum::<f64>() + b.map_or(0.0, |b| b[(0, o)]))
            .collect()
    }

    fn silu(v: f64) -> f64 {
        v / (1.0 + (-v).exp())
    }

    fn add_silu(g: &mut Grid, t: &[f64]) {
        for row in g.iter_mut() {
            for px in row.iter_mut() {
                for (v, tv) in px.iter_mut().zip(t) {
                    *v = silu(*v + tv);
                }
            }
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn oracle_forward(ps: &ParamSet, zt: &Image, zl: &Image, m: &Image, cond: &Matrix, t: usize, time_dim: usize) -> Grid {
        let p = |n: &str| ps.get(n).unwrap();
        let (h, w) = zt.dims();
        let mut x: Grid = vec![vec![vec![]; w]; h];
        for y in 0..h {
            for xx in 0..w {
                x[y][xx] = [zt.pixel(y, xx), zl.pixel(y, xx), m.pixel(y, xx)].concat();
            }
        }
        let half = time_dim / 2;
        let mut emb = vec![0.0; time_dim];
        for i in 0..half {
            let f = 10000f64.powf(-(i as f64) / half as f64);
            emb[i] = (t as f64 * f).sin();
            emb[half + i] = (t as f64 * f).cos();
        }
        let te: Vec<f64> = dense(&emb, p("time.fc1.weight"), Some(p("time.fc1.bias"))).into_iter().map(silu).collect();
        let stage = |n: &str| dense(&te, p(&format!("time.{n}.weight")), Some(p(&format!("time.{n}.bias"))));

        let mut e1 = conv3x3(&x, p("conv_in.weight"), p("conv_in.bias"));
        add_silu(&mut e1, &stage("enc"));
        let c1 = e1[0][0].len();
        let mut pooled = vec![vec![vec![0.0; c1]; w / 2]; h / 2];
        for y in 0..h {
            for xx in 0..w {
                for c in 0..c1 {
                    pooled[y / 2][xx / 2][c] += 0.25 * e1[y][xx][c];
                }
            }
        }
        let mut e2 = conv3x3(&pooled, p("conv_mid.weight"), p("conv_mid.bias"));
        add_silu(&mut e2, &stage("mid"));
        let keys: Vec<Vec<f64>> = (0..cond.rows()).map(|r| dense(cond.row(r), p("attn.k.weight"), None)).collect();
        let vals: Vec<Vec<f64>> = (0..cond.rows()).map(|r| dense(cond.row(r), p("attn.v.weight"), None)).collect();
        for row in e2.iter_mut() {
            for px in row.iter_mut() {
                let q = dense(px, p("attn.q.weight"), None);
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (q.len() as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                let mut o = vec![0.0; q.len()];
                for (e, v) in ex.iter().zip(&vals) {
                    for (oi, vi) in o.iter_mut().zip(v) {
                        *oi += e / z * vi;
                    }
                }
                let upd = dense(&o, p("attn.out.weight"), Some(p("attn.out.bias")));
                for (a, u) in px.iter_mut().zip(upd) {
                    *a += u;
                }
            }
        }
        let mut cat: Grid = vec![vec![vec![]; w]; h];
        for y in 0..h {
            for xx in 0..w {
                cat[y][xx] = [e2[y / 2][xx / 2].as_slice(), e1[y][xx].as_slice()].concat();
            }
        }
        let mut e3 = conv3x3(&cat, p("conv_dec.weight"), p("conv_dec.bias"));
        add_silu(&mut e3, &stage("dec"));
        conv3x3(&e3, p("conv_out.weight"), p("conv_out.bias"))
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let config = tiny_config();
        let mut d = Denoiser::new(config.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // non-zero biases so every term is exercised
        for m in d.params.tensors_mut() {
            if m.rows() == 1 {
                *m = Matrix::standard_normal(1, m.cols(), &mut rng).scale(0.3);
            }
        }
        let zt = rand_image(&mut rng, 4, 2, 2);
        let zl = rand_image(&mut rng, 4, 2, 2);
        let m = Image::from_fn(4, 2, 1, |y, _, _| (y % 2) as f64);
        let cond = Matrix::standard_normal(3, 3, &mut rng);
        let got = d.forward(&zt, &zl, &m, &cond, 321).unwrap();
        let want = oracle_forward(&d.params, &zt, &zl, &m, &cond, 321, config.time_dim);
        for y in 0..4 {
            for x in 0..2 {
                for c in 0..2 {
                    assert!((got.get(y, x, c) - want[y][x][c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_predictor_loss_is_about_one() {
        let mut d = Denoiser::new(DenoiserConfig { latent_size: (16, 12), ..tiny_config() }).unwrap();
        for m in d.params.tensors_mut() {
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        let s = build_schedule(100, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ex = TrainExample {
            z0: rand_image(&mut rng, 16, 12, 2),
            z_lc: rand_image(&mut rng, 16, 12, 2),
            mask: Image::new(16, 12, 1),
            cond: Matrix::standard_normal(2, 3, &mut rng),
        };
        let batch: Vec<&TrainExample> = vec![&ex; 40];
        let (loss, _) = train_step(&d, &batch, &s, &mut rng).unwrap();
        assert!((loss - 1.0).abs() < 0.05, "{loss}");
    }

    #[test]
    fn cross_attention_is_token_permutation_invariant() {
        let d = Denoiser::new(tiny_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xm = Matrix::standard_normal(2, 4, &mut rng);
        let cm = Matrix::standard_normal(5, 3, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let cp = Matrix::from_fn(5, 3, |r, c| cm[(perm[r], c)]);
        let run = |cond: &Matrix| {
            let mut graph = Graph::new();
            let bound = d.params.bind(&mut graph, false);
            let x = graph.constant(xm.clone());
            let c = graph.constant(cond.clone());
            let u = cross_attention(&mut graph, &bound, x, c);
            graph.value(u).clone()
        };
        assert!(run(&cm).max_abs_diff(&run(&cp)) < 1e-14);
    }

    #[test]
    fn loss_is_zero_for_exact_prediction_and_batch_order_invariant() {
        let d = Denoiser::new(tiny_config()).unwrap();
        let s = build_schedule(50, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let examples: Vec<TrainExample> = (0..3)
            .map(|_| TrainExample {
                z0: rand_image(&mut rng, 4, 2, 2),
                z_lc: rand_image(&mut rng, 4, 2, 2),
                mask: Image::filled(4, 2, 1, 0.5),
                cond: Matrix::standard_normal(3, 3, &mut rng),
            })
            .collect();
        let noised: Vec<NoisedExample> = examples
            .iter()
            .enumerate()
            .map(|(i, ex)| NoisedExample {
                example: ex,
                t: 5 + 10 * i,
                eps: rand_image(&mut rng, 4, 2, 2),
            })
            .collect();
        let (a, ga) = loss_and_grads(&d, &noised, &s).unwrap();
        let rev: Vec<NoisedExample> = noised.iter().rev().cloned().collect();
        let (b, gb) = loss_and_grads(&d, &rev, &s).unwrap();
        assert!((a - b).abs() < 1e-12);
        for (x, y) in ga.iter().zip(&gb) {
            assert!(x.max_abs_diff(y) < 1e-12);
        }
        // the exact-ε predictor has zero loss
        let item = &noised[0];
        let z_t = forward_diffuse(&item.example.z0, item.t, &item.eps, &s).unwrap();
        let pred = d.forward(&z_t, &item.example.z_lc, &item.example.mask, &item.example.cond, item.t).unwrap();
        let mut graph = Graph::new();
        let p = graph.constant(grid(&pred));
        let l = graph.mse(p, grid(&pred));
        assert_eq!(graph.scalar(l), 0.0);
    }

    #[test]
    fn ddim_single_step_inversion() {
        let s = build_schedule(1, 0.3, 0.3, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z0 = rand_image(&mut rng, 3, 3, 2);
        let eps = rand_image(&mut rng, 3, 3, 2);
        let zt = forward_diffuse(&z0, 1, &eps, &s).unwrap();
        for method in [SamplerMethod::Ddim, SamplerMethod::Plms] {
            let back = sample_latent(|_, _| Ok(eps.clone()), &s, 1, method, zt.clone()).unwrap();
            assert!(back.max_abs_diff(&z0) < 1e-5);
        }
    }

    #[test]
    fn sampler_is_deterministic_and_preserves_unmasked_pixels() {
        let config = DenoiserConfig {
            latent_size: (4, 2),
            latent_channels: 3,
            condition_dim: 3,
            ..tiny_config()
        };
        let d = Denoiser::new(config).unwrap();
        let s = build_schedule(20, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let person = Image::from_fn(16, 8, 3, |_, _, _| rng.random::<f64>());
        let mask = Image::from_fn(16, 8, 1, |y, _, _| if (4..12).contains(&y) { 1.0 } else { 0.0 });
        let inputs = SampleInputs {
            coarse: person.clone(),
            person: person.clone(),
            mask: mask.clone(),
            cond: Matrix::standard_normal(2, 3, &mut rng),
        };
        for method in [SamplerMethod::Ddim, SamplerMethod::Plms] {
            let (a, side) = sample(&d, &inputs, &s, 10, method, 42).unwrap();
            let (b, _) = sample(&d, &inputs, &s, 10, method, 42).unwrap();
            assert_eq!(a, b);
            assert_eq!(side.schedule_hash, s.hash());
            for y in 0..16 {
                for x in 0..8 {
                    if mask.get(y, x, 0) == 0.0 {
                        assert_eq!(a.pixel(y, x), person.pixel(y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = Denoiser::new(tiny_config()).unwrap();
        let path = dir.path().join("d.safetensors");
        d.save(&path, None).unwrap();
        let back = Denoiser::load(&path).unwrap();
        assert_eq!(back.config, d.config);
        for (a, b) in back.params.tensors().iter().zip(d.params.tensors()) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
    }

    #[test]
    fn method_parsing() {
        assert_eq!("plms".parse::<SamplerMethod>().unwrap(), SamplerMethod::Plms);
        assert!("euler".parse::<SamplerMethod>().is_err());
    }
}
