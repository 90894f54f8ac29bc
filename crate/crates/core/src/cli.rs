//! `vton` command-line pipeline.
//!
//! Every command reads an [`ExperimentConfig`] (defaults, then `--config`,
//! then `--set key=value`, then the dedicated flags) and writes its outputs
//! plus a `manifest.json` under `--out`. The manifest holds the flat config,
//! the seed and a git-style blob hash of every input file, which is enough
//! to re-run the command bit-identically.
//!
//! Exit codes: 0 success, 1 configuration or data error, 2 usage error,
//! 3 numerical abort.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::augment::{normalize, AugmentPolicy};
use crate::config::{parse_flat, ExperimentConfig};
use crate::data::{write_dataset, PairRecord, PairedDatasetIndex, Split};
use crate::diffusion::{
    assemble_coarse, sample, train_denoiser, Denoiser, InpaintSample, SampleInputs, TrainExample,
};
use crate::error::{Error, Result};
use crate::hash::blob_hash;
use crate::image::Image;
use crate::keypoints::grid_to_pixel;
use crate::metrics::{embed_stats, frechet_embed_distance, mean_std, ssim};
use crate::ssl::{image_keypoints, ssl_train, SslSample, TrainOptions};
use crate::tensor::Matrix;
use crate::vit::{AttentionMap, ViT};

#[derive(Parser, Debug)]
#[command(name = "vton", version, about = "Garment try-on toy pipeline: data, SSL encoder, inpainting, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["random", "keypoint"])]
    crop_mode: Option<String>,
    /// Sampling steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_parser = ["ddim", "plms"])]
    method: Option<String>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct DataArg {
    /// Dataset directory (overrides `data.root`).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ImageInputs {
    /// Input images; defaults to the garments of the dataset's test split.
    #[arg(long = "image")]
    images: Vec<PathBuf>,
    /// Use at most this many inputs.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a paired garment/person dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of pairs (overrides `data.n_pairs`).
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Fine-tune the ViT encoder by self-distillation on dataset garments.
    TrainSsl {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Cluster high-attention points into keypoints and draw them.
    ExtractKeypoints {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        inputs: ImageInputs,
        /// Encoder checkpoint; a freshly initialized encoder when omitted.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Overlay class-token attention per head and head-averaged.
    VisualizeAttention {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        inputs: ImageInputs,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Encoder layer; the last when omitted.
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Train the inpainting denoiser against a frozen encoder.
    TrainInpaint {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Sample try-on images for the dataset's test split.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score predictions against ground truth and write `report.json`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Directory of `<id>.png` predictions written by `infer`.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Numerical { .. } => 3,
        _ => 1,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, pairs } => {
            let mut extra = Vec::new();
            if let Some(n) = pairs {
                extra.push(("data.n_pairs".to_string(), n.to_string()));
            }
            let ctx = Context::new("gen-data", &common, extra)?;
            gen_data(&ctx)
        }
        Command::TrainSsl { common, data } => train_ssl(&Context::with_data("train-ssl", &common, &data)?),
        Command::ExtractKeypoints {
            common,
            data,
            inputs,
            encoder,
        } => extract_keypoints(&Context::new("extract-keypoints", &common, data_override(&data))?, &inputs, encoder.as_deref()),
        Command::VisualizeAttention {
            common,
            data,
            inputs,
            encoder,
            layer,
        } => visualize_attention(
            &Context::new("visualize-attention", &common, data_override(&data))?,
            &inputs,
            encoder.as_deref(),
            layer,
        ),
        Command::TrainInpaint { common, data, encoder } => {
            train_inpaint(&Context::with_data("train-inpaint", &common, &data)?, &encoder)
        }
        Command::Infer {
            common,
            data,
            encoder,
            denoiser,
            limit,
        } => infer(&Context::with_data("infer", &common, &data)?, &encoder, &denoiser, limit),
        Command::Eval {
            common,
            data,
            pred,
            encoder,
        } => eval(&Context::with_data("eval", &common, &data)?, &pred, &encoder),
    }
}

fn data_override(data: &DataArg) -> Vec<(String, String)> {
    data.data
        .iter()
        .map(|d| ("data.root".to_string(), d.display().to_string()))
        .collect()
}

/// Resolved configuration plus the input files read so far.
struct Context {
    command: &'static str,
    config: ExperimentConfig,
    out: PathBuf,
    inputs: std::cell::RefCell<Vec<PathBuf>>,
}

impl Context {
    fn new(command: &'static str, common: &Common, extra: Vec<(String, String)>) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut inputs = Vec::new();
        if let Some(path) = &common.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            pairs.extend(parse_flat(&text)?);
            inputs.push(path.clone());
        }
        for s in &common.set {
            let Some((k, v)) = s.split_once('=') else {
                return Err(Error::config(s.clone(), "expected KEY=VALUE"));
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        pairs.extend(extra);
        let flags = [
            ("seed", common.seed.map(|v| v.to_string())),
            ("out_dir", common.out.as_ref().map(|p| p.display().to_string())),
            ("crop_mode", common.crop_mode.clone()),
            ("diffusion.sample_steps", common.steps.map(|v| v.to_string())),
            ("diffusion.method", common.method.clone()),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        }
        let config = ExperimentConfig::default().with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        let out = config.out_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Self {
            command,
            config,
            out,
            inputs: std::cell::RefCell::new(inputs),
        })
    }

    fn with_data(command: &'static str, common: &Common, data: &DataArg) -> Result<Self> {
        let ctx = Self::new(command, common, data_override(data))?;
        let root = &ctx.config.data.root;
        if !root.join("index.json").is_file() {
            return Err(Error::config("data.root", format!("{} holds no index.json", root.display())));
        }
        Ok(ctx)
    }

    fn read(&self, path: &Path) {
        self.inputs.borrow_mut().push(path.to_path_buf());
    }

    fn dataset(&self) -> Result<PairedDatasetIndex> {
        let root = &self.config.data.root;
        self.read(&root.join("index.json"));
        let index = PairedDatasetIndex::load(root)?;
        if index.image_size != self.config.vit.image_size {
            return Err(Error::config(
                "vit.image_size",
                format!(
                    "dataset images are {}x{}, config expects {}x{}",
                    index.image_size.0, index.image_size.1, self.config.vit.image_size.0, self.config.vit.image_size.1
                ),
            ));
        }
        Ok(index)
    }

    fn load_pair(&self, index: &PairedDatasetIndex, rec: &PairRecord) -> Result<crate::data::LoadedPair> {
        for p in [Some(&rec.person), Some(&rec.garment), Some(&rec.mask), rec.flow.as_ref(), rec.annotation.as_ref()]
            .into_iter()
            .flatten()
        {
            self.read(&index.root.join(p));
        }
        index.load_pair(rec)
    }

    fn load_encoder(&self, path: &Path) -> Result<ViT> {
        self.read(path);
        let vit = ViT::load(path)?;
        if vit.config.image_size != self.config.vit.image_size {
            return Err(Error::config("vit.image_size", "encoder checkpoint was trained at a different size"));
        }
        Ok(vit)
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(&path, e))
    }

    fn write_manifest(&self) -> Result<()> {
        let mut inputs: Vec<PathBuf> = self.inputs.borrow().clone();
        inputs.sort();
        inputs.dedup();
        let hashes = inputs
            .iter()
            .map(|p| {
                let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                Ok(json!({ "path": p.display().to_string(), "blob": blob_hash(&bytes) }))
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.config.seed,
            "config": self.config.to_flat_text(),
            "inputs": hashes,
        });
        self.write_json("manifest.json", &manifest)
    }
}

fn gen_data(ctx: &Context) -> Result<()> {
    let c = &ctx.config;
    let index = write_dataset(&ctx.out, c.data.n_pairs, c.vit.image_size, c.seed, c.data.test_fraction)?;
    let n_test = index.split(Split::Test).count();
    println!(
        "wrote {} pairs ({} train, {} test) to {}",
        index.records.len(),
        index.records.len() - n_test,
        n_test,
        ctx.out.display()
    );
    ctx.write_manifest()
}

fn train_ssl(ctx: &Context) -> Result<()> {
    let c = &ctx.config;
    let index = ctx.dataset()?;
    let mut images = Vec::new();
    for rec in index.split(Split::Train) {
        images.push(ctx.load_pair(&index, rec)?.garment);
    }
    let mut diagnostics = Vec::new();
    for rec in index.split(Split::Test) {
        let pair = ctx.load_pair(&index, rec)?;
        if let Some(ann) = pair.annotation {
            diagnostics.push(SslSample {
                image: pair.garment,
                regions: ann.boxes(),
            });
        }
    }
    let options = TrainOptions {
        crop_mode: Some(c.crop_mode),
        log_path: Some(ctx.out.join("log.jsonl")),
        checkpoint_dir: Some(ctx.out.join("checkpoints")),
        diagnostics,
    };
    let log_path = ctx.out.join("log.jsonl");
    if log_path.exists() {
        fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
    }
    println!("training encoder on {} garments, crop mode {}", images.len(), c.crop_mode);
    let init = ViT::new(c.vit.clone())?;
    let run = ssl_train(&init, &images, &c.ssl, &c.augment, &options)?;
    run.teacher.vit.save(&ctx.out.join("teacher.safetensors"), Some("teacher"))?;
    run.student.save(&ctx.out.join("student.safetensors"), Some("student"))?;
    for (e, loss) in run.log.epoch_losses().iter().enumerate() {
        println!("epoch {e}: mean loss {loss:.4}");
    }
    let final_loss = run.log.final_loss().unwrap_or(f64::NAN);
    if !final_loss.is_finite() {
        return Err(Error::Numerical {
            context: "final ssl loss".into(),
            index: 0,
        });
    }
    println!("final loss {final_loss:.4}");
    ctx.write_manifest()
}

fn gather_images(ctx: &Context, inputs: &ImageInputs) -> Result<Vec<(String, Image)>> {
    let mut out = Vec::new();
    if inputs.images.is_empty() {
        let index = ctx.dataset()?;
        for rec in index.split(Split::Test) {
            let path = index.root.join(&rec.garment);
            ctx.read(&path);
            out.push((rec.id.clone(), Image::load_rgb(&path)?));
        }
    } else {
        for path in &inputs.images {
            ctx.read(path);
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
            out.push((name, Image::load_rgb(path)?));
        }
    }
    if let Some(limit) = inputs.limit {
        out.truncate(limit);
    }
    for (name, img) in &out {
        if img.dims() != ctx.config.vit.image_size {
            return Err(Error::config(
                "vit.image_size",
                format!("input `{name}` is {}x{}", img.height(), img.width()),
            ));
        }
    }
    Ok(out)
}

fn encoder_or_init(ctx: &Context, path: Option<&Path>) -> Result<ViT> {
    match path {
        Some(p) => ctx.load_encoder(p),
        None => ViT::new(ctx.config.vit.clone()),
    }
}

/// Draws a red plus of arm length 2 centred on `(x, y)` pixels.
fn draw_marker(img: &mut Image, x: f64, y: f64) {
    let (cx, cy) = (x.floor() as isize, y.floor() as isize);
    for d in -2..=2isize {
        for (px, py) in [(cx + d, cy), (cx, cy + d)] {
            if px >= 0 && py >= 0 && (py as usize) < img.height() && (px as usize) < img.width() {
                img.pixel_mut(py as usize, px as usize).copy_from_slice(&[1.0, 0.0, 0.0]);
            }
        }
    }
}

fn extract_keypoints(ctx: &Context, inputs: &ImageInputs, encoder: Option<&Path>) -> Result<()> {
    let c = &ctx.config;
    let vit = encoder_or_init(ctx, encoder)?;
    let images = gather_images(ctx, inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    for (name, img) in &images {
        let keys = image_keypoints(&vit, img, &c.augment, &c.ssl, &mut rng)?;
        let centers: Vec<(f64, f64)> = keys
            .centroids
            .iter()
            .map(|&rc| grid_to_pixel(rc, c.vit.patch_size))
            .collect();
        let mut overlay = img.clone();
        for &(x, y) in &centers {
            draw_marker(&mut overlay, x, y);
        }
        overlay.save_png(&ctx.out.join(format!("{name}_keypoints.png")))?;
        ctx.write_json(
            &format!("{name}_keypoints.json"),
            &json!({
                "image": name,
                "grid": c.vit.grid(),
                "patch_size": c.vit.patch_size,
                "mass_fraction": c.ssl.mass_fraction,
                "layer": c.ssl.attention_layer.unwrap_or(c.vit.depth - 1),
                "centroids_grid": keys.centroids,
                "centers_px": centers.iter().map(|&(x, y)| json!({"x": x, "y": y})).collect::<Vec<_>>(),
                "reduced": keys.reduced,
                "sse": keys.sse,
            }),
        )?;
    }
    println!("keypoints for {} images in {}", images.len(), ctx.out.display());
    ctx.write_manifest()
}

/// Black-red-yellow-white ramp.
fn heat(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)]
}

/// Blends a min-max normalized patch-grid map over `img`.
pub fn attention_overlay(img: &Image, row: &[f64], grid: (usize, usize), patch: usize) -> Image {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
    let span = (max - min).max(1e-12);
    Image::from_fn(img.height(), img.width(), 3, |y, x, ch| {
        let (r, c) = ((y / patch).min(grid.0 - 1), (x / patch).min(grid.1 - 1));
        let h = heat((row[r * grid.1 + c] - min) / span);
        0.4 * img.get(y, x, ch) + 0.6 * h[ch]
    })
}

fn visualize_attention(ctx: &Context, inputs: &ImageInputs, encoder: Option<&Path>, layer: Option<usize>) -> Result<()> {
    let c = &ctx.config;
    let vit = encoder_or_init(ctx, encoder)?;
    let layer = layer.or(c.ssl.attention_layer).unwrap_or(c.vit.depth - 1);
    let images = gather_images(ctx, inputs)?;
    for (name, img) in &images {
        let map: AttentionMap = vit.class_attention(&normalize(img, &c.augment.mean, &c.augment.std), layer)?;
        for h in 0..map.num_heads() {
            attention_overlay(img, map.head(h), map.grid, c.vit.patch_size)
                .save_png(&ctx.out.join(format!("{name}_head{h}.png")))?;
        }
        attention_overlay(img, &map.mean(), map.grid, c.vit.patch_size).save_png(&ctx.out.join(format!("{name}_mean.png")))?;
    }
    println!(
        "layer {layer} attention for {} images ({} heads) in {}",
        images.len(),
        c.vit.num_heads,
        ctx.out.display()
    );
    ctx.write_manifest()
}

fn condition(vit: &ViT, policy: &AugmentPolicy, garment: &Image) -> Result<Matrix> {
    Ok(vit.forward(&normalize(garment, &policy.mean, &policy.std))?.condition.tokens)
}

fn inpaint_sample(pair: &crate::data::LoadedPair) -> Result<InpaintSample> {
    let flow = pair
        .flow
        .clone()
        .unwrap_or_else(|| Image::new(pair.person.height(), pair.person.width(), 2));
    assemble_coarse(&pair.person, &pair.garment, &pair.mask, &flow)
}

fn train_inpaint(ctx: &Context, encoder: &Path) -> Result<()> {
    let c = &ctx.config;
    let vit = ctx.load_encoder(encoder)?;
    let index = ctx.dataset()?;
    let mut examples = Vec::new();
    for rec in index.split(Split::Train) {
        let pair = ctx.load_pair(&index, rec)?;
        let s = inpaint_sample(&pair)?;
        examples.push(TrainExample::new(&s, condition(&vit, &c.augment, &pair.garment)?)?);
    }
    let schedule = c.schedule()?;
    let mut denoiser = Denoiser::new(c.denoiser.clone())?;
    let log_path = ctx.out.join("log.jsonl");
    let mut lines = String::new();
    println!("training denoiser on {} pairs", examples.len());
    let log = train_denoiser(&mut denoiser, &examples, &schedule, &c.inpaint, |e| {
        lines.push_str(&serde_json::to_string(e)?);
        lines.push('\n');
        Ok(())
    })?;
    fs::write(&log_path, lines).map_err(|e| Error::io(&log_path, e))?;
    let per_epoch = examples.len().div_ceil(c.inpaint.batch_size);
    for (e, chunk) in log.chunks(per_epoch.max(1)).enumerate() {
        let mean = chunk.iter().map(|l| l.loss).sum::<f64>() / chunk.len() as f64;
        println!("epoch {e}: mean loss {mean:.4}");
    }
    if let Some(last) = log.last() {
        println!("final loss {:.4}", last.loss);
    }
    denoiser.save(&ctx.out.join("denoiser.safetensors"), None)?;
    ctx.write_manifest()
}

fn infer(ctx: &Context, encoder: &Path, denoiser_path: &Path, limit: Option<usize>) -> Result<()> {
    let c = &ctx.config;
    let vit = ctx.load_encoder(encoder)?;
    ctx.read(denoiser_path);
    let denoiser = Denoiser::load(denoiser_path)?;
    if denoiser.config.condition_dim != vit.config.condition_dim {
        return Err(Error::config("vit.condition_dim", "encoder and denoiser disagree on condition width"));
    }
    let schedule = c.schedule()?;
    let index = ctx.dataset()?;
    let limit = limit.or((c.data.infer_limit > 0).then_some(c.data.infer_limit));
    let records: Vec<&PairRecord> = index.split(Split::Test).take(limit.unwrap_or(usize::MAX)).collect();
    for (i, rec) in records.iter().enumerate() {
        let pair = ctx.load_pair(&index, rec)?;
        let s = inpaint_sample(&pair)?;
        let inputs = SampleInputs {
            person: s.person.clone(),
            mask: s.mask.clone(),
            coarse: s.coarse.clone(),
            cond: condition(&vit, &c.augment, &pair.garment)?,
        };
        let seed = c.seed.wrapping_add(i as u64);
        let (image, sidecar) = sample(&denoiser, &inputs, &schedule, c.diffusion.sample_steps, c.diffusion.method, seed)?;
        image.save_png(&ctx.out.join(format!("{}.png", rec.id)))?;
        s.coarse.save_png(&ctx.out.join(format!("{}_coarse.png", rec.id)))?;
        ctx.write_json(&format!("{}.json", rec.id), &sidecar)?;
    }
    println!(
        "sampled {} images ({} {} steps) into {}",
        records.len(),
        c.diffusion.method,
        c.diffusion.sample_steps,
        ctx.out.display()
    );
    ctx.write_manifest()
}

#[derive(Serialize)]
struct PairScore {
    id: String,
    ssim: f64,
    coarse_ssim: f64,
}

#[derive(Serialize)]
struct Summary {
    mean: f64,
    std: f64,
}

fn eval(ctx: &Context, pred: &Path, encoder: &Path) -> Result<()> {
    let c = &ctx.config;
    let vit = ctx.load_encoder(encoder)?;
    let encoder_hash = blob_hash(&fs::read(encoder).map_err(|e| Error::io(encoder, e))?);
    let index = ctx.dataset()?;
    let mut scores = Vec::new();
    let (mut generated, mut reference) = (Vec::new(), Vec::new());
    for rec in index.split(Split::Test) {
        let path = pred.join(format!("{}.png", rec.id));
        if !path.is_file() {
            continue;
        }
        ctx.read(&path);
        let out = Image::load_rgb(&path)?;
        let pair = ctx.load_pair(&index, rec)?;
        let s = inpaint_sample(&pair)?;
        scores.push(PairScore {
            id: rec.id.clone(),
            ssim: ssim(&out, &pair.person, &c.metrics)?,
            coarse_ssim: ssim(&s.coarse, &pair.person, &c.metrics)?,
        });
        generated.push(normalize(&out, &c.augment.mean, &c.augment.std));
        reference.push(normalize(&pair.person, &c.augment.mean, &c.augment.std));
    }
    if scores.is_empty() {
        return Err(Error::config("data.root", format!("no predictions for the test split in {}", pred.display())));
    }
    let (gen_stats, ref_stats) = (embed_stats(&vit, &generated)?, embed_stats(&vit, &reference)?);
    let frechet = frechet_embed_distance(&gen_stats.stats, &ref_stats.stats)?;
    let (sm, ss) = mean_std(&scores.iter().map(|s| s.ssim).collect::<Vec<_>>());
    let (cm, cs) = mean_std(&scores.iter().map(|s| s.coarse_ssim).collect::<Vec<_>>());
    let report = json!({
        "pairs": scores,
        "ssim": Summary { mean: sm, std: ss },
        "coarse_ssim": Summary { mean: cm, std: cs },
        "frechet_embed_distance": frechet,
        "embedding_rank_deficient": gen_stats.rank_deficient || ref_stats.rank_deficient,
        "samples": { "generated": generated.len(), "reference": reference.len() },
        "encoder_hash": encoder_hash,
    });
    ctx.write_json("report.json", &report)?;
    println!("SSIM {sm:.4} ± {ss:.4} (coarse {cm:.4} ± {cs:.4}), Fréchet {frechet:.4} over {} pairs", scores.len());
    ctx.write_manifest()
}
