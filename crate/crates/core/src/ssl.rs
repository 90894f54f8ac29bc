//! Teacher/student self-distillation.
//!
//! The student sees `M` global and `N` local views of every image; the
//! teacher (an exponential moving average of the student) sees only the
//! global views. Teacher outputs are centred and sharpened into targets, and
//! the student is trained on the cross-entropy between every teacher target
//! and every student view except the one built from the same global crop.
//!
//! Local crops come either from the random resized-crop sampler
//! ([`CropMode::Random`]) or from attention keypoints of the current teacher
//! ([`CropMode::Keypoint`]), recomputed at the start of every epoch.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_view, normalize, sample_crop_box, AugmentPolicy, CropBox, ASPECT_RANGE, GLOBAL_SCALE, LOCAL_SCALE};
use crate::autograd::{Graph, ParamSet, Var};
use crate::data::{patch_coverage, PixelBox};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::keypoints::{cluster_keypoints, high_attention_points, keypoint_crop_boxes, top_mass_in_regions, KeypointCropShape, KeypointSet};
use crate::optim::{cosine_schedule, AdamW};
use crate::tensor::{softmax, Matrix};
use crate::vit::{forward_graph, ViT, ViTConfig};

const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub global_crops: usize,
    pub local_crops: usize,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub center_momentum: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs of random local crops before keypoint crops take over.
    pub warmup_epochs: usize,
    pub mass_fraction: f64,
    pub kmeans_restarts: usize,
    /// Layer whose class attention drives keypoints; `None` is the last.
    pub attention_layer: Option<usize>,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            global_crops: 2,
            local_crops: 10,
            student_temp: 0.1,
            teacher_temp: 0.04,
            center_momentum: 0.9,
            ema_start: 0.996,
            ema_end: 1.0,
            learning_rate: 2e-5,
            final_learning_rate: 1e-6,
            weight_decay: 0.04,
            batch_size: 8,
            epochs: 30,
            warmup_epochs: 1,
            mass_fraction: crate::keypoints::DEFAULT_MASS_FRACTION,
            kmeans_restarts: 3,
            attention_layer: None,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.global_crops == 0 {
            return Err(Error::config("ssl.global_crops", "at least one global crop is required"));
        }
        for (key, v) in [("ssl.student_temp", self.student_temp), ("ssl.teacher_temp", self.teacher_temp)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("temperature must be positive, got {v}")));
            }
        }
        for (key, v) in [
            ("ssl.center_momentum", self.center_momentum),
            ("ssl.ema_start", self.ema_start),
            ("ssl.ema_end", self.ema_end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, format!("{v} is outside [0, 1]")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.final_learning_rate >= 0.0) {
            return Err(Error::config("ssl.learning_rate", "learning rates must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("ssl.batch_size", "must be positive"));
        }
        if !(self.mass_fraction > 0.0 && self.mass_fraction < 1.0) {
            return Err(Error::config("ssl.mass_fraction", format!("{} is outside (0, 1)", self.mass_fraction)));
        }
        Ok(())
    }

    /// Number of cross-entropy terms per image: `M (M + N - 1)`.
    pub fn terms(&self) -> usize {
        self.global_crops * (self.global_crops + self.local_crops - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    Random,
    Keypoint,
}

impl FromStr for CropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(CropMode::Random),
            "keypoint" => Ok(CropMode::Keypoint),
            other => Err(Error::config("ssl.crop_mode", format!("unknown crop mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for CropMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CropMode::Random => "random",
            CropMode::Keypoint => "keypoint",
        })
    }
}

/// The EMA teacher and its running logit centre.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub vit: ViT,
    pub center: Vec<f64>,
}

impl TeacherState {
    pub fn new(vit: ViT) -> Self {
        let center = vec![0.0; vit.config.proj_dim];
        Self { vit, center }
    }

    /// Target distribution for a (normalized) global view.
    pub fn distribution(&self, view: &Image, temp: f64) -> Result<Vec<f64>> {
        let logits = self.vit.forward(view)?.proj_logits;
        Ok(teacher_distribution(&logits, &self.center, temp))
    }
}

/// `softmax((logits - center) / temp)`.
pub fn teacher_distribution(logits: &[f64], center: &[f64], temp: f64) -> Vec<f64> {
    let shifted: Vec<f64> = logits.iter().zip(center).map(|(l, c)| (l - c) / temp).collect();
    softmax(&shifted)
}

/// `-Σ a_i log b_i`, with `b` floored at `1e-12`.
pub fn cross_entropy(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cross-entropy of lengths {} and {}", a.len(), b.len())));
    }
    Ok(-a.iter().zip(b).map(|(&p, &q)| p * q.max(PROB_FLOOR).ln()).sum::<f64>())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsLoss {
    pub value: f64,
    pub terms: usize,
}

/// Sum of `H(teacher_i, student_j)` over global views `i` and all student
/// views `j ≠ i`. Global views occupy the first `M` positions of both lists.
pub fn ss_loss(teacher: &[Vec<f64>], student: &[Vec<f64>], local_crops: usize) -> Result<SsLoss> {
    let m = teacher.len();
    if student.len() != m + local_crops {
        return Err(Error::Shape(format!(
            "{} student views for {m} global and {local_crops} local crops",
            student.len()
        )));
    }
    let mut value = 0.0;
    let mut terms = 0;
    for (i, t) in teacher.iter().enumerate() {
        for (j, s) in student.iter().enumerate() {
            if i != j {
                value += cross_entropy(t, s)?;
                terms += 1;
            }
        }
    }
    Ok(SsLoss { value, terms })
}

/// `λ·teacher + (1-λ)·student`, array by array.
pub fn ema_update(teacher: &ParamSet, student: &ParamSet, lambda: f64) -> Result<ParamSet> {
    let mut out = teacher.clone();
    ema_update_in_place(&mut out, student, lambda)?;
    Ok(out)
}

fn ema_update_in_place(teacher: &mut ParamSet, student: &ParamSet, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("ema coefficient {lambda} outside [0, 1]")));
    }
    if teacher.names() != student.names() {
        return Err(Error::Shape("teacher and student parameter names differ".into()));
    }
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        if t.shape() != s.shape() {
            return Err(Error::Shape(format!("ema of shapes {:?} and {:?}", t.shape(), s.shape())));
        }
        if lambda == 1.0 {
            continue;
        }
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = lambda * *a + (1.0 - lambda) * b;
        }
    }
    Ok(())
}

/// Records the student side of the distillation loss on `graph`: the sum of
/// all `M (M + N - 1)` cross-entropy terms against fixed teacher targets.
/// Returns the loss node and each view's projection logits.
pub fn student_loss_graph(
    graph: &mut Graph,
    bound: &crate::autograd::Bound,
    config: &ViTConfig,
    views: &[Image],
    targets: &[Vec<f64>],
    student_temp: f64,
) -> Result<(Var, Vec<Var>)> {
    let m = targets.len();
    if views.len() < m {
        return Err(Error::Shape(format!("{} views for {m} teacher targets", views.len())));
    }
    let logits: Vec<Var> = views
        .iter()
        .map(|v| forward_graph(graph, bound, config, v).map(|t| t.proj_logits))
        .collect::<Result<_>>()?;
    let stacked = graph.concat_rows(&logits);
    let scaled = graph.scale(stacked, 1.0 / student_temp);
    let log_probs = graph.log_softmax_rows(scaled);
    let k = config.proj_dim;
    let mut weights = Matrix::zeros(views.len(), k);
    for j in 0..views.len() {
        let row = weights.row_mut(j);
        for (i, t) in targets.iter().enumerate() {
            if i != j {
                for (w, p) in row.iter_mut().zip(t) {
                    *w -= p;
                }
            }
        }
    }
    Ok((graph.weighted_sum(log_probs, weights), logits))
}

/// Distillation loss for one image's views and its gradient with respect to
/// every student parameter (in parameter order).
pub fn distill_loss_and_grads(
    student: &ViT,
    views: &[Image],
    targets: &[Vec<f64>],
    student_temp: f64,
) -> Result<(f64, Vec<Matrix>)> {
    let mut graph = Graph::new();
    let bound = student.params.bind(&mut graph, true);
    let (loss, _) = student_loss_graph(&mut graph, &bound, &student.config, views, targets, student_temp)?;
    let grads = graph.backward(loss);
    Ok((graph.scalar(loss), bound.gradients(&grads)))
}

/// One image with the part boxes used by attention diagnostics.
#[derive(Clone, Debug)]
pub struct SslSample {
    pub image: Image,
    pub regions: Vec<PixelBox>,
}

/// Mean over samples and heads of the fraction of each head's top
/// `mass_fraction` class-attention mass that falls inside the sample's
/// regions (weighted by per-patch coverage).
pub fn attention_concentration(
    vit: &ViT,
    samples: &[SslSample],
    policy: &AugmentPolicy,
    mass_fraction: f64,
    layer: Option<usize>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples for attention diagnostics".into()));
    }
    let layer = layer.unwrap_or(vit.config.depth - 1);
    let mut total = 0.0;
    for s in samples {
        let view = normalize(&s.image, &policy.mean, &policy.std);
        let map = vit.class_attention(&view, layer)?;
        let cover = patch_coverage(&s.regions, s.image.dims(), vit.config.patch_size);
        let per_head: f64 = (0..map.num_heads())
            .map(|h| top_mass_in_regions(map.head(h), &cover, mass_fraction))
            .sum();
        total += per_head / map.num_heads() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Keypoints of one image under `vit`'s class attention.
pub fn image_keypoints(
    vit: &ViT,
    image: &Image,
    policy: &AugmentPolicy,
    distill: &DistillConfig,
    rng: &mut ChaCha8Rng,
) -> Result<KeypointSet> {
    let view = normalize(image, &policy.mean, &policy.std);
    let layer = distill.attention_layer.unwrap_or(vit.config.depth - 1);
    let map = vit.class_attention(&view, layer)?;
    let points = high_attention_points(&map, distill.mass_fraction)?;
    cluster_keypoints(&points, distill.local_crops.max(1), distill.kmeans_restarts, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LogEntry {
    Step {
        step: usize,
        epoch: usize,
        /// Batch-mean loss per cross-entropy term.
        loss: f64,
        /// Batch-mean summed loss.
        ss_loss: f64,
        terms: usize,
        lambda: f64,
        lr: f64,
    },
    Epoch {
        epoch: usize,
        mean_loss: f64,
        crop_mode: CropMode,
        keypoint_crops: bool,
        fallback_crops: usize,
        attention_in_regions: Option<f64>,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                LogEntry::Epoch { mean_loss, .. } => Some(*mean_loss),
                _ => None,
            })
            .collect()
    }

    pub fn attention_trace(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                LogEntry::Epoch {
                    attention_in_regions, ..
                } => *attention_in_regions,
                _ => None,
            })
            .collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.entries.iter().rev().find_map(|e| match e {
            LogEntry::Step { loss, .. } => Some(*loss),
            _ => None,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub crop_mode: Option<CropMode>,
    /// Append-only JSON-lines log.
    pub log_path: Option<PathBuf>,
    /// Per-epoch `teacher` / `student` checkpoints are written here.
    pub checkpoint_dir: Option<PathBuf>,
    /// Held-out samples for per-epoch attention diagnostics.
    pub diagnostics: Vec<SslSample>,
}

pub struct SslRun {
    pub teacher: TeacherState,
    pub student: ViT,
    pub log: TrainingLog,
}

struct LogWriter(Option<File>);

impl LogWriter {
    fn open(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self(None)),
            Some(p) => {
                if let Some(dir) = p.parent() {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?;
                Ok(Self(Some(f)))
            }
        }
    }

    fn write(&mut self, entry: &LogEntry) -> Result<()> {
        if let Some(f) = &mut self.0 {
            let line = serde_json::to_string(entry)?;
            writeln!(f, "{line}").map_err(|e| Error::Io {
                path: PathBuf::from("<ssl log>"),
                source: e,
            })?;
        }
        Ok(())
    }
}

/// Builds the `M` global and `N` local views of one image.
fn build_views(
    image: &Image,
    config: &ViTConfig,
    distill: &DistillConfig,
    policy: &AugmentPolicy,
    keypoints: Option<&KeypointSet>,
    rng: &mut ChaCha8Rng,
    fallbacks: &mut usize,
) -> Result<Vec<Image>> {
    let size = image.dims();
    let mut views = Vec::with_capacity(distill.global_crops + distill.local_crops);
    for g in 0..distill.global_crops {
        let s = sample_crop_box(rng, GLOBAL_SCALE, ASPECT_RANGE, size)?;
        *fallbacks += s.fallback as usize;
        let p = if g == 0 { policy.with_blur_prob(1.0) } else { policy.clone() };
        views.push(augment_view(image, &s.crop, config.image_size, &p, rng));
    }
    let locals: Vec<CropBox> = match keypoints {
        Some(keys) => keypoint_crop_boxes(keys, config.patch_size, KeypointCropShape::default(), size, rng)
            .into_iter()
            .take(distill.local_crops)
            .collect(),
        None => (0..distill.local_crops)
            .map(|_| {
                sample_crop_box(rng, LOCAL_SCALE, ASPECT_RANGE, size).map(|s| {
                    *fallbacks += s.fallback as usize;
                    s.crop
                })
            })
            .collect::<Result<_>>()?,
    };
    for crop in &locals {
        views.push(augment_view(image, crop, config.local_size, policy, rng));
    }
    Ok(views)
}

fn numerical_abort(step: usize) -> Error {
    Error::Numerical {
        context: "ssl training step".into(),
        index: step,
    }
}

/// Fine-tunes `init` by self-distillation on `dataset`. Teacher and student
/// both start from `init`.
pub fn ssl_train(
    init: &ViT,
    dataset: &[Image],
    distill: &DistillConfig,
    policy: &AugmentPolicy,
    options: &TrainOptions,
) -> Result<SslRun> {
    distill.validate()?;
    policy.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty SSL dataset".into()));
    }
    let mode = options.crop_mode.unwrap_or(CropMode::Random);
    let config = init.config.clone();
    let mut student = init.clone();
    let mut teacher = TeacherState::new(init.clone());
    let mut opt = AdamW::new(&student.params, distill.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(distill.seed);
    let mut log = TrainingLog::default();
    let mut writer = LogWriter::open(options.log_path.as_deref())?;
    if let Some(dir) = &options.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let steps_per_epoch = dataset.len().div_ceil(distill.batch_size);
    let total_steps = steps_per_epoch * distill.epochs;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0;
    for epoch in 0..distill.epochs {
        let use_keypoints = mode == CropMode::Keypoint && epoch >= distill.warmup_epochs;
        let keypoints: Option<Vec<KeypointSet>> = if use_keypoints {
            Some(
                dataset
                    .iter()
                    .map(|img| image_keypoints(&teacher.vit, img, policy, distill, &mut rng))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        order.shuffle(&mut rng);
        let mut fallbacks = 0;
        let mut epoch_loss = 0.0;
        for batch in order.chunks(distill.batch_size) {
            let lr = cosine_schedule(distill.learning_rate, distill.final_learning_rate, step, total_steps);
            let lambda = cosine_schedule(distill.ema_start, distill.ema_end, step, total_steps);

            let mut graph = Graph::new();
            let bound = student.params.bind(&mut graph, true);
            let mut losses = Vec::with_capacity(batch.len());
            let mut teacher_logit_sum = vec![0.0; config.proj_dim];
            let mut summed = 0.0;
            for &idx in batch {
                let keys = keypoints.as_ref().map(|k| &k[idx]);
                let views = build_views(&dataset[idx], &config, distill, policy, keys, &mut rng, &mut fallbacks)?;
                let mut targets = Vec::with_capacity(distill.global_crops);
                for v in &views[..distill.global_crops] {
                    let logits = teacher.vit.forward(v).map_err(|_| numerical_abort(step))?.proj_logits;
                    for (s, l) in teacher_logit_sum.iter_mut().zip(&logits) {
                        *s += l;
                    }
                    targets.push(teacher_distribution(&logits, &teacher.center, distill.teacher_temp));
                }
                let (loss, _) = student_loss_graph(&mut graph, &bound, &config, &views, &targets, distill.student_temp)
                    .map_err(|e| match e {
                        Error::Numerical { .. } => numerical_abort(step),
                        other => other,
                    })?;
                summed += graph.scalar(loss);
                losses.push(loss);
            }
            // mean over images and terms
            let total = if losses.len() == 1 {
                losses[0]
            } else {
                let stacked = graph.concat_rows(&losses);
                graph.sum(stacked)
            };
            let scale = 1.0 / (batch.len() * distill.terms().max(1)) as f64;
            let objective = graph.scale(total, scale);
            let loss_value = graph.scalar(objective);
            if !loss_value.is_finite() {
                return Err(numerical_abort(step));
            }
            let grads = graph.backward(objective);
            let grads = bound.gradients(&grads);
            drop(graph);
            opt.step(&mut student.params, &grads, lr);
            if !student.params.all_finite() {
                return Err(numerical_abort(step));
            }
            ema_update_in_place(&mut teacher.vit.params, &student.params, lambda)?;
            let n_globals = (batch.len() * distill.global_crops) as f64;
            for (c, s) in teacher.center.iter_mut().zip(&teacher_logit_sum) {
                *c = distill.center_momentum * *c + (1.0 - distill.center_momentum) * s / n_globals;
            }

            let entry = LogEntry::Step {
                step,
                epoch,
                loss: loss_value,
                ss_loss: summed / batch.len() as f64,
                terms: distill.terms(),
                lambda,
                lr,
            };
            writer.write(&entry)?;
            log.entries.push(entry);
            epoch_loss += loss_value * batch.len() as f64;
            step += 1;
        }

        let attention_in_regions = if options.diagnostics.is_empty() {
            None
        } else {
            Some(attention_concentration(
                &teacher.vit,
                &options.diagnostics,
                policy,
                distill.mass_fraction,
                distill.attention_layer,
            )?)
        };
        let entry = LogEntry::Epoch {
            epoch,
            mean_loss: epoch_loss / dataset.len() as f64,
            crop_mode: mode,
            keypoint_crops: use_keypoints,
            fallback_crops: fallbacks,
            attention_in_regions,
        };
        writer.write(&entry)?;
        log.entries.push(entry);
        if let Some(dir) = &options.checkpoint_dir {
            teacher.vit.save(&dir.join(format!("epoch_{epoch:03}_teacher.safetensors")), Some("teacher"))?;
            student.save(&dir.join(format!("epoch_{epoch:03}_student.safetensors")), Some("student"))?;
        }
    }
    Ok(SslRun { teacher, student, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_dist(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        softmax(&raw)
    }

    #[test]
    fn cross_entropy_examples() {
        let one_hot = vec![0.0, 1.0, 0.0, 0.0];
        assert_eq!(cross_entropy(&one_hot, &one_hot).unwrap(), 0.0);
        let uniform = vec![0.25; 4];
        assert!((cross_entropy(&one_hot, &uniform).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&one_hot, &uniform[..3]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_dist(&mut rng, 7);
        let b = random_dist(&mut rng, 7);
        let mut oracle = 0.0;
        for i in 0..7 {
            oracle -= a[i] * b[i].ln();
        }
        assert!((cross_entropy(&a, &b).unwrap() - oracle).abs() < 1e-14);
    }

    #[test]
    fn ss_loss_examples() {
        let one_hot = vec![1.0, 0.0];
        let r = ss_loss(&[one_hot.clone()], &[one_hot.clone()], 0).unwrap();
        assert_eq!((r.value, r.terms), (0.0, 0));
        let r = ss_loss(&vec![one_hot.clone(); 2], &vec![one_hot.clone(); 12], 10).unwrap();
        assert_eq!((r.value, r.terms), (0.0, 22));
        assert!(ss_loss(&vec![one_hot.clone(); 2], &vec![one_hot; 11], 10).is_err());
    }

    #[test]
    fn teacher_distribution_centering() {
        let z = teacher_distribution(&[0.0; 5], &[0.0; 5], 0.04);
        assert!(z.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        let logits = [0.3, -1.0, 2.0];
        let c = teacher_distribution(&logits, &logits, 0.04);
        assert!(c.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        let center = [0.1, 0.2, -0.3];
        let got = teacher_distribution(&logits, &center, 0.5);
        let e: Vec<f64> = (0..3).map(|i| ((logits[i] - center[i]) / 0.5).exp()).collect();
        let s: f64 = e.iter().sum();
        for i in 0..3 {
            assert!((got[i] - e[i] / s).abs() < 1e-15);
        }
    }

    #[test]
    fn ema_examples() {
        let mut t = ParamSet::new();
        t.insert("w", Matrix::from_vec(1, 1, vec![1.0]));
        let mut s = ParamSet::new();
        s.insert("w", Matrix::from_vec(1, 1, vec![0.0]));
        assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t);
        assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s);
        assert_eq!(ema_update(&t, &s, 0.5).unwrap().get("w").unwrap()[(0, 0)], 0.5);
        let mut bad = ParamSet::new();
        bad.insert("w", Matrix::zeros(1, 2));
        assert!(ema_update(&t, &bad, 0.5).is_err());
    }

    fn tiny_vit() -> ViT {
        ViT::new(ViTConfig {
            image_size: (16, 16),
            patch_size: 8,
            embed_dim: 8,
            num_heads: 2,
            depth: 1,
            mlp_ratio: 2,
            proj_dim: 6,
            head_hidden: 8,
            head_bottleneck: 4,
            condition_dim: 4,
            local_size: (8, 8),
            seed: 1,
        })
        .unwrap()
    }

    fn tiny_images(n: usize) -> Vec<Image> {
        (0..n)
            .map(|i| Image::from_fn(16, 16, 3, |y, x, c| ((x * (i + 1) + y * 3 + c) % 7) as f64 / 7.0))
            .collect()
    }

    #[test]
    fn graph_loss_matches_direct_sum() {
        let vit = tiny_vit();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = &tiny_images(1)[0];
        let distill = DistillConfig {
            local_crops: 3,
            ..Default::default()
        };
        let mut fb = 0;
        let views = build_views(img, &vit.config, &distill, &AugmentPolicy::default(), None, &mut rng, &mut fb).unwrap();
        let targets: Vec<Vec<f64>> = (0..2).map(|_| random_dist(&mut rng, 6)).collect();
        let (loss, _) = distill_loss_and_grads(&vit, &views, &targets, 0.1).unwrap();
        let student: Vec<Vec<f64>> = views
            .iter()
            .map(|v| {
                let l: Vec<f64> = vit.forward(v).unwrap().proj_logits.iter().map(|x| x / 0.1).collect();
                softmax(&l)
            })
            .collect();
        let direct = ss_loss(&targets, &student, 3).unwrap();
        assert_eq!(direct.terms, 8);
        assert!((loss - direct.value).abs() < 1e-9 * direct.value.abs().max(1.0));
    }

    #[test]
    fn no_op_step_keeps_both_networks() {
        let vit = tiny_vit();
        let distill = DistillConfig {
            local_crops: 2,
            learning_rate: 0.0,
            final_learning_rate: 0.0,
            ema_start: 1.0,
            ema_end: 1.0,
            batch_size: 1,
            epochs: 1,
            ..Default::default()
        };
        let run = ssl_train(&vit, &tiny_images(1), &distill, &AugmentPolicy::default(), &TrainOptions::default()).unwrap();
        assert_eq!(run.student.params, vit.params);
        assert_eq!(run.teacher.vit.params, vit.params);
        assert_eq!(run.log.entries.len(), 2);
    }

    #[test]
    fn teacher_is_frozen_at_lambda_one_while_student_moves() {
        let vit = tiny_vit();
        let distill = DistillConfig {
            local_crops: 2,
            learning_rate: 1e-3,
            ema_start: 1.0,
            ema_end: 1.0,
            batch_size: 2,
            epochs: 2,
            ..Default::default()
        };
        let run = ssl_train(&vit, &tiny_images(3), &distill, &AugmentPolicy::default(), &TrainOptions::default()).unwrap();
        assert_eq!(run.teacher.vit.params, vit.params);
        assert_ne!(run.student.params, vit.params);
    }

    #[test]
    fn keypoint_mode_writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let vit = tiny_vit();
        let distill = DistillConfig {
            local_crops: 3,
            learning_rate: 1e-3,
            batch_size: 2,
            epochs: 2,
            warmup_epochs: 1,
            ..Default::default()
        };
        let opts = TrainOptions {
            crop_mode: Some(CropMode::Keypoint),
            log_path: Some(dir.path().join("log.jsonl")),
            checkpoint_dir: Some(dir.path().join("ckpt")),
            diagnostics: vec![SslSample {
                image: tiny_images(1).remove(0),
                regions: vec![PixelBox {
                    x0: 0.0,
                    y0: 0.0,
                    x1: 8.0,
                    y1: 8.0,
                }],
            }],
        };
        let run = ssl_train(&vit, &tiny_images(3), &distill, &AugmentPolicy::default(), &opts).unwrap();
        let text = fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        let entries: Vec<LogEntry> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(entries, run.log.entries);
        assert_eq!(run.log.epoch_losses().len(), 2);
        assert_eq!(run.log.attention_trace().len(), 2);
        let teacher = ViT::load(&dir.path().join("ckpt/epoch_001_teacher.safetensors")).unwrap();
        assert_eq!(teacher.config, vit.config);
        assert!(dir.path().join("ckpt/epoch_000_student.safetensors").exists());
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let bad = DistillConfig {
            teacher_temp: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "ssl.teacher_temp"));
        assert_eq!(DistillConfig::default().terms(), 22);
    }
}
