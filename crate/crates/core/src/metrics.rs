//! Paired SSIM and a Fréchet distance between Gaussian fits of ViT
//! class-token embeddings.
//!
//! The Fréchet distance here is computed on this crate's own encoder
//! features, not Inception features, so its values are not FID scores.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::vit::ViT;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of pixel values.
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable weighted sum over every fully contained window.
fn filter_valid(values: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let n = kernel.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = kernel.iter().enumerate().map(|(k, wt)| wt * values[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = kernel.iter().enumerate().map(|(k, wt)| wt * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all `window × window` Gaussian-weighted windows of the
/// luminance images.
pub fn ssim(x: &Image, y: &Image, params: &SsimParams) -> Result<f64> {
    if !x.same_shape(y) {
        return Err(Error::Shape("ssim inputs differ in shape".into()));
    }
    let (h, w) = x.dims();
    if params.window == 0 || params.window > h || params.window > w {
        return Err(Error::InvalidArgument(format!(
            "ssim window {} does not fit a {h}x{w} image",
            params.window
        )));
    }
    let gx = x.to_gray();
    let gy = y.to_gray();
    let (a, b) = (gx.data(), gy.data());
    let kernel = gaussian_window(params.window, params.sigma);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mx = filter_valid(a, h, w, &kernel);
    let my = filter_valid(b, h, w, &kernel);
    let sxx = filter_valid(&prod(a, a), h, w, &kernel);
    let syy = filter_valid(&prod(b, b), h, w, &kernel);
    let sxy = filter_valid(&prod(a, b), h, w, &kernel);
    let c1 = (params.k1 * params.range).powi(2);
    let c2 = (params.k2 * params.range).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

/// Sample mean and unbiased covariance (zero covariance for one sample).
pub fn gaussian_stats(samples: &[Vec<f64>]) -> Result<GaussianStats> {
    let Some(first) = samples.first() else {
        return Err(Error::EmptyPointSet);
    };
    let d = first.len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Shape("samples differ in dimension".into()));
    }
    let n = samples.len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    if n > 1 {
        for s in samples {
            for i in 0..d {
                let di = s[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (s[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
    }
    Ok(GaussianStats { mean, cov, n })
}

/// Symmetric PSD square root; eigenvalues below zero are clamped.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`, with the trace of the cross
/// term taken as `Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})`.
pub fn frechet_embed_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.len() != a.dim() * a.dim() || b.cov.len() != b.dim() * b.dim() {
        return Err(Error::Shape(format!("Gaussian dimensions {} and {} differ", a.dim(), b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let ra = psd_sqrt(&sa);
    let cross = psd_sqrt(&(&ra * &sb * &ra)).trace();
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    // rounding can push an exact zero slightly negative
    Ok(value.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedStats {
    pub stats: GaussianStats,
    /// Fewer than `d + 1` samples or a numerically singular covariance.
    pub rank_deficient: bool,
}

pub fn is_rank_deficient(stats: &GaussianStats) -> bool {
    let d = stats.dim();
    if stats.n < d + 1 {
        return true;
    }
    let eig = SymmetricEigen::new(stats.cov_matrix());
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    max <= 0.0 || min <= 1e-12 * max
}

/// Gaussian fit of the class-token embeddings of `images`.
pub fn embed_stats(encoder: &ViT, images: &[Image]) -> Result<EmbedStats> {
    if images.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let embeddings = images
        .iter()
        .map(|img| encoder.forward(img).map(|o| o.cls_embedding))
        .collect::<Result<Vec<_>>>()?;
    let stats = gaussian_stats(&embeddings)?;
    let rank_deficient = is_rank_deficient(&stats);
    Ok(EmbedStats { stats, rank_deficient })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}
