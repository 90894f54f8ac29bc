//! Random-resized crops and the photometric chain that turns a garment image
//! into teacher/student views.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Scale range of global crops, as a fraction of image area.
pub const GLOBAL_SCALE: (f64, f64) = (0.25, 1.0);
/// Scale range of local crops, as a fraction of image area.
pub const LOCAL_SCALE: (f64, f64) = (0.05, 0.25);
/// Width/height ratio range of sampled crops.
pub const ASPECT_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

const MAX_ATTEMPTS: usize = 10;
const BICUBIC_A: f64 = -0.5;

/// A crop rectangle in pixel units of an `image_size = (height, width)` image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    pub image_size: (usize, usize),
}

impl CropBox {
    pub fn full(image_size: (usize, usize)) -> Self {
        Self {
            left: 0.0,
            top: 0.0,
            width: image_size.1 as f64,
            height: image_size.0 as f64,
            image_size,
        }
    }

    /// Box of the given pixel size centred at `(cx, cy)` pixels, shifted by
    /// the minimum amount needed to lie inside the image. Sides larger than
    /// the image are clipped to it.
    pub fn centered(cx: f64, cy: f64, width: f64, height: f64, image_size: (usize, usize)) -> Self {
        let (ih, iw) = (image_size.0 as f64, image_size.1 as f64);
        let width = width.min(iw);
        let height = height.min(ih);
        let left = (cx - width / 2.0).clamp(0.0, iw - width);
        let top = (cy - height / 2.0).clamp(0.0, ih - height);
        Self {
            left,
            top,
            width,
            height,
            image_size,
        }
    }

    /// Normalized centre `(cx, cy)` in `[0, 1]`.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.left + self.width / 2.0) / self.image_size.1 as f64,
            (self.top + self.height / 2.0) / self.image_size.0 as f64,
        )
    }

    pub fn area_ratio(&self) -> f64 {
        self.width * self.height / (self.image_size.0 * self.image_size.1) as f64
    }

    pub fn aspect(&self) -> f64 {
        self.width / self.height
    }

    /// Integer `(left, top, width, height)`, rounded and kept in bounds.
    pub fn pixel_rect(&self) -> (usize, usize, usize, usize) {
        let (ih, iw) = self.image_size;
        let w = (self.width.round() as usize).clamp(1, iw);
        let h = (self.height.round() as usize).clamp(1, ih);
        let l = (self.left.round() as usize).min(iw - w);
        let t = (self.top.round() as usize).min(ih - h);
        (l, t, w, h)
    }

    /// Inside the image with positive size (tolerance 1e-9 px).
    pub fn in_bounds(&self) -> bool {
        let (ih, iw) = (self.image_size.0 as f64, self.image_size.1 as f64);
        let eps = 1e-9;
        self.width > 0.0
            && self.height > 0.0
            && self.left >= -eps
            && self.top >= -eps
            && self.left + self.width <= iw + eps
            && self.top + self.height <= ih + eps
    }
}

/// Result of [`sample_crop_box`]; `fallback` is set when no attempt fit and a
/// centre crop was returned instead.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledCrop {
    pub crop: CropBox,
    pub fallback: bool,
}

fn check_scale(scale: (f64, f64)) -> Result<()> {
    if !(scale.0 > 0.0 && scale.0 <= scale.1 && scale.1 <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "scale range {scale:?} must satisfy 0 < lo <= hi <= 1"
        )));
    }
    Ok(())
}

fn check_aspect(aspect: (f64, f64)) -> Result<()> {
    if !(aspect.0 > 0.0 && aspect.0 <= aspect.1) {
        return Err(Error::InvalidArgument(format!(
            "aspect range {aspect:?} must satisfy 0 < lo <= hi"
        )));
    }
    Ok(())
}

#[inline]
fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Samples an area ratio uniformly from `scale`, an aspect log-uniformly from
/// `aspect`, and a position uniformly among in-bounds placements. After ten
/// infeasible attempts falls back to a centre crop of area `scale.0`.
pub fn sample_crop_box<R: Rng + ?Sized>(
    rng: &mut R,
    scale: (f64, f64),
    aspect: (f64, f64),
    image_size: (usize, usize),
) -> Result<SampledCrop> {
    check_scale(scale)?;
    check_aspect(aspect)?;
    let (ih, iw) = (image_size.0 as f64, image_size.1 as f64);
    let area = ih * iw;
    let (log_lo, log_hi) = (aspect.0.ln(), aspect.1.ln());
    for _ in 0..MAX_ATTEMPTS {
        let s = uniform(rng, scale.0, scale.1);
        let a = uniform(rng, log_lo, log_hi).exp();
        let w = (s * area * a).sqrt();
        let h = (s * area / a).sqrt();
        if w <= iw && h <= ih {
            let left = uniform(rng, 0.0, iw - w);
            let top = uniform(rng, 0.0, ih - h);
            return Ok(SampledCrop {
                crop: CropBox {
                    left,
                    top,
                    width: w,
                    height: h,
                    image_size,
                },
                fallback: false,
            });
        }
    }
    let target = scale.0 * area;
    let a = (iw / ih).clamp(aspect.0, aspect.1);
    let mut w = (target * a).sqrt();
    let mut h = (target / a).sqrt();
    if w > iw {
        w = iw;
        h = (target / w).min(ih);
    }
    if h > ih {
        h = ih;
        w = (target / h).min(iw);
    }
    Ok(SampledCrop {
        crop: CropBox::centered(iw / 2.0, ih / 2.0, w, h, image_size),
        fallback: true,
    })
}

/// Keys cubic convolution kernel with `a = -0.5`.
#[inline]
pub fn cubic_kernel(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four source taps and weights for each output coordinate along one axis.
fn axis_taps(start: f64, extent: f64, out: usize, size: usize) -> Vec<([usize; 4], [f64; 4])> {
    let step = extent / out as f64;
    (0..out)
        .map(|o| {
            let s = start + (o as f64 + 0.5) * step - 0.5;
            let base = s.floor();
            let frac = s - base;
            let mut idx = [0usize; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let i = base as isize + k as isize - 1;
                idx[k] = i.clamp(0, size as isize - 1) as usize;
                w[k] = cubic_kernel(frac - (k as f64 - 1.0));
            }
            (idx, w)
        })
        .collect()
}

/// Crops `crop` out of `image` and resamples it bicubically to
/// `out_size = (height, width)`, clamping the result to `[0, 1]`.
pub fn apply_crop_resize(image: &Image, crop: &CropBox, out_size: (usize, usize)) -> Image {
    let (oh, ow) = out_size;
    let ch = image.channels();
    let ys = axis_taps(crop.top, crop.height, oh, image.height());
    let xs = axis_taps(crop.left, crop.width, ow, image.width());
    // horizontal pass over every source row, then vertical
    let mut tmp = vec![0.0; image.height() * ow * ch];
    for y in 0..image.height() {
        for (ox, (xi, xw)) in xs.iter().enumerate() {
            for c in 0..ch {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += xw[k] * image.get(y, xi[k], c);
                }
                tmp[(y * ow + ox) * ch + c] = acc;
            }
        }
    }
    let mut out = Image::new(oh, ow, ch);
    for (oy, (yi, yw)) in ys.iter().enumerate() {
        for ox in 0..ow {
            for c in 0..ch {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += yw[k] * tmp[(yi[k] * ow + ox) * ch + c];
                }
                out.set(oy, ox, c, acc.clamp(0.0, 1.0));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub rng_seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 1.0),
            mean: [0.5; 3],
            std: [0.25; 3],
            rng_seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// No-op photometric chain: crop-resize only, identity normalization.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            blur_prob: 0.0,
            blur_sigma: (0.0, 0.0),
            mean: [0.0; 3],
            std: [1.0; 3],
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, p) in [("augment.flip_prob", self.flip_prob), ("augment.blur_prob", self.blur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, format!("{p} is not a probability")));
            }
        }
        for (key, s) in [
            ("augment.brightness", self.brightness),
            ("augment.contrast", self.contrast),
            ("augment.saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::config(key, format!("jitter strength {s} outside [0, 1]")));
            }
        }
        if !(self.blur_sigma.0 >= 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(Error::config(
                "augment.blur_sigma",
                format!("{:?} is not an ordered non-negative range", self.blur_sigma),
            ));
        }
        if self.std.iter().any(|&s| s == 0.0 || !s.is_finite()) {
            return Err(Error::config("augment.std", "std components must be nonzero"));
        }
        Ok(())
    }

    pub fn with_blur_prob(&self, p: f64) -> Self {
        Self {
            blur_prob: p,
            ..self.clone()
        }
    }
}

/// Brightness, then contrast, then saturation, each with a factor uniform in
/// `[1 - s, 1 + s]`; clamps to `[0, 1]` after each stage.
pub fn color_jitter<R: Rng + ?Sized>(image: &mut Image, policy: &AugmentPolicy, rng: &mut R) {
    let b = uniform(rng, 1.0 - policy.brightness, 1.0 + policy.brightness);
    let c = uniform(rng, 1.0 - policy.contrast, 1.0 + policy.contrast);
    let s = uniform(rng, 1.0 - policy.saturation, 1.0 + policy.saturation);
    if b != 1.0 {
        for v in image.data_mut() {
            *v = (*v * b).clamp(0.0, 1.0);
        }
    }
    if c != 1.0 {
        let gray = image.to_gray();
        let m = gray.data().iter().sum::<f64>() / gray.data().len() as f64;
        for v in image.data_mut() {
            *v = ((*v - m) * c + m).clamp(0.0, 1.0);
        }
    }
    if s != 1.0 && image.channels() == 3 {
        let gray = image.to_gray();
        for y in 0..image.height() {
            for x in 0..image.width() {
                let g = gray.get(y, x, 0);
                for v in image.pixel_mut(y, x) {
                    *v = ((*v - g) * s + g).clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Separable Gaussian blur with radius `ceil(3σ)` and replicated borders.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let horizontal = Image::from_fn(h, w, ch, |y, x, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wt)| wt * image.get(y, clamp(x as isize + k as isize - radius, w), c))
            .sum()
    });
    Image::from_fn(h, w, ch, |y, x, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wt)| wt * horizontal.get(clamp(y as isize + k as isize - radius, h), x, c))
            .sum()
    })
}

pub fn normalize(image: &Image, mean: &[f64; 3], std: &[f64; 3]) -> Image {
    let ch = image.channels();
    Image::from_fn(image.height(), image.width(), ch, |y, x, c| {
        (image.get(y, x, c) - mean[c % 3]) / std[c % 3]
    })
}

pub fn denormalize(image: &Image, mean: &[f64; 3], std: &[f64; 3]) -> Image {
    let ch = image.channels();
    Image::from_fn(image.height(), image.width(), ch, |y, x, c| {
        image.get(y, x, c) * std[c % 3] + mean[c % 3]
    })
}

/// One augmented, normalized view:
/// crop-resize → horizontal flip → color jitter → Gaussian blur → normalize.
/// Consumes the same number of random draws regardless of outcomes.
pub fn augment_view<R: Rng + ?Sized>(
    image: &Image,
    crop: &CropBox,
    out_size: (usize, usize),
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Image {
    let mut view = apply_crop_resize(image, crop, out_size);
    if rng.random::<f64>() < policy.flip_prob {
        view = view.flip_horizontal();
    }
    color_jitter(&mut view, policy, rng);
    let blur = rng.random::<f64>() < policy.blur_prob;
    let sigma = uniform(rng, policy.blur_sigma.0, policy.blur_sigma.1);
    if blur {
        view = gaussian_blur(&view, sigma);
    }
    normalize(&view, &policy.mean, &policy.std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 3, |y, x, c| (x + 2 * y + c) as f64 / (w + 2 * h + 3) as f64)
    }

    #[test]
    fn invalid_scale_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_crop_box(&mut rng, (0.0, 0.5), ASPECT_RANGE, (10, 10)).is_err());
        assert!(sample_crop_box(&mut rng, (0.6, 0.5), ASPECT_RANGE, (10, 10)).is_err());
        assert!(sample_crop_box(&mut rng, (0.5, 1.5), ASPECT_RANGE, (10, 10)).is_err());
    }

    #[test]
    fn unit_scale_square_aspect_is_the_full_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_crop_box(&mut rng, (1.0, 1.0), (1.0, 1.0), (40, 40)).unwrap();
        assert!(!s.fallback);
        assert_eq!(s.crop.pixel_rect(), (0, 0, 40, 40));
    }

    #[test]
    fn infeasible_request_falls_back_to_centre_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // a square crop covering all of a portrait image cannot exist
        let s = sample_crop_box(&mut rng, (1.0, 1.0), (1.0, 1.0), (64, 48)).unwrap();
        assert!(s.fallback);
        assert!(s.crop.in_bounds());
        assert!((s.crop.area_ratio() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quarter_area_box_has_exact_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_crop_box(&mut rng, (0.25, 0.25), (1.0, 1.0), (384, 512)).unwrap();
        let c = s.crop;
        assert!((c.width * c.height - 49152.0).abs() < 1e-6);
        let (_, _, w, h) = c.pixel_rect();
        let side = 49152f64.sqrt();
        assert!((w as f64 - side).abs() <= 1.0 && (h as f64 - side).abs() <= 1.0);
    }

    #[test]
    fn full_box_resize_is_identity() {
        let img = ramp(9, 7);
        let out = apply_crop_resize(&img, &CropBox::full((9, 7)), (9, 7));
        assert!(out.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(10, 12, 3, 0.37);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let crop = sample_crop_box(&mut rng, LOCAL_SCALE, ASPECT_RANGE, (10, 12)).unwrap().crop;
        let out = apply_crop_resize(&img, &crop, (16, 16));
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    /// Direct 16-tap evaluation with an independently written kernel.
    fn reference_bicubic(img: &Image, crop: &CropBox, out: (usize, usize)) -> Image {
        fn keys(t: f64) -> f64 {
            let t = t.abs();
            match t {
                t if t <= 1.0 => 1.5 * t.powi(3) - 2.5 * t.powi(2) + 1.0,
                t if t < 2.0 => -0.5 * t.powi(3) + 2.5 * t.powi(2) - 4.0 * t + 2.0,
                _ => 0.0,
            }
        }
        Image::from_fn(out.0, out.1, img.channels(), |oy, ox, c| {
            let sy = crop.top + (oy as f64 + 0.5) * crop.height / out.0 as f64 - 0.5;
            let sx = crop.left + (ox as f64 + 0.5) * crop.width / out.1 as f64 - 0.5;
            let mut acc = 0.0;
            for iy in (sy.floor() as isize - 1)..=(sy.floor() as isize + 2) {
                for ix in (sx.floor() as isize - 1)..=(sx.floor() as isize + 2) {
                    let py = iy.clamp(0, img.height() as isize - 1) as usize;
                    let px = ix.clamp(0, img.width() as isize - 1) as usize;
                    acc += keys(sy - iy as f64) * keys(sx - ix as f64) * img.get(py, px, c);
                }
            }
            acc.clamp(0.0, 1.0)
        })
    }

    #[test]
    fn upscaled_ramp_matches_reference_bicubic() {
        let img = ramp(8, 6);
        let crop = CropBox::full((8, 6));
        let out = apply_crop_resize(&img, &crop, (16, 12));
        let oracle = reference_bicubic(&img, &crop, (16, 12));
        assert!(out.max_abs_diff(&oracle) < 1e-12);
        // away from the replicated border a linear ramp is reproduced exactly
        let linear = |y: f64, x: f64| (x + 2.0 * y) / 25.0;
        for oy in 4..12 {
            for ox in 4..8 {
                let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
                let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
                assert!((out.get(oy, ox, 0) - linear(sy, sx)).abs() < 1e-12);
            }
        }
        let sub = CropBox::centered(3.0, 4.0, 3.3, 4.1, (8, 6));
        let out = apply_crop_resize(&img, &sub, (9, 7));
        assert!(out.max_abs_diff(&reference_bicubic(&img, &sub, (9, 7))) < 1e-12);
    }

    #[test]
    fn identity_policy_equals_crop_resize() {
        let img = ramp(16, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let crop = sample_crop_box(&mut rng, GLOBAL_SCALE, ASPECT_RANGE, (16, 12)).unwrap().crop;
        let view = augment_view(&img, &crop, (16, 12), &AugmentPolicy::identity(), &mut rng);
        assert_eq!(view, apply_crop_resize(&img, &crop, (16, 12)));
    }

    #[test]
    fn forced_flip_twice_restores_crop() {
        let img = ramp(16, 12);
        let crop = CropBox::centered(6.0, 8.0, 8.0, 10.0, (16, 12));
        let policy = AugmentPolicy {
            flip_prob: 1.0,
            ..AugmentPolicy::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let once = augment_view(&img, &crop, (10, 8), &policy, &mut rng);
        let crop_only = apply_crop_resize(&img, &crop, (10, 8));
        assert_eq!(once, crop_only.flip_horizontal());
        assert_eq!(once.flip_horizontal(), crop_only);
    }

    #[test]
    fn same_seed_same_view() {
        let img = ramp(16, 12);
        let crop = CropBox::full((16, 12));
        let policy = AugmentPolicy::default();
        let a = augment_view(&img, &crop, (16, 12), &policy, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment_view(&img, &crop, (16, 12), &policy, &mut ChaCha8Rng::seed_from_u64(9));
        let bytes = |i: &Image| i.data().iter().flat_map(|v| v.to_bits().to_le_bytes()).collect::<Vec<_>>();
        assert_eq!(bytes(&a), bytes(&b));
    }

    #[test]
    fn normalization_inverts() {
        let img = ramp(5, 4);
        let (m, s) = ([0.4, 0.5, 0.6], [0.2, 0.3, 0.25]);
        let back = denormalize(&normalize(&img, &m, &s), &m, &s);
        assert!(back.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let img = Image::filled(9, 9, 3, 0.25);
        assert!(gaussian_blur(&img, 1.3).max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentPolicy::default().validate().is_ok());
        let bad = AugmentPolicy {
            std: [1.0, 0.0, 1.0],
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentPolicy {
            blur_sigma: (2.0, 1.0),
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn centered_box_clamps_by_shifting() {
        let b = CropBox::centered(0.0, 0.0, 10.0, 12.0, (64, 48));
        assert_eq!((b.left, b.top, b.width, b.height), (0.0, 0.0, 10.0, 12.0));
        assert!(b.in_bounds());
    }
}
