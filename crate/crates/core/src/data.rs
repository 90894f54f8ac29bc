//! Synthetic paired try-on data and the on-disk dataset layout.
//!
//! Each pair consists of a flat garment (a coloured shirt with collar,
//! sleeves and 1-3 glyphs on a white background), a stick-figure person
//! wearing that garment, a binary mask over the torso and arms, and an affine
//! appearance flow that maps the garment's bounding box onto the mask's.
//! The person is dressed through a *different*, non-affine warp, so the
//! affine coarse composite is deliberately imperfect.
//!
//! Ground-truth part boxes (collar, sleeves, glyphs) are stored per garment
//! for evaluation only.
//!
//! Layout written by [`write_dataset`]:
//!
//! ```text
//! index.json
//! garments/NNNN.png  persons/NNNN.png  masks/NNNN.png
//! flows/NNNN.flow    annotations/NNNN.json
//! ```
//!
//! Flow files hold the 8-byte magic `VTONFLO1`, then `u32` LE height and
//! width, then `height × width × 2` little-endian `f32` values `(dx, dy)`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const FLOW_MAGIC: &[u8; 8] = b"VTONFLO1";

/// Axis-aligned pixel box, `x1`/`y1` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelBox {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    fn overlap(&self, other: &PixelBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub label: String,
    #[serde(flatten)]
    pub bbox: PixelBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollarShape {
    V,
    Round,
    Square,
}

/// Ground truth for one garment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarmentAnnotation {
    pub collar: CollarShape,
    pub sleeve_length: f64,
    pub garment_box: PixelBox,
    pub regions: Vec<Region>,
}

impl GarmentAnnotation {
    pub fn boxes(&self) -> Vec<PixelBox> {
        self.regions.iter().map(|r| r.bbox).collect()
    }
}

/// Fraction of each patch's area covered by the union of `boxes`, patch grid
/// row-major. Overlapping boxes are counted once (per-pixel union).
pub fn patch_coverage(boxes: &[PixelBox], image_size: (usize, usize), patch: usize) -> Vec<f64> {
    let (h, w) = image_size;
    let (gr, gc) = (h / patch, w / patch);
    let mut cover = vec![0.0; gr * gc];
    let area = (patch * patch) as f64;
    for y in 0..gr * patch {
        for x in 0..gc * patch {
            let px = PixelBox {
                x0: x as f64,
                y0: y as f64,
                x1: x as f64 + 1.0,
                y1: y as f64 + 1.0,
            };
            let inside = boxes.iter().map(|b| b.overlap(&px)).fold(0.0, f64::max);
            cover[(y / patch) * gc + x / patch] += inside / area;
        }
    }
    cover
}

/// One generated training/test pair.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub garment: Image,
    /// The person wearing the garment (ground truth).
    pub person: Image,
    pub mask: Image,
    /// Affine flow, `H × W × 2` as `(dx, dy)`.
    pub flow: Image,
    pub annotation: GarmentAnnotation,
}

/// Deterministic generator: pair `i` depends only on `(seed, i)`.
#[derive(Clone, Debug)]
pub struct SyntheticGenerator {
    pub image_size: (usize, usize),
    pub seed: u64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

struct Canvas {
    img: Image,
    alpha: Vec<f64>,
}

impl Canvas {
    fn new(h: usize, w: usize, bg: [f64; 3]) -> Self {
        Self {
            img: Image::from_fn(h, w, 3, |_, _, c| bg[c]),
            alpha: vec![0.0; h * w],
        }
    }

    /// Paints every pixel whose centre satisfies `inside`.
    fn fill(&mut self, color: [f64; 3], inside: impl Fn(f64, f64) -> bool) {
        let (h, w) = self.img.dims();
        for y in 0..h {
            for x in 0..w {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.img.pixel_mut(y, x).copy_from_slice(&color);
                    self.alpha[y * w + x] = 1.0;
                }
            }
        }
    }
}

fn in_rounded_rect(x: f64, y: f64, b: &PixelBox, r: f64) -> bool {
    if x < b.x0 || x >= b.x1 || y < b.y0 || y >= b.y1 {
        return false;
    }
    let cx = x.clamp(b.x0 + r, b.x1 - r);
    let cy = y.clamp(b.y0 + r, b.y1 - r);
    (x - cx).powi(2) + (y - cy).powi(2) <= r * r
}

/// Distance from `p` to the segment `a–b`.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

fn segment_box(a: (f64, f64), b: (f64, f64), radius: f64) -> PixelBox {
    PixelBox {
        x0: a.0.min(b.0) - radius,
        y0: a.1.min(b.1) - radius,
        x1: a.0.max(b.0) + radius,
        y1: a.1.max(b.1) + radius,
    }
}

fn clip_box(b: PixelBox, h: usize, w: usize) -> PixelBox {
    PixelBox {
        x0: b.x0.clamp(0.0, w as f64),
        y0: b.y0.clamp(0.0, h as f64),
        x1: b.x1.clamp(0.0, w as f64),
        y1: b.y1.clamp(0.0, h as f64),
    }
}

/// Bilinear sample with border replication; `(x, y)` in pixel-centre units.
fn sample_bilinear(img: &Image, x: f64, y: f64, out: &mut [f64]) {
    let (h, w) = img.dims();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    for (c, o) in out.iter_mut().enumerate() {
        *o = (1.0 - fy) * ((1.0 - fx) * img.get(y0, x0, c) + fx * img.get(y0, x1, c))
            + fy * ((1.0 - fx) * img.get(y1, x0, c) + fx * img.get(y1, x1, c));
    }
}

fn mask_bbox(mask: &Image) -> Option<PixelBox> {
    let (h, w) = mask.dims();
    let mut b: Option<PixelBox> = None;
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x, 0) > 0.5 {
                let p = PixelBox {
                    x0: x as f64,
                    y0: y as f64,
                    x1: x as f64 + 1.0,
                    y1: y as f64 + 1.0,
                };
                b = Some(match b {
                    None => p,
                    Some(o) => PixelBox {
                        x0: o.x0.min(p.x0),
                        y0: o.y0.min(p.y0),
                        x1: o.x1.max(p.x1),
                        y1: o.y1.max(p.y1),
                    },
                });
            }
        }
    }
    b
}

/// Backward flow mapping the `from` box (in the garment) onto the `to` box
/// (in the person frame): `out(x, y) = garment(x + dx, y + dy)`.
pub fn affine_box_flow(from: &PixelBox, to: &PixelBox, image_size: (usize, usize)) -> Image {
    let sx = from.width() / to.width();
    let sy = from.height() / to.height();
    Image::from_fn(image_size.0, image_size.1, 2, |y, x, c| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        if c == 0 {
            from.x0 + (px - to.x0) * sx - px
        } else {
            from.y0 + (py - to.y0) * sy - py
        }
    })
}

const BODY_PALETTE: [[f64; 3]; 4] = [
    [0.20, 0.42, 0.52],
    [0.55, 0.55, 0.58],
    [0.45, 0.50, 0.30],
    [0.55, 0.30, 0.32],
];

impl SyntheticGenerator {
    pub fn new(image_size: (usize, usize), seed: u64) -> Self {
        Self { image_size, seed }
    }

    fn rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }

    /// Garment image, its alpha and its annotation.
    fn garment<R: Rng>(&self, rng: &mut R) -> (Image, Vec<f64>, GarmentAnnotation) {
        let (h, w) = self.image_size;
        let (hf, wf) = (h as f64, w as f64);
        let mut canvas = Canvas::new(h, w, [1.0; 3]);
        // shared fabrics: identity lives in the collar, sleeves and glyphs
        let body_color = BODY_PALETTE[rng.random_range(0..BODY_PALETTE.len())];
        let accent = hsv(rng.random::<f64>(), 0.8, rng.random_range(0.2..0.45));

        let bw = wf * rng.random_range(0.42..0.55);
        let cx = wf / 2.0 + rng.random_range(-0.04..0.04) * wf;
        let top = hf * rng.random_range(0.16..0.24);
        let bottom = hf * rng.random_range(0.82..0.92);
        let body = PixelBox {
            x0: cx - bw / 2.0,
            y0: top,
            x1: cx + bw / 2.0,
            y1: bottom,
        };

        // sleeves hang from the shoulders, outward and down
        let sleeve_length = hf * rng.random_range(0.06..0.24);
        let angle = rng.random_range(0.6..1.0_f64);
        let thick = wf * 0.08;
        let mut regions = Vec::new();
        let mut sleeves = Vec::new();
        for (side, label) in [(-1.0, "sleeve_left"), (1.0, "sleeve_right")] {
            let a = (cx + side * (bw / 2.0 - thick), top + thick);
            let b = (a.0 + side * sleeve_length * angle.cos(), a.1 + sleeve_length * angle.sin());
            sleeves.push((a, b));
            let bbox = clip_box(segment_box(a, b, thick), h, w);
            regions.push(Region {
                label: label.to_string(),
                bbox,
            });
        }
        for &(a, b) in &sleeves {
            canvas.fill(body_color, |x, y| segment_distance((x, y), a, b) <= thick);
        }
        canvas.fill(body_color, |x, y| in_rounded_rect(x, y, &body, 3.0));

        let collar = match rng.random_range(0..3) {
            0 => CollarShape::V,
            1 => CollarShape::Round,
            _ => CollarShape::Square,
        };
        let cw = bw * rng.random_range(0.35..0.5);
        let cd = hf * rng.random_range(0.08..0.14);
        let collar_box = PixelBox {
            x0: cx - cw / 2.0,
            y0: top,
            x1: cx + cw / 2.0,
            y1: top + cd,
        };
        match collar {
            CollarShape::V => canvas.fill(accent, |x, y| {
                y >= top && y < top + cd && (x - cx).abs() <= cw / 2.0 * (1.0 - (y - top) / cd)
            }),
            CollarShape::Round => canvas.fill(accent, |x, y| {
                y >= top && ((x - cx) / (cw / 2.0)).powi(2) + ((y - top) / cd).powi(2) <= 1.0
            }),
            CollarShape::Square => canvas.fill(accent, |x, y| {
                x >= collar_box.x0 && x < collar_box.x1 && y >= collar_box.y0 && y < collar_box.y1
            }),
        }
        regions.push(Region {
            label: "collar".to_string(),
            bbox: collar_box,
        });

        let n_glyphs = rng.random_range(1..=3);
        let mut placed: Vec<PixelBox> = Vec::new();
        for _ in 0..n_glyphs {
            let size = wf * rng.random_range(0.12..0.18);
            let color = hsv(rng.random::<f64>(), 1.0, 1.0);
            let kind = rng.random_range(0..4);
            // a few attempts at a non-overlapping spot inside the body
            let mut spot = None;
            for _ in 0..20 {
                let gx = rng.random_range(body.x0 + 1.0..body.x1 - size - 1.0);
                let gy = rng.random_range(collar_box.y1 + 1.0..body.y1 - size - 1.0);
                let cand = PixelBox {
                    x0: gx,
                    y0: gy,
                    x1: gx + size,
                    y1: gy + size,
                };
                if placed.iter().all(|p| p.overlap(&cand) == 0.0) {
                    spot = Some(cand);
                    break;
                }
            }
            let Some(g) = spot else { continue };
            let (mx, my, r) = ((g.x0 + g.x1) / 2.0, (g.y0 + g.y1) / 2.0, size / 2.0);
            match kind {
                0 => canvas.fill(color, |x, y| {
                    (x - mx).abs() <= r && (y - my).abs() <= r && ((x - mx).abs() <= r / 3.0 || (y - my).abs() <= r / 3.0)
                }),
                1 => canvas.fill(color, |x, y| (x - mx).abs() + (y - my).abs() <= r),
                2 => canvas.fill(color, |x, y| {
                    let d = ((x - mx).powi(2) + (y - my).powi(2)).sqrt();
                    d <= r && d >= r * 0.45
                }),
                _ => canvas.fill(color, |x, y| (x - mx).abs() <= r * 0.8 && (y - my).abs() <= r * 0.8),
            }
            placed.push(g);
            regions.push(Region {
                label: "glyph".to_string(),
                bbox: g,
            });
        }

        let mut garment_box = body;
        for r in &regions {
            garment_box.x0 = garment_box.x0.min(r.bbox.x0);
            garment_box.y0 = garment_box.y0.min(r.bbox.y0);
            garment_box.x1 = garment_box.x1.max(r.bbox.x1);
            garment_box.y1 = garment_box.y1.max(r.bbox.y1);
        }
        let annotation = GarmentAnnotation {
            collar,
            sleeve_length,
            garment_box,
            regions,
        };
        (canvas.img, canvas.alpha, annotation)
    }

    /// Pair `index`, fully determined by `(seed, index)`.
    pub fn generate(&self, index: usize) -> SyntheticPair {
        let mut rng = self.rng(index);
        let (h, w) = self.image_size;
        let (hf, wf) = (h as f64, w as f64);
        let (garment, garment_alpha, annotation) = self.garment(&mut rng);

        // the person
        let bg = [
            rng.random_range(0.55..0.8),
            rng.random_range(0.55..0.8),
            rng.random_range(0.55..0.8),
        ];
        let skin = hsv(rng.random_range(0.03..0.1), rng.random_range(0.3..0.6), rng.random_range(0.45..0.95));
        let pants = hsv(rng.random::<f64>(), 0.4, rng.random_range(0.15..0.35));
        let mut base = Canvas::new(h, w, bg);
        let cx = wf / 2.0 + rng.random_range(-0.06..0.06) * wf;
        let shoulder_y = hf * rng.random_range(0.24..0.3);
        let hip_y = hf * rng.random_range(0.66..0.72);
        let torso_w = wf * rng.random_range(0.3..0.4);
        let head_r = wf * rng.random_range(0.09..0.12);
        let limb = wf * 0.06;
        let arm_angle = rng.random_range(1.0..1.35_f64);
        let arm_len = hf * rng.random_range(0.32..0.4);
        base.fill(pants, |x, y| {
            [-1.0, 1.0].iter().any(|s: &f64| {
                segment_distance((x, y), (cx + s * torso_w / 4.0, hip_y), (cx + s * torso_w / 3.0, hf + 2.0)) <= limb
            })
        });
        let shoulders = [(cx - torso_w / 2.0, shoulder_y + limb), (cx + torso_w / 2.0, shoulder_y + limb)];
        let hands = [
            (shoulders[0].0 - arm_len * arm_angle.cos(), shoulders[0].1 + arm_len * arm_angle.sin()),
            (shoulders[1].0 + arm_len * arm_angle.cos(), shoulders[1].1 + arm_len * arm_angle.sin()),
        ];
        let on_arm = |x: f64, y: f64| (0..2).any(|i| segment_distance((x, y), shoulders[i], hands[i]) <= limb);
        base.fill(skin, on_arm);
        let torso = PixelBox {
            x0: cx - torso_w / 2.0,
            y0: shoulder_y,
            x1: cx + torso_w / 2.0,
            y1: hip_y,
        };
        base.fill(skin, |x, y| in_rounded_rect(x, y, &torso, 2.0));
        base.fill(skin, |x, y| {
            (x - cx).abs() <= limb && y >= shoulder_y - head_r && y < shoulder_y + 1.0
        });
        let head_y = shoulder_y - head_r * 1.6;
        base.fill(skin, |x, y| (x - cx).powi(2) + (y - head_y).powi(2) <= head_r * head_r);

        // where the garment sits on the body: shoulders to a little below the hips
        let fit = PixelBox {
            x0: torso.x0 - wf * 0.1,
            y0: shoulder_y - hf * 0.02,
            x1: torso.x1 + wf * 0.1,
            y1: (hip_y + hf * 0.06).min(hf),
        };
        // true (non-affine) dressing warp: the affine box fit plus a vertical
        // taper of the hem and a sideways sway growing with height
        let taper = rng.random_range(0.15..0.3);
        let sway = rng.random_range(-0.08..0.08) * wf;
        let affine = affine_box_flow(&annotation.garment_box, &fit, self.image_size);
        let gb = annotation.garment_box;
        let gcx = (gb.x0 + gb.x1) / 2.0;
        let alpha_img = Image::from_vec(h, w, 1, garment_alpha).expect("alpha shape");
        let mut person = base.img.clone();
        let mut worn = vec![0.0; h * w];
        let mut px = [0.0; 3];
        let mut pa = [0.0; 1];
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let v = ((fy - fit.y0) / fit.height()).clamp(0.0, 1.0);
                let sx = fx + affine.get(y, x, 0) + sway * v * v;
                let sx = gcx + (sx - gcx) * (1.0 + taper * v);
                let sy = fy + affine.get(y, x, 1);
                if !(gb.x0..gb.x1).contains(&sx) || !(gb.y0..gb.y1).contains(&sy) {
                    continue;
                }
                sample_bilinear(&alpha_img, sx - 0.5, sy - 0.5, &mut pa);
                if pa[0] >= 0.5 {
                    sample_bilinear(&garment, sx - 0.5, sy - 0.5, &mut px);
                    person.pixel_mut(y, x).copy_from_slice(&px);
                    worn[y * w + x] = 1.0;
                }
            }
        }

        // mask: torso, arms and worn garment, dilated by two pixels
        let mut core = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                core[y * w + x] = worn[y * w + x] > 0.0
                    || in_rounded_rect(fx, fy, &torso, 2.0)
                    || (on_arm(fx, fy) && fy <= fit.y1);
            }
        }
        let mask = Image::from_fn(h, w, 1, |y, x, _| {
            let hit = (y.saturating_sub(2)..(y + 3).min(h))
                .any(|yy| (x.saturating_sub(2)..(x + 3).min(w)).any(|xx| core[yy * w + xx]));
            if hit {
                1.0
            } else {
                0.0
            }
        });
        let target = mask_bbox(&mask).unwrap_or(fit);
        let flow = affine_box_flow(&annotation.garment_box, &target, self.image_size);
        SyntheticPair {
            garment,
            person,
            mask,
            flow,
            annotation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub person: PathBuf,
    pub garment: PathBuf,
    pub mask: PathBuf,
    #[serde(default)]
    pub flow: Option<PathBuf>,
    #[serde(default)]
    pub annotation: Option<PathBuf>,
    pub split: Split,
}

/// Index of paired records; paths are relative to the index's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDatasetIndex {
    pub image_size: (usize, usize),
    pub seed: u64,
    pub records: Vec<PairRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// A record loaded into memory.
#[derive(Clone, Debug)]
pub struct LoadedPair {
    pub id: String,
    pub person: Image,
    pub garment: Image,
    pub mask: Image,
    pub flow: Option<Image>,
    pub annotation: Option<GarmentAnnotation>,
}

impl PairedDatasetIndex {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut index: PairedDatasetIndex = serde_json::from_str(&text)?;
        index.root = root.to_path_buf();
        Ok(index)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PairRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Loads one record, checking sizes and mask binarity.
    pub fn load_pair(&self, record: &PairRecord) -> Result<LoadedPair> {
        let person = Image::load_rgb(&self.root.join(&record.person))?;
        let garment = Image::load_rgb(&self.root.join(&record.garment))?;
        let mask = Image::load_mask(&self.root.join(&record.mask))?;
        let flow = record
            .flow
            .as_ref()
            .map(|p| read_flow(&self.root.join(p)))
            .transpose()?;
        let annotation = match &record.annotation {
            Some(p) => {
                let path = self.root.join(p);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                Some(serde_json::from_str(&text)?)
            }
            None => None,
        };
        let dims = person.dims();
        let flow_dims = flow.as_ref().map(|f: &Image| f.dims()).unwrap_or(dims);
        if garment.dims() != dims || mask.dims() != dims || flow_dims != dims {
            return Err(Error::Shape(format!("record `{}` has mismatched image sizes", record.id)));
        }
        Ok(LoadedPair {
            id: record.id.clone(),
            person,
            garment,
            mask,
            flow,
            annotation,
        })
    }
}

/// Generates `n_pairs` pairs under `out_dir`; the last `test_fraction` of
/// them (rounded) form the test split.
pub fn write_dataset(
    out_dir: &Path,
    n_pairs: usize,
    image_size: (usize, usize),
    seed: u64,
    test_fraction: f64,
) -> Result<PairedDatasetIndex> {
    for sub in ["garments", "persons", "masks", "flows", "annotations"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let generator = SyntheticGenerator::new(image_size, seed);
    let n_test = ((n_pairs as f64) * test_fraction).round() as usize;
    let mut records = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let pair = generator.generate(i);
        let id = format!("{i:04}");
        let rec = PairRecord {
            id: id.clone(),
            person: PathBuf::from(format!("persons/{id}.png")),
            garment: PathBuf::from(format!("garments/{id}.png")),
            mask: PathBuf::from(format!("masks/{id}.png")),
            flow: Some(PathBuf::from(format!("flows/{id}.flow"))),
            annotation: Some(PathBuf::from(format!("annotations/{id}.json"))),
            split: if i + n_test >= n_pairs { Split::Test } else { Split::Train },
        };
        pair.garment.save_png(&out_dir.join(&rec.garment))?;
        pair.person.save_png(&out_dir.join(&rec.person))?;
        pair.mask.save_png(&out_dir.join(&rec.mask))?;
        write_flow(&out_dir.join(rec.flow.as_ref().unwrap()), &pair.flow)?;
        let ann = out_dir.join(rec.annotation.as_ref().unwrap());
        fs::write(&ann, serde_json::to_string_pretty(&pair.annotation)?).map_err(|e| Error::io(&ann, e))?;
        records.push(rec);
    }
    let index = PairedDatasetIndex {
        image_size,
        seed,
        records,
        root: out_dir.to_path_buf(),
    };
    let path = out_dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn write_flow(path: &Path, flow: &Image) -> Result<()> {
    if flow.channels() != 2 {
        return Err(Error::Shape(format!("flow must have 2 channels, got {}", flow.channels())));
    }
    let mut bytes = Vec::with_capacity(16 + flow.data().len() * 4);
    bytes.extend_from_slice(FLOW_MAGIC);
    bytes.extend_from_slice(&(flow.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&(flow.width() as u32).to_le_bytes());
    for &v in flow.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_flow(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::InvalidArgument(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != FLOW_MAGIC {
        return Err(bad("not a flow file"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != h * w * 2 * 4 {
        return Err(bad("truncated flow payload"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect::<Vec<_>>();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite flow value"));
    }
    Image::from_vec(h, w, 2, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_per_index() {
        let g = SyntheticGenerator::new((64, 48), 3);
        let a = g.generate(5);
        let b = g.generate(5);
        assert_eq!(a.person, b.person);
        assert_eq!(a.garment, b.garment);
        assert_ne!(g.generate(6).garment, a.garment);
    }

    #[test]
    fn masks_are_binary_and_cover_the_garment() {
        let g = SyntheticGenerator::new((64, 48), 0);
        for i in 0..20 {
            let p = g.generate(i);
            assert!(p.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let covered = p.mask.data().iter().sum::<f64>() / (64.0 * 48.0);
            assert!(covered > 0.15 && covered < 0.8, "mask fraction {covered}");
            assert!(p.annotation.regions.iter().any(|r| r.label == "glyph"));
            assert!(p.flow.is_finite());
        }
    }

    #[test]
    fn coverage_of_full_box_is_one() {
        let b = PixelBox {
            x0: 0.0,
            y0: 0.0,
            x1: 48.0,
            y1: 64.0,
        };
        assert!(patch_coverage(&[b], (64, 48), 16).iter().all(|&c| (c - 1.0).abs() < 1e-12));
        let half = PixelBox {
            x0: 0.0,
            y0: 0.0,
            x1: 8.0,
            y1: 16.0,
        };
        let c = patch_coverage(&[half, half], (64, 48), 16);
        assert!((c[0] - 0.5).abs() < 1e-12);
        assert_eq!(c[1], 0.0);
    }

    #[test]
    fn flow_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let flow = Image::from_fn(4, 3, 2, |y, x, c| (y as f64) - 0.5 * x as f64 + c as f64 * 0.25);
        let path = dir.path().join("f.flow");
        write_flow(&path, &flow).unwrap();
        assert_eq!(read_flow(&path).unwrap(), flow);
        fs::write(&path, b"garbage!").unwrap();
        assert!(read_flow(&path).is_err());
    }

    #[test]
    fn affine_flow_maps_box_corners() {
        let from = PixelBox {
            x0: 10.0,
            y0: 4.0,
            x1: 30.0,
            y1: 44.0,
        };
        let to = PixelBox {
            x0: 0.0,
            y0: 0.0,
            x1: 40.0,
            y1: 20.0,
        };
        let f = affine_box_flow(&from, &to, (20, 40));
        // pixel centre (0.5, 0.5) maps to (10.25, 5.0)
        assert!((0.5 + f.get(0, 0, 0) - 10.25).abs() < 1e-12);
        assert!((0.5 + f.get(0, 0, 1) - 5.0).abs() < 1e-12);
    }
}
