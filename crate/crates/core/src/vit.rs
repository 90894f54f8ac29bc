//! Small pre-norm Vision Transformer used both as the condition encoder
//! (teacher) and as the self-supervised student.
//!
//! The network exposes three outputs per image:
//!
//! * the class token's softmax attention over patch keys, per head and per
//!   layer ([`AttentionMap`]);
//! * the condition token sequence `[cls, patch_1 .. patch_P]` after a linear
//!   map to `condition_dim` ([`ConditionEmbedding`]);
//! * projection-head logits: cosine similarities between the L2-normalized
//!   bottleneck and `proj_dim` unit-norm prototypes, used by distillation.
//!
//! Inputs whose patch grid differs from the configured one (local crops) use
//! bilinearly interpolated positional embeddings.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Bound, Graph, ParamSet, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{softmax, Matrix};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    /// `(height, width)` of global inputs in pixels.
    pub image_size: (usize, usize),
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    /// Output size of the projection head.
    pub proj_dim: usize,
    pub head_hidden: usize,
    pub head_bottleneck: usize,
    /// Width of the condition tokens consumed by cross-attention.
    pub condition_dim: usize,
    /// Resolution local crops are resized to before encoding.
    pub local_size: (usize, usize),
    pub seed: u64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: (64, 48),
            patch_size: 16,
            embed_dim: 128,
            num_heads: 4,
            depth: 4,
            mlp_ratio: 4,
            proj_dim: 256,
            head_hidden: 256,
            head_bottleneck: 64,
            condition_dim: 128,
            local_size: (32, 32),
            seed: 0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vit.patch_size", self.patch_size),
            ("vit.embed_dim", self.embed_dim),
            ("vit.num_heads", self.num_heads),
            ("vit.depth", self.depth),
            ("vit.mlp_ratio", self.mlp_ratio),
            ("vit.proj_dim", self.proj_dim),
            ("vit.head_hidden", self.head_hidden),
            ("vit.head_bottleneck", self.head_bottleneck),
            ("vit.condition_dim", self.condition_dim),
            ("vit.image_height", self.image_size.0),
            ("vit.image_width", self.image_size.1),
            ("vit.local_height", self.local_size.0),
            ("vit.local_width", self.local_size.1),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        let p = self.patch_size;
        if self.image_size.0 % p != 0 || self.image_size.1 % p != 0 {
            return Err(Error::config(
                "vit.image_size",
                format!("{:?} is not divisible by patch size {p}", self.image_size),
            ));
        }
        if self.local_size.0 % p != 0 || self.local_size.1 % p != 0 {
            return Err(Error::config(
                "vit.local_size",
                format!("{:?} is not divisible by patch size {p}", self.local_size),
            ));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(
                "vit.num_heads",
                format!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.num_heads),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch_size, self.image_size.1 / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Class-token attention over patch keys for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// `num_heads × P`, each row a probability vector.
    pub heads: Matrix,
    /// `(rows, cols)` of the patch grid.
    pub grid: (usize, usize),
}

impl AttentionMap {
    pub fn num_heads(&self) -> usize {
        self.heads.rows()
    }

    pub fn head(&self, h: usize) -> &[f64] {
        self.heads.row(h)
    }

    /// Head-averaged map (still sums to one).
    pub fn mean(&self) -> Vec<f64> {
        self.heads.mean_rows().into_vec()
    }
}

/// Condition tokens `c`: class token followed by patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding {
    pub tokens: Matrix,
}

impl ConditionEmbedding {
    pub fn num_tokens(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

#[derive(Clone, Debug)]
pub struct ViTOutput {
    pub condition: ConditionEmbedding,
    /// Final-layer class attention.
    pub attention: AttentionMap,
    pub proj_logits: Vec<f64>,
    /// `softmax(proj_logits)`; callers apply their own temperature to the logits.
    pub proj_dist: Vec<f64>,
    /// Final normalized class-token embedding.
    pub cls_embedding: Vec<f64>,
}

/// Graph handles produced by one forward pass.
pub struct ViTTrace {
    /// Final layer-normalized tokens, `(1 + P) × embed_dim`.
    pub tokens: Var,
    pub cls: Var,
    pub proj_logits: Var,
    /// Per layer, per head softmax attention, `(1 + P) × (1 + P)`.
    pub attention: Vec<Vec<Var>>,
    pub grid: (usize, usize),
}

impl ViTTrace {
    /// Class-token attention of `layer`, restricted to patch keys and
    /// renormalized per head.
    pub fn class_attention(&self, graph: &Graph, layer: usize) -> AttentionMap {
        let heads = &self.attention[layer];
        let p = self.grid.0 * self.grid.1;
        let mut m = Matrix::zeros(heads.len(), p);
        for (h, &var) in heads.iter().enumerate() {
            let row = &graph.value(var).row(0)[1..];
            let total: f64 = row.iter().sum();
            for (o, v) in m.row_mut(h).iter_mut().zip(row) {
                *o = v / total;
            }
        }
        AttentionMap {
            heads: m,
            grid: self.grid,
        }
    }
}

/// Parameters and config of one network instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ViT {
    pub config: ViTConfig,
    pub params: ParamSet,
}

/// Named parameters with the shapes `config` dictates: truncated-normal
/// (std 0.02) weights, zero biases, unit layer-norm gains.
pub fn init_params(config: &ViTConfig) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.embed_dim;
    let p = config.patch_size;
    let hidden = d * config.mlp_ratio;
    let mut ps = ParamSet::new();
    let mut w = |ps: &mut ParamSet, name: &str, r: usize, c: usize| {
        ps.insert(name, Matrix::truncated_normal(r, c, 0.02, &mut rng));
    };
    w(&mut ps, "patch_embed.weight", p * p * 3, d);
    ps.insert("patch_embed.bias", Matrix::zeros(1, d));
    w(&mut ps, "cls_token", 1, d);
    w(&mut ps, "pos_embed", 1 + config.num_patches(), d);
    for i in 0..config.depth {
        let b = format!("blocks.{i}");
        ps.insert(format!("{b}.norm1.weight"), Matrix::filled(1, d, 1.0));
        ps.insert(format!("{b}.norm1.bias"), Matrix::zeros(1, d));
        w(&mut ps, &format!("{b}.attn.qkv.weight"), d, 3 * d);
        ps.insert(format!("{b}.attn.qkv.bias"), Matrix::zeros(1, 3 * d));
        w(&mut ps, &format!("{b}.attn.proj.weight"), d, d);
        ps.insert(format!("{b}.attn.proj.bias"), Matrix::zeros(1, d));
        ps.insert(format!("{b}.norm2.weight"), Matrix::filled(1, d, 1.0));
        ps.insert(format!("{b}.norm2.bias"), Matrix::zeros(1, d));
        w(&mut ps, &format!("{b}.mlp.fc1.weight"), d, hidden);
        ps.insert(format!("{b}.mlp.fc1.bias"), Matrix::zeros(1, hidden));
        w(&mut ps, &format!("{b}.mlp.fc2.weight"), hidden, d);
        ps.insert(format!("{b}.mlp.fc2.bias"), Matrix::zeros(1, d));
    }
    ps.insert("norm.weight", Matrix::filled(1, d, 1.0));
    ps.insert("norm.bias", Matrix::zeros(1, d));
    w(&mut ps, "head.fc1.weight", d, config.head_hidden);
    ps.insert("head.fc1.bias", Matrix::zeros(1, config.head_hidden));
    w(&mut ps, "head.fc2.weight", config.head_hidden, config.head_bottleneck);
    ps.insert("head.fc2.bias", Matrix::zeros(1, config.head_bottleneck));
    w(&mut ps, "head.last.weight", config.proj_dim, config.head_bottleneck);
    w(&mut ps, "condition.weight", d, config.condition_dim);
    ps.insert("condition.bias", Matrix::zeros(1, config.condition_dim));
    ps
}

/// Splits a `(rows·p) × (cols·p) × C` image into `P × (p·p·C)` patch rows,
/// grid row-major, each patch flattened as `(y, x, c)`.
pub fn patchify(image: &Image, patch: usize) -> Matrix {
    let (gr, gc) = (image.height() / patch, image.width() / patch);
    let ch = image.channels();
    let mut m = Matrix::zeros(gr * gc, patch * patch * ch);
    for r in 0..gr {
        for c in 0..gc {
            let row = m.row_mut(r * gc + c);
            let mut k = 0;
            for y in 0..patch {
                for x in 0..patch {
                    for v in image.pixel(r * patch + y, c * patch + x) {
                        row[k] = *v;
                        k += 1;
                    }
                }
            }
        }
    }
    m
}

/// Bilinear (half-pixel-centre) resampling matrix from a `from` grid to a
/// `to` grid: `to_values = M · from_values`.
pub fn grid_interpolation(from: (usize, usize), to: (usize, usize)) -> Matrix {
    let axis = |n_from: usize, n_to: usize, i: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * n_from as f64 / n_to as f64 - 0.5).clamp(0.0, (n_from - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_from - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut m = Matrix::zeros(to.0 * to.1, from.0 * from.1);
    for r in 0..to.0 {
        let (r0, r1, fr) = axis(from.0, to.0, r);
        for c in 0..to.1 {
            let (c0, c1, fc) = axis(from.1, to.1, c);
            let row = r * to.1 + c;
            m[(row, r0 * from.1 + c0)] += (1.0 - fr) * (1.0 - fc);
            m[(row, r0 * from.1 + c1)] += (1.0 - fr) * fc;
            m[(row, r1 * from.1 + c0)] += fr * (1.0 - fc);
            m[(row, r1 * from.1 + c1)] += fr * fc;
        }
    }
    m
}

fn check_finite(graph: &Graph, v: Var, context: &str, index: usize) -> Result<()> {
    if graph.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            context: context.to_string(),
            index,
        })
    }
}

/// Records a full forward pass of `image` (already normalized) on `graph`.
pub fn forward_graph(graph: &mut Graph, p: &Bound, config: &ViTConfig, image: &Image) -> Result<ViTTrace> {
    let patch = config.patch_size;
    if image.channels() != 3 || image.height() % patch != 0 || image.width() % patch != 0 {
        return Err(Error::config(
            "vit.patch_size",
            format!(
                "input {}x{}x{} is not a 3-channel image divisible by patch size {patch}",
                image.height(),
                image.width(),
                image.channels()
            ),
        ));
    }
    let grid = (image.height() / patch, image.width() / patch);
    let n = grid.0 * grid.1;
    let native = config.grid();
    let d = config.embed_dim;
    let heads = config.num_heads;
    let hd = config.head_dim();

    let patches = graph.constant(patchify(image, patch));
    let emb = graph.linear(patches, p.var("patch_embed.weight"), p.var("patch_embed.bias"));
    let pos_all = p.var("pos_embed");
    let pos = if grid == native {
        pos_all
    } else {
        let cls_pos = graph.slice_rows(pos_all, 0, 1);
        let patch_pos = graph.slice_rows(pos_all, 1, config.num_patches());
        let interp = graph.constant(grid_interpolation(native, grid));
        let resampled = graph.matmul(interp, patch_pos);
        graph.concat_rows(&[cls_pos, resampled])
    };
    let x = graph.concat_rows(&[p.var("cls_token"), emb]);
    let mut x = graph.add(x, pos);

    let scale = 1.0 / (hd as f64).sqrt();
    let mut attention = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        let b = |s: &str| p.var(&format!("blocks.{i}.{s}"));
        let h = graph.layer_norm(x, b("norm1.weight"), b("norm1.bias"), LN_EPS);
        let qkv = graph.linear(h, b("attn.qkv.weight"), b("attn.qkv.bias"));
        let mut outs = Vec::with_capacity(heads);
        let mut layer_attn = Vec::with_capacity(heads);
        for head in 0..heads {
            let q = graph.slice_cols(qkv, head * hd, hd);
            let k = graph.slice_cols(qkv, d + head * hd, hd);
            let v = graph.slice_cols(qkv, 2 * d + head * hd, hd);
            let scores = graph.matmul_nt(q, k);
            let scores = graph.scale(scores, scale);
            let a = graph.softmax_rows(scores);
            layer_attn.push(a);
            outs.push(graph.matmul(a, v));
        }
        let o = if heads == 1 { outs[0] } else { graph.concat_cols(&outs) };
        let o = graph.linear(o, b("attn.proj.weight"), b("attn.proj.bias"));
        x = graph.add(x, o);
        let h = graph.layer_norm(x, b("norm2.weight"), b("norm2.bias"), LN_EPS);
        let h = graph.linear(h, b("mlp.fc1.weight"), b("mlp.fc1.bias"));
        let h = graph.gelu(h);
        let h = graph.linear(h, b("mlp.fc2.weight"), b("mlp.fc2.bias"));
        x = graph.add(x, h);
        check_finite(graph, x, "vit block", i)?;
        attention.push(layer_attn);
    }
    let tokens = graph.layer_norm(x, p.var("norm.weight"), p.var("norm.bias"), LN_EPS);
    debug_assert_eq!(graph.value(tokens).rows(), 1 + n);
    let cls = graph.slice_rows(tokens, 0, 1);
    let h = graph.linear(cls, p.var("head.fc1.weight"), p.var("head.fc1.bias"));
    let h = graph.gelu(h);
    let h = graph.linear(h, p.var("head.fc2.weight"), p.var("head.fc2.bias"));
    let h = graph.l2_normalize_rows(h);
    // prototypes are unit rows, so logits are cosine similarities
    let prototypes = graph.l2_normalize_rows(p.var("head.last.weight"));
    let proj_logits = graph.matmul_nt(h, prototypes);
    check_finite(graph, proj_logits, "vit projection head", config.depth)?;
    Ok(ViTTrace {
        tokens,
        cls,
        proj_logits,
        attention,
        grid,
    })
}

impl ViT {
    pub fn new(config: ViTConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ViTConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = init_params(&config);
        let params = checkpoint::conform(Path::new("<memory>"), params, &expected)?;
        Ok(Self { config, params })
    }

    fn trace(&self, image: &Image) -> Result<(Graph, ViTTrace)> {
        let mut graph = Graph::new();
        let bound = self.params.bind(&mut graph, false);
        let trace = forward_graph(&mut graph, &bound, &self.config, image)?;
        Ok((graph, trace))
    }

    /// Full inference pass over a normalized image.
    pub fn forward(&self, image: &Image) -> Result<ViTOutput> {
        let (graph, trace) = self.trace(image)?;
        let tokens = graph.value(trace.tokens).clone();
        let condition = self.project_condition(&tokens)?;
        let attention = trace.class_attention(&graph, self.config.depth - 1);
        let proj_logits = graph.value(trace.proj_logits).data().to_vec();
        let proj_dist = softmax(&proj_logits);
        let cls_embedding = graph.value(trace.cls).data().to_vec();
        Ok(ViTOutput {
            condition,
            attention,
            proj_logits,
            proj_dist,
            cls_embedding,
        })
    }

    /// Class-token attention of `layer`, restricted to patch keys.
    pub fn class_attention(&self, image: &Image, layer: usize) -> Result<AttentionMap> {
        if layer >= self.config.depth {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} out of range for depth {}",
                self.config.depth
            )));
        }
        let (graph, trace) = self.trace(image)?;
        Ok(trace.class_attention(&graph, layer))
    }

    /// Class attention for every layer.
    pub fn all_class_attention(&self, image: &Image) -> Result<Vec<AttentionMap>> {
        let (graph, trace) = self.trace(image)?;
        Ok((0..self.config.depth)
            .map(|l| trace.class_attention(&graph, l))
            .collect())
    }

    /// Tokenwise affine map from backbone width to `condition_dim`.
    pub fn project_condition(&self, backbone_tokens: &Matrix) -> Result<ConditionEmbedding> {
        let w = self.params.get("condition.weight").expect("condition.weight");
        let b = self.params.get("condition.bias").expect("condition.bias");
        if backbone_tokens.cols() != w.rows() {
            return Err(Error::Shape(format!(
                "backbone tokens have width {}, condition map expects {}",
                backbone_tokens.cols(),
                w.rows()
            )));
        }
        let mut tokens = backbone_tokens.matmul(w);
        for r in 0..tokens.rows() {
            for (o, bv) in tokens.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(ConditionEmbedding { tokens })
    }

    /// Condition tokens for a garment image.
    pub fn encode_condition(&self, image: &Image) -> Result<ConditionEmbedding> {
        Ok(self.forward(image)?.condition)
    }

    pub fn save(&self, path: &Path, tag: Option<&str>) -> Result<()> {
        checkpoint::save(path, &self.params, "vit", tag, serde_json::to_value(&self.config)?)
    }

    /// Loads a checkpoint, validating every array shape against its config.
    pub fn load(path: &Path) -> Result<Self> {
        let (params, sidecar) = checkpoint::load(path)?;
        if sidecar.kind != "vit" {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("expected a vit checkpoint, found `{}`", sidecar.kind),
            });
        }
        let config: ViTConfig = serde_json::from_value(sidecar.config)?;
        config.validate()?;
        let expected = init_params(&config);
        let params = checkpoint::conform(path, params, &expected)?;
        Ok(Self { config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ViTConfig {
        ViTConfig {
            image_size: (16, 16),
            patch_size: 8,
            embed_dim: 8,
            num_heads: 2,
            depth: 2,
            mlp_ratio: 2,
            proj_dim: 6,
            head_hidden: 8,
            head_bottleneck: 4,
            condition_dim: 5,
            local_size: (8, 8),
            seed: 1,
        }
    }

    fn test_image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0 - 0.5)
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.num_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.image_size = (20, 16);
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn token_count_follows_patch_grid() {
        let cfg = ViTConfig {
            image_size: (64, 48),
            patch_size: 16,
            embed_dim: 8,
            num_heads: 2,
            depth: 1,
            ..ViTConfig::default()
        };
        let vit = ViT::new(cfg).unwrap();
        let out = vit.forward(&test_image(64, 48)).unwrap();
        assert_eq!(out.attention.grid, (4, 3));
        assert_eq!(out.condition.num_tokens(), 13);
        assert_eq!(out.condition.dim(), vit.config.condition_dim);
    }

    #[test]
    fn attention_rows_are_distributions_for_native_and_local_grids() {
        let vit = ViT::new(tiny()).unwrap();
        for img in [test_image(16, 16), test_image(8, 8), test_image(24, 16)] {
            for map in vit.all_class_attention(&img).unwrap() {
                for h in 0..map.num_heads() {
                    let row = map.head(h);
                    assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
                assert!((map.mean().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_out_of_range_is_rejected() {
        let vit = ViT::new(tiny()).unwrap();
        assert!(matches!(
            vit.class_attention(&test_image(16, 16), 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn mismatched_input_is_a_config_error() {
        let vit = ViT::new(tiny()).unwrap();
        assert!(matches!(vit.forward(&test_image(12, 16)), Err(Error::Config { .. })));
    }

    #[test]
    fn identical_heads_give_identical_rows() {
        let mut vit = ViT::new(tiny()).unwrap();
        // copy head 0's q/k/v columns into head 1 for every layer
        let (d, hd) = (vit.config.embed_dim, vit.config.head_dim());
        for i in 0..vit.config.depth {
            let w = vit.params.get_mut(&format!("blocks.{i}.attn.qkv.weight")).unwrap();
            for r in 0..d {
                for part in 0..3 {
                    for c in 0..hd {
                        w[(r, part * d + hd + c)] = w[(r, part * d + c)];
                    }
                }
            }
        }
        let map = vit.class_attention(&test_image(16, 16), 1).unwrap();
        assert_eq!(map.head(0), map.head(1));
    }

    #[test]
    fn forward_is_deterministic() {
        let vit = ViT::new(tiny()).unwrap();
        let a = vit.forward(&test_image(16, 16)).unwrap();
        let b = vit.forward(&test_image(16, 16)).unwrap();
        assert_eq!(a.proj_logits, b.proj_logits);
        assert_eq!(a.condition, b.condition);
    }

    #[test]
    fn project_condition_identity_and_zero() {
        let mut cfg = tiny();
        cfg.condition_dim = cfg.embed_dim;
        let mut vit = ViT::new(cfg).unwrap();
        let tokens = Matrix::from_fn(3, 8, |r, c| (r * 8 + c) as f64 * 0.1);
        vit.params.insert("condition.weight", Matrix::eye(8, 8));
        assert_eq!(vit.project_condition(&tokens).unwrap().tokens, tokens);
        vit.params.insert("condition.weight", Matrix::zeros(8, 8));
        assert!(vit
            .project_condition(&tokens)
            .unwrap()
            .tokens
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(matches!(
            vit.project_condition(&Matrix::zeros(3, 7)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn interpolation_rows_are_convex() {
        let m = grid_interpolation((4, 3), (2, 2));
        for r in 0..m.rows() {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(m.row(r).iter().all(|&v| v >= 0.0));
        }
        // same grid is the identity
        assert_eq!(grid_interpolation((4, 3), (4, 3)), Matrix::eye(12, 12));
    }

    #[test]
    fn checkpoint_round_trip_validates_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vit.safetensors");
        let vit = ViT::new(tiny()).unwrap();
        vit.save(&path, Some("teacher")).unwrap();
        let back = ViT::load(&path).unwrap();
        assert_eq!(back.config, vit.config);
        for ((_, a), (_, b)) in back.params.iter().zip(vit.params.iter()) {
            assert!(a.max_abs_diff(b) < 1e-7);
        }
        // tamper with the config so shapes no longer match
        let side = checkpoint::sidecar_path(&path);
        let text = std::fs::read_to_string(&side).unwrap().replace("\"embed_dim\": 8", "\"embed_dim\": 16");
        std::fs::write(&side, text).unwrap();
        assert!(matches!(ViT::load(&path), Err(Error::Checkpoint { .. })));
    }
}
