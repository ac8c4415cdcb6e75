//! Vision Transformer backbone: patch embedding, pre-norm attention blocks,
//! class token, learned positional table and a learned mask token.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::optim::Parameters;
use crate::tensor::{Result, Tensor, TensorError};

pub const DEFAULT_PATCH: usize = 14;
pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    /// Side of the grid the positional table is trained for.
    pub image_size: usize,
}

/// The five published backbone sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    Small,
    Base,
    Large,
    Huge,
    Giant,
}

impl ModelSize {
    pub const ALL: [ModelSize; 5] = [
        Self::Small,
        Self::Base,
        Self::Large,
        Self::Huge,
        Self::Giant,
    ];

    /// (layers, embedding dim, hidden dim, heads).
    pub fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            Self::Small => (12, 384, 1536, 6),
            Self::Base => (12, 768, 3072, 12),
            Self::Large => (24, 1024, 4096, 16),
            Self::Huge => (32, 1280, 5120, 16),
            Self::Giant => (40, 1536, 6144, 24),
        }
    }

    /// Reported parameter count in millions.
    pub fn reported_millions(self) -> f64 {
        match self {
            Self::Small => 22.0,
            Self::Base => 86.0,
            Self::Large => 307.0,
            Self::Huge => 632.0,
            Self::Giant => 1100.0,
        }
    }

    pub fn config(self) -> ViTConfig {
        let (layers, embed_dim, hidden_dim, heads) = self.dims();
        ViTConfig {
            layers,
            embed_dim,
            hidden_dim,
            heads,
            patch_size: DEFAULT_PATCH,
            image_size: 224,
        }
    }
}

impl fmt::Display for ModelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Small => "small",
            Self::Base => "base",
            Self::Large => "large",
            Self::Huge => "huge",
            Self::Giant => "giant",
        };
        f.write_str(s)
    }
}

impl FromStr for ModelSize {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "small" => Ok(Self::Small),
            "base" => Ok(Self::Base),
            "large" => Ok(Self::Large),
            "huge" => Ok(Self::Huge),
            "giant" => Ok(Self::Giant),
            other => Err(format!("unknown model size {other:?}")),
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TensorError::Param(m));
        if self.embed_dim == 0
            || self.hidden_dim == 0
            || self.heads == 0
            || self.patch_size == 0
            || self.image_size == 0
        {
            return bad(format!("all ViT dimensions must be positive: {self:?}"));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch-grid side for a square crop, or an error naming the required multiple.
    pub fn grid_for(&self, crop: usize) -> Result<usize> {
        if crop == 0 || !crop.is_multiple_of(self.patch_size) {
            return Err(TensorError::Shape(format!(
                "crop size {crop} must be a positive multiple of the patch size {}",
                self.patch_size
            )));
        }
        Ok(crop / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Closed-form parameter count; never allocates.
pub fn param_count(cfg: &ViTConfig) -> u64 {
    let d = cfg.embed_dim as u64;
    let h = cfg.hidden_dim as u64;
    let p = cfg.patch_dim() as u64;
    let g = cfg.grid() as u64;
    let embed = p * d + d; // patch projection
    let tokens = 2 * d; // class + mask token
    let pos = (1 + g * g) * d;
    let block = 2 * d // ln1
        + d * 3 * d + 3 * d // qkv
        + d * d + d // attention output
        + 2 * d // ln2
        + d * h + h // mlp in
        + h * d + d; // mlp out
    let final_norm = 2 * d;
    embed + tokens + pos + cfg.layers as u64 * block + final_norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams {
    pub config: ViTConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls_token: Tensor,
    pub mask_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm_g: Tensor,
    pub norm_b: Tensor,
}

/// Standard deviation `1/√fan_in`, which keeps activations at unit scale.
pub(crate) fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    // Truncate at two standard deviations.
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

impl ViTParams {
    /// Truncated-normal weights with fan-in scaling (std `1/√fan_in`),
    /// class token and positional table at std 0.02, zero biases, unit norm
    /// gains and a zero mask token.
    pub fn init(config: ViTConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.embed_dim, config.hidden_dim);
        let g = config.grid();
        let blocks = (0..config.layers)
            .map(|_| BlockParams {
                ln1_g: Tensor::full(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                qkv_w: normal_tensor(&[d, 3 * d], fan_in_std(d), rng),
                qkv_b: Tensor::zeros(&[3 * d]),
                proj_w: normal_tensor(&[d, d], fan_in_std(d), rng),
                proj_b: Tensor::zeros(&[d]),
                ln2_g: Tensor::full(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                fc1_w: normal_tensor(&[d, h], fan_in_std(d), rng),
                fc1_b: Tensor::zeros(&[h]),
                fc2_w: normal_tensor(&[h, d], fan_in_std(h), rng),
                fc2_b: Tensor::zeros(&[d]),
            })
            .collect();
        let mut p = Self {
            config,
            patch_w: normal_tensor(
                &[config.patch_dim(), d],
                fan_in_std(config.patch_dim()),
                rng,
            ),
            patch_b: Tensor::zeros(&[d]),
            cls_token: normal_tensor(&[d], INIT_STD, rng),
            mask_token: Tensor::zeros(&[d]),
            pos_embed: normal_tensor(&[1 + g * g, d], INIT_STD, rng),
            blocks,
            norm_g: Tensor::full(&[d], 1.0),
            norm_b: Tensor::zeros(&[d]),
        };
        p.set_requires_grad(true);
        Ok(p)
    }

    /// Zero-filled parameters of the right shapes (checkpoint loading target).
    pub fn zeros(config: ViTConfig) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.embed_dim, config.hidden_dim);
        let g = config.grid();
        let z = |s: &[usize]| Tensor::zeros(s);
        Ok(Self {
            config,
            patch_w: z(&[config.patch_dim(), d]),
            patch_b: z(&[d]),
            cls_token: z(&[d]),
            mask_token: z(&[d]),
            pos_embed: z(&[1 + g * g, d]),
            blocks: (0..config.layers)
                .map(|_| BlockParams {
                    ln1_g: z(&[d]),
                    ln1_b: z(&[d]),
                    qkv_w: z(&[d, 3 * d]),
                    qkv_b: z(&[3 * d]),
                    proj_w: z(&[d, d]),
                    proj_b: z(&[d]),
                    ln2_g: z(&[d]),
                    ln2_b: z(&[d]),
                    fc1_w: z(&[d, h]),
                    fc1_b: z(&[h]),
                    fc2_w: z(&[h, d]),
                    fc2_b: z(&[d]),
                })
                .collect(),
            norm_g: z(&[d]),
            norm_b: z(&[d]),
        })
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> ViTVars {
        ViTVars {
            patch_w: g.param(&self.patch_w),
            patch_b: g.param(&self.patch_b),
            cls_token: g.param(&self.cls_token),
            mask_token: g.param(&self.mask_token),
            pos_embed: g.param(&self.pos_embed),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockVars {
                    ln1_g: g.param(&b.ln1_g),
                    ln1_b: g.param(&b.ln1_b),
                    qkv_w: g.param(&b.qkv_w),
                    qkv_b: g.param(&b.qkv_b),
                    proj_w: g.param(&b.proj_w),
                    proj_b: g.param(&b.proj_b),
                    ln2_g: g.param(&b.ln2_g),
                    ln2_b: g.param(&b.ln2_b),
                    fc1_w: g.param(&b.fc1_w),
                    fc1_b: g.param(&b.fc1_b),
                    fc2_w: g.param(&b.fc2_w),
                    fc2_b: g.param(&b.fc2_b),
                })
                .collect(),
            norm_g: g.param(&self.norm_g),
            norm_b: g.param(&self.norm_b),
        }
    }
}

impl BlockParams {
    fn visit_all<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        for (name, t) in [
            ("ln1.gamma", &self.ln1_g),
            ("ln1.beta", &self.ln1_b),
            ("attn.qkv.weight", &self.qkv_w),
            ("attn.qkv.bias", &self.qkv_b),
            ("attn.proj.weight", &self.proj_w),
            ("attn.proj.bias", &self.proj_b),
            ("ln2.gamma", &self.ln2_g),
            ("ln2.beta", &self.ln2_b),
            ("mlp.fc1.weight", &self.fc1_w),
            ("mlp.fc1.bias", &self.fc1_b),
            ("mlp.fc2.weight", &self.fc2_w),
            ("mlp.fc2.bias", &self.fc2_b),
        ] {
            f(&format!("{prefix}.{name}"), t);
        }
    }

    fn visit_all_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (name, t) in [
            ("ln1.gamma", &mut self.ln1_g),
            ("ln1.beta", &mut self.ln1_b),
            ("attn.qkv.weight", &mut self.qkv_w),
            ("attn.qkv.bias", &mut self.qkv_b),
            ("attn.proj.weight", &mut self.proj_w),
            ("attn.proj.bias", &mut self.proj_b),
            ("ln2.gamma", &mut self.ln2_g),
            ("ln2.beta", &mut self.ln2_b),
            ("mlp.fc1.weight", &mut self.fc1_w),
            ("mlp.fc1.bias", &mut self.fc1_b),
            ("mlp.fc2.weight", &mut self.fc2_w),
            ("mlp.fc2.bias", &mut self.fc2_b),
        ] {
            f(&format!("{prefix}.{name}"), t);
        }
    }
}

impl Parameters for ViTParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f("patch_embed.weight", &self.patch_w);
        f("patch_embed.bias", &self.patch_b);
        f("cls_token", &self.cls_token);
        f("mask_token", &self.mask_token);
        f("pos_embed", &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_all(&format!("blocks.{i}"), f);
        }
        f("norm.gamma", &self.norm_g);
        f("norm.beta", &self.norm_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("patch_embed.weight", &mut self.patch_w);
        f("patch_embed.bias", &mut self.patch_b);
        f("cls_token", &mut self.cls_token);
        f("mask_token", &mut self.mask_token);
        f("pos_embed", &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_all_mut(&format!("blocks.{i}"), f);
        }
        f("norm.gamma", &mut self.norm_g);
        f("norm.beta", &mut self.norm_b);
    }
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// Graph handles for a bound [`ViTParams`], in the same order as `Parameters::visit`.
#[derive(Debug, Clone)]
pub struct ViTVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub cls_token: Var,
    pub mask_token: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub norm_g: Var,
    pub norm_b: Var,
}

impl ViTVars {
    pub fn ordered(&self) -> Vec<Var> {
        let mut v = vec![
            self.patch_w,
            self.patch_b,
            self.cls_token,
            self.mask_token,
            self.pos_embed,
        ];
        for b in &self.blocks {
            v.extend([
                b.ln1_g, b.ln1_b, b.qkv_w, b.qkv_b, b.proj_w, b.proj_b, b.ln2_g, b.ln2_b, b.fc1_w,
                b.fc1_b, b.fc2_w, b.fc2_b,
            ]);
        }
        v.extend([self.norm_g, self.norm_b]);
        v
    }
}

/// Moves gradients for `vars` from the graph into the matching parameter tensors.
pub fn collect_grads(params: &mut dyn Parameters, g: &Graph, vars: &[Var]) -> Result<()> {
    let mut i = 0;
    let mut err = None;
    params.visit_mut(&mut |name, t| {
        let v = vars[i];
        i += 1;
        if !t.requires_grad() || err.is_some() {
            return;
        }
        let grad = g.grad_or_zero(v);
        if grad.iter().any(|x| !x.is_finite()) {
            err = Some(TensorError::Validation(format!(
                "non-finite gradient for {name}"
            )));
            return;
        }
        if let Err(e) = t.accumulate_grad(&grad) {
            err = Some(e);
        }
    });
    err.map_or(Ok(()), Err)
}

/// Fixed pixel standardization applied before patch embedding. Without it
/// the mean intensity dominates every patch embedding and all images encode
/// to nearly the same class token.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Splits square images into flattened `patch × patch × 3` rows, one row per
/// patch in raster order, giving `[N·G², 3·patch²]`. Pixels are standardized
/// with [`PIXEL_MEAN`] and [`PIXEL_STD`].
pub fn patchify(images: &[&Image], patch: usize) -> Result<(Tensor, usize)> {
    let first = images
        .first()
        .ok_or_else(|| TensorError::Shape("no images".into()))?;
    let side = first.height;
    for img in images {
        if img.height != img.width || img.height != side {
            return Err(TensorError::Shape(format!(
                "images must be square and equally sized, got {}×{} (expected {side}×{side})",
                img.height, img.width
            )));
        }
    }
    if side == 0 || side % patch != 0 {
        return Err(TensorError::Shape(format!(
            "image side {side} must be a positive multiple of the patch size {patch}"
        )));
    }
    let g = side / patch;
    let pd = 3 * patch * patch;
    let mut data = Vec::with_capacity(images.len() * g * g * pd);
    for img in images {
        for gy in 0..g {
            for gx in 0..g {
                for dy in 0..patch {
                    let row = (gy * patch + dy) * side + gx * patch;
                    data.extend(
                        img.data[row * 3..(row + patch) * 3]
                            .iter()
                            .map(|&v| (v as f64 - PIXEL_MEAN) / PIXEL_STD),
                    );
                }
            }
        }
    }
    Ok((Tensor::new(vec![images.len() * g * g, pd], data)?, g))
}

/// 1-D bilinear weights mapping `old` grid positions onto `new` positions
/// (half-pixel centers, edge-clamped); row `i` sums to one.
fn interp_weights(old: usize, new: usize) -> Vec<Vec<f64>> {
    (0..new)
        .map(|i| {
            let mut w = vec![0.0; old];
            let src =
                ((i as f64 + 0.5) * old as f64 / new as f64 - 0.5).clamp(0.0, (old - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(old - 1);
            let f = src - i0 as f64;
            w[i0] += 1.0 - f;
            w[i1] += f;
            w
        })
        .collect()
}

/// `[new², old²]` matrix that bilinearly resamples a positional grid.
pub fn pos_interp_matrix(old: usize, new: usize) -> Tensor {
    let w = interp_weights(old, new);
    let (n2, o2) = (new * new, old * old);
    Tensor::from_fn(&[n2, o2], |idx| {
        let (r, c) = (idx / o2, idx % o2);
        w[r / new][c / old] * w[r % new][c % old]
    })
}

fn positional(g: &mut Graph, vars: &ViTVars, cfg: &ViTConfig, grid: usize) -> Result<Var> {
    let trained = cfg.grid();
    if grid == trained {
        return Ok(vars.pos_embed);
    }
    let cls_pos = g.gather_rows(vars.pos_embed, &[0])?;
    let rows: Vec<usize> = (1..=trained * trained).collect();
    let patch_pos = g.gather_rows(vars.pos_embed, &rows)?;
    let m = g.constant(pos_interp_matrix(trained, grid));
    let resampled = g.matmul(m, patch_pos)?;
    g.concat_rows(&[cls_pos, resampled])
}

/// One pre-norm block: `x + attn(LN(x))`, then `+ mlp(LN(·))`.
pub fn attention_block(
    g: &mut Graph,
    x: Var,
    b: &BlockVars,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<Var> {
    let h = g.layer_norm(x, b.ln1_g, b.ln1_b, LN_EPS)?;
    let qkv = g.linear(h, b.qkv_w, Some(b.qkv_b))?;
    let a = g.attention(qkv, batch, seq, heads)?;
    let o = g.linear(a, b.proj_w, Some(b.proj_b))?;
    let x = g.add(x, o)?;
    let h = g.layer_norm(x, b.ln2_g, b.ln2_b, LN_EPS)?;
    let f = g.linear(h, b.fc1_w, Some(b.fc1_b))?;
    let f = g.gelu(f);
    let f = g.linear(f, b.fc2_w, Some(b.fc2_b))?;
    g.add(x, f)
}

/// Output of a batched encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct EncodedBatch {
    /// `[N, D]`
    pub cls: Var,
    /// `[N·G², D]`
    pub patches: Var,
    pub batch: usize,
    pub grid: usize,
}

/// Tokens entering the first block: `[N·(1+G²), D]`.
pub fn embed(
    g: &mut Graph,
    vars: &ViTVars,
    cfg: &ViTConfig,
    images: &[&Image],
    masks: &[&[usize]],
) -> Result<(Var, usize)> {
    let (pixels, grid) = patchify(images, cfg.patch_size)?;
    let p = grid * grid;
    let mut flags = vec![false; images.len() * p];
    if !masks.is_empty() && masks.len() != images.len() {
        return Err(TensorError::Shape(format!(
            "{} mask sets for {} images",
            masks.len(),
            images.len()
        )));
    }
    for (n, m) in masks.iter().enumerate() {
        for &idx in m.iter() {
            if idx >= p {
                return Err(TensorError::Shape(format!(
                    "mask index {idx} outside a {grid}×{grid} patch grid"
                )));
            }
            flags[n * p + idx] = true;
        }
    }
    let pixels = g.constant(pixels);
    let patches = g.linear(pixels, vars.patch_w, Some(vars.patch_b))?;
    let pos = positional(g, vars, cfg, grid)?;
    let tokens = g.embed_tokens(
        patches,
        vars.cls_token,
        vars.mask_token,
        pos,
        images.len(),
        &flags,
    )?;
    Ok((tokens, grid))
}

/// Full encoder over a batch of equally sized square images. `masks` is
/// either empty or holds one patch-index set per image.
pub fn encode(
    g: &mut Graph,
    vars: &ViTVars,
    cfg: &ViTConfig,
    images: &[&Image],
    masks: &[&[usize]],
) -> Result<EncodedBatch> {
    let (mut x, grid) = embed(g, vars, cfg, images, masks)?;
    let batch = images.len();
    let seq = 1 + grid * grid;
    for b in &vars.blocks {
        x = attention_block(g, x, b, batch, seq, cfg.heads)?;
    }
    let x = g.layer_norm(x, vars.norm_g, vars.norm_b, LN_EPS)?;
    let cls_rows: Vec<usize> = (0..batch).map(|n| n * seq).collect();
    let patch_rows: Vec<usize> = (0..batch)
        .flat_map(|n| (1..seq).map(move |t| n * seq + t))
        .collect();
    let cls = g.gather_rows(x, &cls_rows)?;
    let patches = g.gather_rows(x, &patch_rows)?;
    Ok(EncodedBatch {
        cls,
        patches,
        batch,
        grid,
    })
}

/// Encoder output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFeatures {
    /// `[D]`
    pub class_token: Tensor,
    /// `[G, G, D]`
    pub patch_tokens: Tensor,
}

impl EncodedFeatures {
    pub fn grid(&self) -> usize {
        self.patch_tokens.shape()[0]
    }
}

/// Inference-only forward pass for a single image.
pub fn vit_forward(
    image: &Image,
    params: &ViTParams,
    mask: Option<&[usize]>,
) -> Result<EncodedFeatures> {
    let mut g = Graph::no_grad();
    let vars = params.bind(&mut g);
    let masks: Vec<&[usize]> = mask.into_iter().collect();
    let out = encode(&mut g, &vars, &params.config, &[image], &masks)?;
    let d = params.config.embed_dim;
    let class_token = g.value(out.cls).clone().reshape(&[d])?;
    let patch_tokens = g
        .value(out.patches)
        .clone()
        .reshape(&[out.grid, out.grid, d])?;
    if !class_token.is_finite() || !patch_tokens.is_finite() {
        return Err(TensorError::NonFinite("vit_forward"));
    }
    Ok(EncodedFeatures {
        class_token,
        patch_tokens,
    })
}
