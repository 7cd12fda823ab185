//! Strided CNN encoder: `stages × (conv k×k, stride 2, layer norm, ReLU)`, global
//! average pooling, then a linear projection to `D`, per-dimension
//! standardisation (batch norm without affine terms) and L2 normalisation.
//! An optional 4-way rotation head reads the pooled features.
//!
//! Parameters are kept in `f64` for the arithmetic but are always exactly
//! representable in `f32`, which is what checkpoints store.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{
    col2im, conv_backward, conv_forward, global_avg_pool, global_avg_pool_backward, im2col, linear_backward,
    linear_forward, relu_backward_in_place, relu_in_place, ConvShape,
};
use crate::curvature::FrameEncoder;
use crate::embedding::{normalize, Embedding};
use crate::error::{Result, TceError};
use crate::image::Image;
use crate::rng::derive_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output channels of each stride-2 stage.
    pub widths: Vec<usize>,
    pub kernel_size: usize,
    pub embedding_dim: usize,
    pub rotation_head: bool,
    /// Expected square input side; 0 accepts any size.
    pub input_size: usize,
    /// Normalise each conv output per sample over all channels and positions
    /// (no affine terms) before the ReLU.
    pub layer_norm: bool,
    /// Standardise each projection dimension (batch statistics in training,
    /// stored statistics otherwise) before the L2 normalisation.
    pub batch_norm: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            widths: vec![16, 32, 64],
            kernel_size: 3,
            embedding_dim: 128,
            rotation_head: true,
            input_size: 32,
            layer_norm: true,
            batch_norm: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(TceError::Config("encoder.in_channels must be at least 1".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(TceError::Config(format!(
                "encoder.widths needs at least one positive stage width, got {:?}",
                self.widths
            )));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(TceError::Config(format!(
                "encoder.kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.embedding_dim < 2 {
            return Err(TceError::Config(format!(
                "encoder.embedding_dim must be at least 2, got {}",
                self.embedding_dim
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// A named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Gradient buffers aligned with a parameter list.
pub type Grads = Vec<Vec<f64>>;

pub fn zero_grads(params: &[Param]) -> Grads {
    params.iter().map(|p| vec![0.0; p.len()]).collect()
}

/// Rounds to the nearest `f32`.
pub fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

/// Fills `param` with `N(0, std²)` draws rounded to `f32`.
pub(crate) fn init_normal(param: &mut Param, std: f64, seed: u64, slot: u64) {
    let mut rng = derive_rng(seed, "init", &[slot]);
    let normal = Normal::new(0.0, std).expect("finite std");
    for v in &mut param.data {
        *v = quantize(normal.sample(&mut rng));
    }
}

/// The convolutional stages shared by the encoder and downstream classifiers.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Trunk {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub layer_norm: bool,
}

pub(crate) struct TrunkCache {
    shapes: Vec<ConvShape>,
    cols: Vec<Vec<f64>>,
    /// Normalised conv outputs (before the ReLU) and their inverse std.
    normed: Vec<(Vec<f64>, f64)>,
    acts: Vec<Vec<f64>>,
}

/// Epsilon added to the variance in the per-sample layer norm.
pub const LN_EPS: f64 = 1e-5;

fn layer_norm(x: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    inv
}

/// `∂x = σ⁻¹ (∂x̂ - mean(∂x̂) - x̂ mean(∂x̂ ⊙ x̂))` in place.
fn layer_norm_backward(normed: &[f64], inv: f64, grad: &mut [f64]) {
    let n = grad.len() as f64;
    let mean_g = grad.iter().sum::<f64>() / n;
    let mean_gx = grad.iter().zip(normed).map(|(g, x)| g * x).sum::<f64>() / n;
    for (g, x) in grad.iter_mut().zip(normed) {
        *g = inv * (*g - mean_g - x * mean_gx);
    }
}

impl Trunk {
    pub fn num_params(&self) -> usize {
        2 * self.widths.len()
    }

    pub fn new_params(&self, seed: u64) -> Vec<Param> {
        let mut params = Vec::new();
        let mut c = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            let mut weight = Param::zeros(format!("conv{i}.weight"), vec![w, c, self.kernel, self.kernel]);
            let fan_in = (c * self.kernel * self.kernel) as f64;
            init_normal(&mut weight, (2.0 / fan_in).sqrt(), seed, i as u64);
            params.push(weight);
            params.push(Param::zeros(format!("conv{i}.bias"), vec![w]));
            c = w;
        }
        params
    }

    fn shapes(&self, h: usize, w: usize) -> Vec<ConvShape> {
        let mut shapes = Vec::with_capacity(self.widths.len());
        let (mut c, mut h, mut w) = (self.in_channels, h, w);
        for &out in &self.widths {
            let s = ConvShape {
                in_channels: c,
                out_channels: out,
                kernel: self.kernel,
                stride: 2,
                padding: self.kernel / 2,
                in_h: h,
                in_w: w,
            };
            (c, h, w) = (out, s.out_h(), s.out_w());
            shapes.push(s);
        }
        shapes
    }

    pub fn check_input(&self, img: &Image, size: usize) -> Result<()> {
        if img.channels() != self.in_channels {
            return Err(TceError::arg(format!(
                "encoder expects {} input channels, got {}",
                self.in_channels,
                img.channels()
            )));
        }
        if size > 0 && (img.height() != size || img.width() != size) {
            return Err(TceError::arg(format!(
                "encoder expects {size}x{size} inputs, got {}x{}",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    /// Pooled features of `img`; `params` holds exactly the trunk arrays.
    pub fn forward(&self, params: &[Param], img: &Image) -> (Vec<f64>, TrunkCache) {
        let shapes = self.shapes(img.height(), img.width());
        let mut cols = Vec::with_capacity(shapes.len());
        let mut normed = Vec::with_capacity(shapes.len());
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(shapes.len());
        for (i, s) in shapes.iter().enumerate() {
            let input = if i == 0 { img.data() } else { &acts[i - 1] };
            let c = im2col(input, s);
            let mut out = conv_forward(&c, &params[2 * i].data, &params[2 * i + 1].data, s);
            if self.layer_norm {
                let inv = layer_norm(&mut out);
                normed.push((out.clone(), inv));
            }
            relu_in_place(&mut out);
            cols.push(c);
            acts.push(out);
        }
        let last = shapes.last().expect("at least one stage");
        let pooled = global_avg_pool(acts.last().expect("at least one stage"), last.out_channels);
        (
            pooled,
            TrunkCache {
                shapes,
                cols,
                normed,
                acts,
            },
        )
    }

    /// Accumulates trunk gradients into `grads[..num_params()]`.
    pub fn backward(&self, params: &[Param], cache: &TrunkCache, dpooled: &[f64], grads: &mut [Vec<f64>]) {
        let n = cache.shapes.len();
        let last = &cache.shapes[n - 1];
        let mut dout = global_avg_pool_backward(dpooled, last.out_h() * last.out_w());
        for i in (0..n).rev() {
            relu_backward_in_place(&cache.acts[i], &mut dout);
            if let Some((x, inv)) = cache.normed.get(i) {
                layer_norm_backward(x, *inv, &mut dout);
            }
            let s = &cache.shapes[i];
            let (dw, rest) = grads[2 * i..].split_at_mut(1);
            let dcols = conv_backward(&cache.cols[i], &params[2 * i].data, &dout, s, &mut dw[0], &mut rest[0], i > 0);
            if let Some(dc) = dcols {
                dout = col2im(&dc, s);
            }
        }
    }
}

/// Epsilon added to the variance before standardising projections.
pub const BN_EPS: f64 = 1e-5;

const STATS_MEAN: &str = "proj_bn.mean";
const STATS_VAR: &str = "proj_bn.var";

pub struct Encoder {
    config: EncoderConfig,
    trunk: Trunk,
    params: Vec<Param>,
    /// Inference mean and variance of the projection (empty without batch
    /// norm). Training sets them from full passes over the data.
    buffers: Vec<Param>,
}

/// Per-dimension mean and (biased) variance of a batch of projections.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl BatchStats {
    pub fn of(rows: &[&[f64]]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| TceError::arg("statistics of an empty batch"))?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            if r.len() != d {
                return Err(TceError::DimensionMismatch { expected: d, got: r.len() });
            }
            for (m, x) in mean.iter_mut().zip(r.iter()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        Ok(BatchStats { mean, var, count: rows.len() })
    }
}

/// Projection of one frame before standardisation.
pub struct RawPass {
    pub raw: Vec<f64>,
    pooled: Vec<f64>,
    trunk: TrunkCache,
}

/// Forward state of one frame through the embedding path.
pub struct EmbeddingPass {
    pub embedding: Embedding,
    raw: RawPass,
    /// `(raw - mean) * inv_std`.
    standardised: Vec<f64>,
    standardised_norm: f64,
    inv_std: Vec<f64>,
}

/// Forward state of one frame through the rotation head.
pub struct RotationPass {
    pub logits: Vec<f64>,
    pooled: Vec<f64>,
    trunk: TrunkCache,
}

fn inv_std(var: &[f64]) -> Vec<f64> {
    var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect()
}

/// Gradient through `y = x / ‖x‖` given `y` and `‖x‖`.
fn normalize_backward(y: &[f64], norm: f64, dy: &[f64]) -> Vec<f64> {
    let proj: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter().zip(dy).map(|(yi, gi)| (gi - yi * proj) / norm).collect()
}

impl Encoder {
    /// Kaiming-initialised encoder; all draws derive from `seed`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let trunk = trunk_of(&config);
        let mut params = trunk.new_params(seed);
        let f = config.feature_dim();
        let d = config.embedding_dim;
        let slot = trunk.widths.len() as u64;
        let mut proj = Param::zeros("proj.weight", vec![d, f]);
        init_normal(&mut proj, (1.0 / f as f64).sqrt(), seed, slot);
        params.push(proj);
        params.push(Param::zeros("proj.bias", vec![d]));
        if config.rotation_head {
            let mut rot = Param::zeros("rot.weight", vec![4, f]);
            init_normal(&mut rot, (1.0 / f as f64).sqrt(), seed, slot + 1);
            params.push(rot);
            params.push(Param::zeros("rot.bias", vec![4]));
        }
        let buffers = if config.batch_norm {
            let mut var = Param::zeros(STATS_VAR, vec![d]);
            var.data.fill(1.0);
            vec![Param::zeros(STATS_MEAN, vec![d]), var]
        } else {
            Vec::new()
        };
        Ok(Encoder {
            config,
            trunk,
            params,
            buffers,
        })
    }

    /// Rebuilds an encoder from named arrays, checking names and shapes.
    pub fn from_parts(config: EncoderConfig, params: Vec<Param>, buffers: Vec<Param>) -> Result<Self> {
        let template = Encoder::new(config, 0)?;
        let check = |kind: &str, want: &[Param], got: &[Param]| -> Result<()> {
            if want.len() != got.len() {
                return Err(TceError::Checkpoint(format!(
                    "encoder expects {} {kind} arrays, got {}",
                    want.len(),
                    got.len()
                )));
            }
            for (w, g) in want.iter().zip(got) {
                if w.name != g.name || w.shape != g.shape || g.data.len() != w.data.len() {
                    return Err(TceError::Checkpoint(format!(
                        "{kind} {} {:?} does not match expected {} {:?}",
                        g.name, g.shape, w.name, w.shape
                    )));
                }
            }
            Ok(())
        };
        check("parameter", &template.params, &params)?;
        check("buffer", &template.buffers, &buffers)?;
        Ok(Encoder {
            params,
            buffers,
            ..template
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Non-trainable state (projection statistics).
    pub fn buffers(&self) -> &[Param] {
        &self.buffers
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub(crate) fn trunk(&self) -> &Trunk {
        &self.trunk
    }

    fn proj_index(&self) -> usize {
        self.trunk.num_params()
    }

    pub fn check_input(&self, img: &Image) -> Result<()> {
        self.trunk.check_input(img, self.config.input_size)
    }

    /// Globally pooled trunk features.
    pub fn features(&self, img: &Image) -> Result<Vec<f64>> {
        self.check_input(img)?;
        Ok(self.trunk.forward(&self.params, img).0)
    }

    /// Projection before standardisation, without keeping backward state.
    pub fn project(&self, img: &Image) -> Result<Vec<f64>> {
        let pooled = self.features(img)?;
        let p = self.proj_index();
        Ok(linear_forward(&pooled, &self.params[p].data, &self.params[p + 1].data))
    }

    pub fn raw_forward(&self, img: &Image) -> Result<RawPass> {
        self.check_input(img)?;
        let (pooled, trunk) = self.trunk.forward(&self.params, img);
        let p = self.proj_index();
        let raw = linear_forward(&pooled, &self.params[p].data, &self.params[p + 1].data);
        Ok(RawPass { raw, pooled, trunk })
    }

    /// Mean and inverse standard deviation used outside training batches.
    fn stored_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.config.embedding_dim;
        match &self.buffers[..] {
            [mean, var] => (mean.data.clone(), inv_std(&var.data)),
            _ => (vec![0.0; d], vec![1.0; d]),
        }
    }

    fn finish(&self, raw: RawPass, mean: &[f64], inv: Vec<f64>) -> Result<EmbeddingPass> {
        let standardised: Vec<f64> = raw.raw.iter().zip(mean).zip(&inv).map(|((x, m), s)| (x - m) * s).collect();
        let standardised_norm = crate::embedding::l2_norm(&standardised);
        let embedding = normalize(&standardised)?;
        Ok(EmbeddingPass {
            embedding,
            raw,
            standardised,
            standardised_norm,
            inv_std: inv,
        })
    }

    /// Embedding of a projection from [`Encoder::project`], using the stored
    /// statistics.
    pub fn embed_projection(&self, raw: &[f64]) -> Result<Embedding> {
        let (mean, inv) = self.stored_stats();
        let z: Vec<f64> = raw.iter().zip(&mean).zip(&inv).map(|((x, m), s)| (x - m) * s).collect();
        normalize(&z)
    }

    pub fn embed(&self, img: &Image) -> Result<Embedding> {
        self.embed_projection(&self.project(img)?)
    }

    /// Inference-mode forward pass (stored statistics).
    pub fn forward(&self, img: &Image) -> Result<EmbeddingPass> {
        let raw = self.raw_forward(img)?;
        let (mean, inv) = self.stored_stats();
        self.finish(raw, &mean, inv)
    }

    /// Training-mode forward over a whole batch: with batch norm enabled the
    /// projections are standardised by the batch's own statistics, which are
    /// returned as well.
    pub fn forward_batch(&self, raws: Vec<RawPass>) -> Result<(Vec<EmbeddingPass>, Option<BatchStats>)> {
        if !self.config.batch_norm {
            let (mean, inv) = self.stored_stats();
            let passes = raws
                .into_iter()
                .map(|r| self.finish(r, &mean, inv.clone()))
                .collect::<Result<Vec<_>>>()?;
            return Ok((passes, None));
        }
        if raws.len() < 2 {
            return Err(TceError::arg("batch normalisation needs at least two projections"));
        }
        let stats = BatchStats::of(&raws.iter().map(|r| r.raw.as_slice()).collect::<Vec<_>>())?;
        let inv = inv_std(&stats.var);
        let passes = raws
            .into_iter()
            .map(|r| self.finish(r, &stats.mean, inv.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok((passes, Some(stats)))
    }

    /// Gradients w.r.t. each pass's projection given `∂L/∂embedding` per pass
    /// (`None` for passes that only fed the statistics). `batch` says whether
    /// the passes came from [`Encoder::forward_batch`] with batch statistics.
    pub fn standardise_backward(
        &self,
        passes: &[&EmbeddingPass],
        d_embeddings: &[Option<&[f64]>],
        batch: bool,
    ) -> Vec<Vec<f64>> {
        let d = self.config.embedding_dim;
        let d_std: Vec<Vec<f64>> = passes
            .iter()
            .zip(d_embeddings)
            .map(|(p, g)| match g {
                Some(g) => normalize_backward(p.embedding.as_slice(), p.standardised_norm, g),
                None => vec![0.0; d],
            })
            .collect();
        if !batch || !self.config.batch_norm {
            return passes
                .iter()
                .zip(d_std)
                .map(|(p, g)| g.iter().zip(&p.inv_std).map(|(a, s)| a * s).collect())
                .collect();
        }
        // x̂ = (x - μ)σ⁻¹ with batch μ, σ:
        // ∂x_i = σ⁻¹ (∂x̂_i - mean(∂x̂) - x̂_i mean(∂x̂ ⊙ x̂))
        let n = passes.len() as f64;
        let mut mean_g = vec![0.0; d];
        let mut mean_gx = vec![0.0; d];
        for (p, g) in passes.iter().zip(&d_std) {
            for k in 0..d {
                mean_g[k] += g[k] / n;
                mean_gx[k] += g[k] * p.standardised[k] / n;
            }
        }
        passes
            .iter()
            .zip(&d_std)
            .map(|(p, g)| {
                (0..d)
                    .map(|k| p.inv_std[k] * (g[k] - mean_g[k] - p.standardised[k] * mean_gx[k]))
                    .collect()
            })
            .collect()
    }

    /// Accumulates `∂L/∂θ` given the gradient w.r.t. the projection.
    pub fn projection_backward(&self, pass: &EmbeddingPass, d_raw: &[f64], grads: &mut [Vec<f64>]) {
        let p = self.proj_index();
        let (dw, rest) = grads[p..].split_at_mut(1);
        let dpooled = linear_backward(&pass.raw.pooled, &self.params[p].data, d_raw, &mut dw[0], &mut rest[0]);
        self.trunk.backward(&self.params, &pass.raw.trunk, &dpooled, grads);
    }

    /// Accumulates `∂L/∂θ` for an inference-mode pass given `∂L/∂embedding`.
    pub fn backward(&self, pass: &EmbeddingPass, d_embedding: &[f64], grads: &mut [Vec<f64>]) {
        let d_raw = self.standardise_backward(&[pass], &[Some(d_embedding)], false);
        self.projection_backward(pass, &d_raw[0], grads);
    }

    /// Sets the inference statistics from `stats` (unbiased variance),
    /// rounded to `f32`.
    pub fn set_stats(&mut self, stats: &BatchStats) {
        let [mean, var] = &mut self.buffers[..] else { return };
        let n = stats.count as f64;
        let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for k in 0..mean.data.len() {
            mean.data[k] = quantize(stats.mean[k]);
            var.data[k] = quantize(stats.var[k] * unbias);
        }
    }

    pub fn rotation_forward(&self, img: &Image) -> Result<RotationPass> {
        if !self.config.rotation_head {
            return Err(TceError::Config("encoder has no rotation head".into()));
        }
        self.check_input(img)?;
        let (pooled, trunk) = self.trunk.forward(&self.params, img);
        let r = self.proj_index() + 2;
        let logits = linear_forward(&pooled, &self.params[r].data, &self.params[r + 1].data);
        Ok(RotationPass { logits, pooled, trunk })
    }

    pub fn rotation_backward(&self, pass: &RotationPass, d_logits: &[f64], grads: &mut [Vec<f64>]) {
        let r = self.proj_index() + 2;
        let (dw, rest) = grads[r..].split_at_mut(1);
        let dpooled = linear_backward(&pass.pooled, &self.params[r].data, d_logits, &mut dw[0], &mut rest[0]);
        self.trunk.backward(&self.params, &pass.trunk, &dpooled, grads);
    }
}

fn trunk_of(config: &EncoderConfig) -> Trunk {
    Trunk {
        in_channels: config.in_channels,
        widths: config.widths.clone(),
        kernel: config.kernel_size,
        layer_norm: config.layer_norm,
    }
}

impl FrameEncoder for Encoder {
    fn embed_frame(&self, frame: &Image) -> Result<Vec<f64>> {
        Ok(self.embed(frame)?.into_inner())
    }
}
