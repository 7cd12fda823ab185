use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{EvalConfig, EvalMode, InputMode};
use crate::data::transforms::STACK_FRAMES;
use crate::error::{Result, TceError};
use crate::image::Image;
use crate::nn::encoder::{init_normal, Trunk, TrunkCache};
use crate::nn::layers::{linear_backward, linear_forward};
use crate::nn::{quantize, EncoderConfig, Param};
use crate::rng::derive_seed;
use crate::trainer::container::{self, NamedArray};
use crate::trainer::Checkpoint;

const KIND: &str = "classifier";

/// Pretrained convolutional trunk with a fresh linear head over the pooled
/// features. The head sees the features standardised per dimension with
/// fixed statistics (identity until [`Classifier::set_feature_stats`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub(crate) trunk: Trunk,
    input_size: usize,
    input_mode: InputMode,
    num_classes: usize,
    params: Vec<Param>,
    trainable: Vec<bool>,
    feature_mean: Vec<f64>,
    feature_scale: Vec<f64>,
}

const FEATURE_MEAN: &str = "head.feature_mean";
const FEATURE_SCALE: &str = "head.feature_scale";

/// Tiles RGB kernels across the five difference blocks and scales by 1/5,
/// so a stack whose blocks all equal `X` produces the RGB response to `X`.
pub fn inflate_first_layer(weight: &Param) -> Result<Param> {
    let [out, 3, kh, kw] = weight.shape[..] else {
        return Err(TceError::arg(format!(
            "inflation expects an RGB kernel of shape [O, 3, k, k], got {:?}",
            weight.shape
        )));
    };
    let blocks = STACK_FRAMES - 1;
    let k = kh * kw;
    let mut data = Vec::with_capacity(out * 3 * blocks * k);
    for o in 0..out {
        let rgb = &weight.data[o * 3 * k..(o + 1) * 3 * k];
        for _ in 0..blocks {
            data.extend(rgb.iter().map(|w| w / blocks as f64));
        }
    }
    Ok(Param {
        name: weight.name.clone(),
        shape: vec![out, 3 * blocks, kh, kw],
        data,
    })
}

fn channels_for(mode: InputMode) -> usize {
    match mode {
        InputMode::Rgb => 3,
        InputMode::StackOfDifferences => 3 * (STACK_FRAMES - 1),
    }
}

/// Copies the checkpoint's trunk and attaches a seeded head with
/// `num_classes` outputs. In stack-of-differences mode an RGB first layer is
/// inflated (and rounded to `f32` like every stored weight) when
/// `config.inflate` is set.
pub fn build_classifier(ckpt: &Checkpoint, num_classes: usize, config: &EvalConfig) -> Result<Classifier> {
    config.validate()?;
    if num_classes < 2 {
        return Err(TceError::Config(format!("classifier needs at least 2 classes, got {num_classes}")));
    }
    let enc_cfg = &ckpt.config.encoder;
    let encoder = ckpt.build_encoder()?;
    let mut trunk = encoder.trunk().clone();
    let mut params: Vec<Param> = encoder.params()[..trunk.num_params()].to_vec();
    let want = channels_for(config.input_mode);
    if trunk.in_channels != want {
        if trunk.in_channels == 3 && config.input_mode == InputMode::StackOfDifferences && config.inflate {
            let mut inflated = inflate_first_layer(&params[0])?;
            inflated.data.iter_mut().for_each(|w| *w = quantize(*w));
            params[0] = inflated;
            trunk.in_channels = want;
        } else {
            return Err(TceError::Config(format!(
                "encoder takes {} input channels but {:?} input needs {want}{}",
                trunk.in_channels,
                config.input_mode,
                if config.input_mode == InputMode::StackOfDifferences {
                    " (enable eval.inflate to inflate an RGB first layer)"
                } else {
                    ""
                }
            )));
        }
    }
    Classifier::with_head(trunk, enc_cfg, params, num_classes, config)
}

impl Classifier {
    fn with_head(
        trunk: Trunk,
        enc_cfg: &EncoderConfig,
        mut params: Vec<Param>,
        num_classes: usize,
        config: &EvalConfig,
    ) -> Result<Self> {
        let f = *trunk.widths.last().expect("validated encoder");
        let mut head = Param::zeros("head.weight", vec![num_classes, f]);
        init_normal(&mut head, (1.0 / f as f64).sqrt(), derive_seed(config.seed, "head", &[]), 0);
        params.push(head);
        params.push(Param::zeros("head.bias", vec![num_classes]));
        let n = trunk.num_params();
        let trainable = (0..n + 2)
            .map(|i| i >= n || config.mode == EvalMode::FineTune)
            .collect();
        Ok(Classifier {
            trunk,
            input_size: enc_cfg.input_size,
            input_mode: config.input_mode,
            num_classes,
            params,
            trainable,
            feature_mean: vec![0.0; f],
            feature_scale: vec![1.0; f],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_mode(&self) -> InputMode {
        self.input_mode
    }

    pub fn in_channels(&self) -> usize {
        self.trunk.in_channels
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Which parameter arrays the optimizer may change.
    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn set_mode(&mut self, mode: EvalMode) {
        let n = self.trunk.num_params();
        for (i, t) in self.trainable.iter_mut().enumerate() {
            *t = i >= n || mode == EvalMode::FineTune;
        }
    }

    fn head_index(&self) -> usize {
        self.trunk.num_params()
    }

    pub fn features(&self, input: &Image) -> Result<Vec<f64>> {
        Ok(self.features_with_cache(input)?.0)
    }

    pub(crate) fn features_with_cache(&self, input: &Image) -> Result<(Vec<f64>, TrunkCache)> {
        self.trunk.check_input(input, self.input_size)?;
        Ok(self.trunk.forward(&self.params, input))
    }

    /// Sets the head's input standardisation to `(x - mean) / sqrt(var + 1e-5)`,
    /// rounded to `f32`.
    pub fn set_feature_stats(&mut self, mean: &[f64], var: &[f64]) -> Result<()> {
        let f = self.feature_mean.len();
        if mean.len() != f || var.len() != f {
            return Err(TceError::DimensionMismatch {
                expected: f,
                got: mean.len().min(var.len()),
            });
        }
        self.feature_mean = mean.iter().map(|&m| quantize(m)).collect();
        self.feature_scale = var.iter().map(|v| quantize(1.0 / (v + 1e-5).sqrt())).collect();
        Ok(())
    }

    pub fn feature_stats(&self) -> (&[f64], &[f64]) {
        (&self.feature_mean, &self.feature_scale)
    }

    pub fn standardise(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_scale)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }

    /// Head output for standardised features.
    pub(crate) fn head(&self, standardised: &[f64]) -> Vec<f64> {
        let h = self.head_index();
        linear_forward(standardised, &self.params[h].data, &self.params[h + 1].data)
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        self.head(&self.standardise(features))
    }

    /// Head backward from standardised inputs; returns `∂L/∂features`.
    pub(crate) fn head_backward(&self, standardised: &[f64], d_logits: &[f64], grads: &mut [Vec<f64>]) -> Vec<f64> {
        let h = self.head_index();
        let (dw, rest) = grads[h..].split_at_mut(1);
        let dz = linear_backward(standardised, &self.params[h].data, d_logits, &mut dw[0], &mut rest[0]);
        dz.iter().zip(&self.feature_scale).map(|(g, s)| g * s).collect()
    }

    pub(crate) fn trunk_backward(&self, cache: &TrunkCache, d_features: &[f64], grads: &mut [Vec<f64>]) {
        self.trunk.backward(&self.params, cache, d_features, grads);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ClassifierMeta {
            kind: KIND.into(),
            in_channels: self.trunk.in_channels,
            widths: self.trunk.widths.clone(),
            kernel_size: self.trunk.kernel,
            layer_norm: self.trunk.layer_norm,
            input_size: self.input_size,
            input_mode: self.input_mode,
            num_classes: self.num_classes,
        };
        let f = self.feature_mean.len();
        let mut arrays: Vec<NamedArray> = self
            .params
            .iter()
            .map(|p| NamedArray::new(p.name.clone(), p.shape.clone(), p.data.clone()))
            .collect();
        arrays.push(NamedArray::new(FEATURE_MEAN, vec![f], self.feature_mean.clone()));
        arrays.push(NamedArray::new(FEATURE_SCALE, vec![f], self.feature_scale.clone()));
        container::write(path, &json!(meta), &arrays)
    }

    /// Loads a saved classifier; every array is marked trainable.
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, arrays) = container::read(path)?;
        let meta: ClassifierMeta =
            serde_json::from_value(meta).map_err(|e| TceError::Checkpoint(format!("bad classifier metadata: {e}")))?;
        if meta.kind != KIND {
            return Err(TceError::Checkpoint(format!("expected a {KIND} file, found {}", meta.kind)));
        }
        let trunk = Trunk {
            in_channels: meta.in_channels,
            widths: meta.widths,
            kernel: meta.kernel_size,
            layer_norm: meta.layer_norm,
        };
        let expected = trunk.num_params() + 2;
        if arrays.len() != expected + 2 {
            return Err(TceError::Checkpoint(format!(
                "classifier expects {} arrays, got {}",
                expected + 2,
                arrays.len()
            )));
        }
        let mut arrays = arrays;
        let scale = arrays.pop().expect("length checked");
        let mean = arrays.pop().expect("length checked");
        let params: Vec<Param> = arrays
            .into_iter()
            .map(|a| Param {
                name: a.name,
                shape: a.shape,
                data: a.data,
            })
            .collect();
        let template = trunk.new_params(0);
        for (want, got) in template.iter().zip(&params) {
            if want.name != got.name || want.shape != got.shape {
                return Err(TceError::Checkpoint(format!("unexpected array {} {:?}", got.name, got.shape)));
            }
        }
        let f = *trunk.widths.last().ok_or_else(|| TceError::Checkpoint("classifier has no stages".into()))?;
        if params[expected - 2].shape != [meta.num_classes, f] || params[expected - 1].shape != [meta.num_classes] {
            return Err(TceError::Checkpoint("classifier head has the wrong shape".into()));
        }
        if mean.name != FEATURE_MEAN || scale.name != FEATURE_SCALE || mean.shape != [f] || scale.shape != [f] {
            return Err(TceError::Checkpoint("classifier feature statistics are missing or malformed".into()));
        }
        Ok(Classifier {
            trainable: vec![true; expected],
            trunk,
            input_size: meta.input_size,
            input_mode: meta.input_mode,
            num_classes: meta.num_classes,
            params,
            feature_mean: mean.data,
            feature_scale: scale.data,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    kind: String,
    in_channels: usize,
    widths: Vec<usize>,
    kernel_size: usize,
    layer_norm: bool,
    input_size: usize,
    input_mode: InputMode,
    num_classes: usize,
}
