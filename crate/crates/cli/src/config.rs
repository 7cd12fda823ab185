//! Run configuration: defaults, a flat `section.key = value` file, then
//! command-line overrides, merged through a JSON tree so every field of the
//! library configs is addressable by its dotted key.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tce_core::data::{AugmentationConfig, SyntheticSpec};
use tce_core::eval::EvalConfig;
use tce_core::losses::LossConfig;
use tce_core::mining::MiningSchedule;
use tce_core::nn::EncoderConfig;
use tce_core::trainer::{PretrainConfig, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SyntheticSpec,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub mining: MiningSchedule,
    pub augment: AugmentationConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            encoder: self.encoder.clone(),
            train: self.train.clone(),
            loss: self.loss.clone(),
            mining: self.mining.clone(),
            augment: self.augment.clone(),
        }
    }

    fn validate(&self) -> Result<(), String> {
        self.synth.validate().map_err(|e| e.to_string())?;
        self.pretrain().validate().map_err(|e| e.to_string())?;
        self.eval.validate().map_err(|e| e.to_string())
    }
}

/// Everything that can change a [`RunConfig`], applied in field order.
#[derive(Debug, Default)]
pub struct Sources<'a> {
    pub file: Option<&'a Path>,
    /// Root seed for the generator, pretraining and evaluation.
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    /// `key=value` strings.
    pub sets: &'a [String],
}

pub fn build(sources: &Sources<'_>) -> Result<RunConfig, String> {
    let mut tree = serde_json::to_value(RunConfig::default()).expect("plain data");
    if let Some(path) = sources.file {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        for (line_no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected `key = value`", path.display(), line_no + 1))?;
            set(&mut tree, key.trim(), value.trim()).map_err(|e| format!("{}:{}: {e}", path.display(), line_no + 1))?;
        }
    }
    if let Some(seed) = sources.seed {
        for key in ["synth.seed", "train.seed", "eval.seed"] {
            set(&mut tree, key, &seed.to_string())?;
        }
    }
    if let Some(workers) = sources.workers {
        for key in ["train.workers", "eval.workers"] {
            set(&mut tree, key, &workers.to_string())?;
        }
    }
    for s in sources.sets {
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| format!("--set expects key=value, got `{s}`"))?;
        set(&mut tree, key.trim(), value.trim())?;
    }
    let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| format!("invalid configuration: {e}"))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Replaces the leaf at `key`. The value is read as JSON when it parses
/// (numbers, booleans, arrays) and as a bare string otherwise.
fn set(tree: &mut Value, key: &str, raw: &str) -> Result<(), String> {
    let unknown = || format!("unknown configuration key `{key}`");
    let (section, field) = key.split_once('.').ok_or_else(unknown)?;
    let slot = tree
        .get_mut(section)
        .and_then(Value::as_object_mut)
        .and_then(|m: &mut Map<String, Value>| m.get_mut(field))
        .ok_or_else(unknown)?;
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// One `key = default` line per configuration field.
pub fn defaults_help() -> String {
    let tree = serde_json::to_value(RunConfig::default()).expect("plain data");
    let mut s = String::from(
        "Configuration keys (set in --config files as `key = value`, or with --set key=value) and their defaults:\n",
    );
    for (section, fields) in tree.as_object().expect("struct") {
        for (field, value) in fields.as_object().expect("struct") {
            let shown = match value {
                Value::String(v) => v.clone(),
                v => v.to_string(),
            };
            let _ = writeln!(s, "  {section}.{field} = {shown}");
        }
    }
    s.push_str("\n--seed N sets synth.seed, train.seed and eval.seed; --workers N sets train.workers and eval.workers.");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment\ntrain.lr = 0.5   # trailing\n\nsynth.videos_per_class=3\nloss.z_estimate = 2.5\ntrain.anchor_mode = one-per-video\nencoder.widths = [4, 8]\n",
        )
        .unwrap();
        let s = sets(&["train.lr=0.25", "eval.mode=linear-probe"]);
        let cfg = build(&Sources {
            file: Some(&path),
            seed: Some(9),
            workers: Some(2),
            sets: &s,
        })
        .unwrap();
        assert_eq!(cfg.train.lr, 0.25);
        assert_eq!(cfg.synth.videos_per_class, 3);
        assert_eq!(cfg.encoder.widths, vec![4, 8]);
        assert_eq!(cfg.loss.z_estimate, tce_core::losses::ZEstimate::Fixed(2.5));
        assert_eq!(cfg.train.anchor_mode, tce_core::AnchorMode::OnePerVideo);
        assert_eq!(cfg.eval.mode, tce_core::eval::EvalMode::LinearProbe);
        assert_eq!((cfg.synth.seed, cfg.train.seed, cfg.eval.seed), (9, 9, 9));
        assert_eq!((cfg.train.workers, cfg.eval.workers), (2, 2));
    }

    #[test]
    fn bad_keys_and_values_are_rejected() {
        for bad in [&["train.nope=1"][..], &["nope"], &["train=1"], &["train.lr=fast"], &["train.lr=-1"], &["mining.epochs=3"]] {
            let s = sets(bad);
            assert!(
                build(&Sources {
                    sets: &s,
                    ..Sources::default()
                })
                .is_err(),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn help_lists_every_key() {
        let help = defaults_help();
        for key in ["synth.frames_per_video = 30", "train.lr = 0.03", "loss.z_estimate = auto", "eval.samples = 19", "mining.r0 = -1.0"] {
            assert!(help.contains(key), "{key}");
        }
        assert!(!help.contains("mining.epochs"));
    }
}
