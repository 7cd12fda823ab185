use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use tce_core::curvature::{coherency_report, VideoRef};
use tce_core::data::synthetic::{plan_video, render_video};
use tce_core::data::{generate_synthetic, load_all_videos, load_dataset};
use tce_core::eval::{build_classifier, evaluate_video, export_embeddings, finetune as run_finetune, Classifier, LabeledData};
use tce_core::rng::derive_seed;
use tce_core::trainer::{parse_metrics, pretrain as run_pretrain, resume, Checkpoint, PretrainData, METRICS_FILE};
use tce_core::{TceError, VideoSequence};

use crate::config::RunConfig;
use crate::Failure;

/// Videos scored by `evaluate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    HeldOut,
    Train,
    All,
}

struct Dataset {
    names: Vec<String>,
    videos: Vec<VideoSequence>,
    labels: Vec<Option<usize>>,
}

impl Dataset {
    fn load(data: Option<&Path>, cfg: &RunConfig) -> Result<Self, Failure> {
        match data {
            Some(root) => {
                let index = load_dataset(root)?;
                info!("loaded {} videos from {}", index.num_videos(), root.display());
                Ok(Dataset {
                    names: index.videos().iter().map(|v| v.dir.clone()).collect(),
                    labels: index.videos().iter().map(|v| v.label).collect(),
                    videos: load_all_videos(&index)?,
                })
            }
            None => {
                cfg.synth.validate()?;
                info!("rendering {} synthetic videos in memory", cfg.synth.num_videos());
                let mut out = Dataset {
                    names: Vec::new(),
                    videos: Vec::new(),
                    labels: Vec::new(),
                };
                for v in 0..cfg.synth.num_videos() {
                    let plan = plan_video(&cfg.synth, v);
                    out.names.push(format!("video_{v:05}"));
                    out.labels.push(Some(plan.label));
                    out.videos.push(VideoSequence::new(render_video(&cfg.synth, &plan))?);
                }
                Ok(out)
            }
        }
    }

    fn labels(&self) -> Result<Vec<usize>, Failure> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| TceError::Dataset(format!("video {} has no label", self.names[i])).into()))
            .collect()
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| TceError::io(dir, e).into())
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| TceError::io(path, e).into())
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let index = generate_synthetic(&cfg.synth, out)?;
    println!(
        "wrote {} videos ({} classes, {} frames of {}x{}) to {}",
        index.num_videos(),
        cfg.synth.num_classes,
        cfg.synth.frames_per_video,
        cfg.synth.image_size,
        cfg.synth.image_size,
        out.display()
    );
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, data: Option<&Path>, resume_from: Option<&Path>, out: Option<&Path>) -> Result<(), Failure> {
    let pcfg = cfg.pretrain();
    pcfg.validate()?;
    let ds = Dataset::load(data, cfg)?;
    let pdata = PretrainData {
        videos: &ds.videos,
        labels: &ds.labels,
    };
    let outcome = match resume_from {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            info!("resuming from epoch {} with the checkpoint's stored configuration", ckpt.epoch);
            let previous = match out.map(|d| d.join(METRICS_FILE)).filter(|p| p.exists()) {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| TceError::io(&p, e))?;
                    parse_metrics(&text)?.into_iter().filter(|m| m.epoch <= ckpt.epoch).collect()
                }
                None => Vec::new(),
            };
            resume(&pdata, &ckpt, previous, out)?
        }
        None => run_pretrain(&pdata, &pcfg, out)?,
    };
    for m in &outcome.metrics {
        println!("{}", m.describe());
    }
    if let Some(dir) = out {
        println!("wrote checkpoints and {METRICS_FILE} to {}", dir.display());
    }
    Ok(())
}

pub fn finetune(cfg: &RunConfig, data: Option<&Path>, checkpoint: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = Dataset::load(data, cfg)?;
    let labels = ds.labels()?;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let clf = build_classifier(&ckpt, num_classes, &cfg.eval)?;
    let outcome = run_finetune(
        clf,
        &LabeledData {
            videos: &ds.videos,
            labels: &labels,
        },
        &cfg.eval,
        &cfg.augment,
    )?;
    let mut log = String::from("epoch\ttrain_loss\tval_top1\n");
    for e in &outcome.history {
        println!("epoch {}: loss {:.5} top-1 {:.4}", e.epoch, e.train_loss, e.val_top1);
        let _ = writeln!(log, "{}\t{}\t{}", e.epoch, e.train_loss, e.val_top1);
    }
    println!("best top-1 {:.4} at epoch {}", outcome.best_top1, outcome.best_epoch);
    if let Some(dir) = out {
        create_dir(dir)?;
        outcome.classifier.save(&dir.join("classifier.tce"))?;
        write(&dir.join("finetune.tsv"), &log)?;
        println!("wrote classifier.tce and finetune.tsv to {}", dir.display());
    }
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, data: Option<&Path>, classifier: &Path, subset: Subset, out: Option<&Path>) -> Result<(), Failure> {
    let clf = Classifier::load(classifier)?;
    let ds = Dataset::load(data, cfg)?;
    let labels = ds.labels()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= clf.num_classes()) {
        return Err(TceError::Dataset(format!("label {bad} out of range for a {}-class classifier", clf.num_classes())).into());
    }
    let mut ecfg = cfg.eval.clone();
    ecfg.input_mode = clf.input_mode();
    let ldata = LabeledData {
        videos: &ds.videos,
        labels: &labels,
    };
    let ids: Vec<usize> = match subset {
        Subset::All => (0..labels.len()).collect(),
        Subset::Train => ldata.split(&ecfg)?.train,
        Subset::HeldOut => ldata.split(&ecfg)?.held_out,
    };
    if ids.is_empty() {
        return Err(Failure::Usage(format!("the {subset:?} split is empty (eval.held_out_fraction = {})", ecfg.held_out_fraction)));
    }
    let mut rows = String::from("video\tlabel\tpredicted");
    for c in 0..clf.num_classes() {
        let _ = write!(rows, "\tp{c}");
    }
    rows.push('\n');
    let mut hits = 0;
    for &i in &ids {
        let p = evaluate_video(&clf, &ds.videos[i], &ecfg)?;
        hits += usize::from(p.class == labels[i]);
        let _ = write!(rows, "{}\t{}\t{}", ds.names[i], labels[i], p.class);
        for d in &p.distribution {
            let _ = write!(rows, "\t{d}");
        }
        rows.push('\n');
    }
    println!("top-1 {:.4} over {} videos ({subset:?})", hits as f64 / ids.len() as f64, ids.len());
    if let Some(dir) = out {
        create_dir(dir)?;
        write(&dir.join("predictions.tsv"), &rows)?;
    }
    Ok(())
}

pub fn metrics(cfg: &RunConfig, data: Option<&Path>, checkpoint: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let encoder = ckpt.build_encoder()?;
    let ds = Dataset::load(data, cfg)?;
    let refs: Vec<VideoRef<'_>> = ds
        .videos
        .iter()
        .enumerate()
        .map(|(i, v)| VideoRef {
            video_id: i,
            video: v,
            label: ds.labels[i],
        })
        .collect();
    let count = match cfg.train.coherency_videos {
        0 => refs.len(),
        n => n,
    };
    let report = coherency_report(&encoder, &refs, count, derive_seed(cfg.train.seed, "coherency", &[]))?;
    let warned = report.per_video.iter().filter(|v| v.warning).count();
    if warned > 0 {
        warn!("{warned} videos had zero-length embedding steps; those turns were skipped");
    }
    println!(
        "mean TAC {:.6} mean MAC {:.6} over {} videos (checkpoint epoch {})",
        report.mean_tac,
        report.mean_mac,
        report.per_video.len(),
        ckpt.epoch
    );
    if let Some(dir) = out {
        create_dir(dir)?;
        report.write_tsv(&dir.join("coherency.tsv"))?;
    }
    Ok(())
}

pub fn export(cfg: &RunConfig, data: Option<&Path>, checkpoint: &Path, video: Option<usize>, out: &Path) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = Dataset::load(data, cfg)?;
    let ids: Vec<usize> = match video {
        Some(v) if v >= ds.videos.len() => {
            return Err(Failure::Usage(format!("--video {v} out of range for {} videos", ds.videos.len())));
        }
        Some(v) => vec![v],
        None => (0..ds.videos.len()).collect(),
    };
    create_dir(out)?;
    for &i in &ids {
        export_embeddings(&ckpt, &ds.videos[i], &out.join(format!("{}.tsv", ds.names[i])))?;
    }
    println!("exported {} videos to {}", ids.len(), out.display());
    Ok(())
}
