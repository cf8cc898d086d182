//! The two training stages.
//!
//! Everything random in a run is a pure function of the run seed and the
//! iteration number: batch composition comes from a per-epoch shuffle,
//! dropout masks from `(seed, iteration, batch slot)`, and the prior of
//! example `k` from `(seed, k)`. Per-example gradients are summed in slot
//! order, so a run is reproducible regardless of thread count and resuming
//! from a checkpoint continues the exact same trajectory.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::dataset::Manifest;
use crate::error::{Error, Result};
use crate::image::{Image, MIN_PIPELINE_SIDE};
use crate::loss::{loss_on_tape, LossConfig};
use crate::network::{ForwardMode, GradOutcome, GradientStore, Network, NetworkSpec};
use crate::optim::{AdamState, DEFAULT_LR};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::{concat_channels, Tensor};
use crate::uncertainty::{estimate_prior, Reduction, DEFAULT_SAMPLES};

pub const DEFAULT_BATCH: usize = 10;
pub const PRIOR_DEFAULT_ITERS: u64 = 200_000;
pub const RESTORATION_DEFAULT_ITERS: u64 = 1_500_000;
pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_PRIOR: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prior,
    Restoration,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Prior => "prior",
            Stage::Restoration => "restoration",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub batch_size: usize,
    /// Total iterations, counting any already done by a resumed checkpoint.
    pub max_iters: u64,
    pub seed: u64,
    pub lr: f64,
    /// Write `ckpt_<iter>.ckpt` every this many iterations; 0 disables.
    pub checkpoint_every: u64,
    /// Loss log and checkpoints go here when set.
    pub out_dir: Option<PathBuf>,
    /// When false `wall_ms` is logged as null, making logs byte-reproducible.
    pub record_wall_time: bool,
    /// Print a progress line to stderr every this many iterations; 0 is silent.
    pub progress_every: u64,
}

impl TrainRun {
    pub fn new(stage: Stage) -> Self {
        Self {
            batch_size: DEFAULT_BATCH,
            max_iters: match stage {
                Stage::Prior => PRIOR_DEFAULT_ITERS,
                Stage::Restoration => RESTORATION_DEFAULT_ITERS,
            },
            seed: 0,
            lr: DEFAULT_LR,
            checkpoint_every: 0,
            out_dir: None,
            record_wall_time: true,
            progress_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_iters == 0 {
            return Err(Error::InvalidConfig(
                "batch size and iteration count must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One training example as network tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub y: Tensor,
    pub x: Tensor,
}

/// RGB-converts each `(degraded, clean)` pair and crops it (top-left) to a
/// multiple of `multiple`.
pub fn prepare_pairs(pairs: &[(Image, Image)], multiple: usize) -> Result<Vec<TrainPair>> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no training pairs".into()));
    }
    let side = multiple.max(MIN_PIPELINE_SIDE);
    pairs
        .iter()
        .enumerate()
        .map(|(i, (y, x))| {
            y.same_shape(x)
                .map_err(|_| Error::Dataset(format!("pair {i}: degraded and clean differ in shape")))?;
            let (h, w) = (y.height() / multiple * multiple, y.width() / multiple * multiple);
            if h < side || w < side {
                return Err(Error::Dataset(format!(
                    "pair {i}: {}x{} is too small, need at least {side}x{side}",
                    y.height(),
                    y.width()
                )));
            }
            Ok(TrainPair {
                y: Tensor::from_image(&y.to_rgb().crop(h, w)?),
                x: Tensor::from_image(&x.to_rgb().crop(h, w)?),
            })
        })
        .collect()
}

pub fn load_training_pairs(manifest: impl AsRef<Path>, multiple: usize) -> Result<Vec<TrainPair>> {
    prepare_pairs(&Manifest::load(manifest)?.load_pairs()?, multiple)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: u64,
    pub l1: f64,
    pub lp: f64,
    pub total: f64,
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Records from this invocation only.
    pub log: Vec<LossRecord>,
    pub skipped_steps: u64,
}

/// How stage 2 obtains the prior for each example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorConfig {
    pub samples: usize,
    pub reduction: Reduction,
    /// Compute each example's prior once. Off recomputes it every time; the
    /// result is identical because the prior seed depends only on the example.
    pub cache: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            reduction: Reduction::PerChannel,
            cache: true,
        }
    }
}

impl PriorConfig {
    pub fn channels(&self, image_channels: usize) -> usize {
        match self.reduction {
            Reduction::PerChannel => image_channels,
            Reduction::ChannelMean => 1,
        }
    }
}

/// Seed used for the prior of training example `k`.
pub fn prior_seed(run_seed: u64, k: usize) -> u64 {
    derive_seed(run_seed, &[STREAM_PRIOR, k as u64])
}

/// Example index for batch slot `slot` of 0-based iteration `iter`.
pub fn batch_index(seed: u64, n: usize, batch: usize, iter: u64, slot: usize) -> usize {
    let pos = iter * batch as u64 + slot as u64;
    let epoch = pos / n as u64;
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(derive_seed(seed, &[STREAM_SHUFFLE, epoch])).shuffle(&mut order);
    order[(pos % n as u64) as usize]
}

fn batch_indices(seed: u64, n: usize, batch: usize, iter: u64) -> Vec<usize> {
    (0..batch).map(|s| batch_index(seed, n, batch, iter, s)).collect()
}

struct LoopSpec<'a> {
    stage: Stage,
    run: &'a TrainRun,
    pairs: &'a [TrainPair],
    loss: &'a LossConfig,
    spec: NetworkSpec,
    resume: Option<Checkpoint>,
    meta: BTreeMap<String, String>,
}

fn open_log(dir: &Path, fresh: bool) -> Result<File> {
    let path = dir.join(LOSS_LOG_FILE);
    let mut opts = OpenOptions::new();
    opts.create(true);
    if fresh {
        opts.write(true).truncate(true);
    } else {
        opts.append(true);
    }
    opts.open(&path).map_err(|e| Error::io(path, e))
}

fn train_loop(ls: LoopSpec<'_>, input_for: &(dyn Fn(usize) -> Result<Tensor> + Sync)) -> Result<TrainOutcome> {
    let LoopSpec {
        stage,
        run,
        pairs,
        loss,
        spec,
        resume,
        meta,
    } = ls;
    run.validate()?;
    if pairs.is_empty() {
        return Err(Error::Dataset("no training pairs".into()));
    }
    if pairs.iter().any(|p| p.y.shape() != p.x.shape()) {
        return Err(Error::Dataset("degraded and clean tensors differ in shape".into()));
    }
    let fresh = resume.is_none();
    let mut ckpt = match resume {
        Some(c) => {
            if c.network.spec != spec {
                return Err(Error::Checkpoint("resume checkpoint has a different network spec".into()));
            }
            if let Some(s) = c.meta.get("stage") {
                if s != stage.name() {
                    return Err(Error::Checkpoint(format!(
                        "resume checkpoint is from the {s} stage, not {}",
                        stage.name()
                    )));
                }
            }
            c
        }
        None => Checkpoint::new(Network::init(spec, derive_seed(run.seed, &[STREAM_INIT]))?),
    };
    ckpt.meta.extend(meta);
    let mut adam = ckpt
        .optimizer
        .take()
        .unwrap_or_else(|| AdamState::new(&ckpt.network.params, run.lr));
    adam.lr = run.lr;

    let mut log_file = match &run.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(open_log(dir, fresh)?)
        }
        None => None,
    };
    let started = Instant::now();
    let mut log = Vec::new();
    let skipped_before = adam.skipped;

    for iter in ckpt.step..run.max_iters {
        let idx = batch_indices(run.seed, pairs.len(), run.batch_size, iter);
        let net = &ckpt.network;
        let outcomes: Vec<Result<GradOutcome>> = idx
            .par_iter()
            .enumerate()
            .map(|(slot, &k)| {
                let input = input_for(k)?;
                let mut rng = SeededRng::new(derive_seed(run.seed, &[STREAM_DROPOUT, iter, slot as u64]));
                let target = &pairs[k].x;
                net.compute_gradients(&input, ForwardMode::Train, &mut rng, |tape, out| {
                    loss_on_tape(tape, out, target, loss)
                })
            })
            .collect();

        let scale = 1.0 / run.batch_size as f64;
        let mut grads = GradientStore::zeros_like(&net.params);
        let (mut l1, mut lp, mut total) = (0.0, 0.0, 0.0);
        let mut non_finite = false;
        for o in outcomes {
            match o {
                Ok(o) => {
                    grads.add_scaled(&o.grads, scale);
                    l1 += o.terms[0] * scale;
                    lp += o.terms[1] * scale;
                    total += o.loss * scale;
                }
                Err(Error::NonFinite(_)) => non_finite = true,
                Err(e) => return Err(e),
            }
        }
        if non_finite {
            total = f64::NAN;
            adam.skipped += 1;
        } else {
            adam.step(&mut ckpt.network.params, &grads)?;
        }
        ckpt.step = iter + 1;

        let record = LossRecord {
            iter: ckpt.step,
            l1,
            lp,
            total,
            wall_ms: run.record_wall_time.then(|| started.elapsed().as_millis() as u64),
        };
        if let Some(f) = log_file.as_mut() {
            let mut line = serde_json::to_vec(&record).expect("record serializes");
            line.push(b'\n');
            f.write_all(&line)
                .map_err(|e| Error::io(run.out_dir.as_ref().expect("dir").join(LOSS_LOG_FILE), e))?;
        }
        if run.progress_every > 0 && (ckpt.step % run.progress_every == 0 || ckpt.step == run.max_iters) {
            eprintln!(
                "[{}] iter {}/{} l1 {:.5} lp {:.5} total {:.5}",
                stage.name(),
                ckpt.step,
                run.max_iters,
                l1,
                lp,
                total
            );
        }
        log.push(record);

        if let Some(dir) = &run.out_dir {
            if run.checkpoint_every > 0 && ckpt.step % run.checkpoint_every == 0 {
                ckpt.optimizer = Some(adam.clone());
                save_checkpoint(&ckpt, dir.join(format!("ckpt_{:08}.ckpt", ckpt.step)))?;
            }
        }
    }

    ckpt.optimizer = Some(adam);
    if let Some(dir) = &run.out_dir {
        save_checkpoint(&ckpt, dir.join(FINAL_CHECKPOINT))?;
    }
    let skipped_steps = ckpt.optimizer.as_ref().map_or(0, |a| a.skipped) - skipped_before;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log,
        skipped_steps,
    })
}

fn base_meta(stage: Stage, run: &TrainRun, loss: &LossConfig) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("stage".to_string(), stage.name().to_string()),
        ("seed".to_string(), run.seed.to_string()),
        ("batch_size".to_string(), run.batch_size.to_string()),
        ("lambda_p".to_string(), loss.lambda_p.to_string()),
        ("extractor".to_string(), loss.extractor.id()),
    ])
}

/// Stage 1: learns `y → x` with dropout active.
pub fn train_prior_network(
    run: &TrainRun,
    pairs: &[TrainPair],
    loss: &LossConfig,
    spec: NetworkSpec,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    if !spec.dropout_everywhere {
        return Err(Error::InvalidNetwork("the prior network needs dropout".into()));
    }
    let input_for = |k: usize| Ok(pairs[k].y.clone());
    train_loop(
        LoopSpec {
            stage: Stage::Prior,
            run,
            pairs,
            loss,
            spec,
            resume,
            meta: base_meta(Stage::Prior, run, loss),
        },
        &input_for,
    )
}

/// Computes the stage-2 input `concat(y, d)` for training example `k`.
pub fn restoration_input(
    prior: &Network,
    y: &Tensor,
    cfg: &PriorConfig,
    seed: u64,
) -> Result<Tensor> {
    let (d, _) = estimate_prior(prior, y, cfg.samples, seed, cfg.reduction)?;
    concat_channels(&[y, &d.values])
}

/// Stage 2: learns `(y, d) → x` with the prior network frozen.
pub fn train_restoration_network(
    run: &TrainRun,
    pairs: &[TrainPair],
    prior: &Network,
    prior_cfg: &PriorConfig,
    loss: &LossConfig,
    spec: NetworkSpec,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    let y_ch = pairs.first().map_or(3, |p| p.y.channels());
    let expected = y_ch + prior_cfg.channels(y_ch);
    if spec.in_channels() != expected {
        return Err(Error::InvalidNetwork(format!(
            "restoration network takes {} channels but y plus prior has {expected}",
            spec.in_channels()
        )));
    }
    let cache: Vec<Mutex<Option<Arc<Tensor>>>> = (0..pairs.len()).map(|_| Mutex::new(None)).collect();
    let input_for = |k: usize| -> Result<Tensor> {
        let compute = || restoration_input(prior, &pairs[k].y, prior_cfg, prior_seed(run.seed, k));
        if !prior_cfg.cache {
            return compute();
        }
        let mut slot = cache[k].lock().expect("prior cache lock");
        if slot.is_none() {
            *slot = Some(Arc::new(compute()?));
        }
        Ok(slot.as_ref().expect("filled").as_ref().clone())
    };
    let mut meta = base_meta(Stage::Restoration, run, loss);
    meta.insert("samples".into(), prior_cfg.samples.to_string());
    meta.insert(
        "reduction".into(),
        serde_json::to_string(&prior_cfg.reduction).expect("serializes").trim_matches('"').to_string(),
    );
    train_loop(
        LoopSpec {
            stage: Stage::Restoration,
            run,
            pairs,
            loss,
            spec,
            resume,
            meta,
        },
        &input_for,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_prior_spec, build_restoration_spec};
    use crate::tensor::UpsampleMode;

    fn pairs(n: usize, side: usize) -> Vec<TrainPair> {
        (0..n)
            .map(|i| {
                let x: Vec<f64> = (0..3 * side * side)
                    .map(|j| 0.5 + 0.4 * ((i * 7 + j) as f64 * 0.13).sin())
                    .collect();
                let y = x.iter().map(|v| 0.8 * v + 0.1).collect();
                TrainPair {
                    y: Tensor::from_vec(3, side, side, y).unwrap(),
                    x: Tensor::from_vec(3, side, side, x).unwrap(),
                }
            })
            .collect()
    }

    fn small_run(iters: u64) -> TrainRun {
        TrainRun {
            batch_size: 2,
            max_iters: iters,
            seed: 11,
            lr: 1e-3,
            record_wall_time: false,
            ..TrainRun::new(Stage::Prior)
        }
    }

    #[test]
    fn batches_cover_each_epoch() {
        let n = 5;
        let mut seen: Vec<usize> = (0..5).map(|s| batch_index(3, n, 5, 2, s)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(batch_indices(3, n, 5, 2), batch_indices(3, n, 5, 2));
    }

    #[test]
    fn prepare_crops_and_converts() {
        let y = Image::filled(10, 13, 1, 0.2).unwrap();
        let x = Image::filled(10, 13, 1, 0.3).unwrap();
        let p = prepare_pairs(&[(y, x)], 4).unwrap();
        assert_eq!(p[0].y.shape(), (3, 8, 12));
        let tiny = Image::filled(6, 6, 3, 0.2).unwrap();
        assert!(prepare_pairs(&[(tiny.clone(), tiny)], 4).is_err());
        assert!(prepare_pairs(&[], 4).is_err());
    }

    #[test]
    fn training_is_reproducible_and_resumable() {
        let data = pairs(3, 8);
        let spec = build_prior_spec(0.1, UpsampleMode::Bilinear);
        let loss = LossConfig::l1_only();
        let full = train_prior_network(&small_run(4), &data, &loss, spec.clone(), None).unwrap();
        let again = train_prior_network(&small_run(4), &data, &loss, spec.clone(), None).unwrap();
        assert_eq!(full.checkpoint, again.checkpoint);
        assert_eq!(full.log, again.log);

        let half = train_prior_network(&small_run(2), &data, &loss, spec.clone(), None).unwrap();
        let rest = train_prior_network(&small_run(4), &data, &loss, spec, Some(half.checkpoint)).unwrap();
        assert_eq!(rest.checkpoint, full.checkpoint);
        assert_eq!(rest.log, full.log[2..]);
    }

    #[test]
    fn writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let run = TrainRun {
            out_dir: Some(dir.path().to_path_buf()),
            checkpoint_every: 2,
            ..small_run(3)
        };
        let data = pairs(2, 8);
        let spec = build_prior_spec(0.1, UpsampleMode::Bilinear);
        train_prior_network(&run, &data, &LossConfig::l1_only(), spec, None).unwrap();
        let log = fs::read_to_string(dir.path().join(LOSS_LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 3);
        let first: LossRecord = serde_json::from_str(log.lines().next().unwrap()).unwrap();
        assert_eq!(first.iter, 1);
        assert_eq!(first.wall_ms, None);
        assert!(dir.path().join("ckpt_00000002.ckpt").exists());
        assert!(dir.path().join(FINAL_CHECKPOINT).exists());
    }

    #[test]
    fn restoration_cache_does_not_change_results() {
        let data = pairs(2, 8);
        let prior = Network::init(build_prior_spec(0.1, UpsampleMode::Bilinear), 5).unwrap();
        let spec = build_restoration_spec(3, UpsampleMode::Bilinear).unwrap();
        let loss = LossConfig::l1_only();
        let run = small_run(2);
        let mut cfg = PriorConfig {
            samples: 3,
            ..PriorConfig::default()
        };
        let cached = train_restoration_network(&run, &data, &prior, &cfg, &loss, spec.clone(), None).unwrap();
        cfg.cache = false;
        let fresh = train_restoration_network(&run, &data, &prior, &cfg, &loss, spec.clone(), None).unwrap();
        assert_eq!(cached.checkpoint, fresh.checkpoint);
        assert_eq!(cached.checkpoint.meta["stage"], "restoration");

        cfg.reduction = Reduction::ChannelMean;
        assert!(train_restoration_network(&run, &data, &prior, &cfg, &loss, spec, None).is_err());
    }

    #[test]
    fn prior_stage_rejects_dropout_free_spec() {
        let spec = build_restoration_spec(3, UpsampleMode::Bilinear).unwrap();
        assert!(train_prior_network(&small_run(1), &pairs(1, 8), &LossConfig::l1_only(), spec, None).is_err());
    }
}
