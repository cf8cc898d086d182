//! One function per subcommand, each driven purely by a resolved [`RunConfig`].

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use deturb_core::checkpoint::{file_id, load_checkpoint_for};
use deturb_core::dataset::{generate_dataset, list_images, Manifest};
use deturb_core::evaluation::{
    estimate_image_prior, evaluate_restoration, labelled_images, topk_identification, DescriptorEmbedding, Gallery,
    IdentificationReport, RestorationModel, Restorer,
};
use deturb_core::features::{ConvDescriptor, FeatureExtractor};
use deturb_core::image::{load_image, save_image};
use deturb_core::loss::LossConfig;
use deturb_core::network::{build_prior_spec, build_restoration_spec, NetworkSpec};
use deturb_core::rng::derive_seed;
use deturb_core::synth::{DegradationConfig, DegradationOrder};
use deturb_core::tensor::UpsampleMode;
use deturb_core::training::{
    load_training_pairs, train_prior_network, train_restoration_network, PriorConfig, Stage, TrainRun,
};
use deturb_core::uncertainty::Reduction;

use crate::config::{ConfigError, RunConfig};

pub const COMMANDS: &[&str] = &["synth", "train-prior", "train-restore", "estimate", "restore", "eval"];
pub const RESOLVED_CONFIG_FILE: &str = "config.txt";

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration; exit code 1.
    Usage(String),
    /// The command itself failed; exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.0)
    }
}

impl From<deturb_core::Error> for CliError {
    fn from(e: deturb_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn degradation_config(cfg: &RunConfig) -> DegradationConfig {
    DegradationConfig {
        n_warp_centers: cfg.usize("n_warp_centers"),
        warp_strength_range: [cfg.float("warp_strength_min"), cfg.float("warp_strength_max")],
        warp_falloff_sigma_range: [cfg.float("warp_falloff_min"), cfg.float("warp_falloff_max")],
        psf_sigma_range: [cfg.float("psf_sigma_min"), cfg.float("psf_sigma_max")],
        noise_sigma: cfg.float("noise_sigma"),
        seed: cfg.uint("seed"),
        order: match cfg.raw("degradation_order") {
            "warp_then_blur" => DegradationOrder::WarpThenBlur,
            _ => DegradationOrder::BlurThenWarp,
        },
    }
}

fn upsample(cfg: &RunConfig) -> UpsampleMode {
    match cfg.raw("upsample") {
        "nearest" => UpsampleMode::Nearest,
        _ => UpsampleMode::Bilinear,
    }
}

fn prior_config(cfg: &RunConfig) -> PriorConfig {
    PriorConfig {
        samples: cfg.usize("S"),
        reduction: if cfg.usize("prior_channels") == 1 {
            Reduction::ChannelMean
        } else {
            Reduction::PerChannel
        },
        cache: cfg.flag("prior_cache"),
    }
}

fn prior_spec(cfg: &RunConfig) -> NetworkSpec {
    build_prior_spec(cfg.float("dropout_rate"), upsample(cfg))
}

fn restoration_spec(cfg: &RunConfig) -> Result<NetworkSpec> {
    Ok(build_restoration_spec(cfg.usize("prior_channels"), upsample(cfg))?)
}

fn descriptor(cfg: &RunConfig, weights_key: &str, seed_key: &str, tap: Option<usize>) -> Result<ConvDescriptor> {
    let d = match cfg.path(weights_key) {
        Some(p) => ConvDescriptor::load(p)?,
        None => ConvDescriptor::random(Default::default(), cfg.uint(seed_key))?,
    };
    Ok(match tap {
        Some(t) => d.with_tap(t)?,
        None => d,
    })
}

fn loss_config(cfg: &RunConfig) -> Result<LossConfig> {
    let extractor = descriptor(cfg, "perceptual_weights", "perceptual_seed", Some(3))?;
    Ok(LossConfig::new(cfg.float("lambda_p"), Arc::new(extractor))?)
}

fn train_run(cfg: &RunConfig, stage: Stage, out: &Path) -> TrainRun {
    TrainRun {
        batch_size: cfg.usize("batch"),
        max_iters: cfg.uint(match stage {
            Stage::Prior => "prior_iters",
            Stage::Restoration => "restore_iters",
        }),
        seed: cfg.uint("seed"),
        lr: cfg.float("lr"),
        checkpoint_every: cfg.uint("checkpoint_every"),
        out_dir: Some(out.to_path_buf()),
        record_wall_time: cfg.flag("record_wall_time"),
        progress_every: cfg.uint("progress_every"),
    }
}

fn existing(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    let p = cfg.require_path(key)?;
    if !p.exists() {
        return Err(CliError::Runtime(format!("{key}: {} does not exist", p.display())));
    }
    Ok(p)
}

/// Creates the output directory and records the resolved configuration in it.
fn prepare_output(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let out = cfg.require_path("output")?;
    fs::create_dir_all(&out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let path = out.join(RESOLVED_CONFIG_FILE);
    let text = format!("# deturb {command}\n{}", cfg.to_text());
    fs::write(&path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(out)
}

/// A single image file, or every image directly inside a directory.
fn input_images(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let input = existing(cfg, "input")?;
    if input.is_dir() {
        let files = list_images(&input)?;
        if files.is_empty() {
            return Err(CliError::Runtime(format!("{} contains no images", input.display())));
        }
        Ok(files)
    } else {
        Ok(vec![input])
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned())
}

pub fn run_command(name: &str, cfg: &RunConfig) -> Result<()> {
    match name {
        "synth" => synth(cfg),
        "train-prior" => train_prior(cfg),
        "train-restore" => train_restore(cfg),
        "estimate" => estimate(cfg),
        "restore" => restore(cfg),
        "eval" => eval(cfg),
        other => Err(CliError::Usage(format!(
            "unknown command \"{other}\"; expected one of {}",
            COMMANDS.join(", ")
        ))),
    }
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let input = existing(cfg, "input")?;
    let deg = degradation_config(cfg);
    let out = prepare_output(cfg, "synth")?;
    let manifest = generate_dataset(&input, &out, &deg, cfg.usize("pairs_per_image"))?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn train_prior(cfg: &RunConfig) -> Result<()> {
    let manifest = existing(cfg, "manifest")?;
    let spec = prior_spec(cfg);
    let resume = cfg.path("resume").map(|p| load_checkpoint_for(p, &spec)).transpose()?;
    let loss = loss_config(cfg)?;
    let pairs = load_training_pairs(&manifest, spec.spatial_multiple())?;
    let out = prepare_output(cfg, "train-prior")?;
    let outcome = train_prior_network(&train_run(cfg, Stage::Prior, &out), &pairs, &loss, spec, resume)?;
    report_training(&out, &outcome);
    Ok(())
}

fn train_restore(cfg: &RunConfig) -> Result<()> {
    let manifest = existing(cfg, "manifest")?;
    let prior = load_checkpoint_for(existing(cfg, "atnet1_ckpt")?, &prior_spec(cfg))?.network;
    let spec = restoration_spec(cfg)?;
    let resume = cfg.path("resume").map(|p| load_checkpoint_for(p, &spec)).transpose()?;
    let loss = loss_config(cfg)?;
    let multiple = spec.spatial_multiple().max(prior.spec.spatial_multiple());
    let pairs = load_training_pairs(&manifest, multiple)?;
    let out = prepare_output(cfg, "train-restore")?;
    let outcome = train_restoration_network(
        &train_run(cfg, Stage::Restoration, &out),
        &pairs,
        &prior,
        &prior_config(cfg),
        &loss,
        spec,
        resume,
    )?;
    report_training(&out, &outcome);
    Ok(())
}

fn report_training(out: &Path, outcome: &deturb_core::training::TrainOutcome) {
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!(
            "iterations {}..={}: loss {:.6} -> {:.6}, skipped steps {}",
            first.iter, last.iter, first.total, last.total, outcome.skipped_steps
        );
    }
    println!("wrote {}", out.join(deturb_core::training::FINAL_CHECKPOINT).display());
}

fn estimate(cfg: &RunConfig) -> Result<()> {
    let images = input_images(cfg)?;
    let prior = load_checkpoint_for(existing(cfg, "atnet1_ckpt")?, &prior_spec(cfg))?.network;
    let pc = prior_config(cfg);
    let out = prepare_output(cfg, "estimate")?;
    for (k, path) in images.iter().enumerate() {
        let y = load_image(path)?;
        let (d, mean) = estimate_image_prior(&prior, &pc, &y, derive_seed(cfg.uint("seed"), &[k as u64]), 4)?;
        let s = stem(path);
        d.save(out.join(format!("{s}_prior.bin")))?;
        d.save_preview(out.join(format!("{s}_prior.png")))?;
        save_image(&mean, out.join(format!("{s}_mc_mean.png")))?;
        println!("{}: prior written to {}", path.display(), out.join(format!("{s}_prior.bin")).display());
    }
    Ok(())
}

fn restorer(cfg: &RunConfig) -> Result<Restorer> {
    let prior = load_checkpoint_for(existing(cfg, "atnet1_ckpt")?, &prior_spec(cfg))?.network;
    let restoration = load_checkpoint_for(existing(cfg, "atnet_ckpt")?, &restoration_spec(cfg)?)?.network;
    Ok(Restorer::new(prior, restoration, prior_config(cfg))?)
}

fn restore(cfg: &RunConfig) -> Result<()> {
    let images = input_images(cfg)?;
    let r = restorer(cfg)?;
    let out = prepare_output(cfg, "restore")?;
    for (k, path) in images.iter().enumerate() {
        let y = load_image(path)?;
        let res = r.run(&y, derive_seed(cfg.uint("seed"), &[k as u64]))?;
        let s = stem(path);
        let target = out.join(format!("{s}_restored.png"));
        save_image(&res.x_hat, &target)?;
        if cfg.flag("save_prior") {
            res.prior.save(out.join(format!("{s}_prior.bin")))?;
            res.prior.save_preview(out.join(format!("{s}_prior.png")))?;
        }
        println!("{} -> {}", path.display(), target.display());
    }
    Ok(())
}

/// Stream tag separating probe restoration seeds from manifest pair seeds.
const PROBE_STREAM: u64 = 0x5052_4f42;

fn eval(cfg: &RunConfig) -> Result<()> {
    let manifest_path = existing(cfg, "manifest")?;
    let prior_path = existing(cfg, "atnet1_ckpt")?;
    let restore_path = existing(cfg, "atnet_ckpt")?;
    let r = restorer(cfg)?;
    let deep = descriptor(cfg, "dvgg_weights", "dvgg_seed", None)?;
    let manifest = Manifest::load(&manifest_path)?;
    let seed = cfg.uint("seed");
    let out = prepare_output(cfg, "eval")?;

    let mut echo = std::collections::BTreeMap::new();
    echo.insert("manifest".to_string(), manifest_path.display().to_string());
    echo.insert("prior_checkpoint".to_string(), format!("{} crc32:{}", prior_path.display(), file_id(&prior_path)?));
    echo.insert(
        "restoration_checkpoint".to_string(),
        format!("{} crc32:{}", restore_path.display(), file_id(&restore_path)?),
    );
    echo.insert("samples".to_string(), cfg.raw("S").to_string());
    echo.insert("seed".to_string(), seed.to_string());
    echo.insert("d_vgg_extractor".to_string(), deep.id());
    let mut report = evaluate_restoration(&manifest, &r, seed, Some(&deep as &dyn FeatureExtractor), echo)?;

    match (cfg.path("gallery"), cfg.path("probes")) {
        (Some(g), Some(p)) => {
            let provider = DescriptorEmbedding {
                extractor: descriptor(cfg, "embedding_weights", "embedding_seed", None)?,
            };
            let gallery = Gallery::from_dir(&g, &provider)?;
            let probes = labelled_images(&p)?;
            let probe_seed = derive_seed(seed, &[PROBE_STREAM]);
            let restored = probes
                .iter()
                .enumerate()
                .map(|(k, (img, label))| Ok((r.restore(img, derive_seed(probe_seed, &[k as u64]))?, label.clone())))
                .collect::<Result<Vec<_>>>()?;
            let ks = [1, 3, 5];
            report.identification = Some(IdentificationReport {
                provider: deturb_core::evaluation::EmbeddingProvider::id(&provider),
                restored: topk_identification(&restored, &gallery, &provider, &ks)?,
                degraded: topk_identification(&probes, &gallery, &provider, &ks)?,
            });
        }
        (None, None) => {}
        _ => {
            return Err(CliError::Usage(
                "identification needs both \"gallery\" and \"probes\"".into(),
            ))
        }
    }

    let json = out.join("report.json");
    fs::write(&json, report.to_json()).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", json.display())))?;
    let table = report.to_table();
    let txt = out.join("report.txt");
    fs::write(&txt, &table).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", txt.display())))?;
    print!("{table}");
    Ok(())
}
