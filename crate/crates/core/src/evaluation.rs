//! Restoration inference, full-reference evaluation and identity retrieval.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::checkpoint::load_checkpoint;
use crate::dataset::{list_images, Manifest};
use crate::error::{Error, Result};
use crate::features::{ConvDescriptor, FeatureExtractor};
use crate::image::{load_image, Image};
use crate::metrics::{compensated_sum, psnr, ssim};
use crate::network::{ForwardMode, Network};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::{concat_channels, Tensor};
use crate::training::PriorConfig;
use crate::uncertainty::{estimate_prior, Reduction, UncertaintyMap};

/// Mean squared distance between deep features of `a` and `b`.
pub fn d_vgg(a: &Image, b: &Image, extractor: &dyn FeatureExtractor) -> Result<f64> {
    a.same_shape(b)?;
    let fa = extractor.features(&Tensor::from_image(a))?;
    let fb = extractor.features(&Tensor::from_image(b))?;
    let n = fa.len() as f64;
    Ok(compensated_sum(fa.data().iter().zip(fb.data()).map(|(x, y)| (x - y) * (x - y))) / n)
}

/// Anything that maps a degraded image to a restored one.
pub trait RestorationModel: Sync {
    fn restore(&self, y: &Image, seed: u64) -> Result<Image>;
}

/// Output of a full restoration: the prior, the MC mean and the final image.
#[derive(Debug, Clone)]
pub struct Restored {
    pub x_hat: Image,
    pub prior: UncertaintyMap,
    pub mc_mean: Image,
}

/// The two-stage pipeline. Inputs are RGB-converted and edge-padded to the
/// networks' spatial multiple; outputs are cropped back to the input size.
#[derive(Debug, Clone)]
pub struct Restorer {
    pub prior: Network,
    pub restoration: Network,
    pub prior_cfg: PriorConfig,
}

fn pad_tensor(t: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, th, tw) = t.shape();
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * th + y.min(th - 1)) * tw;
            data.extend((0..w).map(|x| t.data()[row + x.min(tw - 1)]));
        }
    }
    Tensor::from_vec(c, h, w, data).expect("padded shape")
}

fn crop_tensor(t: &Tensor, h: usize, w: usize) -> Tensor {
    let (c, th, tw) = t.shape();
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * th + y) * tw;
            data.extend_from_slice(&t.data()[row..row + w]);
        }
    }
    Tensor::from_vec(c, h, w, data).expect("cropped shape")
}

fn padded(y: &Image, multiple: usize) -> Result<(Tensor, usize, usize)> {
    y.check_pipeline_size()?;
    let (h, w) = (y.height(), y.width());
    let padded = y.to_rgb().pad_replicate(h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    Ok((Tensor::from_image(&padded), h, w))
}

/// MC-dropout prior and mean prediction for an arbitrary-size image: the
/// image is RGB-converted and edge-padded to `multiple`, results are cropped
/// back.
pub fn estimate_image_prior(
    prior: &Network,
    cfg: &PriorConfig,
    y: &Image,
    seed: u64,
    multiple: usize,
) -> Result<(UncertaintyMap, Image)> {
    let multiple = multiple.max(prior.spec.spatial_multiple());
    let (t, h, w) = padded(y, multiple)?;
    let (d, mean) = estimate_prior(prior, &t, cfg.samples, seed, cfg.reduction)?;
    let d = UncertaintyMap {
        values: crop_tensor(&d.values, h, w),
        reduction: d.reduction,
    };
    Ok((d, crop_tensor(&mean, h, w).to_image()?))
}

impl Restorer {
    pub fn new(prior: Network, restoration: Network, prior_cfg: PriorConfig) -> Result<Self> {
        let expected = 3 + prior_cfg.channels(3);
        if restoration.spec.in_channels() != expected {
            return Err(Error::InvalidNetwork(format!(
                "restoration network takes {} channels; RGB plus prior gives {expected}",
                restoration.spec.in_channels()
            )));
        }
        if prior.spec.in_channels() != 3 {
            return Err(Error::InvalidNetwork("the prior network must take RGB input".into()));
        }
        Ok(Self {
            prior,
            restoration,
            prior_cfg,
        })
    }

    /// Loads both checkpoints; the prior reduction follows from the
    /// restoration network's input width.
    pub fn from_checkpoints(prior: impl AsRef<Path>, restoration: impl AsRef<Path>, samples: usize) -> Result<Self> {
        let prior = load_checkpoint(prior)?.network;
        let restoration = load_checkpoint(restoration)?.network;
        let reduction = match restoration.spec.in_channels().checked_sub(3) {
            Some(3) => Reduction::PerChannel,
            Some(1) => Reduction::ChannelMean,
            _ => {
                return Err(Error::InvalidNetwork(format!(
                    "cannot infer the prior layout from {} input channels",
                    restoration.spec.in_channels()
                )))
            }
        };
        Self::new(
            prior,
            restoration,
            PriorConfig {
                samples,
                reduction,
                cache: false,
            },
        )
    }

    fn multiple(&self) -> usize {
        self.prior.spec.spatial_multiple().max(self.restoration.spec.spatial_multiple())
    }

    /// The prior `d` and the MC mean prediction for `y`.
    pub fn estimate(&self, y: &Image, seed: u64) -> Result<(UncertaintyMap, Image)> {
        estimate_image_prior(&self.prior, &self.prior_cfg, y, seed, self.multiple())
    }

    /// Runs the restoration network on `y` with a caller-supplied prior of
    /// `y`'s spatial size.
    pub fn restore_with_prior(&self, y: &Image, d: &Tensor) -> Result<Image> {
        let (t, h, w) = padded(y, self.multiple())?;
        if (d.height(), d.width()) != (h, w) || d.channels() != self.prior_cfg.channels(3) {
            return Err(Error::ShapeMismatch(format!(
                "prior {:?} does not fit a {h}x{w} image",
                d.shape()
            )));
        }
        let d = pad_tensor(d, t.height(), t.width());
        let input = concat_channels(&[&t, &d])?;
        let out = self
            .restoration
            .forward(&input, ForwardMode::EvalDeterministic, &mut SeededRng::new(0))?;
        crop_tensor(&out, h, w).to_image()
    }

    pub fn run(&self, y: &Image, seed: u64) -> Result<Restored> {
        let (prior, mc_mean) = self.estimate(y, seed)?;
        let x_hat = self.restore_with_prior(y, &prior.values)?;
        Ok(Restored { x_hat, prior, mc_mean })
    }
}

impl RestorationModel for Restorer {
    fn restore(&self, y: &Image, seed: u64) -> Result<Image> {
        Ok(self.run(y, seed)?.x_hat)
    }
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// Infinite for identical images; serialized as `"inf"`.
    #[serde(serialize_with = "ser_psnr")]
    pub psnr: f64,
    pub ssim: f64,
    pub d_vgg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRow {
    pub id: String,
    pub restored: Metrics,
    pub baseline: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    /// Mean over finite PSNR rows; `None` when every row is infinite.
    pub mean_psnr: Option<f64>,
    pub infinite_psnr: usize,
    pub mean_ssim: f64,
    pub mean_d_vgg: Option<f64>,
}

impl Summary {
    fn of<'a>(rows: impl Iterator<Item = &'a Metrics> + Clone) -> Self {
        let count = rows.clone().count();
        let finite: Vec<f64> = rows.clone().map(|m| m.psnr).filter(|p| p.is_finite()).collect();
        let mean = |v: &[f64]| compensated_sum(v.iter().copied()) / v.len() as f64;
        let ssims: Vec<f64> = rows.clone().map(|m| m.ssim).collect();
        let dv: Vec<f64> = rows.filter_map(|m| m.d_vgg).collect();
        Self {
            count,
            mean_psnr: (!finite.is_empty()).then(|| mean(&finite)),
            infinite_psnr: count - finite.len(),
            mean_ssim: mean(&ssims),
            mean_d_vgg: (dv.len() == count && count > 0).then(|| mean(&dv)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub config: BTreeMap<String, String>,
    pub rows: Vec<PairRow>,
    pub restored: Summary,
    /// Degraded input against the clean image.
    pub baseline: Summary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub identification: Option<IdentificationReport>,
}

/// Top-K retrieval of restored probes, next to the same probes unrestored.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentificationReport {
    pub provider: String,
    pub restored: Vec<TopK>,
    pub degraded: Vec<TopK>,
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or("-".into(), |x| format!("{x:.prec$}"))
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let header = [
            "id", "psnr(y)", "psnr(x^)", "ssim(y)", "ssim(x^)", "dvgg(y)", "dvgg(x^)",
        ];
        let psnr_s = |p: f64| if p.is_infinite() { "inf".into() } else { format!("{p:.3}") };
        let mut lines: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            lines.push(vec![
                r.id.clone(),
                psnr_s(r.baseline.psnr),
                psnr_s(r.restored.psnr),
                format!("{:.4}", r.baseline.ssim),
                format!("{:.4}", r.restored.ssim),
                fmt_opt(r.baseline.d_vgg, 5),
                fmt_opt(r.restored.d_vgg, 5),
            ]);
        }
        let (b, x) = (&self.baseline, &self.restored);
        lines.push(vec![
            "mean".into(),
            fmt_opt(b.mean_psnr, 3),
            fmt_opt(x.mean_psnr, 3),
            format!("{:.4}", b.mean_ssim),
            format!("{:.4}", x.mean_ssim),
            fmt_opt(b.mean_d_vgg, 5),
            fmt_opt(x.mean_d_vgg, 5),
        ]);
        let widths: Vec<usize> = (0..header.len())
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, w))| if i == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).expect("write to string");
        }
        if x.infinite_psnr + b.infinite_psnr > 0 {
            writeln!(
                out,
                "infinite PSNR rows (excluded from means): restored {}, degraded {}",
                x.infinite_psnr, b.infinite_psnr
            )
            .expect("write to string");
        }
        if let Some(id) = &self.identification {
            for (name, rows) in [("restored", &id.restored), ("degraded", &id.degraded)] {
                let cells: Vec<String> = rows.iter().map(|t| format!("top-{} {:.2}%", t.k, t.accuracy)).collect();
                writeln!(out, "identification ({name}): {}", cells.join("  ")).expect("write to string");
            }
        }
        out
    }
}

fn metrics(a: &Image, b: &Image, deep: Option<&dyn FeatureExtractor>) -> Result<Metrics> {
    Ok(Metrics {
        psnr: psnr(a, b)?,
        ssim: ssim(a, b)?,
        d_vgg: deep.map(|e| d_vgg(a, b, e)).transpose()?,
    })
}

/// Scores every manifest pair. Pair `k` is restored with seed
/// `derive_seed(seed, [k])`; rows keep manifest order.
pub fn evaluate_restoration(
    manifest: &Manifest,
    model: &dyn RestorationModel,
    seed: u64,
    deep: Option<&dyn FeatureExtractor>,
    config: BTreeMap<String, String>,
) -> Result<MetricsReport> {
    if manifest.is_empty() {
        return Err(Error::Evaluation("manifest has no pairs".into()));
    }
    let rows = (0..manifest.len())
        .into_par_iter()
        .map(|k| {
            let y = load_image(manifest.degraded_path(k))?.to_rgb();
            let x = load_image(manifest.clean_path(k))?.to_rgb();
            y.same_shape(&x).map_err(|_| {
                Error::Evaluation(format!("pair {k}: degraded and clean differ in shape"))
            })?;
            let x_hat = model.restore(&y, derive_seed(seed, &[k as u64]))?;
            Ok(PairRow {
                id: manifest.records()[k].degraded.clone(),
                restored: metrics(&x_hat, &x, deep)?,
                baseline: metrics(&y, &x, deep)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        config,
        restored: Summary::of(rows.iter().map(|r| &r.restored)),
        baseline: Summary::of(rows.iter().map(|r| &r.baseline)),
        rows,
        identification: None,
    })
}

/// Convenience wrapper: loads the manifest and both checkpoints from disk.
pub fn evaluate_restoration_files(
    manifest: impl AsRef<Path>,
    prior_ckpt: impl AsRef<Path>,
    restoration_ckpt: impl AsRef<Path>,
    samples: usize,
    seed: u64,
    deep: Option<&dyn FeatureExtractor>,
) -> Result<MetricsReport> {
    let (manifest, prior_ckpt, restoration_ckpt) = (manifest.as_ref(), prior_ckpt.as_ref(), restoration_ckpt.as_ref());
    let restorer = Restorer::from_checkpoints(prior_ckpt, restoration_ckpt, samples)?;
    let m = Manifest::load(manifest)?;
    let config = BTreeMap::from([
        ("manifest".to_string(), manifest.display().to_string()),
        ("prior_checkpoint".to_string(), crate::checkpoint::file_id(prior_ckpt)?),
        ("restoration_checkpoint".to_string(), crate::checkpoint::file_id(restoration_ckpt)?),
        ("samples".to_string(), samples.to_string()),
        ("seed".to_string(), seed.to_string()),
        ("d_vgg_extractor".to_string(), deep.map_or("none".into(), |e| e.id())),
    ]);
    evaluate_restoration(&m, &restorer, seed, deep, config)
}

/// Maps an image to a unit-norm vector.
pub trait EmbeddingProvider: Sync {
    fn id(&self) -> String;
    fn embed(&self, img: &Image) -> Result<Vec<f64>>;
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = compensated_sum(v.iter().map(|x| x * x)).sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::Evaluation("embedding has zero or non-finite norm".into()));
    }
    for x in &mut v {
        *x /= norm;
    }
    Ok(v)
}

/// Deep descriptor features, globally average-pooled per channel and
/// L2-normalized. Accepts weights files, so an externally trained face
/// descriptor can be plugged in.
#[derive(Debug, Clone)]
pub struct DescriptorEmbedding {
    pub extractor: ConvDescriptor,
}

impl EmbeddingProvider for DescriptorEmbedding {
    fn id(&self) -> String {
        format!("gap:{}", self.extractor.id())
    }

    fn embed(&self, img: &Image) -> Result<Vec<f64>> {
        let side = self.extractor.min_side();
        let rgb = img.to_rgb();
        let padded = rgb.pad_replicate(rgb.height().max(side), rgb.width().max(side));
        let f = self.extractor.features(&Tensor::from_image(&padded))?;
        let plane = f.height() * f.width();
        let pooled = f
            .data()
            .chunks(plane)
            .map(|c| compensated_sum(c.iter().copied()) / plane as f64)
            .collect();
        normalize(pooled)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gallery {
    labels: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl Gallery {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one vector (normalized on insertion).
    pub fn push(&mut self, label: impl Into<String>, embedding: Vec<f64>) -> Result<()> {
        if let Some(first) = self.vectors.first() {
            if first.len() != embedding.len() {
                return Err(Error::Evaluation(format!(
                    "gallery vectors have dimension {}, got {}",
                    first.len(),
                    embedding.len()
                )));
            }
        }
        self.labels.push(label.into());
        self.vectors.push(normalize(embedding)?);
        Ok(())
    }

    /// Builds from `dir/<identity>/<image>`; identities and images in name order.
    pub fn from_dir(dir: impl AsRef<Path>, provider: &dyn EmbeddingProvider) -> Result<Self> {
        let mut g = Self::new();
        for (img, label) in labelled_images(dir.as_ref())? {
            g.push(label, provider.embed(&img)?)?;
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn identities(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.labels.iter().map(String::as_str).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Loads `dir/<label>/<image>` as `(image, label)`, sorted by label then file name.
pub fn labelled_images(dir: &Path) -> Result<Vec<(Image, String)>> {
    let mut subdirs: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let mut out = Vec::new();
    for sub in subdirs {
        let label = sub.file_name().expect("dir entry").to_string_lossy().into_owned();
        for p in list_images(&sub)? {
            out.push((load_image(&p)?, label.clone()));
        }
    }
    if out.is_empty() {
        return Err(Error::Evaluation(format!(
            "{} has no <identity>/<image> entries",
            dir.display()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TopK {
    pub k: usize,
    /// Percentage of probes with a hit among the `k` nearest gallery vectors.
    pub accuracy: f64,
}

/// Top-K retrieval accuracy. Gallery vectors are ranked by cosine similarity,
/// ties going to the earlier-inserted vector.
pub fn topk_from_embeddings(probes: &[(Vec<f64>, String)], gallery: &Gallery, ks: &[usize]) -> Result<Vec<TopK>> {
    if gallery.is_empty() {
        return Err(Error::Evaluation("gallery is empty".into()));
    }
    if probes.is_empty() {
        return Err(Error::Evaluation("no probes".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0) {
        return Err(Error::Evaluation(format!("K must be positive, got {k}")));
    }
    let dim = gallery.vectors[0].len();
    let mut hits = vec![0usize; ks.len()];
    for (emb, label) in probes {
        if !gallery.labels.contains(label) {
            return Err(Error::Evaluation(format!("probe label {label} is not in the gallery")));
        }
        if emb.len() != dim {
            return Err(Error::Evaluation(format!(
                "probe dimension {} differs from gallery dimension {dim}",
                emb.len()
            )));
        }
        let e = normalize(emb.clone())?;
        let mut ranked: Vec<(f64, usize)> = gallery
            .vectors
            .iter()
            .enumerate()
            .map(|(i, g)| (compensated_sum(g.iter().zip(&e).map(|(a, b)| a * b)), i))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let first_hit = ranked.iter().position(|&(_, i)| &gallery.labels[i] == label);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first_hit.is_some_and(|r| r < k) {
                *h += 1;
            }
        }
    }
    Ok(ks
        .iter()
        .zip(hits)
        .map(|(&k, h)| TopK {
            k,
            accuracy: 100.0 * h as f64 / probes.len() as f64,
        })
        .collect())
}

/// Embeds labelled probe images and scores them against `gallery`.
pub fn topk_identification(
    probes: &[(Image, String)],
    gallery: &Gallery,
    provider: &dyn EmbeddingProvider,
    ks: &[usize],
) -> Result<Vec<TopK>> {
    let embedded = probes
        .par_iter()
        .map(|(img, label)| Ok((provider.embed(img)?, label.clone())))
        .collect::<Result<Vec<_>>>()?;
    topk_from_embeddings(&embedded, gallery, ks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::IdentityExtractor;
    use crate::metrics::mse;

    fn axis(n: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn d_vgg_identity_is_mse() {
        let a = Image::from_fn(8, 8, 3, |y, x, c| ((y * 3 + x + c) % 5) as f64 / 5.0).unwrap();
        let b = Image::filled(8, 8, 3, 0.3).unwrap();
        let d = d_vgg(&a, &b, &IdentityExtractor).unwrap();
        assert!((d - mse(&a, &b).unwrap()).abs() < 1e-12);
        assert_eq!(d_vgg(&a, &a, &IdentityExtractor).unwrap(), 0.0);
        assert_eq!(d, d_vgg(&b, &a, &IdentityExtractor).unwrap());
    }

    #[test]
    fn hand_counted_topk() {
        let mut g = Gallery::new();
        for (i, id) in ["a", "b", "c"].iter().enumerate() {
            g.push(*id, axis(3, i)).unwrap();
        }
        let probes = vec![
            (axis(3, 0), "a".to_string()),
            (vec![0.0, 0.2, 1.0], "b".to_string()),
        ];
        let r = topk_from_embeddings(&probes, &g, &[1, 2, 3]).unwrap();
        let acc: Vec<f64> = r.iter().map(|t| t.accuracy).collect();
        assert_eq!(acc, vec![50.0, 100.0, 100.0]);
    }

    #[test]
    fn ties_go_to_insertion_order() {
        let mut g = Gallery::new();
        g.push("first", vec![1.0, 0.0]).unwrap();
        g.push("second", vec![1.0, 0.0]).unwrap();
        let hit = |label: &str| {
            topk_from_embeddings(&[(vec![1.0, 0.0], label.to_string())], &g, &[1]).unwrap()[0].accuracy
        };
        assert_eq!(hit("first"), 100.0);
        assert_eq!(hit("second"), 0.0);
    }

    #[test]
    fn retrieval_errors() {
        let g = Gallery::new();
        assert!(topk_from_embeddings(&[(vec![1.0], "a".into())], &g, &[1]).is_err());
        let mut g = Gallery::new();
        g.push("a", vec![1.0, 0.0]).unwrap();
        assert!(topk_from_embeddings(&[(vec![1.0, 0.0], "zz".into())], &g, &[1]).is_err());
        assert!(g.push("b", vec![0.0, 0.0]).is_err());
        assert!(g.push("b", vec![1.0]).is_err());
    }

    #[test]
    fn summary_excludes_infinite_rows() {
        let rows = [
            Metrics { psnr: f64::INFINITY, ssim: 1.0, d_vgg: None },
            Metrics { psnr: 20.0, ssim: 0.5, d_vgg: None },
            Metrics { psnr: 30.0, ssim: 0.7, d_vgg: None },
        ];
        let s = Summary::of(rows.iter());
        assert_eq!(s.mean_psnr, Some(25.0));
        assert_eq!(s.infinite_psnr, 1);
        assert!((s.mean_ssim - 2.2 / 3.0).abs() < 1e-12);
        let json = serde_json::to_string(&rows[0]).unwrap();
        assert!(json.contains("\"psnr\":\"inf\""), "{json}");
    }

    #[test]
    fn descriptor_embedding_is_unit_norm() {
        let p = DescriptorEmbedding {
            extractor: ConvDescriptor::default_deep(3).unwrap(),
        };
        let img = Image::from_fn(20, 24, 1, |y, x, _| ((y * x) % 7) as f64 / 7.0).unwrap();
        let e = p.embed(&img).unwrap();
        let n: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert_eq!(e, p.embed(&img).unwrap());
    }

    #[test]
    fn padding_helpers() {
        let t = Tensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = pad_tensor(&t, 3, 3);
        assert_eq!(p.data(), &[1.0, 2.0, 2.0, 3.0, 4.0, 4.0, 3.0, 4.0, 4.0]);
        assert_eq!(crop_tensor(&p, 2, 2), t);
    }
}
