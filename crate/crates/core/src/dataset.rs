//! Paired dataset generation and the JSON-lines manifest.

use std::fs;
use std::path::{Component, Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, save_image, Image};
use crate::rng::{derive_seed, SeededRng};
use crate::synth::{degrade, DegradationConfig};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const DEGRADED_DIR: &str = "degraded";

/// One `(clean, degraded)` pair. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub clean: String,
    pub degraded: String,
    pub seed: u64,
    pub psf_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    root: PathBuf,
    records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Self {
        Self {
            root: root.into(),
            records,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| {
                Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            records.push(rec);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec).expect("manifest records serialize");
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn clean_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].clean)
    }

    pub fn degraded_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].degraded)
    }

    /// Loads every pair, as `(degraded, clean)`.
    pub fn load_pairs(&self) -> Result<Vec<(Image, Image)>> {
        (0..self.len())
            .map(|i| {
                let y = load_image(self.degraded_path(i))?;
                let x = load_image(self.clean_path(i))?;
                y.same_shape(&x).map_err(|_| {
                    Error::Dataset(format!(
                        "pair {i}: degraded {:?} and clean {:?} differ in shape",
                        y.shape(),
                        x.shape()
                    ))
                })?;
                Ok((y, x))
            })
            .collect()
    }
}

/// PNG/JPEG files directly inside `dir`, sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    Ok(files)
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// `target` relative to `base`; both are made absolute first.
pub(crate) fn relative_path(target: &Path, base: &Path) -> Result<PathBuf> {
    let absolute = |p: &Path| -> Result<PathBuf> {
        p.canonicalize().map_err(|e| Error::io(p, e))
    };
    let target = absolute(target)?;
    let base = absolute(base)?;
    let t: Vec<Component> = target.components().collect();
    let b: Vec<Component> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut rel = PathBuf::new();
    for _ in common..b.len() {
        rel.push("..");
    }
    for c in &t[common..] {
        rel.push(c.as_os_str());
    }
    Ok(rel)
}

fn path_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Seed for pair `pair` of image `image` under `base_seed`.
pub fn pair_seed(base_seed: u64, image: usize, pair: usize) -> u64 {
    derive_seed(base_seed, &[image as u64, pair as u64])
}

/// Degrades every clean image `pairs_per_image` times into `out_dir/degraded/`
/// and writes `out_dir/manifest.jsonl`. Returns the manifest path.
pub fn generate_dataset(
    clean_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    cfg: &DegradationConfig,
    pairs_per_image: usize,
) -> Result<PathBuf> {
    cfg.validate()?;
    if pairs_per_image == 0 {
        return Err(Error::InvalidConfig("pairs_per_image must be >= 1".into()));
    }
    let clean_dir = clean_dir.as_ref();
    let out_dir = out_dir.as_ref();
    let sources = list_images(clean_dir)?;
    if sources.is_empty() {
        return Err(Error::Dataset(format!(
            "no PNG/JPEG images in {}",
            clean_dir.display()
        )));
    }
    let degraded_dir = out_dir.join(DEGRADED_DIR);
    fs::create_dir_all(&degraded_dir).map_err(|e| Error::io(&degraded_dir, e))?;

    let jobs: Vec<(usize, usize)> = (0..sources.len())
        .flat_map(|i| (0..pairs_per_image).map(move |p| (i, p)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(i, p)| -> Result<ManifestRecord> {
            let src = &sources[i];
            let x = load_image(src)?;
            let seed = pair_seed(cfg.seed, i, p);
            let out = degrade(&x, cfg, &mut SeededRng::new(seed))?;
            let stem = src
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("img{i}"));
            let name = format!("{i:05}_{stem}_{p:03}.png");
            let dst = degraded_dir.join(&name);
            save_image(&out.y, &dst)?;
            Ok(ManifestRecord {
                clean: path_string(&relative_path(src, out_dir)?),
                degraded: format!("{DEGRADED_DIR}/{name}"),
                seed,
                psf_sigma: out.psf_sigma,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest_path = out_dir.join(MANIFEST_FILE);
    Manifest::new(out_dir, records).write(&manifest_path)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synthetic_scene;

    fn write_clean(dir: &Path, n: usize) {
        fs::create_dir_all(dir).unwrap();
        for i in 0..n {
            let img = synthetic_scene(16, 20, &mut SeededRng::new(i as u64)).unwrap();
            save_image(&img, dir.join(format!("face{i}.png"))).unwrap();
        }
    }

    #[test]
    fn counts_records_and_files_exist() {
        let tmp = tempfile::tempdir().unwrap();
        let clean = tmp.path().join("clean");
        write_clean(&clean, 2);
        let out = tmp.path().join("out");
        let path = generate_dataset(&clean, &out, &DegradationConfig::default(), 3).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.len(), 6);
        for i in 0..m.len() {
            assert!(m.degraded_path(i).exists());
            load_image(m.degraded_path(i)).unwrap();
            load_image(m.clean_path(i)).unwrap();
        }
        assert_eq!(m.records()[0].clean, "../clean/face0.png");
        assert_eq!(m.load_pairs().unwrap().len(), 6);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let clean = tmp.path().join("clean");
        write_clean(&clean, 2);
        let cfg = DegradationConfig {
            seed: 17,
            ..DegradationConfig::default()
        };
        let a = generate_dataset(&clean, tmp.path().join("a"), &cfg, 2).unwrap();
        let b = generate_dataset(&clean, tmp.path().join("b"), &cfg, 2).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let ma = Manifest::load(&a).unwrap();
        let mb = Manifest::load(&b).unwrap();
        for i in 0..ma.len() {
            assert_eq!(
                fs::read(ma.degraded_path(i)).unwrap(),
                fs::read(mb.degraded_path(i)).unwrap()
            );
        }
    }

    #[test]
    fn per_pair_seeds_follow_derivation() {
        let tmp = tempfile::tempdir().unwrap();
        let clean = tmp.path().join("clean");
        write_clean(&clean, 2);
        let path = generate_dataset(&clean, tmp.path().join("o"), &DegradationConfig::default(), 2)
            .unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.records()[3].seed, pair_seed(0, 1, 1));
        let seeds: std::collections::HashSet<u64> = m.records().iter().map(|r| r.seed).collect();
        assert_eq!(seeds.len(), 4);
    }

    #[test]
    fn empty_directory_is_error() {
        let tmp = tempfile::tempdir().unwrap();
        let err = generate_dataset(tmp.path(), tmp.path().join("o"), &DegradationConfig::default(), 1);
        assert!(matches!(err, Err(Error::Dataset(_))));
    }

    #[test]
    fn malformed_manifest_line_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("m.jsonl");
        fs::write(&p, "{\"clean\":\"a\"}\n").unwrap();
        let err = Manifest::load(&p).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
    }
}
