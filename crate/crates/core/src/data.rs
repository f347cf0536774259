//! Synthetic face-like dataset: smooth identity prototypes perturbed by
//! translation, brightness and noise, with disjoint train and test people.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::recognition::Region;
use crate::tensor::Rng;
use crate::weights::{load_weights, save_weights};
use crate::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub train_identities: usize,
    pub test_identities: usize,
    pub images_per_identity: usize,
    pub canvas_h: usize,
    pub canvas_w: usize,
    /// Maximum shift in pixels along each axis.
    pub translation: usize,
    /// Maximum additive brightness change.
    pub brightness: f64,
    pub noise_std: f64,
    /// Gaussian blobs summed into each prototype.
    pub blobs: usize,
    pub regions: Vec<Region>,
    pub seed: u64,
}

/// Five crops of a 32×32 canvas, all centred horizontally.
pub fn default_regions() -> Vec<Region> {
    vec![
        Region::new("full", 0, 0, 32, 32),
        Region::new("centre", 4, 4, 24, 24),
        Region::new("upper", 0, 6, 20, 20),
        Region::new("lower", 12, 6, 20, 20),
        Region::new("core", 8, 8, 16, 16),
    ]
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            train_identities: 20,
            test_identities: 10,
            images_per_identity: 20,
            canvas_h: 32,
            canvas_w: 32,
            translation: 1,
            brightness: 0.1,
            noise_std: 0.1,
            blobs: 8,
            regions: default_regions(),
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_identities + self.test_identities < 2 || self.train_identities == 0 {
            return Err(Error::Dataset("need at least 2 identities, including one for training".into()));
        }
        if self.images_per_identity == 0 || self.canvas_h == 0 || self.canvas_w == 0 {
            return Err(Error::Dataset("image count and canvas size must be positive".into()));
        }
        if !(self.brightness >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Dataset("perturbation magnitudes must be non-negative".into()));
        }
        if self.regions.is_empty() {
            return Err(Error::Geometry("at least one region is required".into()));
        }
        for r in &self.regions {
            r.check_fits(self.canvas_h, self.canvas_w)?;
        }
        Ok(())
    }
}

/// Images with integer identity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn identities(&self) -> Vec<usize> {
        let mut ids = self.labels.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub regions: Vec<Region>,
    pub seed: u64,
}

fn prototype(spec: &SyntheticDatasetSpec, rng: &mut Rng) -> Vec<f64> {
    let (h, w) = (spec.canvas_h, spec.canvas_w);
    let scale = h.min(w) as f64;
    let mut img = vec![0.0; h * w];
    for _ in 0..spec.blobs {
        let cy = rng.uniform_in(0.0, h as f64);
        let cx = rng.uniform_in(0.0, w as f64);
        let sigma = rng.uniform_in(0.06, 0.2) * scale;
        let amp = rng.uniform_in(-1.0, 1.0);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                img[y * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    img
}

fn perturb(spec: &SyntheticDatasetSpec, proto: &[f64], rng: &mut Rng) -> Tensor {
    let (h, w) = (spec.canvas_h, spec.canvas_w);
    let t = spec.translation as i64;
    let span = 2 * spec.translation + 1;
    let dy = rng.below(span) as i64 - t;
    let dx = rng.below(span) as i64 - t;
    let shift = if spec.brightness > 0.0 { rng.uniform_in(-spec.brightness, spec.brightness) } else { 0.0 };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            // shifted content, edges replicated
            let sy = (y - dy).clamp(0, h as i64 - 1) as usize;
            let sx = (x - dx).clamp(0, w as i64 - 1) as usize;
            let noise = if spec.noise_std > 0.0 { spec.noise_std * rng.normal() } else { 0.0 };
            // stored as f32 on disk; round now so reloaded data is identical
            out.push((proto[sy * w + sx] + shift + noise) as f32 as f64);
        }
    }
    Tensor::from_vec(&[1, h, w], out).expect("positive canvas")
}

/// Train identities are labelled `0..train_identities`, test identities follow.
pub fn gen_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let total = spec.train_identities + spec.test_identities;
    let mut train = Split { images: Vec::new(), labels: Vec::new() };
    let mut test = train.clone();
    for id in 0..total {
        let proto = prototype(spec, &mut root.fork(2 * id as u64));
        let mut rng = root.fork(2 * id as u64 + 1);
        let split = if id < spec.train_identities { &mut train } else { &mut test };
        for _ in 0..spec.images_per_identity {
            split.images.push(perturb(spec, &proto, &mut rng));
            split.labels.push(id);
        }
    }
    Ok(Dataset { train, test, regions: spec.regions.clone(), seed: spec.seed })
}

fn split_tensors(split: &Split) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let n = split.images.len();
    if n == 0 {
        return Ok(store);
    }
    let shape = split.images[0].shape().to_vec();
    let mut data = Vec::with_capacity(n * split.images[0].len());
    for img in &split.images {
        img.expect_shape(&shape)?;
        data.extend_from_slice(img.data());
    }
    let mut full = vec![n];
    full.extend_from_slice(&shape);
    store.insert("images".into(), Tensor::from_vec(&full, data)?);
    store.insert("labels".into(), Tensor::vector(split.labels.iter().map(|&l| l as f64).collect()));
    Ok(store)
}

fn split_from_tensors(store: &ParamStore, what: &str) -> Result<Split> {
    if store.is_empty() {
        return Ok(Split { images: Vec::new(), labels: Vec::new() });
    }
    let (images, labels) = match (store.get("images"), store.get("labels")) {
        (Some(i), Some(l)) => (i, l),
        _ => return Err(Error::Dataset(format!("{what} lacks `images` or `labels`"))),
    };
    let n = labels.len();
    if images.rank() != 4 || images.shape()[0] != n {
        return Err(Error::Dataset(format!("{what}: {n} labels but images shaped {:?}", images.shape())));
    }
    let per = images.len() / n;
    let shape = &images.shape()[1..];
    let images = images
        .data()
        .chunks_exact(per)
        .map(|c| Tensor::from_vec(shape, c.to_vec()))
        .collect::<Result<_>>()?;
    let labels = labels
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Dataset(format!("{what}: label {v} is not a non-negative integer")))
            }
        })
        .collect::<Result<_>>()?;
    Ok(Split { images, labels })
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn manifest(ds: &Dataset) -> String {
    let mut m = String::new();
    let canvas = ds.train.images.first().map_or(&[0, 0, 0][..], |t| t.shape());
    writeln!(m, "seed = {}", ds.seed).unwrap();
    writeln!(m, "canvas = {}x{}", canvas[1], canvas[2]).unwrap();
    writeln!(m, "train_images = {}", ds.train.images.len()).unwrap();
    writeln!(m, "test_images = {}", ds.test.images.len()).unwrap();
    writeln!(m, "train_identities = {}", join(&ds.train.identities())).unwrap();
    writeln!(m, "test_identities = {}", join(&ds.test.identities())).unwrap();
    for r in &ds.regions {
        writeln!(m, "region = {} {} {} {} {}", r.name, r.top, r.left, r.height, r.width).unwrap();
    }
    m
}

/// Parsed `manifest.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub train_identities: Vec<usize>,
    pub test_identities: Vec<usize>,
    pub regions: Vec<Region>,
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut out = Manifest { train_identities: Vec::new(), test_identities: Vec::new(), regions: Vec::new() };
    for (i, line) in text.lines().enumerate() {
        let bad = |message: String| Error::Config { line: i + 1, message };
        let Some((key, value)) = line.split_once('=') else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(bad(format!("expected `key = value`, got `{line}`")));
        };
        let ids = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse().map_err(|_| bad(format!("bad identity `{s}`"))))
                .collect()
        };
        match key.trim() {
            "train_identities" => out.train_identities = ids(value)?,
            "test_identities" => out.test_identities = ids(value)?,
            "region" => out.regions.push(parse_region(value).map_err(bad)?),
            "seed" | "canvas" | "train_images" | "test_images" => {}
            other => return Err(bad(format!("unknown manifest key `{other}`"))),
        }
    }
    Ok(out)
}

/// `name top left height width`.
pub fn parse_region(value: &str) -> std::result::Result<Region, String> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 5 {
        return Err(format!("region needs `name top left height width`, got `{}`", value.trim()));
    }
    let n = |s: &str| s.parse::<usize>().map_err(|_| format!("bad region number `{s}`"));
    Ok(Region::new(parts[0], n(parts[1])?, n(parts[2])?, n(parts[3])?, n(parts[4])?))
}

pub const TRAIN_FILE: &str = "train.dtw";
pub const TEST_FILE: &str = "test.dtw";
pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn write_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_weights(dir.join(TRAIN_FILE), &split_tensors(&ds.train)?)?;
    save_weights(dir.join(TEST_FILE), &split_tensors(&ds.test)?)?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m = parse_manifest(&text)?;
    let seed = text
        .lines()
        .find_map(|l| l.strip_prefix("seed = "))
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(0);
    let train = split_from_tensors(&load_weights(dir.join(TRAIN_FILE))?, TRAIN_FILE)?;
    let test = split_from_tensors(&load_weights(dir.join(TEST_FILE))?, TEST_FILE)?;
    if train.identities() != m.train_identities || test.identities() != m.test_identities {
        return Err(Error::Dataset("manifest identities disagree with the stored labels".into()));
    }
    if m.train_identities.iter().any(|id| m.test_identities.contains(id)) {
        return Err(Error::Dataset("train and test identities overlap".into()));
    }
    Ok(Dataset { train, test, regions: m.regions, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_perturbation_reproduces_prototypes() {
        let spec = SyntheticDatasetSpec {
            train_identities: 1,
            test_identities: 1,
            images_per_identity: 1,
            translation: 0,
            brightness: 0.0,
            noise_std: 0.0,
            ..SyntheticDatasetSpec::default()
        };
        let ds = gen_dataset(&spec).unwrap();
        let root = Rng::new(spec.seed);
        let rounded = |v: Vec<f64>| v.into_iter().map(|x| x as f32 as f64).collect::<Vec<_>>();
        assert_eq!(ds.train.images[0].data(), rounded(prototype(&spec, &mut root.fork(0))).as_slice());
        assert_eq!(ds.test.images[0].data(), rounded(prototype(&spec, &mut root.fork(2))).as_slice());
    }

    #[test]
    fn disjoint_identities_and_sizes() {
        let ds = gen_dataset(&SyntheticDatasetSpec::default()).unwrap();
        assert_eq!(ds.train.images.len(), 400);
        assert_eq!(ds.test.images.len(), 200);
        assert_eq!(ds.train.identities(), (0..20).collect::<Vec<_>>());
        assert_eq!(ds.test.identities(), (20..30).collect::<Vec<_>>());
    }

    #[test]
    fn bad_region_is_rejected() {
        let spec = SyntheticDatasetSpec { regions: vec![Region::new("wide", 0, 10, 8, 30)], ..SyntheticDatasetSpec::default() };
        assert!(matches!(gen_dataset(&spec), Err(Error::Geometry(m)) if m.contains("wide")));
        let spec = SyntheticDatasetSpec { train_identities: 1, test_identities: 0, ..SyntheticDatasetSpec::default() };
        assert!(gen_dataset(&spec).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let ds = gen_dataset(&SyntheticDatasetSpec { images_per_identity: 2, ..SyntheticDatasetSpec::default() }).unwrap();
        let m = parse_manifest(&manifest(&ds)).unwrap();
        assert_eq!(m.regions, default_regions());
        assert_eq!(m.test_identities, (20..30).collect::<Vec<_>>());
        assert!(matches!(parse_manifest("bogus = 1\n"), Err(Error::Config { line: 1, .. })));
    }

    #[test]
    fn disk_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(&SyntheticDatasetSpec { images_per_identity: 3, ..SyntheticDatasetSpec::default() }).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticDatasetSpec { images_per_identity: 2, seed: 9, ..SyntheticDatasetSpec::default() };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(a.path(), &gen_dataset(&spec).unwrap()).unwrap();
        write_dataset(b.path(), &gen_dataset(&spec).unwrap()).unwrap();
        for f in [TRAIN_FILE, TEST_FILE, MANIFEST_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn intra_identity_closer_than_inter() {
        let ds = gen_dataset(&SyntheticDatasetSpec::default()).unwrap();
        let dist = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0, 0.0, 0);
        let imgs = &ds.train.images;
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                if ds.train.labels[i] == ds.train.labels[j] {
                    intra += dist(&imgs[i], &imgs[j]);
                    ni += 1;
                } else {
                    inter += dist(&imgs[i], &imgs[j]);
                    ne += 1;
                }
            }
        }
        assert!(intra / (ni as f64) < inter / (ne as f64));
    }
}
