//! Train → extract → fit → evaluate, with every artifact written to disk.
//!
//! Output layout under the run directory:
//!
//! ```text
//! data/                      generated dataset (unless the config names one)
//! models/ensemble.txt        one line per ensemble entry
//! models/<region>_<arch>.dtw network weights and head margins
//! models/recognition.dtw     PCA and Joint Bayesian tensors
//! logs/<region>_<arch>.tsv   per-epoch mean training loss
//! features/{train,test}.dtw  ensemble features and labels
//! reports/*.csv              evaluation reports
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::data::{gen_dataset, load_dataset, parse_region, write_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluation::{
    dir_from_scores, rank1_from_scores, region_comparison_report, roc_curve, verification_accuracy_from_scores,
    EvaluationReport, RegionComparison,
};
use crate::net::{Architecture, NetworkGraph, ScaleConfig};
use crate::params::ParamStore;
use crate::recognition::{
    crop_resize, ensemble_extract, jb_fit, mirror, pca_fit, pca_transform, EnsembleEntry, EnsembleSpec, JbScorer,
    JointBayesianModel, PcaModel, Region,
};
use crate::tensor::Rng;
use crate::training::{train, write_training_log, LabeledDataset, TrainConfig};
use crate::weights::{load_weights, save_weights};
use crate::Tensor;

pub const FAILED_MARKER: &str = "FAILED";

/// Runs `f`, tagging any error with the stage name.
pub fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| e.in_stage(name))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io(path, e))?;
    write_file(path, buf)
}

/// Maps labels onto `0..K` by rank among the split's identities.
pub fn dense_labels(split: &Split) -> Vec<usize> {
    let ids = split.identities();
    split.labels.iter().map(|l| ids.binary_search(l).expect("label from this split")).collect()
}

/// Region crops of every image, resized to the network input.
pub fn region_dataset(split: &Split, region: &Region, flip: bool, net: &ScaleConfig, region_id: usize) -> Result<LabeledDataset> {
    let images = split
        .images
        .iter()
        .map(|img| {
            let crop = crop_resize(img, region, net.input_h, net.input_w)?;
            if flip {
                mirror(&crop)
            } else {
                Ok(crop)
            }
        })
        .collect::<Result<_>>()?;
    LabeledDataset::new(images, dense_labels(split), region_id)
}

/// One trained member of the ensemble.
#[derive(Clone, Debug)]
pub struct TrainedNet {
    pub region: Region,
    pub architecture: Architecture,
    pub flip: bool,
    pub net: NetworkGraph,
    pub history: Vec<f64>,
}

impl TrainedNet {
    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.region.name, self.architecture)
    }
}

/// `(region index, architecture, mirrored)` for the default ensemble: net1
/// on each original crop and net2 on each mirrored crop.
pub fn ensemble_jobs(regions: usize) -> Vec<(usize, Architecture, bool)> {
    (0..regions)
        .flat_map(|r| [(r, Architecture::DeepId3Net1, false), (r, Architecture::DeepId3Net2, true)])
        .collect()
}

fn net_config(cfg: &PipelineConfig, ds: &Dataset) -> ScaleConfig {
    ScaleConfig {
        num_identities: ds.train.identities().len(),
        input_channels: ds.train.images.first().map_or(1, |t| t.shape()[0]),
        ..cfg.net.clone()
    }
}

fn train_job(cfg: &PipelineConfig, ds: &Dataset, job: usize, region_idx: usize, arch: Architecture, flip: bool) -> Result<TrainedNet> {
    let region = &ds.regions[region_idx];
    let scale = net_config(cfg, ds);
    let labeled = region_dataset(&ds.train, region, flip, &scale, region_idx)?;
    let root = Rng::new(cfg.seed);
    let mut net = arch.build(&scale, &mut root.fork(1000 + 2 * job as u64))?;
    let tcfg = TrainConfig { seed: root.fork(1001 + 2 * job as u64).next_u64(), ..cfg.train.clone() };
    let history = train(&mut net, &labeled, &tcfg)?;
    Ok(TrainedNet { region: region.clone(), architecture: arch, flip, net, history })
}

/// Trains one network per job; jobs are independent and run in parallel.
pub fn train_nets(cfg: &PipelineConfig, ds: &Dataset, jobs: &[(usize, Architecture, bool)], job_offset: usize) -> Result<Vec<TrainedNet>> {
    jobs.par_iter()
        .enumerate()
        .map(|(j, &(r, arch, flip))| train_job(cfg, ds, job_offset + j, r, arch, flip))
        .collect()
}

pub fn train_ensemble(cfg: &PipelineConfig, ds: &Dataset) -> Result<Vec<TrainedNet>> {
    train_nets(cfg, ds, &ensemble_jobs(ds.regions.len()), 0)
}

pub fn ensemble_spec(nets: &[TrainedNet]) -> Result<EnsembleSpec> {
    let entries = nets
        .iter()
        .enumerate()
        .map(|(i, t)| EnsembleEntry { region: t.region.clone(), net: i, flip: t.flip })
        .collect();
    EnsembleSpec::new(entries, nets.iter().map(|t| t.net.clone()).collect())
}

pub fn extract_features(spec: &EnsembleSpec, images: &[Tensor]) -> Result<Vec<Tensor>> {
    images.par_iter().map(|img| ensemble_extract(spec, img)).collect()
}

pub fn net_tensors(net: &NetworkGraph) -> ParamStore {
    let mut store = net.params.clone();
    for h in &net.heads {
        store.insert(format!("{}.margin", h.name), Tensor::vector(vec![h.margin]));
    }
    store
}

/// Loads weights and margins into a freshly built graph of the same shape.
pub fn load_net_tensors(net: &mut NetworkGraph, mut store: ParamStore) -> Result<()> {
    let mut margins = Vec::with_capacity(net.heads.len());
    for h in &net.heads {
        let m = store
            .remove(&format!("{}.margin", h.name))
            .ok_or_else(|| Error::ModelInvalid(format!("missing margin of head `{}`", h.name)))?;
        m.expect_shape(&[1])?;
        margins.push(m.data()[0]);
    }
    if store.keys().ne(net.params.keys()) {
        return Err(Error::ModelInvalid("stored parameter names do not match the architecture".into()));
    }
    for (name, t) in &store {
        t.expect_shape(net.params[name].shape())?;
    }
    net.params = store;
    net.set_margins(&margins)?;
    net.validate()
}

pub fn save_ensemble(dir: &Path, nets: &[TrainedNet]) -> Result<()> {
    create_dir(dir)?;
    let mut index = String::new();
    for t in nets {
        let r = &t.region;
        writeln!(index, "{} {} {} {} {} {} {}", r.name, r.top, r.left, r.height, r.width, t.architecture, t.flip).unwrap();
        save_weights(dir.join(format!("{}.dtw", t.file_stem())), &net_tensors(&t.net))?;
    }
    write_file(&dir.join("ensemble.txt"), index)
}

pub fn load_ensemble(dir: &Path, cfg: &PipelineConfig, ds: &Dataset) -> Result<Vec<TrainedNet>> {
    let path = dir.join("ensemble.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let scale = net_config(cfg, ds);
    let mut nets = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |message: String| Error::Config { line: i + 1, message };
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 7 {
            return Err(bad(format!("expected 7 fields, got `{line}`")));
        }
        let region = parse_region(&parts[..5].join(" ")).map_err(bad)?;
        let architecture = Architecture::from_name(parts[5]).ok_or_else(|| bad(format!("unknown architecture `{}`", parts[5])))?;
        let flip = parts[6].parse().map_err(|_| bad(format!("bad flip flag `{}`", parts[6])))?;
        let mut net = architecture.build(&scale, &mut Rng::new(0))?;
        let stem = format!("{}_{}", region.name, architecture);
        load_net_tensors(&mut net, load_weights(dir.join(format!("{stem}.dtw")))?)?;
        nets.push(TrainedNet { region, architecture, flip, net, history: Vec::new() });
    }
    Ok(nets)
}

pub fn save_features(path: &Path, features: &[Tensor], labels: &[usize]) -> Result<()> {
    let d = features.first().map_or(0, Tensor::len);
    let mut store = ParamStore::new();
    if d > 0 {
        let data = features.iter().flat_map(|f| f.data().iter().copied()).collect();
        store.insert("features".into(), Tensor::from_vec(&[features.len(), d], data)?);
        store.insert("labels".into(), Tensor::vector(labels.iter().map(|&l| l as f64).collect()));
    }
    save_weights(path, &store)
}

pub fn load_features(path: &Path) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let store = load_weights(path)?;
    let (f, l) = match (store.get("features"), store.get("labels")) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Dataset(format!("{} lacks `features` or `labels`", path.display()))),
    };
    if f.rank() != 2 || f.shape()[0] != l.len() {
        return Err(Error::Dataset(format!("{}: features shaped {:?} for {} labels", path.display(), f.shape(), l.len())));
    }
    let feats = f.data().chunks_exact(f.shape()[1]).map(|c| Tensor::vector(c.to_vec())).collect();
    Ok((feats, l.data().iter().map(|&v| v as usize).collect()))
}

/// Fitted back end.
#[derive(Clone, Debug)]
pub struct Recognition {
    pub pca: PcaModel,
    pub jb: JointBayesianModel,
    pub log_likelihood: Vec<f64>,
}

impl Recognition {
    pub fn to_tensors(&self) -> ParamStore {
        let mut store = ParamStore::new();
        self.pca.to_tensors(&mut store);
        self.jb.to_tensors(&mut store);
        store
    }

    pub fn from_tensors(store: &ParamStore) -> Result<Self> {
        Ok(Self { pca: PcaModel::from_tensors(store)?, jb: JointBayesianModel::from_tensors(store)?, log_likelihood: Vec::new() })
    }
}

/// PCA then Joint Bayesian, both on training features only. The PCA
/// dimension is capped by the feature dimension and sample count.
pub fn fit_recognition(features: &[Tensor], labels: &[usize], pca_dim: usize, em_iters: usize) -> Result<Recognition> {
    let d = features.first().map_or(0, Tensor::len);
    let p = pca_dim.min(d).min(features.len().saturating_sub(1));
    let pca = pca_fit(features, p)?;
    let reduced: Vec<Tensor> = features.iter().map(|f| pca_transform(&pca, f)).collect::<Result<_>>()?;
    let fit = jb_fit(&reduced, labels, em_iters)?;
    Ok(Recognition { pca, jb: fit.model, log_likelihood: fit.log_likelihood })
}

/// Seeded test-split protocols: verification pairs balanced per fold,
/// closed-set gallery of each identity's first image, open-set gallery of the
/// first `open_gallery` identities.
#[derive(Clone, Debug)]
pub struct Protocols {
    /// `(image a, image b, same, fold)`.
    pub pairs: Vec<(usize, usize, bool, usize)>,
    pub closed_gallery: Vec<(usize, usize)>,
    pub closed_probes: Vec<(usize, usize)>,
    pub open_gallery: Vec<(usize, usize)>,
    pub open_probes: Vec<(Option<usize>, usize)>,
}

pub fn build_protocols(cfg: &PipelineConfig, test: &Split) -> Result<Protocols> {
    let ids = test.identities();
    let groups: Vec<Vec<usize>> = ids.iter().map(|id| (0..test.labels.len()).filter(|&i| test.labels[i] == *id).collect()).collect();
    if ids.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(Error::Protocol("the test split needs two identities with two images each".into()));
    }
    if cfg.eval.open_gallery >= ids.len() {
        return Err(Error::Protocol(format!(
            "open-set gallery of {} leaves no impostors among {} test identities",
            cfg.eval.open_gallery,
            ids.len()
        )));
    }
    let mut rng = Rng::new(cfg.seed).fork(7);
    let folds = cfg.eval.folds;
    let mut pairs = Vec::with_capacity(cfg.eval.pairs);
    for k in 0..cfg.eval.pairs {
        let fold = k % folds;
        let same = (k / folds) % 2 == 0;
        let g = rng.below(groups.len());
        let (a, b) = if same {
            let i = rng.below(groups[g].len());
            let mut j = rng.below(groups[g].len() - 1);
            if j >= i {
                j += 1;
            }
            (groups[g][i], groups[g][j])
        } else {
            let mut h = rng.below(groups.len() - 1);
            if h >= g {
                h += 1;
            }
            (groups[g][rng.below(groups[g].len())], groups[h][rng.below(groups[h].len())])
        };
        pairs.push((a, b, same, fold));
    }
    let closed_gallery = ids.iter().zip(&groups).map(|(&id, g)| (id, g[0])).collect();
    let closed_probes = ids.iter().zip(&groups).flat_map(|(&id, g)| g[1..].iter().map(move |&i| (id, i))).collect();
    let enrolled = cfg.eval.open_gallery;
    let open_gallery = ids[..enrolled].iter().zip(&groups).map(|(&id, g)| (id, g[0])).collect();
    let open_probes = ids
        .iter()
        .zip(&groups)
        .enumerate()
        .flat_map(|(k, (&id, g))| {
            let (truth, skip) = if k < enrolled { (Some(id), 1) } else { (None, 0) };
            g[skip..].iter().map(move |&i| (truth, i))
        })
        .collect();
    Ok(Protocols { pairs, closed_gallery, closed_probes, open_gallery, open_probes })
}

fn verification_scores(p: &Protocols, features: &[Tensor], scorer: &JbScorer) -> Result<Vec<f64>> {
    p.pairs.par_iter().map(|&(a, b, _, _)| scorer.score(&features[a], &features[b])).collect()
}

fn gallery_scores(gallery: &[(usize, usize)], probes: &[usize], features: &[Tensor], scorer: &JbScorer) -> Result<Vec<Vec<f64>>> {
    probes
        .par_iter()
        .map(|&p| gallery.iter().map(|&(_, g)| scorer.score(&features[p], &features[g])).collect())
        .collect()
}

/// Verification accuracy only, for per-region comparisons.
pub fn verification_only(cfg: &PipelineConfig, p: &Protocols, rec: &Recognition, test_features: &[Tensor]) -> Result<f64> {
    let reduced: Vec<Tensor> = test_features.iter().map(|f| pca_transform(&rec.pca, f)).collect::<Result<_>>()?;
    let scorer = JbScorer::new(&rec.jb)?;
    let scores = verification_scores(p, &reduced, &scorer)?;
    let same: Vec<bool> = p.pairs.iter().map(|q| q.2).collect();
    let folds: Vec<usize> = p.pairs.iter().map(|q| q.3).collect();
    Ok(verification_accuracy_from_scores(&scores, &same, &folds, cfg.eval.folds)?.mean)
}

/// All three protocols on test features.
pub fn evaluate(cfg: &PipelineConfig, p: &Protocols, rec: &Recognition, test_features: &[Tensor]) -> Result<EvaluationReport> {
    let reduced: Vec<Tensor> = test_features.iter().map(|f| pca_transform(&rec.pca, f)).collect::<Result<_>>()?;
    let scorer = JbScorer::new(&rec.jb)?;
    let scores = verification_scores(p, &reduced, &scorer)?;
    let same: Vec<bool> = p.pairs.iter().map(|q| q.2).collect();
    let folds: Vec<usize> = p.pairs.iter().map(|q| q.3).collect();
    let ver = verification_accuracy_from_scores(&scores, &same, &folds, cfg.eval.folds)?;
    let genuine: Vec<f64> = scores.iter().zip(&same).filter(|(_, &s)| s).map(|(v, _)| *v).collect();
    let impostor: Vec<f64> = scores.iter().zip(&same).filter(|(_, &s)| !s).map(|(v, _)| *v).collect();
    let roc = roc_curve(&genuine, &impostor)?;

    let closed_ids: Vec<usize> = p.closed_gallery.iter().map(|g| g.0).collect();
    let probes: Vec<usize> = p.closed_probes.iter().map(|q| q.1).collect();
    let truth: Vec<Option<usize>> = p.closed_probes.iter().map(|q| Some(q.0)).collect();
    let rank1 = rank1_from_scores(&closed_ids, &truth, &gallery_scores(&p.closed_gallery, &probes, &reduced, &scorer)?)?;

    let open_ids: Vec<usize> = p.open_gallery.iter().map(|g| g.0).collect();
    let probes: Vec<usize> = p.open_probes.iter().map(|q| q.1).collect();
    let truth: Vec<Option<usize>> = p.open_probes.iter().map(|q| q.0).collect();
    let dir = dir_from_scores(&open_ids, &truth, &gallery_scores(&p.open_gallery, &probes, &reduced, &scorer)?, cfg.eval.far)?;

    let report = EvaluationReport {
        protocol: "ensemble+pca+joint-bayesian".into(),
        mean_accuracy: ver.mean,
        fold_accuracies: ver.per_fold,
        accuracy_std: ver.std,
        roc,
        rank1,
        dir,
        far: cfg.eval.far,
    };
    report.validate()?;
    Ok(report)
}

pub fn write_reports(dir: &Path, report: &EvaluationReport) -> Result<()> {
    create_dir(dir)?;
    write_with(&dir.join("verification.csv"), |b| report.write_verification_csv(b))?;
    write_with(&dir.join("roc.csv"), |b| report.write_roc_csv(b))?;
    write_with(&dir.join("identification.csv"), |b| report.write_identification_csv(b))
}

/// Per-region verification accuracy of net1 (family A) against the shallow
/// baseline (family B), each on the original crop with its own back end.
pub fn compare_depth(cfg: &PipelineConfig, ds: &Dataset, ensemble: &[TrainedNet], protocols: &Protocols) -> Result<(RegionComparison, Vec<TrainedNet>)> {
    let jobs: Vec<(usize, Architecture, bool)> = (0..ds.regions.len()).map(|r| (r, Architecture::DeepId2Plus, false)).collect();
    let baselines = train_nets(cfg, ds, &jobs, 2 * ds.regions.len())?;
    let train_labels = dense_labels(&ds.train);
    let accuracy = |t: &TrainedNet| -> Result<f64> {
        let spec = ensemble_spec(std::slice::from_ref(t))?;
        let train_f = extract_features(&spec, &ds.train.images)?;
        let test_f = extract_features(&spec, &ds.test.images)?;
        let rec = fit_recognition(&train_f, &train_labels, cfg.pca_dim, cfg.em_iters)?;
        verification_only(cfg, protocols, &rec, &test_f)
    };
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (r, region) in ds.regions.iter().enumerate() {
        let deep = ensemble
            .iter()
            .find(|t| t.region == *region && t.architecture == Architecture::DeepId3Net1 && !t.flip)
            .ok_or_else(|| Error::Protocol(format!("no unmirrored net1 for region `{}`", region.name)))?;
        a.push((region.name.clone(), accuracy(deep)?));
        b.push((region.name.clone(), accuracy(&baselines[r])?));
    }
    Ok((region_comparison_report(&a, &b)?, baselines))
}

/// Headline numbers of a pipeline run.
#[derive(Clone, Debug)]
pub struct PipelineSummary {
    pub report: EvaluationReport,
    pub comparison: Option<RegionComparison>,
    pub histories: Vec<(String, Vec<f64>)>,
    pub feature_dim: usize,
    pub out_dir: PathBuf,
}

fn write_logs(dir: &Path, nets: &[TrainedNet]) -> Result<()> {
    create_dir(dir)?;
    for t in nets {
        write_with(&dir.join(format!("{}.tsv", t.file_stem())), |b| write_training_log(&t.history, b))?;
    }
    Ok(())
}

/// Dataset named by the config, or a fresh one generated under `out_dir/data`.
pub fn obtain_dataset(cfg: &PipelineConfig, out_dir: &Path) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) => load_dataset(dir),
        None => {
            let spec = crate::data::SyntheticDatasetSpec { seed: cfg.seed, ..cfg.data.clone() };
            let ds = gen_dataset(&spec)?;
            write_dataset(out_dir.join("data"), &ds)?;
            Ok(ds)
        }
    }
}

fn run_stages(cfg: &PipelineConfig, out_dir: &Path) -> Result<PipelineSummary> {
    stage("config", || cfg.validate())?;
    let ds = stage("data", || obtain_dataset(cfg, out_dir))?;
    let models = out_dir.join("models");
    let nets = stage("train", || {
        let nets = train_ensemble(cfg, &ds)?;
        save_ensemble(&models, &nets)?;
        write_logs(&out_dir.join("logs"), &nets)?;
        Ok(nets)
    })?;
    let spec = stage("extract", || ensemble_spec(&nets))?;
    let (train_f, test_f) = stage("extract", || {
        let train_f = extract_features(&spec, &ds.train.images)?;
        let test_f = extract_features(&spec, &ds.test.images)?;
        let fdir = out_dir.join("features");
        create_dir(&fdir)?;
        save_features(&fdir.join("train.dtw"), &train_f, &ds.train.labels)?;
        save_features(&fdir.join("test.dtw"), &test_f, &ds.test.labels)?;
        Ok((train_f, test_f))
    })?;
    let rec = stage("fit-recognition", || {
        let rec = fit_recognition(&train_f, &dense_labels(&ds.train), cfg.pca_dim, cfg.em_iters)?;
        save_weights(models.join("recognition.dtw"), &rec.to_tensors())?;
        Ok(rec)
    })?;
    let protocols = stage("eval", || build_protocols(cfg, &ds.test))?;
    let report = stage("eval", || {
        let report = evaluate(cfg, &protocols, &rec, &test_f)?;
        write_reports(&out_dir.join("reports"), &report)?;
        Ok(report)
    })?;
    let comparison = if cfg.compare_depth {
        Some(stage("compare", || {
            let (cmp, baselines) = compare_depth(cfg, &ds, &nets, &protocols)?;
            let bdir = out_dir.join("baselines");
            create_dir(&bdir)?;
            for t in &baselines {
                save_weights(bdir.join(format!("{}.dtw", t.file_stem())), &net_tensors(&t.net))?;
            }
            write_logs(&out_dir.join("logs"), &baselines)?;
            let rdir = out_dir.join("reports");
            write_with(&rdir.join("region_comparison.csv"), |b| cmp.write_csv(b))?;
            write_with(&rdir.join("region_summary.csv"), |b| cmp.write_summary_csv(b))?;
            Ok(cmp)
        })?)
    } else {
        None
    };
    Ok(PipelineSummary {
        report,
        comparison,
        histories: nets.iter().map(|t| (t.file_stem(), t.history.clone())).collect(),
        feature_dim: spec.feature_dim(),
        out_dir: out_dir.to_owned(),
    })
}

/// Runs every stage. On failure a `FAILED` file naming the error is left in
/// `out_dir` so partial outputs are recognisable.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: impl AsRef<Path>) -> Result<PipelineSummary> {
    let out_dir = out_dir.as_ref();
    create_dir(out_dir)?;
    let marker = out_dir.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let result = run_stages(cfg, out_dir);
    if let Err(e) = &result {
        // best effort; the original error matters more than the marker
        let _ = fs::write(&marker, format!("{e}\n"));
    }
    result
}
