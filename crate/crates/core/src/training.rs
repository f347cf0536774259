//! Pair-based mini-batch training with SGD and momentum.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::net::{forward, pair_gradients, NetworkGraph};
use crate::params::{add_store, ParamStore};
use crate::tensor::Rng;
use crate::Tensor;

/// Images of one face region with their identity labels.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub identities: Vec<usize>,
    pub region_id: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<Tensor>, identities: Vec<usize>, region_id: usize) -> Result<Self> {
        if images.len() != identities.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.len(),
                identities.len()
            )));
        }
        Ok(Self { images, identities, region_id })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.identities.iter().max().map_or(0, |m| m + 1)
    }

    fn by_identity(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_identities()];
        for (i, &id) in self.identities.iter().enumerate() {
            groups[id].push(i);
        }
        groups
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    /// Pairs per mini-batch.
    pub batch_size: usize,
    pub epochs: usize,
    /// Batches per epoch; `None` sizes an epoch so each image is seen about once.
    pub batches_per_epoch: Option<usize>,
    pub genuine_fraction: f64,
    pub weight_decay: f64,
    /// Set every head's margin to the median impostor distance before training.
    pub calibrate_margins: bool,
    /// Reuse the same pairs and dropout masks every epoch.
    pub fixed_pairs: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            lr_decay: 0.95,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            batches_per_epoch: None,
            genuine_fraction: 0.5,
            weight_decay: 0.0,
            calibrate_margins: true,
            fixed_pairs: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Dimension(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Dimension(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.genuine_fraction > 0.0 && self.genuine_fraction < 1.0) {
            return Err(Error::Dimension(format!(
                "genuine fraction {} outside (0, 1)",
                self.genuine_fraction
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.batches_per_epoch == Some(0) {
            return Err(Error::Dimension("batch size, epochs and batches per epoch must be positive".into()));
        }
        if !(self.lr_decay > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Dimension("lr decay must be > 0 and weight decay >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairSample {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// Draws a batch whose genuine share is `round(batch · genuine_fraction)`.
pub fn sample_pair_batch(ds: &LabeledDataset, cfg: &TrainConfig, rng: &mut Rng) -> Result<Vec<PairSample>> {
    let groups = ds.by_identity();
    let eligible: Vec<usize> = (0..ds.len())
        .filter(|&i| groups[ds.identities[i]].len() >= 2)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Dataset("no identity has two images, so no genuine pair exists".into()));
    }
    if groups.iter().filter(|g| !g.is_empty()).count() < 2 {
        return Err(Error::Dataset("a single identity admits no impostor pair".into()));
    }
    let n = cfg.batch_size;
    let genuine = ((n as f64) * cfg.genuine_fraction).round() as usize;
    let mut batch = Vec::with_capacity(n);
    for _ in 0..genuine {
        let a = eligible[rng.below(eligible.len())];
        let group = &groups[ds.identities[a]];
        // uniform over the other images of the same identity
        let mut k = rng.below(group.len() - 1);
        if group[k] == a {
            k = group.len() - 1;
        }
        batch.push(PairSample { a, b: group[k], same: true });
    }
    for _ in genuine..n {
        let a = rng.below(ds.len());
        let others = ds.len() - groups[ds.identities[a]].len();
        // uniform over images of every other identity
        let mut k = rng.below(others);
        let mut b = 0;
        for (i, &id) in ds.identities.iter().enumerate() {
            if id == ds.identities[a] {
                continue;
            }
            if k == 0 {
                b = i;
                break;
            }
            k -= 1;
        }
        batch.push(PairSample { a, b, same: false });
    }
    rng.shuffle(&mut batch);
    Ok(batch)
}

/// `v ← momentum·v − lr·g; p ← p + v` for every parameter with a gradient.
pub fn sgd_step(params: &mut ParamStore, grads: &ParamStore, velocity: &mut ParamStore, lr: f64, momentum: f64) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::shape(format!("gradient for unknown parameter `{name}`")))?;
        p.expect_shape(g.shape())?;
        let v = velocity.entry(name.clone()).or_insert_with(|| g.zeros_like());
        v.expect_shape(g.shape())?;
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv - lr * gv;
            *pv += *vv;
        }
    }
    Ok(())
}

/// Eval-mode features of every head for one image.
pub fn all_head_features(net: &NetworkGraph, image: &Tensor) -> Result<Vec<Tensor>> {
    let trace = forward(net, image, Mode::Eval, &mut Rng::new(0))?;
    net.heads
        .iter()
        .map(|h| {
            let idx = net.node_index(&h.attach_point)?;
            h.feature(&net.params, &trace.outputs[idx])
        })
        .collect()
}

/// Sets each head's margin to the median head-feature distance over
/// `samples` random impostor pairs. Heads whose median is zero keep their
/// margin.
pub fn calibrate_margins(net: &mut NetworkGraph, ds: &LabeledDataset, samples: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let cfg = TrainConfig {
        batch_size: samples.max(1),
        genuine_fraction: 0.5,
        ..TrainConfig::default()
    };
    let pairs: Vec<PairSample> = sample_pair_batch(ds, &cfg, rng)?
        .into_iter()
        .filter(|p| !p.same)
        .collect();
    let feats: Vec<(Vec<Tensor>, Vec<Tensor>)> = pairs
        .par_iter()
        .map(|p| Ok((all_head_features(net, &ds.images[p.a])?, all_head_features(net, &ds.images[p.b])?)))
        .collect::<Result<_>>()?;
    let mut margins = Vec::with_capacity(net.heads.len());
    for (h, head) in net.heads.iter().enumerate() {
        let mut dists: Vec<f64> = feats
            .iter()
            .map(|(fa, fb)| {
                fa[h].data().iter().zip(fb[h].data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        dists.sort_by(f64::total_cmp);
        let median = if dists.is_empty() {
            0.0
        } else if dists.len() % 2 == 1 {
            dists[dists.len() / 2]
        } else {
            0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
        };
        margins.push(if median > 0.0 && median.is_finite() { median } else { head.margin });
    }
    net.set_margins(&margins)?;
    Ok(margins)
}

/// Trains `net` on `ds` under all of its heads; returns the mean pair loss of
/// every epoch.
pub fn train(net: &mut NetworkGraph, ds: &LabeledDataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let k = net.config.num_identities;
    if ds.num_identities() > k {
        return Err(Error::Dataset(format!(
            "dataset labels reach {} but the network classifies {k} identities",
            ds.num_identities() - 1
        )));
    }
    let root = Rng::new(cfg.seed);
    if cfg.calibrate_margins {
        calibrate_margins(net, ds, 64, &mut root.fork(u64::MAX - 1))?;
    }
    let heads: Vec<usize> = (0..net.heads.len()).collect();
    let batches = cfg
        .batches_per_epoch
        .unwrap_or_else(|| ds.len().div_ceil(2 * cfg.batch_size).max(1));
    let mut velocity = ParamStore::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.learning_rate;
    for epoch in 0..cfg.epochs {
        let schedule = if cfg.fixed_pairs { 0 } else { epoch as u64 };
        let mut sampler = root.fork(schedule << 32);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in 0..batches {
            let pairs = sample_pair_batch(ds, cfg, &mut sampler)?;
            let stream_base = (schedule << 32) | ((batch as u64) << 16);
            let results: Vec<_> = pairs
                .par_iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut rng = root.fork(stream_base | (i as u64 + 1));
                    pair_gradients(
                        net,
                        [&ds.images[p.a], &ds.images[p.b]],
                        [ds.identities[p.a], ds.identities[p.b]],
                        &heads,
                        Mode::Train,
                        &mut rng,
                    )
                })
                .collect::<Result<_>>()?;
            let mut grads = ParamStore::new();
            let scale = 1.0 / pairs.len() as f64;
            for r in &results {
                if !r.loss.is_finite() {
                    return Err(Error::Divergence { epoch, lr });
                }
                total += r.loss;
                count += 1;
                add_store(&mut grads, &r.grads, scale)?;
            }
            if cfg.weight_decay > 0.0 {
                for (name, g) in grads.iter_mut() {
                    g.add_scaled(&net.params[name], cfg.weight_decay)?;
                }
            }
            sgd_step(&mut net.params, &grads, &mut velocity, lr, cfg.momentum)?;
        }
        let mean = total / count as f64;
        if !mean.is_finite() || net.params.values().any(|p| !p.all_finite()) {
            return Err(Error::Divergence { epoch, lr });
        }
        history.push(mean);
        lr *= cfg.lr_decay;
    }
    Ok(history)
}

/// Writes one `epoch<TAB>mean_loss` line per epoch.
pub fn write_training_log(history: &[f64], mut out: impl Write) -> std::io::Result<()> {
    for (epoch, loss) in history.iter().enumerate() {
        writeln!(out, "{epoch}\t{loss}")?;
    }
    Ok(())
}
