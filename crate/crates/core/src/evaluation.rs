//! Pair verification with k-fold threshold selection, ROC, closed-set rank-1
//! and open-set DIR at a fixed false-alarm rate.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::Tensor;

/// Published large-scale results (LFW), kept for comparison in reports.
pub const REFERENCE_VERIFICATION_ACCURACY: f64 = 0.9953;
pub const REFERENCE_VERIFICATION_STD: f64 = 0.0010;
pub const REFERENCE_RANK1: f64 = 0.960;
pub const REFERENCE_DIR_AT_1PCT_FAR: f64 = 0.814;
/// Mean error-rate reductions of the deeper nets over the shallower baseline.
pub const REFERENCE_ERROR_REDUCTIONS: [f64; 2] = [0.0081, 0.0026];

pub const DEFAULT_FOLDS: usize = 10;

#[derive(Clone, Debug)]
pub struct VerificationPair {
    pub a: Tensor,
    pub b: Tensor,
    pub same: bool,
    pub fold: usize,
}

#[derive(Clone, Debug)]
pub struct VerificationSet {
    pub pairs: Vec<VerificationPair>,
    pub folds: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationResult {
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
    pub per_fold: Vec<f64>,
    pub thresholds: Vec<f64>,
}

/// Threshold maximising training accuracy under `accept ⇔ score ≥ τ`.
/// Candidates are the distinct scores plus `+∞`; ties go to the lowest.
pub fn select_threshold(scores: &[f64], same: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut correct = same.iter().filter(|&&s| s).count() as i64;
    let mut best = (correct, order.first().map_or(f64::INFINITY, |&i| scores[i]));
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            correct += if same[order[i]] { -1 } else { 1 };
            i += 1;
        }
        let next = order.get(i).map_or(f64::INFINITY, |&j| scores[j]);
        if correct > best.0 {
            best = (correct, next);
        }
    }
    best.1
}

fn accuracy_at(scores: &[f64], same: &[bool], tau: f64) -> f64 {
    let hits = scores.iter().zip(same).filter(|(&s, &g)| (s >= tau) == g).count();
    hits as f64 / scores.len() as f64
}

/// Fold-wise verification accuracy from precomputed scores.
pub fn verification_accuracy_from_scores(scores: &[f64], same: &[bool], folds: &[usize], n_folds: usize) -> Result<VerificationResult> {
    if scores.len() != same.len() || scores.len() != folds.len() {
        return Err(Error::Protocol("scores, labels and folds differ in length".into()));
    }
    if n_folds < 2 {
        return Err(Error::Protocol(format!("need at least 2 folds, got {n_folds}")));
    }
    let mut per_fold = Vec::with_capacity(n_folds);
    let mut thresholds = Vec::with_capacity(n_folds);
    for f in 0..n_folds {
        let (mut tr_s, mut tr_y, mut te_s, mut te_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for ((&s, &y), &k) in scores.iter().zip(same).zip(folds) {
            if k >= n_folds {
                return Err(Error::Protocol(format!("fold {k} outside 0..{n_folds}")));
            }
            if k == f {
                te_s.push(s);
                te_y.push(y);
            } else {
                tr_s.push(s);
                tr_y.push(y);
            }
        }
        if !(te_y.contains(&true) && te_y.contains(&false)) {
            return Err(Error::Protocol(format!("fold {f} lacks genuine or impostor pairs")));
        }
        let tau = select_threshold(&tr_s, &tr_y);
        per_fold.push(accuracy_at(&te_s, &te_y, tau));
        thresholds.push(tau);
    }
    let mean = per_fold.iter().sum::<f64>() / n_folds as f64;
    let var = per_fold.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n_folds as f64;
    Ok(VerificationResult { mean, std: var.sqrt(), per_fold, thresholds })
}

fn score_pairs<F>(vs: &VerificationSet, scorer: F) -> Result<Vec<f64>>
where
    F: Fn(&Tensor, &Tensor) -> Result<f64> + Sync,
{
    vs.pairs.par_iter().map(|p| scorer(&p.a, &p.b)).collect()
}

pub fn verification_accuracy<F>(vs: &VerificationSet, scorer: F) -> Result<VerificationResult>
where
    F: Fn(&Tensor, &Tensor) -> Result<f64> + Sync,
{
    let scores = score_pairs(vs, scorer)?;
    let same: Vec<bool> = vs.pairs.iter().map(|p| p.same).collect();
    let folds: Vec<usize> = vs.pairs.iter().map(|p| p.fold).collect();
    verification_accuracy_from_scores(&scores, &same, &folds, vs.folds)
}

/// `(FAR, TAR)` points for every distinct threshold, from `(0, 0)` to `(1, 1)`.
pub fn roc_curve(genuine: &[f64], impostor: &[f64]) -> Result<Vec<(f64, f64)>> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Protocol("ROC needs genuine and impostor scores".into()));
    }
    let mut all: Vec<(f64, bool)> = genuine.iter().map(|&s| (s, true)).chain(impostor.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / ni, tp as f64 / ng));
    }
    Ok(points)
}

/// Gallery of one feature per subject and probes labelled with their
/// subject, or `None` for impostors absent from the gallery.
#[derive(Clone, Debug)]
pub struct IdentificationSet {
    pub gallery: Vec<(usize, Tensor)>,
    pub probes: Vec<(Option<usize>, Tensor)>,
}

impl IdentificationSet {
    fn check_gallery(&self) -> Result<()> {
        if self.gallery.is_empty() {
            return Err(Error::Protocol("empty gallery".into()));
        }
        let mut ids: Vec<usize> = self.gallery.iter().map(|g| g.0).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Protocol("gallery subject ids are not unique".into()));
        }
        Ok(())
    }

    /// Scores of every probe against every gallery entry, probe-major.
    pub fn score_matrix<F>(&self, scorer: F) -> Result<Vec<Vec<f64>>>
    where
        F: Fn(&Tensor, &Tensor) -> Result<f64> + Sync,
    {
        self.probes
            .par_iter()
            .map(|(_, probe)| self.gallery.iter().map(|(_, g)| scorer(probe, g)).collect())
            .collect()
    }
}

/// Best gallery subject for one row of scores; ties go to the lowest id.
pub fn best_match(gallery_ids: &[usize], scores: &[f64]) -> (usize, f64) {
    let mut best = (gallery_ids[0], scores[0]);
    for (&id, &s) in gallery_ids.iter().zip(scores).skip(1) {
        if s > best.1 || (s == best.1 && id < best.0) {
            best = (id, s);
        }
    }
    best
}

pub fn rank1_from_scores(gallery_ids: &[usize], probe_ids: &[Option<usize>], scores: &[Vec<f64>]) -> Result<f64> {
    if gallery_ids.is_empty() {
        return Err(Error::Protocol("empty gallery".into()));
    }
    if probe_ids.is_empty() {
        return Err(Error::Protocol("no probes".into()));
    }
    let mut hits = 0;
    for (truth, row) in probe_ids.iter().zip(scores) {
        let truth = truth.ok_or_else(|| Error::Protocol("closed-set probes cannot be impostors".into()))?;
        if !gallery_ids.contains(&truth) {
            return Err(Error::Protocol(format!("probe subject {truth} is not in the gallery")));
        }
        if best_match(gallery_ids, row).0 == truth {
            hits += 1;
        }
    }
    Ok(hits as f64 / probe_ids.len() as f64)
}

pub fn rank1_closed_set<F>(set: &IdentificationSet, scorer: F) -> Result<f64>
where
    F: Fn(&Tensor, &Tensor) -> Result<f64> + Sync,
{
    set.check_gallery()?;
    let ids: Vec<usize> = set.gallery.iter().map(|g| g.0).collect();
    let probes: Vec<Option<usize>> = set.probes.iter().map(|p| p.0).collect();
    rank1_from_scores(&ids, &probes, &set.score_matrix(scorer)?)
}

/// Smallest `τ` with at most `far` of the impostor best scores above it.
pub fn open_set_threshold(impostor_best: &[f64], far: f64) -> f64 {
    let mut sorted = impostor_best.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // allowed false alarms; the epsilon absorbs products like 0.1 · 30
    let k = (far * sorted.len() as f64 + 1e-9).floor() as usize;
    sorted.get(k).copied().unwrap_or(f64::NEG_INFINITY)
}

pub fn dir_from_scores(gallery_ids: &[usize], probe_ids: &[Option<usize>], scores: &[Vec<f64>], far: f64) -> Result<f64> {
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::Protocol(format!("FAR {far} outside (0, 1)")));
    }
    if gallery_ids.is_empty() {
        return Err(Error::Protocol("empty gallery".into()));
    }
    let mut impostor_best = Vec::new();
    let mut genuine = Vec::new();
    for (truth, row) in probe_ids.iter().zip(scores) {
        let (id, s) = best_match(gallery_ids, row);
        match truth {
            None => impostor_best.push(s),
            Some(t) => genuine.push((id == *t, s)),
        }
    }
    if impostor_best.is_empty() {
        return Err(Error::Protocol("open-set evaluation needs impostor probes".into()));
    }
    if genuine.is_empty() {
        return Err(Error::Protocol("open-set evaluation needs genuine probes".into()));
    }
    let tau = open_set_threshold(&impostor_best, far);
    let hits = genuine.iter().filter(|(ok, s)| *ok && *s > tau).count();
    Ok(hits as f64 / genuine.len() as f64)
}

pub fn dir_at_far<F>(set: &IdentificationSet, scorer: F, far: f64) -> Result<f64>
where
    F: Fn(&Tensor, &Tensor) -> Result<f64> + Sync,
{
    set.check_gallery()?;
    let ids: Vec<usize> = set.gallery.iter().map(|g| g.0).collect();
    let probes: Vec<Option<usize>> = set.probes.iter().map(|p| p.0).collect();
    dir_from_scores(&ids, &probes, &set.score_matrix(scorer)?, far)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub protocol: String,
    pub mean_accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    pub accuracy_std: f64,
    pub roc: Vec<(f64, f64)>,
    pub rank1: f64,
    pub dir: f64,
    pub far: f64,
}

impl EvaluationReport {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.mean_accuracy, self.accuracy_std, self.rank1, self.dir, self.far];
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !rates.iter().chain(&self.fold_accuracies).all(in_unit) || !self.roc.iter().all(|(a, b)| in_unit(a) && in_unit(b)) {
            return Err(Error::Protocol("rate outside [0, 1]".into()));
        }
        if self.roc.windows(2).any(|w| w[1].0 < w[0].0 || w[1].1 < w[0].1) {
            return Err(Error::Protocol("ROC points are not monotone".into()));
        }
        Ok(())
    }

    /// Verification rows `fold,accuracy`.
    pub fn write_verification_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "fold,accuracy")?;
        for (f, a) in self.fold_accuracies.iter().enumerate() {
            writeln!(out, "{f},{a}")?;
        }
        Ok(())
    }

    /// ROC rows `far,tar`.
    pub fn write_roc_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "far,tar")?;
        for (far, tar) in &self.roc {
            writeln!(out, "{far},{tar}")?;
        }
        Ok(())
    }

    /// Summary rows `metric,value`.
    pub fn write_identification_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "metric,value")?;
        writeln!(out, "verification_mean,{}", self.mean_accuracy)?;
        writeln!(out, "verification_std,{}", self.accuracy_std)?;
        writeln!(out, "rank1,{}", self.rank1)?;
        writeln!(out, "far,{}", self.far)?;
        writeln!(out, "dir,{}", self.dir)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionComparison {
    /// `(region, accuracy of family A, accuracy of family B)`.
    pub rows: Vec<(String, f64, f64)>,
    /// Mean error rate of B minus mean error rate of A; positive when A is better.
    pub mean_error_reduction: f64,
}

/// Pairs up per-region accuracies of two model families, in A's order.
pub fn region_comparison_report(a: &[(String, f64)], b: &[(String, f64)]) -> Result<RegionComparison> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Protocol("region lists differ in length or are empty".into()));
    }
    let mut rows = Vec::with_capacity(a.len());
    for (region, acc_a) in a {
        let matches: Vec<f64> = b.iter().filter(|(r, _)| r == region).map(|(_, v)| *v).collect();
        match matches.as_slice() {
            [acc_b] => rows.push((region.clone(), *acc_a, *acc_b)),
            _ => return Err(Error::Protocol(format!("region `{region}` is not matched exactly once"))),
        }
    }
    let n = rows.len() as f64;
    let err_a = rows.iter().map(|r| 1.0 - r.1).sum::<f64>() / n;
    let err_b = rows.iter().map(|r| 1.0 - r.2).sum::<f64>() / n;
    Ok(RegionComparison { rows, mean_error_reduction: err_b - err_a })
}

impl RegionComparison {
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "region,acc_a,acc_b")?;
        for (r, a, b) in &self.rows {
            writeln!(out, "{r},{a},{b}")?;
        }
        Ok(())
    }

    pub fn write_summary_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "metric,value")?;
        writeln!(out, "mean_error_reduction,{}", self.mean_error_reduction)
    }
}
