//! Probes of learned representations: how well the environment can be
//! predicted from them, how much per-environment distributions overlap, and
//! whether `E[Y | F(X), E]` agrees across environments on shared cells.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{stream_rng, Stream};
use crate::spec::Label;
use crate::{Error, Result};

/// Representations with their labels and environments, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RepSample {
    pub dim: usize,
    pub reps: Vec<f64>,
    pub labels: Vec<Label>,
    pub envs: Vec<u32>,
}

impl RepSample {
    pub fn new(dim: usize, reps: Vec<f64>, labels: Vec<Label>, envs: Vec<u32>) -> Result<Self> {
        if dim == 0 || reps.len() != dim * labels.len() || labels.len() != envs.len() {
            return Err(Error::WidthMismatch { expected: dim * labels.len(), actual: reps.len() });
        }
        if reps.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("representation".into()));
        }
        Ok(Self { dim, reps, labels, envs })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.reps[i * self.dim..(i + 1) * self.dim]
    }

    fn env_counts(&self) -> BTreeMap<u32, usize> {
        let mut m = BTreeMap::new();
        for e in &self.envs {
            *m.entry(*e).or_insert(0) += 1;
        }
        m
    }

    fn subset(&self, keep: impl Fn(usize) -> bool) -> RepSample {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        RepSample {
            dim: self.dim,
            reps: idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            envs: idx.iter().map(|&i| self.envs[i]).collect(),
        }
    }

    /// Copy with `Y` appended as an extra coordinate.
    fn with_label_column(&self) -> RepSample {
        let mut reps = Vec::with_capacity(self.len() * (self.dim + 1));
        for i in 0..self.len() {
            reps.extend_from_slice(self.row(i));
            reps.push(self.labels[i].as_f64());
        }
        RepSample { dim: self.dim + 1, reps, labels: self.labels.clone(), envs: self.envs.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub train_frac: f64,
    pub ridge: f64,
    pub newton_iters: usize,
    pub bins: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { train_frac: 0.7, ridge: 1e-4, newton_iters: 30, bins: 16, kmeans_iters: 50, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProbe {
    pub y: Label,
    pub n: usize,
    /// `None` when the class has fewer than two environments with two rows.
    pub accuracy: Option<f64>,
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Held-out accuracy of a linear probe predicting `E` from `F(X)`.
    pub domain_probe_accuracy: f64,
    /// Same, from `(F(X), Y)`.
    pub domain_probe_accuracy_with_label: f64,
    /// Largest environment share on the held-out rows.
    pub majority_rate: f64,
    /// `1 - TV` between per-environment bin histograms, averaged over pairs.
    pub overlap_score: f64,
    pub per_class: Vec<ClassProbe>,
}

fn check_envs(s: &RepSample) -> Result<()> {
    let counts = s.env_counts();
    let usable = counts.values().filter(|&&c| c >= 2).count();
    if counts.len() < 2 || usable < counts.len() {
        return Err(Error::InvalidArgument(format!(
            "probe needs at least two environments with two rows each, got {counts:?}"
        )));
    }
    Ok(())
}

/// Multinomial logistic regression fitted by damped Newton steps with a
/// small ridge, on standardized features.
#[derive(Clone, Debug)]
struct LinearProbe {
    classes: Vec<u32>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `(classes - 1) x (dim + 1)`; class 0 is the reference.
    weights: DMatrix<f64>,
}

impl LinearProbe {
    fn design(&self, x: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect();
        z.push(1.0);
        z
    }

    fn probs(&self, z: &[f64]) -> Vec<f64> {
        let zv = DVector::from_column_slice(z);
        let mut logits = vec![0.0];
        logits.extend((&self.weights * zv).iter().copied());
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = ex.iter().sum();
        ex.into_iter().map(|e| e / s).collect()
    }

    fn predict(&self, x: &[f64]) -> u32 {
        let p = self.probs(&self.design(x));
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        self.classes[best]
    }

    fn fit(s: &RepSample, rows: &[usize], cfg: &ProbeConfig) -> Self {
        let d = s.dim;
        let classes: Vec<u32> = rows.iter().map(|&i| s.envs[i]).collect::<BTreeSet<_>>().into_iter().collect();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in rows {
            for (m, v) in mean.iter_mut().zip(s.row(i)) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for &i in rows {
            for ((sc, v), m) in scale.iter_mut().zip(s.row(i)).zip(&mean) {
                *sc += (v - m).powi(2) / n;
            }
        }
        let scale: Vec<f64> = scale.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        let k = classes.len() - 1;
        let p = d + 1;
        let mut probe = LinearProbe { classes, mean, scale, weights: DMatrix::zeros(k, p) };
        let designs: Vec<Vec<f64>> = rows.iter().map(|&i| probe.design(s.row(i))).collect();
        let targets: Vec<usize> =
            rows.iter().map(|&i| probe.classes.iter().position(|c| *c == s.envs[i]).unwrap()).collect();
        let objective = |w: &DMatrix<f64>, pr: &mut LinearProbe| {
            pr.weights = w.clone();
            let mut nll = 0.0;
            for (z, t) in designs.iter().zip(&targets) {
                nll -= pr.probs(z)[*t].max(1e-300).ln();
            }
            nll / n + 0.5 * cfg.ridge * w.iter().map(|v| v * v).sum::<f64>()
        };
        let mut current = objective(&probe.weights.clone(), &mut probe);
        for _ in 0..cfg.newton_iters {
            let mut grad = DVector::<f64>::zeros(k * p);
            let mut hess = DMatrix::<f64>::zeros(k * p, k * p);
            for (z, t) in designs.iter().zip(&targets) {
                let pr = probe.probs(z);
                for a in 0..k {
                    let ya = if *t == a + 1 { 1.0 } else { 0.0 };
                    for i in 0..p {
                        grad[a * p + i] += (pr[a + 1] - ya) * z[i] / n;
                    }
                    for b in 0..k {
                        let w = pr[a + 1] * (if a == b { 1.0 } else { 0.0 } - pr[b + 1]) / n;
                        for i in 0..p {
                            for j in 0..p {
                                hess[(a * p + i, b * p + j)] += w * z[i] * z[j];
                            }
                        }
                    }
                }
            }
            for a in 0..k {
                for i in 0..p {
                    grad[a * p + i] += cfg.ridge * probe.weights[(a, i)];
                    hess[(a * p + i, a * p + i)] += cfg.ridge;
                }
            }
            let Some(chol) = hess.cholesky() else { break };
            let step = chol.solve(&grad);
            let old = probe.weights.clone();
            let mut t = 1.0;
            let mut improved = false;
            while t > 1e-6 {
                let cand = DMatrix::from_fn(k, p, |a, i| old[(a, i)] - t * step[a * p + i]);
                let v = objective(&cand, &mut probe);
                if v.is_finite() && v <= current {
                    improved = current - v > 1e-12;
                    current = v;
                    break;
                }
                t *= 0.5;
            }
            if t <= 1e-6 {
                probe.weights = old;
                break;
            }
            if !improved {
                break;
            }
        }
        probe
    }
}

fn split_rows(n: usize, frac: f64, seed: u64, sub: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Probe, sub));
    let cut = ((frac * n as f64).round() as usize).clamp(1, n.saturating_sub(1));
    let test = idx.split_off(cut);
    (idx, test)
}

fn probe_accuracy(s: &RepSample, cfg: &ProbeConfig, sub: u64) -> Result<(f64, f64)> {
    check_envs(s)?;
    let (train, test) = split_rows(s.len(), cfg.train_frac, cfg.seed, sub);
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &i in &test {
        *counts.entry(s.envs[i]).or_insert(0) += 1;
    }
    let majority = *counts.values().max().unwrap_or(&0) as f64 / test.len() as f64;
    let classes: BTreeSet<u32> = train.iter().map(|&i| s.envs[i]).collect();
    if classes.len() < 2 {
        return Ok((majority, majority));
    }
    let probe = LinearProbe::fit(s, &train, cfg);
    let correct = test.iter().filter(|&&i| probe.predict(s.row(i)) == s.envs[i]).count();
    Ok((correct as f64 / test.len() as f64, majority))
}

/// k-means with k-means++ seeding; returns centroids (at most the number of
/// distinct rows) and the cell of every row.
pub fn kmeans(s: &RepSample, k: usize, iters: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = s.len();
    let mut rng = stream_rng(seed, Stream::Probe, u64::MAX);
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut cents: Vec<Vec<f64>> = Vec::new();
    if n == 0 || k == 0 {
        return (cents, vec![]);
    }
    cents.push(s.row(rng.random_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|i| dist(s.row(i), &cents[0])).collect();
    while cents.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, d) in d2.iter().enumerate() {
            if u < *d {
                pick = i;
                break;
            }
            u -= d;
        }
        cents.push(s.row(pick).to_vec());
        let c = cents.last().unwrap();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist(s.row(i), c));
        }
    }
    let assign_all = |cents: &[Vec<f64>]| -> Vec<usize> {
        (0..n)
            .map(|i| {
                let mut best = 0;
                let mut bd = f64::INFINITY;
                for (j, c) in cents.iter().enumerate() {
                    let d = dist(s.row(i), c);
                    if d < bd {
                        bd = d;
                        best = j;
                    }
                }
                best
            })
            .collect()
    };
    let mut assign = assign_all(&cents);
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; s.dim]; cents.len()];
        let mut counts = vec![0usize; cents.len()];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (acc, v) in sums[a].iter_mut().zip(s.row(i)) {
                *acc += v;
            }
        }
        for (j, c) in cents.iter_mut().enumerate() {
            if counts[j] > 0 {
                *c = sums[j].iter().map(|v| v / counts[j] as f64).collect();
            }
        }
        let next = assign_all(&cents);
        if next == assign {
            break;
        }
        assign = next;
    }
    (cents, assign)
}

/// Mean pairwise `1 - TV` of per-environment cell histograms.
fn overlap(envs: &[u32], cells: &[usize], n_cells: usize) -> f64 {
    let mut hist: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (e, c) in envs.iter().zip(cells) {
        hist.entry(*e).or_insert_with(|| vec![0.0; n_cells])[*c] += 1.0;
    }
    let hs: Vec<Vec<f64>> = hist
        .into_values()
        .map(|h| {
            let t: f64 = h.iter().sum();
            h.into_iter().map(|v| v / t).collect()
        })
        .collect();
    if hs.len() < 2 {
        return 1.0;
    }
    let mut acc = 0.0;
    let mut pairs = 0.0;
    for a in 0..hs.len() {
        for b in a + 1..hs.len() {
            acc += hs[a].iter().zip(&hs[b]).map(|(x, y)| x.min(*y)).sum::<f64>();
            pairs += 1.0;
        }
    }
    (acc / pairs).clamp(0.0, 1.0)
}

/// Fit held-out linear probes for `E` from `F(X)` and from `(F(X), Y)`, and
/// measure per-environment overlap.
pub fn domain_probe(s: &RepSample, cfg: &ProbeConfig) -> Result<ProbeReport> {
    check_envs(s)?;
    let (acc, majority) = probe_accuracy(s, cfg, 0)?;
    let (acc_y, _) = probe_accuracy(&s.with_label_column(), cfg, 0)?;
    let (cents, cells) = kmeans(s, cfg.bins, cfg.kmeans_iters, cfg.seed);
    let overlap_score = overlap(&s.envs, &cells, cents.len());
    let mut per_class = Vec::new();
    for y in Label::ALL {
        let sub = s.subset(|i| s.labels[i] == y);
        let accuracy = if check_envs(&sub).is_ok() { Some(probe_accuracy(&sub, cfg, 1 + y.as_u8() as u64)?.0) } else { None };
        let sub_cells: Vec<usize> = (0..s.len()).filter(|&i| s.labels[i] == y).map(|i| cells[i]).collect();
        per_class.push(ClassProbe { y, n: sub.len(), accuracy, overlap: overlap(&sub.envs, &sub_cells, cents.len()) });
    }
    Ok(ProbeReport {
        domain_probe_accuracy: acc,
        domain_probe_accuracy_with_label: acc_y,
        majority_rate: majority,
        overlap_score,
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOccupancy {
    pub cell: usize,
    pub centroid: Vec<f64>,
    /// Rows per environment.
    pub counts: BTreeMap<u32, usize>,
    /// Empirical `P(Y=1 | cell, E)` per environment present.
    pub mean_y: BTreeMap<u32, f64>,
    /// Largest pairwise difference of `mean_y`; `None` for single-environment cells.
    pub gap: Option<f64>,
}

impl CellOccupancy {
    pub fn shared(&self) -> bool {
        self.counts.len() >= 2
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiGapReport {
    /// Row-weighted mean of per-cell gaps over shared cells; `None` when no
    /// cell is shared by two environments.
    pub gap: Option<f64>,
    pub shared_cell_fraction: f64,
    pub cells: Vec<CellOccupancy>,
}

/// Compare `E[Y | cell, E=e]` across environments on k-means cells of the
/// representation.
pub fn conditional_independence_gap(s: &RepSample, bins: usize, seed: u64) -> Result<CiGapReport> {
    check_envs(s)?;
    let (cents, cells) = kmeans(s, bins, ProbeConfig::default().kmeans_iters, seed);
    let mut occ: Vec<CellOccupancy> = cents
        .into_iter()
        .enumerate()
        .map(|(cell, centroid)| CellOccupancy { cell, centroid, counts: BTreeMap::new(), mean_y: BTreeMap::new(), gap: None })
        .collect();
    for i in 0..s.len() {
        let c = &mut occ[cells[i]];
        *c.counts.entry(s.envs[i]).or_insert(0) += 1;
        *c.mean_y.entry(s.envs[i]).or_insert(0.0) += s.labels[i].as_f64();
    }
    occ.retain(|c| !c.counts.is_empty());
    for c in occ.iter_mut() {
        for (e, m) in c.mean_y.iter_mut() {
            *m /= c.counts[e] as f64;
        }
        if c.shared() {
            let ms: Vec<f64> = c.mean_y.values().copied().collect();
            let hi = ms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = ms.iter().cloned().fold(f64::INFINITY, f64::min);
            c.gap = Some(hi - lo);
        }
    }
    let shared: Vec<&CellOccupancy> = occ.iter().filter(|c| c.shared()).collect();
    let weight: usize = shared.iter().map(|c| c.total()).sum();
    let gap = if shared.is_empty() {
        None
    } else {
        Some(shared.iter().map(|c| c.gap.unwrap() * c.total() as f64).sum::<f64>() / weight as f64)
    };
    let shared_cell_fraction = shared.len() as f64 / occ.len().max(1) as f64;
    Ok(CiGapReport { gap, shared_cell_fraction, cells: occ })
}
