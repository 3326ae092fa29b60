//! Conditional distribution matching: pushing `P(F(X)|Y,E)` towards
//! `P(F(X)|Y)` either with a kernel two-sample statistic (MMD) or with an
//! environment discriminator conditioned on the label (ACDM).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Mlp};
use crate::sampler::{Dataset, SplitTag};
use crate::spec::Label;
use crate::{Error, Result};

/// Probabilities below this are clamped before taking logs.
pub const LOG_EPS: f64 = 1e-7;
/// Lower bound on the median-heuristic bandwidth.
pub const MIN_BANDWIDTH: f64 = 1e-2;
pub const MEDIAN_FACTORS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Convex mixture of Gaussian RBF kernels `exp(−‖a−b‖² / 2σ²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidths: Vec<f64>,
    pub weights: Vec<f64>,
}

impl KernelSpec {
    pub fn rbf(sigma: f64) -> Result<Self> {
        Self::mixture(vec![sigma], vec![1.0])
    }

    pub fn mixture(bandwidths: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() || bandwidths.len() != weights.len() {
            return Err(Error::InvalidArgument("kernel needs one weight per bandwidth".into()));
        }
        if bandwidths.iter().any(|&b| !(b > 0.0) || !b.is_finite()) {
            return Err(Error::InvalidArgument(format!("bandwidths must be positive: {bandwidths:?}")));
        }
        if weights.iter().any(|&w| w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("weights must be convex: {weights:?}")));
        }
        Ok(Self { bandwidths, weights })
    }

    /// Five equally weighted bandwidths at `{¼, ½, 1, 2, 4}` × the median
    /// pairwise distance of `points` (flat, `dim` columns).
    pub fn median_heuristic(points: &[f64], dim: usize) -> Self {
        let med = median_pairwise_distance(points, dim).max(MIN_BANDWIDTH);
        let bandwidths = MEDIAN_FACTORS.iter().map(|f| f * med).collect();
        let weights = vec![1.0 / MEDIAN_FACTORS.len() as f64; MEDIAN_FACTORS.len()];
        Self { bandwidths, weights }
    }

    pub fn eval_sq(&self, sq_dist: f64) -> f64 {
        self.bandwidths
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| w * (-sq_dist / (2.0 * s * s)).exp())
            .sum()
    }

    /// `k(a, b)` and `∂k/∂(‖a−b‖²)`.
    fn eval_sq_with_deriv(&self, sq_dist: f64) -> (f64, f64) {
        let mut k = 0.0;
        let mut dk = 0.0;
        for (s, w) in self.bandwidths.iter().zip(&self.weights) {
            let inv = 1.0 / (2.0 * s * s);
            let e = w * (-sq_dist * inv).exp();
            k += e;
            dk -= e * inv;
        }
        (k, dk)
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        self.eval_sq(sq_dist(a, b))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of distances over all unordered pairs; 0 with fewer than two rows.
pub fn median_pairwise_distance(points: &[f64], dim: usize) -> f64 {
    let n = points.len() / dim.max(1);
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(&points[i * dim..(i + 1) * dim], &points[j * dim..(j + 1) * dim]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}

/// Unbiased MMD² estimate with its gradient in each sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MmdGrad {
    pub value: f64,
    pub grad_p: Vec<f64>,
    pub grad_q: Vec<f64>,
}

fn accumulate_pair(k: &KernelSpec, a: &[f64], b: &[f64], coef: f64, ga: &mut [f64], gb: Option<&mut [f64]>) -> f64 {
    let sq = sq_dist(a, b);
    let (kv, dk) = k.eval_sq_with_deriv(sq);
    // ∂k/∂a = dk · 2(a − b), ∂k/∂b = −∂k/∂a
    let s = coef * dk * 2.0;
    match gb {
        Some(gb) => {
            for t in 0..a.len() {
                let g = s * (a[t] - b[t]);
                ga[t] += g;
                gb[t] -= g;
            }
        }
        None => {
            for t in 0..a.len() {
                ga[t] += s * (a[t] - b[t]);
            }
        }
    }
    kv
}

/// Unbiased MMD² between two flat sample sets with `dim` columns.
pub fn mmd_unbiased_grad(p: &[f64], q: &[f64], dim: usize, k: &KernelSpec) -> Result<MmdGrad> {
    if dim == 0 || p.len() % dim != 0 || q.len() % dim != 0 {
        return Err(Error::WidthMismatch { expected: dim, actual: p.len().max(q.len()) });
    }
    let n = p.len() / dim;
    let m = q.len() / dim;
    if n < 2 || m < 2 {
        return Err(Error::NotEnoughSamples(format!("MMD needs at least 2 samples per side, got {n} and {m}")));
    }
    let row = |i: usize| i * dim..(i + 1) * dim;
    let mut grad_p = vec![0.0; p.len()];
    let mut grad_q = vec![0.0; q.len()];

    let cp = 1.0 / (n * (n - 1)) as f64;
    let cq = 1.0 / (m * (m - 1)) as f64;
    let cx = 2.0 / (n * m) as f64;

    // Sum over i != j counts each unordered pair twice.
    let mut spp = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let (lo, hi) = grad_p.split_at_mut(j * dim);
            spp += 2.0
                * accumulate_pair(k, &p[row(i)], &p[row(j)], 2.0 * cp, &mut lo[i * dim..(i + 1) * dim], Some(&mut hi[..dim]));
        }
    }
    let mut sqq = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let (lo, hi) = grad_q.split_at_mut(j * dim);
            sqq += 2.0
                * accumulate_pair(k, &q[row(i)], &q[row(j)], 2.0 * cq, &mut lo[i * dim..(i + 1) * dim], Some(&mut hi[..dim]));
        }
    }
    let mut spq = 0.0;
    for i in 0..n {
        for j in 0..m {
            spq += accumulate_pair(
                k,
                &p[row(i)],
                &q[row(j)],
                -cx,
                &mut grad_p[i * dim..(i + 1) * dim],
                Some(&mut grad_q[j * dim..(j + 1) * dim]),
            );
        }
    }
    Ok(MmdGrad { value: cp * spp + cq * sqq - cx * spq, grad_p, grad_q })
}

/// Unbiased MMD² estimate between two lists of equal-width vectors.
pub fn mmd_unbiased(p: &[Vec<f64>], q: &[Vec<f64>], k: &KernelSpec) -> Result<f64> {
    let dim = p.first().or(q.first()).map(|v| v.len()).unwrap_or(0);
    if p.iter().chain(q).any(|v| v.len() != dim) {
        return Err(Error::WidthMismatch { expected: dim, actual: 0 });
    }
    let fp: Vec<f64> = p.concat();
    let fq: Vec<f64> = q.concat();
    if p.len() < 2 || q.len() < 2 {
        return Err(Error::NotEnoughSamples(format!(
            "MMD needs at least 2 samples per side, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(mmd_unbiased_grad(&fp, &fq, dim, k)?.value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub y: Label,
    pub env: u32,
}

/// Representations keyed by `(label, environment)`, each group stored flat.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroupedRepresentations {
    pub dim: usize,
    pub groups: BTreeMap<GroupKey, Vec<f64>>,
}

impl GroupedRepresentations {
    pub fn new(dim: usize) -> Self {
        Self { dim, groups: BTreeMap::new() }
    }

    pub fn insert(&mut self, key: GroupKey, vectors: &[Vec<f64>]) -> Result<()> {
        let g = self.groups.entry(key).or_default();
        for v in vectors {
            if v.len() != self.dim {
                return Err(Error::WidthMismatch { expected: self.dim, actual: v.len() });
            }
            g.extend_from_slice(v);
        }
        Ok(())
    }

    /// Group the rows of a flat `n × dim` matrix. Returns the grouping and,
    /// per group, the source row of every member.
    pub fn from_rows(
        reps: &[f64],
        dim: usize,
        labels: &[Label],
        envs: &[u32],
    ) -> (Self, BTreeMap<GroupKey, Vec<usize>>) {
        let mut out = Self::new(dim);
        let mut index: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
        for (r, (&y, &env)) in labels.iter().zip(envs).enumerate() {
            let key = GroupKey { y, env };
            out.groups.entry(key).or_default().extend_from_slice(&reps[r * dim..(r + 1) * dim]);
            index.entry(key).or_default().push(r);
        }
        (out, index)
    }

    pub fn size(&self, key: &GroupKey) -> usize {
        self.groups.get(key).map(|g| g.len() / self.dim.max(1)).unwrap_or(0)
    }

    /// Scatter per-group gradients back to a flat `n × dim` buffer.
    pub fn scatter(&self, grads: &BTreeMap<GroupKey, Vec<f64>>, index: &BTreeMap<GroupKey, Vec<usize>>, out: &mut [f64], scale: f64) {
        let d = self.dim;
        for (key, g) in grads {
            if let Some(rows) = index.get(key) {
                for (k, &r) in rows.iter().enumerate() {
                    for t in 0..d {
                        out[r * d + t] += scale * g[k * d + t];
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Every `(e, e')` with `e ≠ e'`, so each unordered pair counts twice.
    #[default]
    Ordered,
    Unordered,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmdPenalty {
    pub value: f64,
    pub grads: BTreeMap<GroupKey, Vec<f64>>,
    /// Groups with fewer than two members.
    pub skipped: Vec<GroupKey>,
}

/// `Σ_y Σ_e Σ_{e'≠e} MMD²(group(y,e), group(y,e'))`.
pub fn cdm_mmd_penalty(reps: &GroupedRepresentations, k: &KernelSpec) -> Result<f64> {
    Ok(cdm_mmd_penalty_grad(reps, k, Pairing::Ordered)?.value)
}

pub fn cdm_mmd_penalty_grad(reps: &GroupedRepresentations, k: &KernelSpec, pairing: Pairing) -> Result<MmdPenalty> {
    let mut skipped = Vec::new();
    let mut usable: Vec<GroupKey> = Vec::new();
    for key in reps.groups.keys() {
        if reps.size(key) >= 2 {
            usable.push(*key);
        } else {
            skipped.push(*key);
        }
    }
    if usable.is_empty() {
        return Err(Error::NotEnoughSamples("every (y, e) group has fewer than 2 members".into()));
    }
    let mult = match pairing {
        Pairing::Ordered => 2.0,
        Pairing::Unordered => 1.0,
    };
    let mut grads: BTreeMap<GroupKey, Vec<f64>> =
        usable.iter().map(|key| (*key, vec![0.0; reps.groups[key].len()])).collect();
    let mut value = 0.0;
    for (a, ka) in usable.iter().enumerate() {
        for kb in &usable[a + 1..] {
            if ka.y != kb.y {
                continue;
            }
            let r = mmd_unbiased_grad(&reps.groups[ka], &reps.groups[kb], reps.dim, k)?;
            value += mult * r.value;
            for (g, v) in grads.get_mut(ka).expect("usable").iter_mut().zip(&r.grad_p) {
                *g += mult * v;
            }
            for (g, v) in grads.get_mut(kb).expect("usable").iter_mut().zip(&r.grad_q) {
                *g += mult * v;
            }
        }
    }
    Ok(MmdPenalty { value, grads, skipped })
}

/// `γ_e^y = P(E=e, Y=y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaWeights {
    pub table: BTreeMap<GroupKey, f64>,
}

impl GammaWeights {
    pub fn get(&self, key: &GroupKey) -> f64 {
        self.table.get(key).copied().unwrap_or(0.0)
    }

    pub fn from_counts(counts: &BTreeMap<GroupKey, usize>) -> Self {
        let total: usize = counts.values().sum();
        let table = counts
            .iter()
            .map(|(k, &c)| (*k, if total > 0 { c as f64 / total as f64 } else { 0.0 }))
            .collect();
        Self { table }
    }
}

/// Joint frequencies of `(E, Y)` over the train split of training environments.
pub fn gamma_weights(ds: &Dataset) -> Result<GammaWeights> {
    let mut counts = BTreeMap::new();
    for env in ds.train_envs() {
        for y in Label::ALL {
            counts.insert(GroupKey { y, env: env.env_id }, env.count(SplitTag::Train, y));
        }
    }
    if counts.values().sum::<usize>() == 0 {
        return Err(Error::NotEnoughSamples("empty training split".into()));
    }
    Ok(GammaWeights::from_counts(&counts))
}

/// `D: R^d × Y → Δ(E_tr)`.
pub trait EnvDiscriminator {
    /// Environments in output order.
    fn envs(&self) -> &[u32];

    /// Row-major `n × |E|` probabilities for flat `n × d` representations.
    fn probabilities(&self, reps: &[f64], dim: usize, labels: &[Label]) -> Result<Vec<f64>>;
}

/// Discriminator that ignores its input.
#[derive(Clone, Debug)]
pub struct UniformDiscriminator {
    pub envs: Vec<u32>,
}

impl EnvDiscriminator for UniformDiscriminator {
    fn envs(&self) -> &[u32] {
        &self.envs
    }

    fn probabilities(&self, reps: &[f64], dim: usize, _labels: &[Label]) -> Result<Vec<f64>> {
        let n = reps.len() / dim.max(1);
        Ok(vec![1.0 / self.envs.len() as f64; n * self.envs.len()])
    }
}

/// Discriminator given by a closure, for analytic checks.
pub struct FnDiscriminator<F> {
    pub envs: Vec<u32>,
    pub f: F,
}

impl<F: Fn(&[f64], Label) -> Vec<f64>> EnvDiscriminator for FnDiscriminator<F> {
    fn envs(&self) -> &[u32] {
        &self.envs
    }

    fn probabilities(&self, reps: &[f64], dim: usize, labels: &[Label]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(labels.len() * self.envs.len());
        for (r, &y) in labels.iter().enumerate() {
            let p = (self.f)(&reps[r * dim..(r + 1) * dim], y);
            if p.len() != self.envs.len() {
                return Err(Error::WidthMismatch { expected: self.envs.len(), actual: p.len() });
            }
            out.extend(p);
        }
        Ok(out)
    }
}

/// Two-hidden-layer MLP on `[representation, one-hot(y)]` with a softmax over
/// training environments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpDiscriminator {
    pub envs: Vec<u32>,
    pub net: Mlp,
}

fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, o) in logits.chunks(k).zip(out.chunks_mut(k)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (v, x) in o.iter_mut().zip(row) {
            *v = (x - m).exp();
            s += *v;
        }
        for v in o.iter_mut() {
            *v /= s;
        }
    }
    out
}

impl MlpDiscriminator {
    pub fn init<R: Rng>(dim: usize, hidden: usize, envs: Vec<u32>, rng: &mut R) -> Result<Self> {
        let net = Mlp::init(&[dim + 2, hidden, hidden, envs.len()], Activation::Tanh, rng)?;
        Ok(Self { envs, net })
    }

    fn inputs(&self, reps: &[f64], dim: usize, labels: &[Label]) -> Result<Vec<f64>> {
        if dim + 2 != self.net.input_width() {
            return Err(Error::WidthMismatch { expected: self.net.input_width() - 2, actual: dim });
        }
        let mut x = Vec::with_capacity(labels.len() * (dim + 2));
        for (r, &y) in labels.iter().enumerate() {
            x.extend_from_slice(&reps[r * dim..(r + 1) * dim]);
            x.push(if y == Label::Zero { 1.0 } else { 0.0 });
            x.push(if y == Label::One { 1.0 } else { 0.0 });
        }
        Ok(x)
    }
}

impl EnvDiscriminator for MlpDiscriminator {
    fn envs(&self) -> &[u32] {
        &self.envs
    }

    fn probabilities(&self, reps: &[f64], dim: usize, labels: &[Label]) -> Result<Vec<f64>> {
        let f = self.net.forward(&self.inputs(reps, dim, labels)?)?;
        Ok(softmax_rows(f.output(), self.envs.len()))
    }
}

fn flatten_groups(reps: &GroupedRepresentations) -> (Vec<f64>, Vec<Label>, Vec<(GroupKey, usize, usize)>) {
    let mut flat = Vec::new();
    let mut labels = Vec::new();
    let mut spans = Vec::new();
    for (key, g) in &reps.groups {
        let n = g.len() / reps.dim.max(1);
        if n == 0 {
            continue;
        }
        spans.push((*key, labels.len(), n));
        flat.extend_from_slice(g);
        labels.extend(std::iter::repeat(key.y).take(n));
    }
    (flat, labels, spans)
}

/// `Σ_y Σ_e γ_e^y · mean_{group(y,e)} log D^e(F(x), y)`; groups absent from
/// `reps` contribute nothing. Returns the value and the number of clamped
/// probabilities.
pub fn acdm_discriminator_loss<D: EnvDiscriminator + ?Sized>(
    reps: &GroupedRepresentations,
    d: &D,
    gamma: &GammaWeights,
) -> Result<(f64, usize)> {
    let (flat, labels, spans) = flatten_groups(reps);
    let probs = d.probabilities(&flat, reps.dim, &labels)?;
    let ne = d.envs().len();
    let mut value = 0.0;
    let mut clamped = 0;
    for (key, start, n) in spans {
        let Some(col) = d.envs().iter().position(|&e| e == key.env) else {
            return Err(Error::InvalidArgument(format!("discriminator has no output for E={}", key.env)));
        };
        let mut s = 0.0;
        for r in start..start + n {
            let p = probs[r * ne + col];
            if p < LOG_EPS {
                clamped += 1;
            }
            s += p.max(LOG_EPS).ln();
        }
        value += gamma.get(&key) * s / n as f64;
    }
    Ok((value, clamped))
}

/// The representation-side penalty: the same weighted log-likelihood, which
/// the model minimises while the discriminator maximises it.
pub fn acdm_generator_penalty<D: EnvDiscriminator + ?Sized>(
    reps: &GroupedRepresentations,
    d: &D,
    gamma: &GammaWeights,
) -> Result<f64> {
    Ok(acdm_discriminator_loss(reps, d, gamma)?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcdmGrad {
    pub value: f64,
    /// Gradient in the discriminator parameters.
    pub d_params: Vec<f64>,
    /// Gradient in each group's representations.
    pub d_reps: BTreeMap<GroupKey, Vec<f64>>,
    pub clamped: usize,
}

/// Value of the ACDM term and its gradients in both players.
pub fn acdm_grad(reps: &GroupedRepresentations, d: &MlpDiscriminator, gamma: &GammaWeights) -> Result<AcdmGrad> {
    let dim = reps.dim;
    let (flat, labels, spans) = flatten_groups(reps);
    let x = d.inputs(&flat, dim, &labels)?;
    let fwd = d.net.forward(&x)?;
    let ne = d.envs.len();
    let probs = softmax_rows(fwd.output(), ne);
    let mut d_logits = vec![0.0; probs.len()];
    let mut value = 0.0;
    let mut clamped = 0;
    for &(key, start, n) in &spans {
        let col = d
            .envs
            .iter()
            .position(|&e| e == key.env)
            .ok_or_else(|| Error::InvalidArgument(format!("discriminator has no output for E={}", key.env)))?;
        let w = gamma.get(&key) / n as f64;
        for r in start..start + n {
            let p = probs[r * ne + col];
            if p < LOG_EPS {
                clamped += 1;
                value += w * LOG_EPS.ln();
                continue;
            }
            value += w * p.ln();
            // ∂ log softmax_col / ∂ z_k = δ_{k,col} − p_k
            for kk in 0..ne {
                let delta = if kk == col { 1.0 } else { 0.0 };
                d_logits[r * ne + kk] += w * (delta - probs[r * ne + kk]);
            }
        }
    }
    let bw = d.net.backward(&fwd, &d_logits, None);
    let mut d_reps = BTreeMap::new();
    for &(key, start, n) in &spans {
        let mut g = Vec::with_capacity(n * dim);
        for r in start..start + n {
            g.extend_from_slice(&bw.input[r * (dim + 2)..r * (dim + 2) + dim]);
        }
        d_reps.insert(key, g);
    }
    Ok(AcdmGrad { value, d_params: bw.params, d_reps, clamped })
}
