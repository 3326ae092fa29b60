//! Finite seeded datasets drawn from a [`DatasetSpec`].
//!
//! Every instance carries its noiseless label `y_star`, observed label `y`,
//! environment, colour and shape channel, plus a fixed-width feature vector:
//! a colour one-hot followed by the shape value.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::{stream_rng, Stream};
use crate::spec::{validate_spec, Color, DatasetSpec, EnvRole, EnvironmentSpec, Label};
use crate::{Error, Result};

pub const FEATURE_WIDTH: usize = 4;
pub const DEFAULT_N_PER_ENV: usize = 25_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeEncoding {
    /// `s = y_star`.
    #[default]
    Exact,
    /// `s = y_star + N(0, sigma²)`.
    Noisy { sigma: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub shape: ShapeEncoding,
}

impl EncodingConfig {
    pub fn width(&self) -> usize {
        FEATURE_WIDTH
    }

    pub fn encode(&self, c: Color, s: f64) -> [f64; FEATURE_WIDTH] {
        let mut f = [0.0; FEATURE_WIDTH];
        f[c.index()] = 1.0;
        f[3] = s;
        f
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    /// Identity of the original draw; duplicates made by balancing share it.
    pub id: u64,
    pub y_star: Label,
    pub y: Label,
    pub env: u32,
    pub color: Color,
    pub shape: f64,
    pub split: SplitTag,
    pub features: [f64; FEATURE_WIDTH],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSamples {
    pub env_id: u32,
    pub role: EnvRole,
    pub instances: Vec<Instance>,
}

impl EnvSamples {
    pub fn split(&self, tag: SplitTag) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(move |i| i.split == tag)
    }

    pub fn count(&self, tag: SplitTag, y: Label) -> usize {
        self.split(tag).filter(|i| i.y == y).count()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    envs: Vec<EnvSamples>,
    pub spec_digest: String,
    pub seed: u64,
    pub n_per_env: usize,
    pub encoding: EncodingConfig,
    pub warnings: Vec<String>,
    test_reads: Arc<AtomicUsize>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.envs == other.envs
            && self.spec_digest == other.spec_digest
            && self.seed == other.seed
            && self.encoding == other.encoding
    }
}

impl Dataset {
    /// Training environments in spec order.
    pub fn train_envs(&self) -> impl Iterator<Item = &EnvSamples> {
        self.envs.iter().filter(|e| e.role == EnvRole::Train)
    }

    pub fn train_env_ids(&self) -> Vec<u32> {
        self.train_envs().map(|e| e.env_id).collect()
    }

    /// Test-environment instances. Every call is counted so callers can
    /// assert that a code path never touched them.
    pub fn test_instances(&self) -> &[Instance] {
        self.test_reads.fetch_add(1, Ordering::SeqCst);
        self.envs
            .iter()
            .find(|e| e.role == EnvRole::Test)
            .map(|e| e.instances.as_slice())
            .unwrap_or(&[])
    }

    pub fn test_reads(&self) -> usize {
        self.test_reads.load(Ordering::SeqCst)
    }

    /// Every environment, test included. Not counted; meant for serialization
    /// and diagnostics rather than model fitting.
    pub fn all_envs(&self) -> &[EnvSamples] {
        &self.envs
    }

    pub fn len(&self) -> usize {
        self.envs.iter().map(|e| e.instances.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy whose test-read counter starts at zero and is not shared.
    pub fn detached(&self) -> Self {
        Self { test_reads: Arc::new(AtomicUsize::new(0)), ..self.clone() }
    }

    /// Mutable access to one environment's instances.
    pub fn env_mut(&mut self, env_id: u32) -> Option<&mut EnvSamples> {
        self.envs.iter_mut().find(|e| e.env_id == env_id)
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            spec_digest: self.spec_digest.clone(),
            seed: self.seed,
            n_per_env: self.n_per_env,
            encoding: self.encoding,
            rows: self.len(),
            warnings: self.warnings.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["y_star", "y", "e", "c", "s", "split"].into_iter().map(String::from).collect::<Vec<_>>();
        header.extend((0..FEATURE_WIDTH).map(|k| format!("feature_{k}")));
        w.write_record(&header)?;
        for env in &self.envs {
            for i in &env.instances {
                let mut rec = vec![
                    i.y_star.to_string(),
                    i.y.to_string(),
                    i.env.to_string(),
                    i.color.to_string(),
                    i.shape.to_string(),
                    serde_json::to_value(i.split)?.as_str().unwrap_or_default().to_string(),
                ];
                rec.extend(i.features.iter().map(|f| f.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Sidecar describing how a dataset CSV was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec_digest: String,
    pub seed: u64,
    pub n_per_env: usize,
    pub encoding: EncodingConfig,
    pub rows: usize,
    pub warnings: Vec<String>,
}

fn draw_color<R: Rng>(rng: &mut R, row: [f64; 3]) -> Color {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for c in Color::ALL {
        acc += row[c.index()];
        if u < acc && row[c.index()] > 0.0 {
            return c;
        }
    }
    // Rounding slack: fall back to the last colour with mass.
    *Color::ALL.iter().rev().find(|c| row[c.index()] > 0.0).unwrap_or(&Color::R)
}

fn sample_env(
    env: &EnvironmentSpec,
    env_index: u64,
    n: usize,
    flip_rate: f64,
    seed: u64,
    enc: EncodingConfig,
) -> Result<EnvSamples> {
    let mut labels = stream_rng(seed, Stream::Labels, env_index);
    let mut flips = stream_rng(seed, Stream::Flips, env_index);
    let mut colors = stream_rng(seed, Stream::Colors, env_index);
    let mut noise_rng = stream_rng(seed, Stream::ShapeNoise, env_index);
    let noise = match enc.shape {
        ShapeEncoding::Exact => None,
        ShapeEncoding::Noisy { sigma } => Some(
            Normal::new(0.0, sigma)
                .map_err(|e| Error::InvalidArgument(format!("shape noise sigma {sigma}: {e}")))?,
        ),
    };
    let split = match env.role {
        EnvRole::Train => SplitTag::Train,
        EnvRole::Test => SplitTag::Test,
    };
    let mut instances = Vec::with_capacity(n);
    for k in 0..n {
        let y = Label::from_bool(labels.random_bool(env.p_y1));
        let y_star = if flip_rate > 0.0 && flips.random_bool(flip_rate) { y.flip() } else { y };
        let color = draw_color(&mut colors, env.color_row(y));
        let shape = y_star.as_f64() + noise.map(|d| d.sample(&mut noise_rng)).unwrap_or(0.0);
        instances.push(Instance {
            id: (env_index << 40) | k as u64,
            y_star,
            y,
            env: env.env_id,
            color,
            shape,
            split,
            features: enc.encode(color, shape),
        });
    }
    Ok(EnvSamples { env_id: env.env_id, role: env.role, instances })
}

/// Draw `n_per_env` instances for every environment, test included.
///
/// Within an environment the observed label is drawn from `P(Y|E)`, the clean
/// label differs from it with probability `flip_rate`, and the colour is
/// drawn from `P(C|Y,E)`. Training-environment instances start in the train
/// split; see [`split_train_val`].
pub fn sample_dataset(spec: &DatasetSpec, n_per_env: usize, seed: u64, enc: EncodingConfig) -> Result<Dataset> {
    validate_spec(spec).into_result()?;
    let mut envs = Vec::with_capacity(spec.environments.len());
    let mut warnings = Vec::new();
    for (idx, env) in spec.environments.iter().enumerate() {
        let samples = sample_env(env, idx as u64, n_per_env, spec.flip_rate, seed, enc)?;
        if n_per_env > 0 {
            for y in Label::ALL {
                if !samples.instances.iter().any(|i| i.y == y) {
                    warnings.push(format!("no instances with Y={y} in E={}", env.env_id));
                }
            }
        }
        envs.push(samples);
    }
    Ok(Dataset {
        envs,
        spec_digest: spec.digest(),
        seed,
        n_per_env,
        encoding: enc,
        warnings,
        test_reads: Arc::new(AtomicUsize::new(0)),
    })
}

/// Uniformly assign each training environment's instances to train or
/// validation; `round(ratio · n)` land in train.
pub fn split_train_val(ds: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut out = ds.detached();
    for (idx, env) in out.envs.iter_mut().enumerate() {
        if env.role != EnvRole::Train {
            continue;
        }
        let n = env.instances.len();
        let n_train = (ratio * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, Stream::Splits, idx as u64));
        for (rank, &i) in order.iter().enumerate() {
            env.instances[i].split = if rank < n_train { SplitTag::Train } else { SplitTag::Val };
        }
    }
    Ok(out)
}

/// Oversample the minority class inside each training environment's train
/// split until both classes have equal counts. Duplicates are appended.
pub fn balance_labels(ds: &Dataset, seed: u64) -> Result<Dataset> {
    let mut out = ds.detached();
    for (idx, env) in out.envs.iter_mut().enumerate() {
        if env.role != EnvRole::Train {
            continue;
        }
        let pos: Vec<usize> = (0..env.instances.len())
            .filter(|&i| env.instances[i].split == SplitTag::Train && env.instances[i].y == Label::One)
            .collect();
        let neg: Vec<usize> = (0..env.instances.len())
            .filter(|&i| env.instances[i].split == SplitTag::Train && env.instances[i].y == Label::Zero)
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::NotEnoughSamples(format!(
                "cannot balance E={}: {} positives, {} negatives in train split",
                env.env_id,
                pos.len(),
                neg.len()
            )));
        }
        let (minority, deficit) = if pos.len() < neg.len() {
            let d = neg.len() - pos.len();
            (pos, d)
        } else {
            let d = pos.len() - neg.len();
            (neg, d)
        };
        let mut rng = stream_rng(seed, Stream::Balancing, idx as u64);
        let extra: Vec<Instance> = (0..deficit)
            .map(|_| env.instances[minority[rng.random_range(0..minority.len())]].clone())
            .collect();
        env.instances.extend(extra);
    }
    Ok(out)
}

/// Frequency estimates per environment. Cells with an empty conditioning
/// event are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalEnv {
    pub env_id: u32,
    pub role: EnvRole,
    pub n: usize,
    pub p_y1: Option<f64>,
    /// Same layout as [`EnvironmentSpec::color_table`].
    pub color_table: [[Option<f64>; 3]; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalTables {
    pub envs: Vec<EmpiricalEnv>,
    /// Share of training instances per training environment.
    pub env_prior: Vec<f64>,
    /// Share of instances with `y != y_star`.
    pub flip_rate: f64,
}

impl EmpiricalTables {
    pub fn flagged_cells(&self) -> Vec<String> {
        let mut out = Vec::new();
        for e in &self.envs {
            if e.p_y1.is_none() {
                out.push(format!("P(Y|E={})", e.env_id));
            }
            for (row, y) in [(0, Label::One), (1, Label::Zero)] {
                if e.color_table[row].iter().any(|v| v.is_none()) {
                    out.push(format!("P(C|Y={y},E={})", e.env_id));
                }
            }
        }
        out
    }

    /// The estimated tables as a spec the oracle can analyse.
    pub fn to_spec(&self, rho: Option<f64>) -> Result<DatasetSpec> {
        let flagged = self.flagged_cells();
        if !flagged.is_empty() {
            return Err(Error::NotEnoughSamples(format!("empty cells: {}", flagged.join(", "))));
        }
        let environments = self
            .envs
            .iter()
            .map(|e| EnvironmentSpec {
                env_id: e.env_id,
                role: e.role,
                p_y1: e.p_y1.unwrap_or(0.0),
                color_table: e.color_table.map(|row| row.map(|v| v.unwrap_or(0.0))),
            })
            .collect();
        Ok(DatasetSpec { environments, env_prior: self.env_prior.clone(), flip_rate: self.flip_rate, rho })
    }
}

/// Frequency estimates of `P(Y|E)`, `P(C|Y,E)` and `P(E)` over every split.
pub fn empirical_distributions(ds: &Dataset) -> Result<EmpiricalTables> {
    if ds.is_empty() {
        return Err(Error::NotEnoughSamples("empty dataset".into()));
    }
    let mut envs = Vec::new();
    let mut flips = 0usize;
    for env in &ds.envs {
        let n = env.instances.len();
        let mut counts = [[0usize; 3]; 2];
        for i in &env.instances {
            let row = if i.y == Label::One { 0 } else { 1 };
            counts[row][i.color.index()] += 1;
            flips += (i.y != i.y_star) as usize;
        }
        let n1: usize = counts[0].iter().sum();
        let n0: usize = counts[1].iter().sum();
        let frac = |k: usize, d: usize| if d > 0 { Some(k as f64 / d as f64) } else { None };
        envs.push(EmpiricalEnv {
            env_id: env.env_id,
            role: env.role,
            n,
            p_y1: frac(n1, n),
            color_table: [counts[0].map(|k| frac(k, n1)), counts[1].map(|k| frac(k, n0))],
        });
    }
    let train_total: usize = envs.iter().filter(|e| e.role == EnvRole::Train).map(|e| e.n).sum();
    let env_prior = envs
        .iter()
        .filter(|e| e.role == EnvRole::Train)
        .map(|e| if train_total > 0 { e.n as f64 / train_total as f64 } else { 0.0 })
        .collect();
    Ok(EmpiricalTables { envs, env_prior, flip_rate: flips as f64 / ds.len() as f64 })
}
