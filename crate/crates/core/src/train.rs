//! Training procedures: ERM, IRM, IRM with label balancing, and the
//! conditional distribution matching variants, with checkpoint selection on
//! training-domain validation loss and grid search over penalty weights.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cdm::{
    acdm_grad, cdm_mmd_penalty_grad, GammaWeights, GroupKey, GroupedRepresentations, KernelSpec, MlpDiscriminator,
    Pairing,
};
use crate::nn::{Activation, Mlp, OptimizerConfig};
use crate::penalty::{irm_penalty_grad, predict, risk_grad, sigmoid, EnvBatch, LossKind, PenaltyMode};
use crate::rng::{stream_rng, Stream};
use crate::sampler::{balance_labels, Dataset, Instance, SplitTag, FEATURE_WIDTH};
use crate::spec::Label;
use crate::{Error, Result};

/// Rows used to compute the median-heuristic bandwidth.
const MEDIAN_ROWS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ERM")]
    Erm,
    #[serde(rename = "IRM")]
    Irm,
    #[serde(rename = "IRMBAL")]
    IrmBal,
    #[serde(rename = "MMD")]
    Mmd,
    #[serde(rename = "ACDM")]
    Acdm,
    #[serde(rename = "IRM_MMD")]
    IrmMmd,
    #[serde(rename = "IRM_ACDM")]
    IrmAcdm,
}

impl Method {
    pub const ALL: [Method; 7] =
        [Method::Erm, Method::Irm, Method::IrmBal, Method::Mmd, Method::Acdm, Method::IrmMmd, Method::IrmAcdm];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "ERM",
            Method::Irm => "IRM",
            Method::IrmBal => "IRMBAL",
            Method::Mmd => "MMD",
            Method::Acdm => "ACDM",
            Method::IrmMmd => "IRM_MMD",
            Method::IrmAcdm => "IRM_ACDM",
        }
    }

    pub fn uses_irm(self) -> bool {
        matches!(self, Method::Irm | Method::IrmBal | Method::IrmMmd | Method::IrmAcdm)
    }

    pub fn uses_mmd(self) -> bool {
        matches!(self, Method::Mmd | Method::IrmMmd)
    }

    pub fn uses_acdm(self) -> bool {
        matches!(self, Method::Acdm | Method::IrmAcdm)
    }

    pub fn uses_cdm(self) -> bool {
        self.uses_mmd() || self.uses_acdm()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// What the per-run checkpoint selection minimises on validation data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionLoss {
    RiskOnly,
    /// Risk plus the active IRM penalty, with the same `1/alpha` scaling as
    /// the training objective.
    #[default]
    PenaltyInclusive,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// Estimated once from the whole train split.
    #[default]
    FullTrain,
    /// Re-estimated from each batch.
    PerBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub loss_kind: LossKind,
    pub alpha: f64,
    pub beta: f64,
    pub k_irm: usize,
    pub d_steps: usize,
    pub optimizer: OptimizerConfig,
    pub disc_optimizer: OptimizerConfig,
    pub iterations: usize,
    /// Instances drawn per training environment per iteration.
    pub batch_size: usize,
    pub seed: u64,
    pub runs: usize,
    /// Widths of the hidden layers before the representation.
    pub hidden: Vec<usize>,
    pub rep_dim: usize,
    pub activation: Activation,
    pub disc_hidden: usize,
    pub checkpoint_every: usize,
    pub selection: SelectionLoss,
    pub penalty_mode: PenaltyMode,
    pub pairing: Pairing,
    pub gamma_mode: GammaMode,
    /// Divide the whole objective by `alpha` once `alpha > 1` is active.
    pub rescale_by_alpha: bool,
    pub evaluate_test: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Erm,
            loss_kind: LossKind::Bce,
            alpha: 0.0,
            beta: 0.0,
            k_irm: 200,
            d_steps: 10,
            optimizer: OptimizerConfig::Sgd { lr: 0.1 },
            disc_optimizer: OptimizerConfig::Sgd { lr: 0.1 },
            iterations: 1000,
            batch_size: 512,
            seed: 0,
            runs: 10,
            hidden: vec![16],
            rep_dim: 16,
            activation: Activation::Tanh,
            disc_hidden: 16,
            checkpoint_every: 10,
            selection: SelectionLoss::PenaltyInclusive,
            penalty_mode: PenaltyMode::MeanRisk,
            pairing: Pairing::Ordered,
            gamma_mode: GammaMode::FullTrain,
            rescale_by_alpha: true,
            evaluate_test: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad("alpha and beta must be nonnegative");
        }
        if self.d_steps == 0 {
            return bad("d_steps must be at least 1");
        }
        if self.batch_size == 0 || self.iterations == 0 || self.checkpoint_every == 0 {
            return bad("batch_size, iterations and checkpoint_every must be positive");
        }
        if self.rep_dim == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    /// Weight actually applied to the IRM penalty at `iter`.
    pub fn alpha_at(&self, iter: usize) -> f64 {
        if self.method.uses_irm() && iter >= self.k_irm {
            self.alpha
        } else {
            0.0
        }
    }

    pub fn beta_eff(&self) -> f64 {
        if self.method.uses_cdm() {
            self.beta
        } else {
            0.0
        }
    }

    /// Whether a checkpoint at `iter` may be selected: once the IRM penalty
    /// is active, only checkpoints after it switched on count.
    pub fn eligible(&self, iter: usize) -> bool {
        !(self.method.uses_irm() && self.alpha > 0.0) || iter >= self.k_irm
    }

    fn scale_at(&self, iter: usize) -> f64 {
        let a = self.alpha_at(iter);
        if self.rescale_by_alpha && a > 1.0 {
            1.0 / a
        } else {
            1.0
        }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![FEATURE_WIDTH];
        s.extend(&self.hidden);
        s.push(self.rep_dim);
        s.push(1);
        s
    }
}

/// Feature map followed by a scalar head. The dummy multiplier of the IRM
/// penalty is the constant 1 and is not part of the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub net: Mlp,
    pub loss_kind: LossKind,
}

impl Model {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, Stream::Init, 0);
        Ok(Self { net: Mlp::init(&cfg.layer_sizes(), cfg.activation, &mut rng)?, loss_kind: cfg.loss_kind })
    }

    /// Representation and prediction for one feature vector; for BCE the
    /// prediction is the probability of `Y=1`.
    pub fn forward(&self, features: &[f64]) -> Result<(Vec<f64>, f64)> {
        if features.len() != self.net.input_width() {
            return Err(Error::WidthMismatch { expected: self.net.input_width(), actual: features.len() });
        }
        let f = self.net.forward(features)?;
        let out = f.output()[0];
        let pred = match self.loss_kind {
            LossKind::Bce => sigmoid(out),
            LossKind::Mse => out,
        };
        Ok((f.representation().to_vec(), pred))
    }

    pub fn rep_dim(&self) -> usize {
        self.net.representation_width()
    }
}

/// Rows from several environments, stored contiguously per environment.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub x: Vec<f64>,
    pub labels: Vec<Label>,
    pub envs: Vec<u32>,
    pub spans: Vec<(u32, Range<usize>)>,
}

impl TrainBatch {
    pub fn from_instances(per_env: &[(u32, Vec<&Instance>)]) -> Self {
        let mut b = TrainBatch { x: Vec::new(), labels: Vec::new(), envs: Vec::new(), spans: Vec::new() };
        for (env, rows) in per_env {
            let start = b.labels.len();
            for i in rows {
                b.x.extend_from_slice(&i.features);
                b.labels.push(i.y);
                b.envs.push(*env);
            }
            b.spans.push((*env, start..b.labels.len()));
        }
        b
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn y(&self, r: Range<usize>) -> Vec<f64> {
        self.labels[r].iter().map(|l| l.as_f64()).collect()
    }

    pub fn gamma(&self) -> GammaWeights {
        let mut counts = BTreeMap::new();
        for (&y, &env) in self.labels.iter().zip(&self.envs) {
            *counts.entry(GroupKey { y, env }).or_insert(0usize) += 1;
        }
        GammaWeights::from_counts(&counts)
    }
}

/// The distribution-matching term of a composed loss.
#[derive(Clone, Debug)]
pub enum CdmTerm<'a> {
    None,
    Mmd { kernel: KernelSpec, pairing: Pairing },
    Acdm { disc: &'a MlpDiscriminator, gamma: &'a GammaWeights },
}

/// `scale · (Σ_e [risk_e + alpha · penalty_e] + beta · cdm)`.
#[derive(Clone, Debug)]
pub struct LossSpec<'a> {
    pub kind: LossKind,
    pub alpha: f64,
    pub beta: f64,
    pub penalty_mode: PenaltyMode,
    pub cdm: CdmTerm<'a>,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvLog {
    pub env: u32,
    pub risk: f64,
    pub irm_penalty: f64,
}

#[derive(Clone, Debug)]
pub struct LossEval {
    pub value: f64,
    pub grad: Vec<f64>,
    pub envs: Vec<EnvLog>,
    pub mmd_penalty: Option<f64>,
    pub acdm_penalty: Option<f64>,
    pub skipped_groups: usize,
    pub clamped: usize,
}

/// Value of the composed objective and its gradient in the model parameters.
pub fn loss_and_grad(model: &Model, batch: &TrainBatch, spec: &LossSpec<'_>) -> Result<LossEval> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let fwd = model.net.forward(&batch.x)?;
    let out = fwd.output();
    let reps = fwd.representation();
    let dim = model.rep_dim();
    let mut d_out = vec![0.0; batch.len()];
    let mut d_rep = vec![0.0; reps.len()];
    let mut value = 0.0;
    let mut envs = Vec::with_capacity(batch.spans.len());
    for (env, range) in &batch.spans {
        let b = EnvBatch::new(*env, out[range.clone()].to_vec(), batch.y(range.clone()))?;
        let r = risk_grad(&b, spec.kind)?;
        let p = irm_penalty_grad(&b, spec.kind, spec.penalty_mode)?;
        value += r.value + spec.alpha * p.value;
        for (k, row) in range.clone().enumerate() {
            d_out[row] = spec.scale * (r.grad[k] + spec.alpha * p.grad[k]);
        }
        envs.push(EnvLog { env: *env, risk: r.value, irm_penalty: p.value });
    }
    let mut mmd_penalty = None;
    let mut acdm_penalty = None;
    let mut skipped_groups = 0;
    let mut clamped = 0;
    match &spec.cdm {
        CdmTerm::None => {}
        CdmTerm::Mmd { kernel, pairing } => {
            let (groups, index) = GroupedRepresentations::from_rows(reps, dim, &batch.labels, &batch.envs);
            let m = cdm_mmd_penalty_grad(&groups, kernel, *pairing)?;
            value += spec.beta * m.value;
            groups.scatter(&m.grads, &index, &mut d_rep, spec.scale * spec.beta);
            skipped_groups = m.skipped.len();
            mmd_penalty = Some(m.value);
        }
        CdmTerm::Acdm { disc, gamma } => {
            let (groups, index) = GroupedRepresentations::from_rows(reps, dim, &batch.labels, &batch.envs);
            let a = acdm_grad(&groups, disc, gamma)?;
            value += spec.beta * a.value;
            groups.scatter(&a.d_reps, &index, &mut d_rep, spec.scale * spec.beta);
            clamped = a.clamped;
            acdm_penalty = Some(a.value);
        }
    }
    let bw = model.net.backward(&fwd, &d_out, Some(&d_rep));
    let value = spec.scale * value;
    if !value.is_finite() || bw.params.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("loss {value} or its gradient is not finite")));
    }
    Ok(LossEval { value, grad: bw.params, envs, mmd_penalty, acdm_penalty, skipped_groups, clamped })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iter: usize,
    pub envs: Vec<EnvLog>,
    pub alpha: f64,
    pub mmd_penalty: Option<f64>,
    pub acdm_penalty: Option<f64>,
    pub total: f64,
    pub disc_steps: usize,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iter: usize,
    /// Summed mean risk over training environments' validation splits.
    pub val_risk: f64,
    /// The quantity selection minimises (see [`SelectionLoss`]).
    pub val_selection: f64,
    pub eligible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub k_irm: usize,
    pub log: Vec<IterLog>,
    pub checkpoints: Vec<Checkpoint>,
    pub selected_iteration: Option<usize>,
    pub selected_val_risk: f64,
    pub selected_val_selection: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: Option<f64>,
    pub failed: Option<String>,
    pub skipped_groups: usize,
    pub clamped: usize,
    pub model: Model,
}

impl RunResult {
    pub fn ok(&self) -> bool {
        self.failed.is_none()
    }

    /// Per-iteration CSV rows: iter, env, risk, irm_penalty, cdm_penalty,
    /// mmd_penalty, acdm_penalty, alpha, val_loss.
    pub fn write_log_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "iter",
            "env",
            "risk",
            "irm_penalty",
            "cdm_penalty",
            "mmd_penalty",
            "acdm_penalty",
            "alpha",
            "val_loss",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for it in &self.log {
            let cdm = it.mmd_penalty.or(it.acdm_penalty);
            for e in &it.envs {
                w.write_record([
                    it.iter.to_string(),
                    e.env.to_string(),
                    e.risk.to_string(),
                    e.irm_penalty.to_string(),
                    opt(cdm),
                    opt(it.mmd_penalty),
                    opt(it.acdm_penalty),
                    it.alpha.to_string(),
                    opt(it.val_loss),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Earliest eligible checkpoint with the lowest `val_selection`.
pub fn select_model(checkpoints: &[Checkpoint]) -> Option<Checkpoint> {
    let mut best: Option<Checkpoint> = None;
    for c in checkpoints.iter().filter(|c| c.eligible && c.val_selection.is_finite()) {
        if best.map(|b| c.val_selection < b.val_selection).unwrap_or(true) {
            best = Some(*c);
        }
    }
    best
}

struct EnvData {
    env: u32,
    train: Vec<Instance>,
    val: Vec<Instance>,
}

fn env_data(ds: &Dataset) -> Result<Vec<EnvData>> {
    let mut out = Vec::new();
    for e in ds.train_envs() {
        let train: Vec<Instance> = e.split(SplitTag::Train).cloned().collect();
        let val: Vec<Instance> = e.split(SplitTag::Val).cloned().collect();
        if train.is_empty() || val.is_empty() {
            return Err(Error::NotEnoughSamples(format!(
                "E={} needs train and validation instances (got {} / {})",
                e.env_id,
                train.len(),
                val.len()
            )));
        }
        out.push(EnvData { env: e.env_id, train, val });
    }
    if out.is_empty() {
        return Err(Error::NotEnoughSamples("no training environments".into()));
    }
    Ok(out)
}

fn full_batch<'a>(data: &'a [EnvData], pick: impl Fn(&'a EnvData) -> &'a [Instance]) -> TrainBatch {
    let per_env: Vec<(u32, Vec<&Instance>)> = data.iter().map(|d| (d.env, pick(d).iter().collect())).collect();
    TrainBatch::from_instances(&per_env)
}

/// Summed per-environment risk, summed penalty and accuracy of `model` on `batch`.
fn evaluate(model: &Model, batch: &TrainBatch, mode: PenaltyMode) -> Result<(f64, f64, f64)> {
    let out = model.net.forward(&batch.x)?;
    let out = out.output();
    let mut risk = 0.0;
    let mut pen = 0.0;
    let mut correct = 0usize;
    for (env, r) in &batch.spans {
        let b = EnvBatch::new(*env, out[r.clone()].to_vec(), batch.y(r.clone()))?;
        risk += risk_grad(&b, model.loss_kind)?.value;
        pen += irm_penalty_grad(&b, model.loss_kind, mode)?.value;
        correct += b.outputs.iter().zip(&b.labels).filter(|(o, y)| predict(model.loss_kind, **o) == **y).count();
    }
    Ok((risk, pen, correct as f64 / batch.len().max(1) as f64))
}

/// Accuracy of `model` on a list of instances.
pub fn accuracy(model: &Model, instances: &[Instance]) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let x: Vec<f64> = instances.iter().flat_map(|i| i.features).collect();
    let f = model.net.forward(&x)?;
    let correct = f
        .output()
        .iter()
        .zip(instances)
        .filter(|(o, i)| predict(model.loss_kind, **o) == i.y.as_f64())
        .count();
    Ok(correct as f64 / instances.len() as f64)
}

/// One full training run on a dataset whose training environments have
/// train and validation splits.
pub fn train_run(ds: &Dataset, cfg: &TrainConfig) -> Result<RunResult> {
    cfg.validate()?;
    let balanced;
    let ds = if cfg.method == Method::IrmBal {
        balanced = balance_labels(ds, cfg.seed)?;
        &balanced
    } else {
        ds
    };
    let data = env_data(ds)?;
    let env_ids: Vec<u32> = data.iter().map(|d| d.env).collect();
    let train_all = full_batch(&data, |d| &d.train);
    let val_all = full_batch(&data, |d| &d.val);
    let gamma_full = train_all.gamma();

    let mut model = Model::init(cfg)?;
    let mut opt = cfg.optimizer.build(model.net.params.len());
    let mut disc = if cfg.method.uses_acdm() {
        let mut rng = stream_rng(cfg.seed, Stream::Discriminator, 0);
        Some(MlpDiscriminator::init(cfg.rep_dim, cfg.disc_hidden, env_ids.clone(), &mut rng)?)
    } else {
        None
    };
    let mut disc_opt = disc.as_ref().map(|d| cfg.disc_optimizer.build(d.net.params.len()));
    let mut batch_rng = stream_rng(cfg.seed, Stream::Batches, 0);

    let mut log = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = Vec::new();
    let mut best: Option<(Checkpoint, Vec<f64>)> = None;
    let mut failed = None;
    let mut skipped_groups = 0;
    let mut clamped = 0;

    for iter in 0..cfg.iterations {
        let per_env: Vec<(u32, Vec<&Instance>)> = data
            .iter()
            .map(|d| {
                let rows = (0..cfg.batch_size).map(|_| &d.train[batch_rng.random_range(0..d.train.len())]).collect();
                (d.env, rows)
            })
            .collect();
        let batch = TrainBatch::from_instances(&per_env);
        let alpha = cfg.alpha_at(iter);
        let scale = cfg.scale_at(iter);
        let gamma_batch;
        let gamma = match cfg.gamma_mode {
            GammaMode::FullTrain => &gamma_full,
            GammaMode::PerBatch => {
                gamma_batch = batch.gamma();
                &gamma_batch
            }
        };

        let mut disc_steps = 0;
        let cdm = if cfg.method.uses_mmd() {
            let fwd = model.net.forward(&batch.x)?;
            let reps = fwd.representation();
            let rows = batch.len().min(MEDIAN_ROWS);
            // Spread the median sample over environments.
            let stride = (batch.len() / rows).max(1);
            let sample: Vec<f64> = (0..rows)
                .flat_map(|k| reps[k * stride * cfg.rep_dim..(k * stride + 1) * cfg.rep_dim].iter().copied())
                .collect();
            CdmTerm::Mmd { kernel: KernelSpec::median_heuristic(&sample, cfg.rep_dim), pairing: cfg.pairing }
        } else if let (Some(d), Some(dopt)) = (disc.as_mut(), disc_opt.as_mut()) {
            let fwd = model.net.forward(&batch.x)?;
            let (groups, _) =
                GroupedRepresentations::from_rows(fwd.representation(), cfg.rep_dim, &batch.labels, &batch.envs);
            for _ in 0..cfg.d_steps {
                let g = acdm_grad(&groups, d, gamma)?;
                dopt.ascend(&mut d.net.params, &g.d_params);
                disc_steps += 1;
            }
            CdmTerm::None
        } else {
            CdmTerm::None
        };
        let cdm = match (&cdm, disc.as_ref()) {
            (CdmTerm::None, Some(d)) => CdmTerm::Acdm { disc: d, gamma },
            _ => cdm,
        };
        let spec = LossSpec {
            kind: cfg.loss_kind,
            alpha,
            beta: cfg.beta_eff(),
            penalty_mode: cfg.penalty_mode,
            cdm,
            scale,
        };
        let eval = match loss_and_grad(&model, &batch, &spec) {
            Ok(e) => e,
            Err(Error::NonFinite(msg)) => {
                failed = Some(format!("iteration {iter}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        };
        skipped_groups += eval.skipped_groups;
        clamped += eval.clamped;
        opt.step(&mut model.net.params, &eval.grad);
        if model.net.params.iter().any(|p| !p.is_finite()) {
            failed = Some(format!("iteration {iter}: parameters diverged"));
            break;
        }

        let mut val_loss = None;
        if iter % cfg.checkpoint_every == 0 || iter + 1 == cfg.iterations {
            let (val_risk, val_pen, _) = evaluate(&model, &val_all, cfg.penalty_mode)?;
            let val_selection = match cfg.selection {
                SelectionLoss::RiskOnly => val_risk,
                SelectionLoss::PenaltyInclusive => scale * (val_risk + alpha * val_pen),
            };
            if !val_selection.is_finite() {
                failed = Some(format!("iteration {iter}: validation loss is not finite"));
                break;
            }
            let cp = Checkpoint { iter, val_risk, val_selection, eligible: cfg.eligible(iter) };
            if cp.eligible && best.as_ref().map(|(b, _)| cp.val_selection < b.val_selection).unwrap_or(true) {
                best = Some((cp, model.net.params.clone()));
            }
            checkpoints.push(cp);
            val_loss = Some(val_selection);
        }
        log.push(IterLog {
            iter,
            envs: eval.envs,
            alpha,
            mmd_penalty: eval.mmd_penalty,
            acdm_penalty: eval.acdm_penalty,
            total: eval.value,
            disc_steps,
            val_loss,
        });
    }

    let selected = select_model(&checkpoints);
    debug_assert_eq!(selected.map(|c| c.iter), best.as_ref().map(|b| b.0.iter));
    if let Some((_, params)) = &best {
        model.net.params = params.clone();
    }
    let (_, _, train_acc) = evaluate(&model, &train_all, cfg.penalty_mode)?;
    let (_, _, val_acc) = evaluate(&model, &val_all, cfg.penalty_mode)?;
    let test_acc = if cfg.evaluate_test && failed.is_none() {
        let test = ds.test_instances();
        if test.is_empty() {
            None
        } else {
            Some(accuracy(&model, test)?)
        }
    } else {
        None
    };
    Ok(RunResult {
        method: cfg.method,
        seed: cfg.seed,
        alpha: cfg.alpha,
        beta: cfg.beta,
        k_irm: cfg.k_irm,
        log,
        checkpoints,
        selected_iteration: selected.map(|c| c.iter),
        selected_val_risk: selected.map(|c| c.val_risk).unwrap_or(f64::INFINITY),
        selected_val_selection: selected.map(|c| c.val_selection).unwrap_or(f64::INFINITY),
        train_acc,
        val_acc,
        test_acc,
        failed,
        skipped_groups,
        clamped,
        model,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperGrid {
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    pub k_irm_grid: Vec<usize>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            alpha_grid: (0..=8).map(|k| 10f64.powi(k)).collect(),
            beta_grid: (0..=5).map(|k| 10f64.powi(k)).collect(),
            k_irm_grid: vec![200, 400, 600],
        }
    }
}

impl HyperGrid {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_grid.is_empty() || self.beta_grid.is_empty() || self.k_irm_grid.is_empty() {
            return Err(Error::InvalidArgument("hyperparameter grids must be nonempty".into()));
        }
        Ok(())
    }

    /// Grid points that matter for `method`; unused axes collapse to the
    /// base configuration's value.
    pub fn points(&self, method: Method, base: &TrainConfig) -> Vec<GridPoint> {
        let alphas = if method.uses_irm() { self.alpha_grid.clone() } else { vec![0.0] };
        let betas = if method.uses_cdm() { self.beta_grid.clone() } else { vec![0.0] };
        let ks = if method.uses_irm() { self.k_irm_grid.clone() } else { vec![base.k_irm] };
        let mut out = Vec::new();
        for &alpha in &alphas {
            for &beta in &betas {
                for &k_irm in &ks {
                    out.push(GridPoint { alpha, beta, k_irm });
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub beta: f64,
    pub k_irm: usize,
}

/// Which per-run validation quantity ranks grid points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridCriterion {
    /// Validation risk at the selected checkpoint.
    ValRisk,
    /// The same quantity checkpoint selection minimised.
    #[default]
    Selection,
}

/// One run of a grid search, without the per-iteration log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub selected_iteration: Option<usize>,
    pub val_risk: f64,
    pub val_selection: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: Option<f64>,
    pub failed: Option<String>,
}

impl From<&RunResult> for RunSummary {
    fn from(r: &RunResult) -> Self {
        Self {
            seed: r.seed,
            selected_iteration: r.selected_iteration,
            val_risk: r.selected_val_risk,
            val_selection: r.selected_val_selection,
            train_acc: r.train_acc,
            val_acc: r.val_acc,
            test_acc: r.test_acc,
            failed: r.failed.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub point: GridPoint,
    /// Mean validation criterion over successful runs; `None` if all failed.
    pub mean_val: Option<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_test: Option<f64>,
    pub std_test: Option<f64>,
    pub runs: Vec<RunSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub method: Method,
    pub best: Option<GridPoint>,
    pub points: Vec<PointSummary>,
}

impl GridResult {
    pub fn best_summary(&self) -> Option<&PointSummary> {
        let best = self.best?;
        self.points.iter().find(|p| p.point == best)
    }

    pub fn mean_test(&self) -> Option<f64> {
        self.best_summary().and_then(|p| p.mean_test)
    }
}

pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some((m, v.sqrt()))
}

/// Grid search where run `r` trains on `datasets[r]` with seed `base.seed + r`.
/// Points are ranked by mean validation criterion over successful runs; ties
/// go to the earlier point in grid order. Test accuracy is only reported.
pub fn grid_search_multi(
    datasets: &[Dataset],
    base: &TrainConfig,
    grid: &HyperGrid,
    criterion: GridCriterion,
) -> Result<GridResult> {
    grid.validate()?;
    base.validate()?;
    if datasets.is_empty() {
        return Err(Error::InvalidArgument("grid search needs at least one run".into()));
    }
    let points = grid.points(base.method, base);
    let jobs: Vec<(usize, usize)> =
        (0..points.len()).flat_map(|p| (0..datasets.len()).map(move |r| (p, r))).collect();
    let results: Vec<Result<RunSummary>> = jobs
        .par_iter()
        .map(|&(p, r)| {
            let pt = points[p];
            let cfg = TrainConfig {
                alpha: pt.alpha,
                beta: pt.beta,
                k_irm: pt.k_irm,
                seed: base.seed.wrapping_add(r as u64),
                ..base.clone()
            };
            train_run(&datasets[r], &cfg).map(|res| RunSummary::from(&res))
        })
        .collect();
    let mut by_point: Vec<Vec<RunSummary>> = vec![Vec::new(); points.len()];
    for ((p, _), res) in jobs.iter().zip(results) {
        by_point[*p].push(res?);
    }
    let mut summaries = Vec::with_capacity(points.len());
    for (point, runs) in points.iter().zip(by_point) {
        let ok: Vec<&RunSummary> = runs.iter().filter(|r| r.failed.is_none()).collect();
        let vals: Vec<f64> = ok
            .iter()
            .map(|r| match criterion {
                GridCriterion::ValRisk => r.val_risk,
                GridCriterion::Selection => r.val_selection,
            })
            .collect();
        let tests: Vec<f64> = ok.iter().filter_map(|r| r.test_acc).collect();
        let ts = mean_std(&tests);
        summaries.push(PointSummary {
            point: *point,
            mean_val: mean_std(&vals).map(|m| m.0).filter(|v| v.is_finite()),
            n_ok: ok.len(),
            n_failed: runs.len() - ok.len(),
            mean_test: ts.map(|t| t.0),
            std_test: ts.map(|t| t.1),
            runs,
        });
    }
    let mut best: Option<(f64, GridPoint)> = None;
    for s in &summaries {
        if let Some(v) = s.mean_val {
            if best.map(|b| v < b.0).unwrap_or(true) {
                best = Some((v, s.point));
            }
        }
    }
    Ok(GridResult { method: base.method, best: best.map(|b| b.1), points: summaries })
}

/// Grid search with one dataset shared by every seed.
pub fn grid_search(
    ds: &Dataset,
    base: &TrainConfig,
    grid: &HyperGrid,
    seeds: usize,
    criterion: GridCriterion,
) -> Result<GridResult> {
    let datasets = vec![ds.clone(); seeds.max(1)];
    grid_search_multi(&datasets, base, grid, criterion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{sample_dataset, split_train_val, EncodingConfig};
    use crate::spec::cmnist_plus;
    use approx::assert_abs_diff_eq;

    fn small_ds(rho: f64, seed: u64) -> Dataset {
        let ds = sample_dataset(&cmnist_plus(rho).unwrap(), 600, seed, EncodingConfig::default()).unwrap();
        split_train_val(&ds, 0.8, seed).unwrap()
    }

    fn quick(method: Method) -> TrainConfig {
        TrainConfig { method, iterations: 40, batch_size: 32, k_irm: 10, d_steps: 2, ..TrainConfig::default() }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("irm-mmd".parse::<Method>().unwrap(), Method::IrmMmd);
        assert!("EIIL".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { d_steps: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { alpha: -1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_model_predicts_half() {
        let cfg = TrainConfig::default();
        let mut m = Model::init(&cfg).unwrap();
        m.net.params.iter_mut().for_each(|p| *p = 0.0);
        let (rep, p) = m.forward(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(p, 0.5);
        assert_eq!(rep.len(), cfg.rep_dim);
        assert!(m.forward(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn select_model_rules() {
        let cp = |iter, v| Checkpoint { iter, val_risk: v, val_selection: v, eligible: true };
        assert_eq!(select_model(&[cp(0, 3.0), cp(10, 2.0), cp(20, 1.0)]).unwrap().iter, 20);
        assert_eq!(select_model(&[cp(0, 3.0), cp(10, 1.0), cp(20, 2.0)]).unwrap().iter, 10);
        assert_eq!(select_model(&[cp(200, 1.0), cp(400, 1.0)]).unwrap().iter, 200);
        let mut early = cp(0, 0.1);
        early.eligible = false;
        assert_eq!(select_model(&[early, cp(10, 1.0)]).unwrap().iter, 10);
        assert!(select_model(&[]).is_none());
    }

    #[test]
    fn deterministic_runs() {
        let ds = small_ds(0.8, 1);
        for m in [Method::Irm, Method::IrmMmd, Method::IrmAcdm] {
            let cfg = TrainConfig { alpha: 100.0, beta: 1.0, ..quick(m) };
            let a = train_run(&ds, &cfg).unwrap();
            let b = train_run(&ds, &cfg).unwrap();
            assert_eq!(a.log, b.log);
            assert_eq!(a.selected_iteration, b.selected_iteration);
        }
    }

    #[test]
    fn irm_with_zero_alpha_is_erm() {
        let ds = small_ds(0.8, 2);
        let erm = train_run(&ds, &quick(Method::Erm)).unwrap();
        let irm = train_run(&ds, &TrainConfig { alpha: 0.0, ..quick(Method::Irm) }).unwrap();
        let strip = |r: &RunResult| r.log.iter().map(|l| (l.envs.clone(), l.total)).collect::<Vec<_>>();
        assert_eq!(strip(&erm), strip(&irm));
        assert_eq!(erm.selected_iteration, irm.selected_iteration);
        assert_eq!(erm.test_acc, irm.test_acc);
    }

    #[test]
    fn cdm_only_methods_are_zero_alpha_combinations() {
        let ds = small_ds(0.8, 3);
        let pairs = [(Method::Mmd, Method::IrmMmd), (Method::Acdm, Method::IrmAcdm)];
        for (single, combo) in pairs {
            let a = train_run(&ds, &TrainConfig { beta: 1.0, ..quick(single) }).unwrap();
            let b = train_run(&ds, &TrainConfig { beta: 1.0, alpha: 0.0, ..quick(combo) }).unwrap();
            assert_eq!(a.log, b.log, "{single} vs {combo}");
        }
    }

    #[test]
    fn penalty_inactive_before_k_irm() {
        let ds = small_ds(0.8, 4);
        let r = train_run(&ds, &TrainConfig { alpha: 1e4, ..quick(Method::Irm) }).unwrap();
        for l in &r.log {
            assert_eq!(l.alpha, if l.iter < 10 { 0.0 } else { 1e4 });
        }
        assert!(r.selected_iteration.unwrap() >= 10);
    }

    #[test]
    fn acdm_alternation_counts() {
        let ds = small_ds(0.8, 5);
        let r = train_run(&ds, &TrainConfig { beta: 1.0, d_steps: 3, ..quick(Method::IrmAcdm) }).unwrap();
        assert!(r.log.iter().all(|l| l.disc_steps == 3));
    }

    #[test]
    fn irmbal_matches_irm_on_balanced_data() {
        let spec = cmnist_plus(0.8).unwrap().label_balanced();
        let ds = sample_dataset(&spec, 400, 6, EncodingConfig::default()).unwrap();
        let mut ds = split_train_val(&ds, 0.8, 6).unwrap();
        // Force exact balance in the train split.
        for env_id in ds.train_env_ids() {
            let env = ds.env_mut(env_id).unwrap();
            let mut k = 0;
            for i in env.instances.iter_mut().filter(|i| i.split == SplitTag::Train) {
                i.y = Label::from_bool(k % 2 == 0);
                k += 1;
            }
        }
        let irm = train_run(&ds, &TrainConfig { alpha: 10.0, ..quick(Method::Irm) }).unwrap();
        let bal = train_run(&ds, &TrainConfig { alpha: 10.0, ..quick(Method::IrmBal) }).unwrap();
        assert_eq!(irm.log, bal.log);
    }

    #[test]
    fn training_never_reads_test_data() {
        let ds = small_ds(0.8, 7).detached();
        let cfg = TrainConfig { evaluate_test: false, alpha: 10.0, beta: 1.0, ..quick(Method::IrmAcdm) };
        train_run(&ds, &cfg).unwrap();
        assert_eq!(ds.test_reads(), 0);
        let cfg = TrainConfig { evaluate_test: true, ..cfg };
        train_run(&ds, &cfg).unwrap();
        assert_eq!(ds.test_reads(), 1);
    }

    #[test]
    fn selection_ignores_test_labels() {
        let ds = small_ds(0.8, 8);
        let mut flipped = ds.clone();
        let test_id = flipped.all_envs().iter().find(|e| e.role == crate::EnvRole::Test).unwrap().env_id;
        for i in flipped.env_mut(test_id).unwrap().instances.iter_mut() {
            i.y = i.y.flip();
        }
        let cfg = TrainConfig { alpha: 10.0, ..quick(Method::Irm) };
        let a = train_run(&ds, &cfg).unwrap();
        let b = train_run(&flipped, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.selected_iteration, b.selected_iteration);
        assert_abs_diff_eq!(a.test_acc.unwrap() + b.test_acc.unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn duplicated_batch_leaves_gradient_unchanged() {
        let cfg = TrainConfig::default();
        let model = Model::init(&cfg).unwrap();
        let ds = small_ds(0.7, 9);
        let rows: Vec<(u32, Vec<&Instance>)> =
            ds.train_envs().map(|e| (e.env_id, e.instances.iter().take(6).collect())).collect();
        let doubled: Vec<(u32, Vec<&Instance>)> =
            rows.iter().map(|(e, r)| (*e, r.iter().chain(r.iter()).copied().collect())).collect();
        let spec = LossSpec {
            kind: LossKind::Bce,
            alpha: 0.0,
            beta: 0.0,
            penalty_mode: PenaltyMode::MeanRisk,
            cdm: CdmTerm::None,
            scale: 1.0,
        };
        let a = loss_and_grad(&model, &TrainBatch::from_instances(&rows), &spec).unwrap();
        let b = loss_and_grad(&model, &TrainBatch::from_instances(&doubled), &spec).unwrap();
        for (x, y) in a.grad.iter().zip(&b.grad) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn perfect_mse_fit_has_zero_gradient() {
        let cfg = TrainConfig { loss_kind: LossKind::Mse, ..TrainConfig::default() };
        let mut model = Model::init(&cfg).unwrap();
        model.net.params.iter_mut().for_each(|p| *p = 0.0);
        let ds = small_ds(0.7, 10);
        // Zero model outputs 0, so a batch of negatives is fit exactly.
        let rows: Vec<(u32, Vec<&Instance>)> = ds
            .train_envs()
            .map(|e| (e.env_id, e.instances.iter().filter(|i| i.y == Label::Zero).take(5).collect()))
            .collect();
        let spec = LossSpec {
            kind: LossKind::Mse,
            alpha: 0.0,
            beta: 0.0,
            penalty_mode: PenaltyMode::MeanRisk,
            cdm: CdmTerm::None,
            scale: 1.0,
        };
        let e = loss_and_grad(&model, &TrainBatch::from_instances(&rows), &spec).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(e.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn grid_points_follow_method() {
        let g = HyperGrid { alpha_grid: vec![1.0, 10.0], beta_grid: vec![1.0, 2.0, 3.0], k_irm_grid: vec![5] };
        let base = TrainConfig::default();
        assert_eq!(g.points(Method::Erm, &base).len(), 1);
        assert_eq!(g.points(Method::Irm, &base).len(), 2);
        assert_eq!(g.points(Method::Mmd, &base).len(), 3);
        assert_eq!(g.points(Method::IrmAcdm, &base).len(), 6);
        assert!(HyperGrid { alpha_grid: vec![], ..g }.validate().is_err());
    }

    #[test]
    fn grid_search_is_deterministic() {
        let ds = small_ds(0.8, 11);
        let grid = HyperGrid { alpha_grid: vec![1.0, 100.0], beta_grid: vec![1.0], k_irm_grid: vec![10] };
        let base = quick(Method::Irm);
        let a = grid_search(&ds, &base, &grid, 2, GridCriterion::Selection).unwrap();
        let b = grid_search(&ds, &base, &grid, 2, GridCriterion::Selection).unwrap();
        assert_eq!(a, b);
        assert!(a.best.is_some());
        assert_eq!(a.points.len(), 2);
        assert!(a.points.iter().all(|p| p.runs.len() == 2));

        let single = HyperGrid { alpha_grid: vec![100.0], ..grid };
        let g = grid_search(&ds, &base, &single, 1, GridCriterion::ValRisk).unwrap();
        let run = train_run(&ds, &TrainConfig { alpha: 100.0, ..base }).unwrap();
        assert_eq!(g.best_summary().unwrap().runs[0], RunSummary::from(&run));
    }

    #[test]
    fn log_csv_header() {
        let ds = small_ds(0.8, 12);
        let r = train_run(&ds, &TrainConfig { iterations: 3, ..quick(Method::IrmMmd) }).unwrap();
        let mut buf = Vec::new();
        r.write_log_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,env,risk,irm_penalty,cdm_penalty,mmd_penalty,acdm_penalty,alpha,val_loss\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 2);
    }
}
