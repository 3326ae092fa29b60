//! Experiment runner behind the `irmlab` binary: oracle tables, ρ sweeps,
//! interpolation sweeps, single grid-searched trainings and method
//! comparisons. Every command writes CSVs plus a `manifest.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{conditional_independence_gap, domain_probe, ProbeConfig, RepSample};
use crate::oracle::{self, full_report, FeatureFamily, OracleReport};
use crate::sampler::{sample_dataset, split_train_val, Dataset, EncodingConfig, SplitTag};
use crate::spec::{cmnist_plus, interpolate_with_test, DatasetSpec, InterpolationParams, TestSpecChoice};
use crate::train::{
    grid_search_multi, mean_std, train_run, GridCriterion, GridPoint, GridResult, HyperGrid, Method, RunSummary,
    TrainConfig,
};
use crate::{Error, Result};

pub const DEFAULT_RHOS: [f64; 7] = [0.55, 0.6, 0.65, 0.7, 0.8, 0.85, 0.9];
pub const DEFAULT_W_PLUS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    OracleTable,
    SweepRho,
    SweepInterp,
    Train,
    Compare,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::OracleTable => "oracle-table",
            Command::SweepRho => "sweep-rho",
            Command::SweepInterp => "sweep-interp",
            Command::Train => "train",
            Command::Compare => "compare",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rho: Vec<f64>,
    pub w_plus: Vec<f64>,
    /// Paired with `w_plus` as `0.5 + 0.4 w` when empty; otherwise crossed.
    pub p_ye: Vec<f64>,
    pub test_specs: Vec<TestSpecChoice>,
    pub methods: Vec<Method>,
    /// Oracle table: `None` emits both modes.
    pub balanced: Option<bool>,
    pub n_per_env: usize,
    pub val_ratio: f64,
    pub encoding: EncodingConfig,
    /// Dataset spec for `train`, overriding `rho`.
    pub spec_path: Option<PathBuf>,
    pub train: TrainConfig,
    pub grid: HyperGrid,
    pub grid_criterion: GridCriterion,
    pub probe: ProbeConfig,
    pub jobs: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rho: DEFAULT_RHOS.to_vec(),
            w_plus: DEFAULT_W_PLUS.to_vec(),
            p_ye: vec![],
            test_specs: vec![TestSpecChoice::Cmnist, TestSpecChoice::CmnistPlus],
            methods: vec![Method::Erm, Method::Irm, Method::IrmBal],
            balanced: None,
            n_per_env: 5000,
            val_ratio: 0.8,
            encoding: EncodingConfig::default(),
            spec_path: None,
            train: TrainConfig { iterations: 600, batch_size: 256, ..TrainConfig::default() },
            grid: HyperGrid::default(),
            grid_criterion: GridCriterion::default(),
            probe: ProbeConfig::default(),
            jobs: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(toml::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self, command: Command) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match command {
            Command::OracleTable | Command::SweepRho | Command::Compare if self.rho.is_empty() => {
                return bad("rho list must be nonempty".into());
            }
            Command::SweepInterp if self.w_plus.is_empty() || self.test_specs.is_empty() => {
                return bad("w_plus and test_specs must be nonempty".into());
            }
            _ => {}
        }
        if command != Command::OracleTable {
            if self.methods.is_empty() {
                return bad("methods must be nonempty".into());
            }
            if self.n_per_env < 2 {
                return bad(format!("n_per_env must be at least 2, got {}", self.n_per_env));
            }
            if !(self.val_ratio > 0.0 && self.val_ratio < 1.0) {
                return bad(format!("val_ratio must be in (0, 1), got {}", self.val_ratio));
            }
            if self.train.runs == 0 {
                return bad("runs must be positive".into());
            }
            self.train.validate()?;
            self.grid.validate()?;
        }
        if matches!(self.jobs, Some(0)) {
            return bad("jobs must be positive".into());
        }
        Ok(())
    }

    /// `(w_plus, p_ye)` pairs of the interpolation sweep.
    pub fn interp_points(&self) -> Vec<(f64, f64)> {
        if self.p_ye.is_empty() {
            self.w_plus.iter().map(|&w| (w, 0.5 + 0.4 * w)).collect()
        } else {
            self.w_plus.iter().flat_map(|&w| self.p_ye.iter().map(move |&p| (w, p))).collect()
        }
    }
}

/// The data-generating setting one aggregate refers to.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub rho: Option<f64>,
    pub w_plus: Option<f64>,
    pub p_ye: Option<f64>,
    pub test_spec: Option<TestSpecChoice>,
}

impl Setting {
    fn cells(&self) -> [String; 4] {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let t = match self.test_spec {
            Some(TestSpecChoice::Cmnist) => "cmnist",
            Some(TestSpecChoice::CmnistPlus) => "cmnist_plus",
            None => "",
        };
        [f(self.rho), f(self.w_plus), f(self.p_ye), t.to_string()]
    }

    fn spec(&self) -> Result<DatasetSpec> {
        match (self.rho, self.w_plus) {
            (Some(rho), _) => cmnist_plus(rho),
            (None, Some(w)) => Ok(interpolate_with_test(
                InterpolationParams::new(w, self.p_ye.unwrap_or(0.5 + 0.4 * w))?,
                self.test_spec.unwrap_or(TestSpecChoice::CmnistPlus),
            )),
            _ => Err(Error::InvalidArgument("setting needs rho or w_plus".into())),
        }
    }
}

/// Grid-searched result of one method on one setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub setting: Setting,
    pub best: Option<GridPoint>,
    pub mean_test: Option<f64>,
    pub std_test: Option<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
    pub runs: Vec<RunSummary>,
}

impl MethodSummary {
    fn from_grid(setting: Setting, g: &GridResult) -> Self {
        let total: usize = g.points.iter().map(|p| p.n_failed).sum();
        match g.best_summary() {
            Some(p) => Self {
                method: g.method.name().into(),
                setting,
                best: Some(p.point),
                mean_test: p.mean_test,
                std_test: p.std_test,
                n_ok: p.n_ok,
                n_failed: p.n_failed,
                runs: p.runs.clone(),
            },
            None => Self {
                method: g.method.name().into(),
                setting,
                best: None,
                mean_test: None,
                std_test: None,
                n_ok: 0,
                n_failed: total,
                runs: vec![],
            },
        }
    }

    /// The analytic shape-only line.
    fn oracle(setting: Setting) -> Result<Self> {
        let spec = setting.spec()?;
        let acc = full_report(&spec, false)?.accuracy(FeatureFamily::Shape).test_acc;
        Ok(Self {
            method: "ORACLE".into(),
            setting,
            best: None,
            mean_test: Some(acc),
            std_test: Some(0.0),
            n_ok: 0,
            n_failed: 0,
            runs: vec![],
        })
    }
}

/// Sampled, split datasets for `runs` seeds.
pub fn datasets_for(spec: &DatasetSpec, cfg: &ExperimentConfig) -> Result<Vec<Dataset>> {
    (0..cfg.train.runs as u64)
        .map(|r| {
            let seed = cfg.seed.wrapping_add(r);
            let ds = sample_dataset(spec, cfg.n_per_env, seed, cfg.encoding)?;
            split_train_val(&ds, cfg.val_ratio, seed)
        })
        .collect()
}

fn base_config(cfg: &ExperimentConfig, method: Method) -> TrainConfig {
    TrainConfig { method, seed: cfg.seed, ..cfg.train.clone() }
}

pub fn run_method(setting: &Setting, method: Method, cfg: &ExperimentConfig) -> Result<MethodSummary> {
    let datasets = datasets_for(&setting.spec()?, cfg)?;
    let g = grid_search_multi(&datasets, &base_config(cfg, method), &cfg.grid, cfg.grid_criterion)?;
    Ok(MethodSummary::from_grid(setting.clone(), &g))
}

pub fn run_oracle_table(rhos: &[f64], balanced: Option<bool>) -> Result<Vec<OracleReport>> {
    let modes: Vec<bool> = match balanced {
        Some(b) => vec![b],
        None => vec![false, true],
    };
    let mut out = Vec::new();
    for &rho in rhos {
        let spec = cmnist_plus(rho)?;
        for &b in &modes {
            out.push(full_report(&spec, b)?);
        }
    }
    Ok(out)
}

/// One row per (ρ, balanced) with every family's val/test pair and winners.
pub fn write_oracle_wide<W: Write>(reports: &[OracleReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["rho".to_string(), "balanced".to_string()];
    for f in FeatureFamily::ALL {
        header.push(format!("{}_val", f.name()));
        header.push(format!("{}_test", f.name()));
    }
    header.push("winners".into());
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![r.rho.map(|x| x.to_string()).unwrap_or_default(), r.balanced.to_string()];
        for f in FeatureFamily::ALL {
            let a = r.accuracy(f);
            row.push(a.val_acc.to_string());
            row.push(a.test_acc.to_string());
        }
        row.push(r.winner_ties.iter().map(|f| f.name()).collect::<Vec<_>>().join("|"));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn rho_settings(cfg: &ExperimentConfig) -> Vec<Setting> {
    cfg.rho.iter().map(|&r| Setting { rho: Some(r), ..Setting::default() }).collect()
}

/// Per (method, ρ) grid-searched test accuracy, plus the oracle line.
pub fn run_sweep_rho(cfg: &ExperimentConfig) -> Result<Vec<MethodSummary>> {
    let mut out = Vec::new();
    for s in rho_settings(cfg) {
        for &m in &cfg.methods {
            out.push(run_method(&s, m, cfg)?);
        }
        out.push(MethodSummary::oracle(s)?);
    }
    Ok(out)
}

pub fn run_sweep_interp(cfg: &ExperimentConfig) -> Result<Vec<MethodSummary>> {
    let mut out = Vec::new();
    for &t in &cfg.test_specs {
        for (w, p) in cfg.interp_points() {
            let s = Setting { w_plus: Some(w), p_ye: Some(p), test_spec: Some(t), ..Setting::default() };
            for &m in &cfg.methods {
                out.push(run_method(&s, m, cfg)?);
            }
        }
    }
    Ok(out)
}

/// Every method on every ρ, plus the oracle row.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<Vec<MethodSummary>> {
    let cfg = ExperimentConfig { methods: Method::ALL.to_vec(), ..cfg.clone() };
    run_sweep_rho(&cfg)
}

/// Outcome of the `train` command: the grid result and, for the first seed
/// at the best point, the full run and representation diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub summary: MethodSummary,
    pub diagnostics: Vec<RunDiagnostics>,
    pub log_csv: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub seed: u64,
    pub domain_probe_acc: f64,
    pub ci_gap: Option<f64>,
    pub shared_cell_fraction: f64,
}

/// Representations of the selected model on the validation rows of every
/// training environment.
pub fn validation_reps(model: &crate::train::Model, ds: &Dataset) -> Result<RepSample> {
    let mut reps = Vec::new();
    let mut labels = Vec::new();
    let mut envs = Vec::new();
    for e in ds.train_envs() {
        for i in e.split(SplitTag::Val) {
            reps.extend(model.forward(&i.features)?.0);
            labels.push(i.y);
            envs.push(e.env_id);
        }
    }
    RepSample::new(model.rep_dim(), reps, labels, envs)
}

pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let method = *cfg.methods.first().ok_or_else(|| Error::InvalidArgument("no method".into()))?;
    let (spec, setting) = match &cfg.spec_path {
        Some(p) => {
            let spec = DatasetSpec::load(p)?;
            let s = Setting { rho: spec.rho, ..Setting::default() };
            (spec, s)
        }
        None => {
            let s = rho_settings(cfg).into_iter().next().unwrap();
            (s.spec()?, s)
        }
    };
    crate::spec::validate_spec(&spec).into_result()?;
    let datasets = datasets_for(&spec, cfg)?;
    let g = grid_search_multi(&datasets, &base_config(cfg, method), &cfg.grid, cfg.grid_criterion)?;
    let summary = MethodSummary::from_grid(setting, &g);
    let mut diagnostics = Vec::new();
    let mut log_csv = String::new();
    if let Some(p) = summary.best {
        for (r, ds) in datasets.iter().enumerate() {
            let tc = TrainConfig {
                alpha: p.alpha,
                beta: p.beta,
                k_irm: p.k_irm,
                seed: cfg.seed.wrapping_add(r as u64),
                ..base_config(cfg, method)
            };
            let run = train_run(ds, &tc)?;
            if r == 0 {
                let mut buf = Vec::new();
                run.write_log_csv(&mut buf)?;
                log_csv = String::from_utf8(buf).expect("csv is utf-8");
            }
            if !run.ok() {
                continue;
            }
            let reps = validation_reps(&run.model, ds)?;
            let probe = domain_probe(&reps, &ProbeConfig { seed: tc.seed, ..cfg.probe.clone() })?;
            let ci = conditional_independence_gap(&reps, cfg.probe.bins, tc.seed)?;
            diagnostics.push(RunDiagnostics {
                seed: tc.seed,
                domain_probe_acc: probe.domain_probe_accuracy,
                ci_gap: ci.gap,
                shared_cell_fraction: ci.shared_cell_fraction,
            });
        }
    }
    Ok(TrainOutcome { summary, diagnostics, log_csv })
}

const SETTING_COLS: [&str; 4] = ["rho", "w_plus", "p_ye", "test_spec"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Aggregate rows: one per (method, setting).
pub fn write_aggregate_csv<W: Write>(rows: &[MethodSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["method"];
    header.extend(SETTING_COLS);
    header.extend(["alpha", "beta", "k_irm", "mean_test", "std_test", "n_ok", "n_failed"]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.method.clone()];
        rec.extend(r.setting.cells());
        rec.extend([
            opt(r.best.map(|p| p.alpha)),
            opt(r.best.map(|p| p.beta)),
            r.best.map(|p| p.k_irm.to_string()).unwrap_or_default(),
            opt(r.mean_test),
            opt(r.std_test),
            r.n_ok.to_string(),
            r.n_failed.to_string(),
        ]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-run rows at each summary's best grid point.
pub fn write_summary_csv<W: Write>(rows: &[MethodSummary], diags: &[RunDiagnostics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["method"];
    header.extend(SETTING_COLS);
    header.extend(["alpha", "beta", "k_irm", "seed", "val_acc", "test_acc", "selected_iter", "failed"]);
    if !diags.is_empty() {
        header.extend(["domain_probe_acc", "ci_gap", "shared_cell_fraction"]);
    }
    w.write_record(&header)?;
    for r in rows {
        let Some(p) = r.best else { continue };
        for run in &r.runs {
            let mut rec = vec![r.method.clone()];
            rec.extend(r.setting.cells());
            rec.extend([
                p.alpha.to_string(),
                p.beta.to_string(),
                p.k_irm.to_string(),
                run.seed.to_string(),
                run.val_acc.to_string(),
                opt(run.test_acc),
                run.selected_iteration.map(|i| i.to_string()).unwrap_or_default(),
                run.failed.is_some().to_string(),
            ]);
            if !diags.is_empty() {
                match diags.iter().find(|d| d.seed == run.seed) {
                    Some(d) => rec.extend([
                        d.domain_probe_acc.to_string(),
                        opt(d.ci_gap),
                        d.shared_cell_fraction.to_string(),
                    ]),
                    None => rec.extend([String::new(), String::new(), String::new()]),
                }
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Method × ρ grid of mean test accuracies with seed counts.
pub fn write_compare_table<W: Write>(rows: &[MethodSummary], rhos: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["method".to_string()];
    for r in rhos {
        header.push(format!("rho_{r}"));
        header.push(format!("n_{r}"));
    }
    w.write_record(&header)?;
    let mut methods: Vec<String> = Method::ALL.iter().map(|m| m.name().to_string()).collect();
    methods.push("ORACLE".into());
    for m in methods {
        let mut rec = vec![m.clone()];
        for &rho in rhos {
            let hit = rows.iter().find(|s| s.method == m && s.setting.rho == Some(rho));
            rec.push(opt(hit.and_then(|s| s.mean_test)));
            rec.push(hit.map(|s| s.n_ok.to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub outputs: Vec<String>,
}

/// Run `command` and write its files under `out_dir`. Returns the written
/// file names.
pub fn execute(command: Command, cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<String>> {
    cfg.validate(command)?;
    fs::create_dir_all(out_dir)?;
    let run = || -> Result<Vec<String>> {
        let mut files = Vec::new();
        let mut write = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> Result<()>| -> Result<()> {
            let mut buf = Vec::new();
            f(&mut buf)?;
            fs::write(out_dir.join(name), buf)?;
            files.push(name.to_string());
            Ok(())
        };
        match command {
            Command::OracleTable => {
                let reports = run_oracle_table(&cfg.rho, cfg.balanced)?;
                write("oracle_table.csv", &|b| oracle::write_csv(&reports, b))?;
                write("oracle_table_wide.csv", &|b| write_oracle_wide(&reports, b))?;
                write("oracle_table.txt", &|b| Ok(b.extend(oracle::render_table(&reports).into_bytes())))?;
            }
            Command::SweepRho | Command::SweepInterp | Command::Compare => {
                let rows = match command {
                    Command::SweepRho => run_sweep_rho(cfg)?,
                    Command::SweepInterp => run_sweep_interp(cfg)?,
                    _ => run_compare(cfg)?,
                };
                let stem = command.name().replace('-', "_");
                write(&format!("{stem}.csv"), &|b| write_aggregate_csv(&rows, b))?;
                write(&format!("{stem}_runs.csv"), &|b| write_summary_csv(&rows, &[], b))?;
                if command == Command::Compare {
                    write("compare_table.csv", &|b| write_compare_table(&rows, &cfg.rho, b))?;
                }
            }
            Command::Train => {
                let o = run_train(cfg)?;
                let rows = [o.summary.clone()];
                write("train.csv", &|b| write_aggregate_csv(&rows, b))?;
                write("train_runs.csv", &|b| write_summary_csv(&rows, &o.diagnostics, b))?;
                write("train_log.csv", &|b| Ok(b.extend(o.log_csv.as_bytes())))?;
            }
        }
        Ok(files)
    };
    let mut files = match cfg.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .install(run)?,
        None => run()?,
    };
    files.push("manifest.json".into());
    let manifest = Manifest {
        command: command.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        outputs: files.clone(),
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(files)
}

/// Mean test accuracy of a summary, `NaN` when nothing succeeded.
pub fn mean_test_or_nan(s: &MethodSummary) -> f64 {
    s.mean_test.unwrap_or(f64::NAN)
}

/// Mean and sample standard deviation of successful runs' test accuracy.
pub fn test_stats(s: &MethodSummary) -> Option<(f64, f64)> {
    let xs: Vec<f64> = s.runs.iter().filter(|r| r.failed.is_none()).filter_map(|r| r.test_acc).collect();
    mean_std(&xs)
}
