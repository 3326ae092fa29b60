//! Discrete causal model of a multi-environment coloured-label dataset.
//!
//! An environment is described by `P(Y=1|E)` and a 2×3 colour table
//! `P(C|Y,E)`. Rows of the table are ordered `Y=1` then `Y=0`, columns
//! `G, B, R`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

const ROW_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Color {
    G,
    B,
    R,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::G, Color::B, Color::R];

    pub fn index(self) -> usize {
        match self {
            Color::G => 0,
            Color::B => 1,
            Color::R => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Color> {
        Color::ALL.get(i).copied()
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Color::G => "G",
            Color::B => "B",
            Color::R => "R",
        };
        f.write_str(s)
    }
}

/// Binary class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Zero,
    One,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Zero, Label::One];

    pub fn from_bool(b: bool) -> Label {
        if b {
            Label::One
        } else {
            Label::Zero
        }
    }

    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Zero),
            1 => Some(Label::One),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Zero => 0,
            Label::One => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        self.as_u8() as f64
    }

    pub fn flip(self) -> Label {
        match self {
            Label::Zero => Label::One,
            Label::One => Label::Zero,
        }
    }

    /// Row of the colour table holding `P(C|Y=self,E)`.
    fn row(self) -> usize {
        match self {
            Label::One => 0,
            Label::Zero => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvRole {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub env_id: u32,
    pub role: EnvRole,
    /// `P(Y=1|E)`.
    pub p_y1: f64,
    /// `P(C|Y,E)`: row 0 is `Y=1`, row 1 is `Y=0`; columns are `G, B, R`.
    pub color_table: [[f64; 3]; 2],
}

impl EnvironmentSpec {
    pub fn new(env_id: u32, role: EnvRole, p_y1: f64, y1_row: [f64; 3], y0_row: [f64; 3]) -> Self {
        Self {
            env_id,
            role,
            p_y1,
            color_table: [y1_row, y0_row],
        }
    }

    pub fn p_label(&self, y: Label) -> f64 {
        match y {
            Label::One => self.p_y1,
            Label::Zero => 1.0 - self.p_y1,
        }
    }

    pub fn p_color(&self, c: Color, y: Label) -> f64 {
        self.color_table[y.row()][c.index()]
    }

    pub fn color_row(&self, y: Label) -> [f64; 3] {
        self.color_table[y.row()]
    }

    pub fn is_train(&self) -> bool {
        self.role == EnvRole::Train
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub environments: Vec<EnvironmentSpec>,
    /// `P(E)` over the training environments, in the order they appear.
    pub env_prior: Vec<f64>,
    pub flip_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
}

impl DatasetSpec {
    pub fn train_envs(&self) -> impl Iterator<Item = &EnvironmentSpec> {
        self.environments.iter().filter(|e| e.is_train())
    }

    pub fn train_env_ids(&self) -> Vec<u32> {
        self.train_envs().map(|e| e.env_id).collect()
    }

    /// The single test environment. Panics if the spec has not been validated
    /// and has none; use [`DatasetSpec::try_test_env`] otherwise.
    pub fn test_env(&self) -> &EnvironmentSpec {
        self.try_test_env().expect("spec has no test environment")
    }

    pub fn try_test_env(&self) -> Option<&EnvironmentSpec> {
        self.environments.iter().find(|e| e.role == EnvRole::Test)
    }

    pub fn env(&self, env_id: u32) -> Option<&EnvironmentSpec> {
        self.environments.iter().find(|e| e.env_id == env_id)
    }

    /// Training environments paired with their prior weight.
    pub fn weighted_train_envs(&self) -> impl Iterator<Item = (&EnvironmentSpec, f64)> {
        self.train_envs().zip(self.env_prior.iter().copied())
    }

    /// Replace the test environment, keeping its id and role.
    pub fn with_test_env(mut self, test: &EnvironmentSpec) -> Self {
        if let Some(slot) = self.environments.iter_mut().find(|e| e.role == EnvRole::Test) {
            let id = slot.env_id;
            *slot = test.clone();
            slot.env_id = id;
            slot.role = EnvRole::Test;
        } else {
            let mut t = test.clone();
            t.role = EnvRole::Test;
            self.environments.push(t);
        }
        self
    }

    pub fn with_env_prior(mut self, prior: Vec<f64>) -> Self {
        self.env_prior = prior;
        self
    }

    /// Copy of the spec with `P(Y=1|E)=0.5` in every training environment.
    pub fn label_balanced(&self) -> Self {
        let mut out = self.clone();
        for env in out.environments.iter_mut().filter(|e| e.is_train()) {
            env.p_y1 = 0.5;
        }
        out
    }

    /// Stable identifier: first 16 hex digits of the SHA-256 of the canonical
    /// JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let hash = Sha256::digest(&json);
        hex::encode(&hash[..8])
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

/// Parameters of the family between the original coloured dataset and the
/// strongly spurious one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationParams {
    /// Weight of the strongly spurious colour tables, in `[0, 1]`.
    pub w_plus: f64,
    /// `P(Y=1|E=1) = P(Y=0|E=2)`, in `[0.5, 0.9]`.
    pub p_ye: f64,
}

impl InterpolationParams {
    pub fn new(w_plus: f64, p_ye: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w_plus) {
            return Err(Error::InvalidArgument(format!("w_plus {w_plus} outside [0, 1]")));
        }
        if !(0.5..=0.9).contains(&p_ye) {
            return Err(Error::InvalidArgument(format!("p_ye {p_ye} outside [0.5, 0.9]")));
        }
        Ok(Self { w_plus, p_ye })
    }
}

/// Which fixed test environment an interpolated spec is evaluated on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSpecChoice {
    Cmnist,
    CmnistPlus,
}

impl TestSpecChoice {
    pub fn env(self) -> EnvironmentSpec {
        match self {
            TestSpecChoice::Cmnist => cmnist_test_env(),
            TestSpecChoice::CmnistPlus => cmnist_plus_test_env(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TestSpecChoice::Cmnist => "cmnist",
            TestSpecChoice::CmnistPlus => "cmnist_plus",
        }
    }
}

fn cmnist_plus_test_env() -> EnvironmentSpec {
    EnvironmentSpec::new(3, EnvRole::Test, 0.5, [0.1, 0.1, 0.8], [0.4, 0.4, 0.2])
}

fn cmnist_test_env() -> EnvironmentSpec {
    EnvironmentSpec::new(3, EnvRole::Test, 0.5, [0.1, 0.0, 0.9], [0.9, 0.0, 0.1])
}

/// Strongly spurious three-colour dataset parameterised by `rho ∈ (0.5, 1)`.
pub fn cmnist_plus(rho: f64) -> Result<DatasetSpec> {
    if !(rho > 0.5 && rho < 1.0) {
        return Err(Error::InvalidSpec(format!("rho {rho} outside (0.5, 1)")));
    }
    Ok(cmnist_plus_unchecked(rho))
}

fn cmnist_plus_unchecked(rho: f64) -> DatasetSpec {
    let off = (1.0 - rho) / 2.0;
    DatasetSpec {
        environments: vec![
            EnvironmentSpec::new(1, EnvRole::Train, 0.9, [rho, off, off], [off, off, rho]),
            EnvironmentSpec::new(2, EnvRole::Train, 0.1, [off, rho, off], [off, off, rho]),
            cmnist_plus_test_env(),
        ],
        env_prior: vec![0.5, 0.5],
        flip_rate: 0.25,
        rho: Some(rho),
    }
}

/// The original two-colour coloured-label dataset (blue column is empty).
pub fn cmnist() -> DatasetSpec {
    DatasetSpec {
        environments: vec![
            EnvironmentSpec::new(1, EnvRole::Train, 0.5, [0.9, 0.0, 0.1], [0.1, 0.0, 0.9]),
            EnvironmentSpec::new(2, EnvRole::Train, 0.5, [0.8, 0.0, 0.2], [0.2, 0.0, 0.8]),
            cmnist_test_env(),
        ],
        env_prior: vec![0.5, 0.5],
        flip_rate: 0.25,
        rho: None,
    }
}

/// Two-colour configuration with strong spuriousness among colour, label and
/// environment. Blue never occurs; the test environment sits midway between
/// the training environments.
pub fn two_color_strong() -> DatasetSpec {
    DatasetSpec {
        environments: vec![
            EnvironmentSpec::new(1, EnvRole::Train, 0.9, [0.9, 0.0, 0.1], [0.1, 0.0, 0.9]),
            EnvironmentSpec::new(2, EnvRole::Train, 0.1, [0.1, 0.0, 0.9], [0.9, 0.0, 0.1]),
            EnvironmentSpec::new(3, EnvRole::Test, 0.5, [0.5, 0.0, 0.5], [0.5, 0.0, 0.5]),
        ],
        env_prior: vec![0.5, 0.5],
        flip_rate: 0.25,
        rho: None,
    }
}

/// Interpolated family with the strongly spurious test environment.
pub fn interpolate(params: InterpolationParams) -> DatasetSpec {
    interpolate_with_test(params, TestSpecChoice::CmnistPlus)
}

pub fn interpolate_with_test(params: InterpolationParams, test: TestSpecChoice) -> DatasetSpec {
    let w = params.w_plus;
    let plus = cmnist_plus_unchecked(0.9);
    let base = cmnist();
    let mut environments = Vec::with_capacity(3);
    for (p, c) in plus.train_envs().zip(base.train_envs()) {
        let mut table = [[0.0; 3]; 2];
        for (row, out) in table.iter_mut().enumerate() {
            let raw: Vec<f64> = (0..3)
                .map(|k| p.color_table[row][k] * w + c.color_table[row][k] * (1.0 - w))
                .collect();
            let total: f64 = raw.iter().sum();
            for k in 0..3 {
                out[k] = raw[k] / total;
            }
        }
        let p_y1 = if p.env_id == 1 { params.p_ye } else { 1.0 - params.p_ye };
        environments.push(EnvironmentSpec {
            env_id: p.env_id,
            role: EnvRole::Train,
            p_y1,
            color_table: table,
        });
    }
    environments.push(test.env());
    DatasetSpec {
        environments,
        env_prior: vec![0.5, 0.5],
        flip_rate: 0.25,
        rho: None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    ColorRowSum { env_id: u32, label: Label, sum: f64 },
    ProbabilityRange { what: String, value: f64 },
    PriorSum { sum: f64 },
    PriorLength { expected: usize, actual: usize },
    FlipRate { value: f64 },
    TestEnvCount { count: usize },
    TrainEnvCount { count: usize },
    Rho { value: f64 },
    DuplicateEnvId { env_id: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ColorRowSum { env_id, label, sum } => {
                write!(f, "color row (E={env_id}, Y={label}) sums to {sum}")
            }
            Violation::ProbabilityRange { what, value } => {
                write!(f, "{what} = {value} outside [0, 1]")
            }
            Violation::PriorSum { sum } => write!(f, "env_prior sums to {sum}"),
            Violation::PriorLength { expected, actual } => {
                write!(f, "env_prior has {actual} entries for {expected} training environments")
            }
            Violation::FlipRate { value } => write!(f, "flip_rate out of range: {value}"),
            Violation::TestEnvCount { count } => {
                write!(f, "expected exactly one test environment, found {count}")
            }
            Violation::TrainEnvCount { count } => {
                write!(f, "expected at least one training environment, found {count}")
            }
            Violation::Rho { value } => write!(f, "rho {value} outside (0.5, 1)"),
            Violation::DuplicateEnvId { env_id } => write!(f, "duplicate env_id {env_id}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            let msgs: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
            Err(Error::InvalidSpec(msgs.join("; ")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ValidationOptions {
    /// Accept `rho = 0.5`, where the colour columns stop being spurious.
    pub allow_boundary_rho: bool,
}

pub fn validate_spec(spec: &DatasetSpec) -> ValidationReport {
    validate_spec_with(spec, ValidationOptions::default())
}

pub fn validate_spec_with(spec: &DatasetSpec, opts: ValidationOptions) -> ValidationReport {
    let mut violations = Vec::new();
    let in_unit = |x: f64| (0.0..=1.0).contains(&x);

    let mut seen = std::collections::BTreeSet::new();
    for env in &spec.environments {
        if !seen.insert(env.env_id) {
            violations.push(Violation::DuplicateEnvId { env_id: env.env_id });
        }
        if !in_unit(env.p_y1) {
            violations.push(Violation::ProbabilityRange {
                what: format!("p_y1 of E={}", env.env_id),
                value: env.p_y1,
            });
        }
        for y in [Label::One, Label::Zero] {
            let row = env.color_row(y);
            for (c, &p) in Color::ALL.iter().zip(row.iter()) {
                if !in_unit(p) {
                    violations.push(Violation::ProbabilityRange {
                        what: format!("P(C={c}|Y={y},E={})", env.env_id),
                        value: p,
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOL {
                violations.push(Violation::ColorRowSum { env_id: env.env_id, label: y, sum });
            }
        }
    }

    let n_test = spec.environments.iter().filter(|e| e.role == EnvRole::Test).count();
    if n_test != 1 {
        violations.push(Violation::TestEnvCount { count: n_test });
    }
    let n_train = spec.train_envs().count();
    if n_train == 0 {
        violations.push(Violation::TrainEnvCount { count: n_train });
    }
    if spec.env_prior.len() != n_train {
        violations.push(Violation::PriorLength { expected: n_train, actual: spec.env_prior.len() });
    }
    for &p in &spec.env_prior {
        if !in_unit(p) {
            violations.push(Violation::ProbabilityRange { what: "env_prior entry".into(), value: p });
        }
    }
    let prior_sum: f64 = spec.env_prior.iter().sum();
    if (prior_sum - 1.0).abs() > ROW_TOL {
        violations.push(Violation::PriorSum { sum: prior_sum });
    }
    if !(0.0..0.5).contains(&spec.flip_rate) {
        violations.push(Violation::FlipRate { value: spec.flip_rate });
    }
    if let Some(rho) = spec.rho {
        let ok = (rho > 0.5 && rho < 1.0) || (opts.allow_boundary_rho && rho == 0.5);
        if !ok {
            violations.push(Violation::Rho { value: rho });
        }
    }
    ValidationReport { violations }
}
