//! Exact Bayes analysis of a [`DatasetSpec`]: posteriors over colour and
//! environment, majority-vote classifiers for each feature family, and their
//! expected accuracies on the training mixture and the test environment.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::spec::{Color, DatasetSpec, EnvironmentSpec, Label};
use crate::{Error, Result};

/// Posteriors within this distance of one half are treated as ties.
pub const TIE_TOL: f64 = 1e-12;
/// Validation accuracies within this distance share the winner flag.
pub const WINNER_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFamily {
    Color,
    PredictedDomain,
    DomainAndColor,
    Shape,
}

impl FeatureFamily {
    pub const ALL: [FeatureFamily; 4] = [
        FeatureFamily::Color,
        FeatureFamily::PredictedDomain,
        FeatureFamily::DomainAndColor,
        FeatureFamily::Shape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureFamily::Color => "color",
            FeatureFamily::PredictedDomain => "predicted_domain",
            FeatureFamily::DomainAndColor => "domain_and_color",
            FeatureFamily::Shape => "shape",
        }
    }

    /// Column heading used in the rendered table.
    pub fn heading(self) -> &'static str {
        match self {
            FeatureFamily::Color => "P(Y|C)",
            FeatureFamily::PredictedDomain => "P(Y|Ê)",
            FeatureFamily::DomainAndColor => "P(Y|Ê,C)",
            FeatureFamily::Shape => "P(Y|S)",
        }
    }
}

impl fmt::Display for FeatureFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FeatureFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown feature family {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorKind {
    YGivenC,
    EGivenC,
    YGivenCE,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEntry {
    pub color: Color,
    /// Conditioning environment for `YGivenCE`, target environment for
    /// `EGivenC`, absent for `YGivenC`.
    pub env: Option<u32>,
    /// `None` when the conditioning event has zero probability.
    pub value: Option<f64>,
}

/// Probability of the positive outcome (`Y=1`, or `E=env`) per conditioning cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTable {
    pub kind: PosteriorKind,
    pub balanced: bool,
    pub entries: Vec<PosteriorEntry>,
}

impl PosteriorTable {
    /// `None` if the cell is absent or undefined.
    pub fn get(&self, color: Color, env: Option<u32>) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.color == color && e.env == env)
            .and_then(|e| e.value)
    }

    pub fn undefined_cells(&self) -> Vec<(Color, Option<u32>)> {
        self.entries
            .iter()
            .filter(|e| e.value.is_none())
            .map(|e| (e.color, e.env))
            .collect()
    }
}

/// Joint `P(E, Y, C)` over training environments.
struct TrainJoint {
    envs: Vec<u32>,
    // [env][label as u8][color]
    p: Vec<[[f64; 3]; 2]>,
}

impl TrainJoint {
    fn new(spec: &DatasetSpec, balanced: bool) -> Self {
        let mut envs = Vec::new();
        let mut p = Vec::new();
        for (env, prior) in spec.weighted_train_envs() {
            let mut cell = [[0.0; 3]; 2];
            for y in Label::ALL {
                let py = if balanced { 0.5 } else { env.p_label(y) };
                for c in Color::ALL {
                    cell[y.as_u8() as usize][c.index()] = prior * py * env.p_color(c, y);
                }
            }
            envs.push(env.env_id);
            p.push(cell);
        }
        Self { envs, p }
    }

    fn at(&self, ei: usize, y: Label, c: Color) -> f64 {
        self.p[ei][y.as_u8() as usize][c.index()]
    }

    fn p_color(&self, c: Color) -> f64 {
        (0..self.envs.len())
            .map(|ei| Label::ALL.iter().map(|&y| self.at(ei, y, c)).sum::<f64>())
            .sum()
    }

    fn p_color_env(&self, ei: usize, c: Color) -> f64 {
        Label::ALL.iter().map(|&y| self.at(ei, y, c)).sum()
    }
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    if den > 0.0 {
        Some((num / den).clamp(0.0, 1.0))
    } else {
        None
    }
}

/// `P(Y=1|C)` over the training mixture.
pub fn posterior_y_given_c(spec: &DatasetSpec) -> PosteriorTable {
    posterior_y_given_c_with(spec, false)
}

/// `P(Y=1|C)` with `P(Y|E)` optionally forced to one half.
pub fn posterior_y_given_c_with(spec: &DatasetSpec, balanced: bool) -> PosteriorTable {
    let joint = TrainJoint::new(spec, balanced);
    let entries = Color::ALL
        .iter()
        .map(|&c| {
            let num: f64 = (0..joint.envs.len()).map(|ei| joint.at(ei, Label::One, c)).sum();
            PosteriorEntry { color: c, env: None, value: ratio(num, joint.p_color(c)) }
        })
        .collect();
    PosteriorTable { kind: PosteriorKind::YGivenC, balanced, entries }
}

/// `P(E=e|C)` for every training environment `e`.
pub fn posterior_e_given_c(spec: &DatasetSpec, balanced: bool) -> PosteriorTable {
    let joint = TrainJoint::new(spec, balanced);
    let mut entries = Vec::new();
    for c in Color::ALL {
        let pc = joint.p_color(c);
        for (ei, &env) in joint.envs.iter().enumerate() {
            entries.push(PosteriorEntry {
                color: c,
                env: Some(env),
                value: ratio(joint.p_color_env(ei, c), pc),
            });
        }
    }
    PosteriorTable { kind: PosteriorKind::EGivenC, balanced, entries }
}

/// `P(Y=1|C,E)` for every colour and training environment.
pub fn posterior_y_given_ce(spec: &DatasetSpec, balanced: bool) -> PosteriorTable {
    let joint = TrainJoint::new(spec, balanced);
    let mut entries = Vec::new();
    for c in Color::ALL {
        for (ei, &env) in joint.envs.iter().enumerate() {
            entries.push(PosteriorEntry {
                color: c,
                env: Some(env),
                value: ratio(joint.at(ei, Label::One, c), joint.p_color_env(ei, c)),
            });
        }
    }
    PosteriorTable { kind: PosteriorKind::YGivenCE, balanced, entries }
}

/// A feature value a family's classifier reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureValue {
    Color(Color),
    Shape(Label),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDecision {
    pub feature: FeatureValue,
    /// Hard prediction; ties resolve to `Label::One`.
    pub label: Label,
    /// Probability the classifier outputs `Y=1` when ties are scored as coin flips.
    pub p_one: f64,
    /// Predicted training environment(s) for the two-stage families.
    pub domains: Vec<u32>,
}

/// Majority-vote classifier for one feature family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeterministicClassifier {
    pub family: FeatureFamily,
    pub balanced: bool,
    pub decision_map: Vec<CellDecision>,
    pub tie_cells: Vec<FeatureValue>,
    /// Colours with zero mass in training and test; excluded from scoring.
    pub undefined: Vec<Color>,
}

impl DeterministicClassifier {
    pub fn decision(&self, feature: FeatureValue) -> Option<&CellDecision> {
        self.decision_map.iter().find(|d| d.feature == feature)
    }

    pub fn predict_color(&self, c: Color) -> Option<Label> {
        self.decision(FeatureValue::Color(c)).map(|d| d.label)
    }

    fn p_one_color(&self, c: Color) -> Option<f64> {
        self.decision(FeatureValue::Color(c)).map(|d| d.p_one)
    }
}

/// `1`, `0` or one half for a posterior probability of `Y=1`.
fn soft_vote(p: f64) -> f64 {
    if (p - 0.5).abs() <= TIE_TOL {
        0.5
    } else if p > 0.5 {
        1.0
    } else {
        0.0
    }
}

fn has_test_mass(spec: &DatasetSpec, c: Color) -> bool {
    spec.try_test_env()
        .map(|t| Label::ALL.iter().any(|&y| t.p_label(y) * t.p_color(c, y) > 0.0))
        .unwrap_or(false)
}

/// Environments maximising `P(E|c)`, all of them on a tie.
fn predicted_domains(pe: &PosteriorTable, envs: &[u32], c: Color) -> Option<Vec<u32>> {
    let vals: Vec<(u32, f64)> = envs
        .iter()
        .map(|&e| pe.get(c, Some(e)).map(|v| (e, v)))
        .collect::<Option<_>>()?;
    let best = vals.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    Some(vals.iter().filter(|v| best - v.1 <= TIE_TOL).map(|v| v.0).collect())
}

pub fn build_classifier(
    family: FeatureFamily,
    spec: &DatasetSpec,
    balanced: bool,
) -> Result<DeterministicClassifier> {
    let mut decision_map = Vec::new();
    let mut tie_cells = Vec::new();
    let mut undefined = Vec::new();

    if family == FeatureFamily::Shape {
        for y in Label::ALL {
            decision_map.push(CellDecision {
                feature: FeatureValue::Shape(y),
                label: y,
                p_one: y.as_f64(),
                domains: Vec::new(),
            });
        }
        return Ok(DeterministicClassifier { family, balanced, decision_map, tie_cells, undefined });
    }

    let envs = spec.train_env_ids();
    let pyc = posterior_y_given_c_with(spec, balanced);
    let pe = posterior_e_given_c(spec, balanced);
    let pyce = posterior_y_given_ce(spec, balanced);
    let p_y1_env = |e: u32| -> f64 {
        if balanced {
            0.5
        } else {
            spec.env(e).map(|s| s.p_y1).unwrap_or(0.5)
        }
    };

    for c in Color::ALL {
        let cell = match family {
            FeatureFamily::Color => pyc.get(c, None).map(|p| (soft_vote(p), Vec::new())),
            FeatureFamily::PredictedDomain => predicted_domains(&pe, &envs, c).map(|ds| {
                let soft = ds.iter().map(|&e| soft_vote(p_y1_env(e))).sum::<f64>() / ds.len() as f64;
                (soft, ds)
            }),
            FeatureFamily::DomainAndColor => predicted_domains(&pe, &envs, c).and_then(|ds| {
                let votes: Option<Vec<f64>> =
                    ds.iter().map(|&e| pyce.get(c, Some(e)).map(soft_vote)).collect();
                votes.map(|v| (v.iter().sum::<f64>() / v.len() as f64, ds))
            }),
            FeatureFamily::Shape => unreachable!(),
        };
        match cell {
            Some((p_one, domains)) => {
                let feature = FeatureValue::Color(c);
                let tie = p_one > 0.0 && p_one < 1.0;
                if tie {
                    tie_cells.push(feature);
                }
                let label = Label::from_bool(p_one >= 0.5);
                decision_map.push(CellDecision { feature, label, p_one, domains });
            }
            None => {
                let train_mass = TrainJoint::new(spec, balanced).p_color(c);
                if train_mass > 0.0 || has_test_mass(spec, c) {
                    return Err(Error::UndefinedPosterior(format!(
                        "{family} classifier has no posterior for colour {c}"
                    )));
                }
                undefined.push(c);
            }
        }
    }
    Ok(DeterministicClassifier { family, balanced, decision_map, tie_cells, undefined })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

fn expected_correct(p_one: f64, y: Label) -> f64 {
    match y {
        Label::One => p_one,
        Label::Zero => 1.0 - p_one,
    }
}

fn env_accuracy(clf: &DeterministicClassifier, env: &EnvironmentSpec, p_y1: f64) -> f64 {
    let mut acc = 0.0;
    for y in Label::ALL {
        let py = if y == Label::One { p_y1 } else { 1.0 - p_y1 };
        for c in Color::ALL {
            let mass = py * env.p_color(c, y);
            if mass == 0.0 {
                continue;
            }
            if let Some(p_one) = clf.p_one_color(c) {
                acc += mass * expected_correct(p_one, y);
            }
        }
    }
    acc
}

/// Exact expected accuracy of `clf` on the training mixture or the test
/// environment. Ties contribute one half.
pub fn classifier_accuracy(clf: &DeterministicClassifier, spec: &DatasetSpec, split: Split) -> f64 {
    if clf.family == FeatureFamily::Shape {
        return 1.0 - spec.flip_rate;
    }
    match split {
        Split::Validation => spec
            .weighted_train_envs()
            .map(|(env, prior)| {
                let p = if clf.balanced { 0.5 } else { env.p_y1 };
                prior * env_accuracy(clf, env, p)
            })
            .sum(),
        Split::Test => {
            let t = spec.test_env();
            env_accuracy(clf, t, t.p_y1)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyAccuracy {
    pub family: FeatureFamily,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub spec_digest: String,
    pub rho: Option<f64>,
    pub balanced: bool,
    pub y_given_c: PosteriorTable,
    pub e_given_c: PosteriorTable,
    pub y_given_ce: PosteriorTable,
    pub classifiers: Vec<DeterministicClassifier>,
    pub accuracies: Vec<FamilyAccuracy>,
    pub winner: FeatureFamily,
    pub winner_ties: Vec<FeatureFamily>,
}

impl OracleReport {
    pub fn accuracy(&self, family: FeatureFamily) -> FamilyAccuracy {
        *self.accuracies.iter().find(|a| a.family == family).expect("all families scored")
    }

    pub fn is_winner(&self, family: FeatureFamily) -> bool {
        self.winner_ties.contains(&family)
    }

    pub fn rows(&self) -> Vec<OracleRow> {
        self.accuracies
            .iter()
            .map(|a| OracleRow {
                rho: self.rho,
                balanced: self.balanced,
                family: a.family,
                val_acc: a.val_acc,
                test_acc: a.test_acc,
                winner_flag: self.is_winner(a.family),
            })
            .collect()
    }
}

pub fn full_report(spec: &DatasetSpec, balanced: bool) -> Result<OracleReport> {
    crate::spec::validate_spec(spec).into_result()?;
    let mut classifiers = Vec::with_capacity(4);
    let mut accuracies = Vec::with_capacity(4);
    for family in FeatureFamily::ALL {
        let clf = build_classifier(family, spec, balanced)?;
        accuracies.push(FamilyAccuracy {
            family,
            val_acc: classifier_accuracy(&clf, spec, Split::Validation),
            test_acc: classifier_accuracy(&clf, spec, Split::Test),
        });
        classifiers.push(clf);
    }
    let best = accuracies.iter().map(|a| a.val_acc).fold(f64::NEG_INFINITY, f64::max);
    let winner_ties: Vec<FeatureFamily> = accuracies
        .iter()
        .filter(|a| best - a.val_acc <= WINNER_TOL)
        .map(|a| a.family)
        .collect();
    Ok(OracleReport {
        spec_digest: spec.digest(),
        rho: spec.rho,
        balanced,
        y_given_c: posterior_y_given_c_with(spec, balanced),
        e_given_c: posterior_e_given_c(spec, balanced),
        y_given_ce: posterior_y_given_ce(spec, balanced),
        classifiers,
        accuracies,
        winner: winner_ties[0],
        winner_ties,
    })
}

/// One CSV row of the oracle table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub rho: Option<f64>,
    pub balanced: bool,
    pub family: FeatureFamily,
    pub val_acc: f64,
    pub test_acc: f64,
    pub winner_flag: bool,
}

pub fn write_csv<W: Write>(reports: &[OracleReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        for row in r.rows() {
            w.serialize(row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Plain-text grid with one line per ρ, unbalanced families on the left and
/// balanced on the right. Winners are wrapped in `*`.
pub fn render_table(reports: &[OracleReport]) -> String {
    let mut by_rho: BTreeMap<String, [Option<&OracleReport>; 2]> = BTreeMap::new();
    for r in reports {
        let key = r.rho.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        by_rho.entry(key).or_default()[r.balanced as usize] = Some(r);
    }
    let cell_w = 15;
    let mut out = String::new();
    out.push_str(&format!("{:<6}", "rho"));
    for balanced in [false, true] {
        for f in FeatureFamily::ALL {
            let h = format!("{}{}", f.heading(), if balanced { " bal" } else { "" });
            out.push_str(&format!(" {h:>cell_w$}"));
        }
    }
    out.push('\n');
    for (rho, pair) in by_rho {
        out.push_str(&format!("{rho:<6}"));
        for r in pair {
            for f in FeatureFamily::ALL {
                let text = match r {
                    Some(r) => {
                        let a = r.accuracy(f);
                        let body = format!("{}/{}", trim3(a.val_acc), trim3(a.test_acc));
                        if r.is_winner(f) {
                            format!("*{body}*")
                        } else {
                            body
                        }
                    }
                    None => "-".into(),
                };
                out.push_str(&format!(" {text:>cell_w$}"));
            }
        }
        out.push('\n');
    }
    out
}

/// Three decimals with trailing zeros removed, the way the tables print them.
pub fn trim3(x: f64) -> String {
    let s = format!("{x:.3}");
    let s = s.trim_end_matches('0');
    s.trim_end_matches('.').to_string()
}
