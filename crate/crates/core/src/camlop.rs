//! Cost-utility analysis of human/LLM deployment plans.
//!
//! Utility over a bundle of human labor `x1` and LLM usage `x2` is
//! Cobb-Douglas, `u = x1^c * x2^d`. Under the budget `p1 x1 + p2 x2 = m` the
//! optimum spends the fraction `c / (c + d)` of the budget on the first good.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CamlopError {
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("log-design matrix is rank-deficient")]
    SingularDesign,
    #[error("fitted exponents must be positive, got c={c}, d={d}")]
    NonPositiveExponents { c: f64, d: f64 },
    #[error("no accuracy given for plan {0}")]
    MissingAccuracy(String),
    #[error("invalid pricing: {0}")]
    InvalidPricing(String),
}

fn positive(name: &str, x: f64) -> Result<f64, CamlopError> {
    if x.is_finite() && x > 0.0 {
        Ok(x)
    } else {
        Err(CamlopError::DomainError(format!("{name} must be positive and finite, got {x}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CamlopModel {
    pub c: f64,
    pub d: f64,
}

impl CamlopModel {
    pub fn new(c: f64, d: f64) -> Result<Self, CamlopError> {
        Ok(Self { c: positive("c", c)?, d: positive("d", d)? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    /// Unit price of human labor.
    pub p1: f64,
    /// Unit price of LLM usage.
    pub p2: f64,
    pub m: f64,
}

impl Budget {
    pub fn new(p1: f64, p2: f64, m: f64) -> Result<Self, CamlopError> {
        Ok(Self { p1: positive("p1", p1)?, p2: positive("p2", p2)?, m: positive("m", m)? })
    }

    pub fn cost(&self, x1: f64, x2: f64) -> f64 {
        self.p1 * x1 + self.p2 * x2
    }
}

/// `x1^c * x2^d`, evaluated in log space.
pub fn utility(model: &CamlopModel, x1: f64, x2: f64) -> Result<f64, CamlopError> {
    let (x1, x2) = (positive("x1", x1)?, positive("x2", x2)?);
    Ok((model.c * x1.ln() + model.d * x2.ln()).exp())
}

/// Slope of the indifference curve through `(x1, x2)`.
pub fn marginal_rate_of_substitution(model: &CamlopModel, x1: f64, x2: f64) -> Result<f64, CamlopError> {
    let (x1, x2) = (positive("x1", x1)?, positive("x2", x2)?);
    Ok(-(model.c * x2) / (model.d * x1))
}

/// Utility-maximizing bundle on the budget line.
pub fn optimal_bundle(model: &CamlopModel, budget: &Budget) -> (f64, f64) {
    let share = model.c / (model.c + model.d);
    let x1 = share * budget.m / budget.p1;
    let x2 = (1.0 - share) * budget.m / budget.p2;
    (x1, x2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Datapoint {
    pub x1: f64,
    pub x2: f64,
    pub utility: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: CamlopModel,
    /// Root mean squared residual of `ln u`.
    pub rmse: f64,
}

/// Least-squares fit of `ln u = c ln x1 + d ln x2` (no intercept).
pub fn fit_exponents(data: &[Datapoint]) -> Result<FitResult, CamlopError> {
    if data.len() < 2 {
        return Err(CamlopError::DomainError(format!("need at least 2 datapoints, got {}", data.len())));
    }
    let logs = data
        .iter()
        .map(|p| Ok((positive("x1", p.x1)?.ln(), positive("x2", p.x2)?.ln(), positive("utility", p.utility)?.ln())))
        .collect::<Result<Vec<_>, CamlopError>>()?;
    let (mut s11, mut s12, mut s22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(l1, l2, lu) in &logs {
        s11 += l1 * l1;
        s12 += l1 * l2;
        s22 += l2 * l2;
        b1 += l1 * lu;
        b2 += l2 * lu;
    }
    let det = s11 * s22 - s12 * s12;
    if s11 == 0.0 || s22 == 0.0 || det <= 1e-12 * s11 * s22 {
        return Err(CamlopError::SingularDesign);
    }
    let c = (b1 * s22 - b2 * s12) / det;
    let d = (s11 * b2 - s12 * b1) / det;
    if !(c > 0.0 && d > 0.0) {
        return Err(CamlopError::NonPositiveExponents { c, d });
    }
    let sse: f64 = logs.iter().map(|&(l1, l2, lu)| (lu - c * l1 - d * l2).powi(2)).sum();
    Ok(FitResult { model: CamlopModel { c, d }, rmse: (sse / logs.len() as f64).sqrt() })
}

/// Money and time per solved problem for each kind of work.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoodsPricing {
    /// Money per LLM decode.
    pub p_llm: f64,
    /// Seconds per LLM decode.
    pub t_llm: f64,
    pub p_human: f64,
    pub t_human: f64,
    /// Money per human correction.
    pub p_mcs: f64,
    pub t_mcs: f64,
}

impl Default for GoodsPricing {
    /// $0.08 and 0.8 s per decode, $0.125 and 60 s per fully human solve,
    /// $0.0625 and 30 s per correction.
    fn default() -> Self {
        Self { p_llm: 0.08, t_llm: 0.8, p_human: 0.125, t_human: 60.0, p_mcs: 0.0625, t_mcs: 30.0 }
    }
}

impl GoodsPricing {
    pub fn validate(&self) -> Result<(), CamlopError> {
        let fields = [
            ("p_llm", self.p_llm),
            ("t_llm", self.t_llm),
            ("p_human", self.p_human),
            ("t_human", self.t_human),
            ("p_mcs", self.p_mcs),
            ("t_mcs", self.t_mcs),
        ];
        if let Some((name, v)) = fields.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(CamlopError::InvalidPricing(format!("{name} must be non-negative, got {v}")));
        }
        if self.t_mcs >= self.t_human {
            return Err(CamlopError::InvalidPricing("correction time must be below full human solve time".into()));
        }
        Ok(())
    }

    /// Reads a TOML file; missing keys keep their defaults.
    pub fn load(path: &Path) -> Result<Self, CamlopError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Partial {
            p_llm: Option<f64>,
            t_llm: Option<f64>,
            p_human: Option<f64>,
            t_human: Option<f64>,
            p_mcs: Option<f64>,
            t_mcs: Option<f64>,
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| CamlopError::InvalidPricing(format!("{}: {e}", path.display())))?;
        let p: Partial = toml::from_str(&text).map_err(|e| CamlopError::InvalidPricing(e.to_string()))?;
        let d = Self::default();
        let pricing = Self {
            p_llm: p.p_llm.unwrap_or(d.p_llm),
            t_llm: p.t_llm.unwrap_or(d.t_llm),
            p_human: p.p_human.unwrap_or(d.p_human),
            t_human: p.t_human.unwrap_or(d.t_human),
            p_mcs: p.p_mcs.unwrap_or(d.p_mcs),
            t_mcs: p.t_mcs.unwrap_or(d.t_mcs),
        };
        pricing.validate()?;
        Ok(pricing)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum Plan {
    Human,
    Cot,
    SelfConsistency { n: u32 },
    Mcs { n: u32, alpha: f64 },
    McsSelfConsistency { n: u32, alpha: f64 },
}

impl Plan {
    /// Human-only, LLM-only and mixed plans compared by default.
    pub fn standard() -> Vec<Plan> {
        vec![
            Plan::Human,
            Plan::Cot,
            Plan::SelfConsistency { n: 10 },
            Plan::Mcs { n: 5, alpha: 0.2 },
            Plan::McsSelfConsistency { n: 5, alpha: 0.2 },
            Plan::Mcs { n: 5, alpha: 0.4 },
            Plan::McsSelfConsistency { n: 5, alpha: 0.4 },
        ]
    }

    pub fn validate(&self) -> Result<(), CamlopError> {
        match *self {
            Plan::Human | Plan::Cot => Ok(()),
            Plan::SelfConsistency { n } => {
                (n >= 1).then_some(()).ok_or_else(|| CamlopError::DomainError("n must be at least 1".into()))
            }
            Plan::Mcs { n, alpha } | Plan::McsSelfConsistency { n, alpha } => {
                if n == 0 {
                    return Err(CamlopError::DomainError("n must be at least 1".into()));
                }
                if !(alpha > 0.0 && alpha <= 1.0) {
                    return Err(CamlopError::DomainError(format!("alpha must lie in (0, 1], got {alpha}")));
                }
                Ok(())
            }
        }
    }

    /// LLM decodes per problem.
    pub fn llm_decodes(&self) -> f64 {
        match *self {
            Plan::Human => 0.0,
            Plan::Cot => 1.0,
            Plan::SelfConsistency { n } => n as f64,
            Plan::Mcs { n, .. } | Plan::McsSelfConsistency { n, .. } => n as f64 + 1.0,
        }
    }

    /// Share of problems a human touches.
    pub fn human_share(&self) -> f64 {
        match *self {
            Plan::Human => 1.0,
            Plan::Cot | Plan::SelfConsistency { .. } => 0.0,
            Plan::Mcs { alpha, .. } | Plan::McsSelfConsistency { alpha, .. } => alpha,
        }
    }
}

impl fmt::Display for Plan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Plan::Human => f.write_str("Human"),
            Plan::Cot => f.write_str("CoT"),
            Plan::SelfConsistency { n } => write!(f, "Self-consistency (N={n})"),
            Plan::Mcs { n, alpha } => write!(f, "MCS (N={n}, alpha={}%)", alpha * 100.0),
            Plan::McsSelfConsistency { n, alpha } => {
                write!(f, "MCS+Self-consistency (N={n}, alpha={}%)", alpha * 100.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanCost {
    pub money: f64,
    /// Seconds.
    pub time: f64,
}

/// Per-problem money and time of a plan. MCS plans pay for `n` samples plus
/// one greedy answer-stage decode, and for correcting the top `alpha` share.
pub fn plan_cost(plan: &Plan, pricing: &GoodsPricing) -> PlanCost {
    match *plan {
        Plan::Human => PlanCost { money: pricing.p_human, time: pricing.t_human },
        Plan::Cot => PlanCost { money: pricing.p_llm, time: pricing.t_llm },
        Plan::SelfConsistency { n } => PlanCost { money: n as f64 * pricing.p_llm, time: n as f64 * pricing.t_llm },
        Plan::Mcs { n, alpha } | Plan::McsSelfConsistency { n, alpha } => {
            let decodes = n as f64 + 1.0;
            PlanCost {
                money: decodes * pricing.p_llm + alpha * pricing.p_mcs,
                time: decodes * pricing.t_llm + alpha * pricing.t_mcs,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Accuracy,
    Time,
    Money,
    /// LLM decodes per problem.
    Llm,
    /// Human share of problems.
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityFactor {
    pub factor: Factor,
    pub exponent: f64,
    /// Multiplier applied to the raw factor value before exponentiation.
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

/// `u = Π (scale_i * value_i)^exponent_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilitySpec {
    pub factors: Vec<UtilityFactor>,
}

impl UtilitySpec {
    /// `a^accuracy_exp * t^time_exp`.
    pub fn accuracy_time(accuracy_exp: f64, time_exp: f64) -> Self {
        Self {
            factors: vec![
                UtilityFactor { factor: Factor::Accuracy, exponent: accuracy_exp, scale: 1.0 },
                UtilityFactor { factor: Factor::Time, exponent: time_exp, scale: 1.0 },
            ],
        }
    }

    /// `x_llm^c * (scale * x_human)^d`.
    pub fn goods(model: &CamlopModel, human_scale: f64) -> Self {
        Self {
            factors: vec![
                UtilityFactor { factor: Factor::Llm, exponent: model.c, scale: 1.0 },
                UtilityFactor { factor: Factor::Human, exponent: model.d, scale: human_scale },
            ],
        }
    }

    pub fn evaluate(&self, values: &BTreeMap<Factor, f64>) -> Result<f64, CamlopError> {
        self.factors.iter().try_fold(1.0, |acc, f| {
            let raw = values
                .get(&f.factor)
                .ok_or_else(|| CamlopError::DomainError(format!("no value for factor {:?}", f.factor)))?;
            let v = f.scale * raw;
            if f.exponent == 0.0 {
                return Ok(acc);
            }
            if !(v.is_finite() && v > 0.0) {
                return Err(CamlopError::DomainError(format!("factor {:?} must be positive, got {v}", f.factor)));
            }
            Ok(acc * v.powf(f.exponent))
        })
    }
}

impl Default for UtilitySpec {
    fn default() -> Self {
        Self::accuracy_time(1.0, -0.01)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub plan: Plan,
    pub time: f64,
    pub money: f64,
    pub accuracy: f64,
    pub utility: f64,
}

/// Costs every plan, scores it under `spec` and sorts by utility descending,
/// cheaper plans first among equals.
pub fn evaluate_plans(
    plans: &[Plan],
    pricing: &GoodsPricing,
    accuracy: &[(Plan, f64)],
    spec: &UtilitySpec,
) -> Result<Vec<PlanRow>, CamlopError> {
    let mut rows = plans
        .iter()
        .map(|plan| {
            plan.validate()?;
            let acc = accuracy
                .iter()
                .find(|(p, _)| p == plan)
                .map(|(_, a)| *a)
                .ok_or_else(|| CamlopError::MissingAccuracy(plan.to_string()))?;
            let cost = plan_cost(plan, pricing);
            let values = BTreeMap::from([
                (Factor::Accuracy, acc),
                (Factor::Time, cost.time),
                (Factor::Money, cost.money),
                (Factor::Llm, plan.llm_decodes()),
                (Factor::Human, plan.human_share()),
            ]);
            Ok(PlanRow {
                plan: *plan,
                time: cost.time,
                money: cost.money,
                accuracy: acc,
                utility: spec.evaluate(&values)?,
            })
        })
        .collect::<Result<Vec<_>, CamlopError>>()?;
    rows.sort_by(|a, b| {
        b.utility
            .partial_cmp(&a.utility)
            .unwrap_or(Ordering::Equal)
            .then(a.money.partial_cmp(&b.money).unwrap_or(Ordering::Equal))
    });
    Ok(rows)
}

/// Accuracy per plan on SingleEq, used when no measured run is available.
pub fn reference_accuracies() -> Vec<(Plan, f64)> {
    vec![
        (Plan::Human, 93.20),
        (Plan::Cot, 85.04),
        (Plan::SelfConsistency { n: 10 }, 92.49),
        (Plan::Mcs { n: 5, alpha: 0.2 }, 91.00),
        (Plan::McsSelfConsistency { n: 5, alpha: 0.2 }, 93.50),
        (Plan::Mcs { n: 5, alpha: 0.4 }, 92.51),
        (Plan::McsSelfConsistency { n: 5, alpha: 0.4 }, 94.09),
    ]
}

/// Plot data for the budget line and the indifference curve through the optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub optimum: (f64, f64),
    pub utility: f64,
    pub budget_line: Vec<(f64, f64)>,
    pub indifference_curve: Vec<(f64, f64)>,
}

pub fn curves(model: &CamlopModel, budget: &Budget, points: usize) -> Result<Curves, CamlopError> {
    if points < 2 {
        return Err(CamlopError::DomainError("need at least 2 points per curve".into()));
    }
    let optimum = optimal_bundle(model, budget);
    let level = utility(model, optimum.0, optimum.1)?;
    let x1_max = budget.m / budget.p1;
    let step = x1_max / (points - 1) as f64;
    let budget_line = (0..points)
        .map(|i| {
            let x1 = step * i as f64;
            (x1, ((budget.m - budget.p1 * x1) / budget.p2).max(0.0))
        })
        .collect();
    // x2 = (level / x1^c)^(1/d), sampled over the same x1 range excluding 0.
    let indifference_curve = (1..=points)
        .map(|i| {
            let x1 = x1_max * i as f64 / points as f64;
            (x1, ((level.ln() - model.c * x1.ln()) / model.d).exp())
        })
        .collect();
    Ok(Curves { optimum, utility: level, budget_line, indifference_curve })
}
