//! Causal effect estimation of code features on leakage outcomes:
//! correlations, adjusted ATE estimators, and refutation checks.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One analysis unit: a binary treatment, binary outcome, and adjustment
/// covariates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CausalUnit {
    pub id: String,
    pub treatment: bool,
    pub outcome: bool,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    RegressionAdjustment,
    Ipw,
}

#[derive(Debug, Clone, Serialize)]
pub struct AteEstimate {
    pub estimator: Estimator,
    pub ate: f64,
    pub n: usize,
    pub n_treated: usize,
}

#[derive(Debug, Error)]
pub enum CausalError {
    #[error("no units provided")]
    Empty,
    #[error("covariate length mismatch at unit {id}: expected {expected}, got {got}")]
    CovariateMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("positivity violation: {0} units in only one treatment arm")]
    Positivity(String),
    #[error("singular design matrix in regression adjustment")]
    Singular,
    #[error("logistic regression did not converge after {0} iterations")]
    NoConvergence(usize),
}

fn validate(units: &[CausalUnit]) -> Result<usize, CausalError> {
    if units.is_empty() {
        return Err(CausalError::Empty);
    }
    let dim = units[0].covariates.len();
    for u in units {
        if u.covariates.len() != dim {
            return Err(CausalError::CovariateMismatch {
                id: u.id.clone(),
                expected: dim,
                got: u.covariates.len(),
            });
        }
    }
    let treated = units.iter().filter(|u| u.treatment).count();
    if treated == 0 || treated == units.len() {
        return Err(CausalError::Positivity(format!(
            "{} treated of {}",
            treated,
            units.len()
        )));
    }
    Ok(dim)
}

/// Pearson correlation coefficient between two equal-length series.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Ordinary least squares via normal equations with an added intercept.
fn ols(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>, CausalError> {
    let xtx = design.transpose() * design;
    let xty = design.transpose() * y;
    xtx.lu().solve(&xty).ok_or(CausalError::Singular)
}

/// ATE by linear regression adjustment: fit outcome ~ 1 + treatment +
/// covariates; the treatment coefficient is the effect estimate.
fn ate_regression(units: &[CausalUnit], dim: usize) -> Result<f64, CausalError> {
    let n = units.len();
    let mut design = DMatrix::zeros(n, dim + 2);
    let mut y = DVector::zeros(n);
    for (i, u) in units.iter().enumerate() {
        design[(i, 0)] = 1.0;
        design[(i, 1)] = if u.treatment { 1.0 } else { 0.0 };
        for (j, &c) in u.covariates.iter().enumerate() {
            design[(i, j + 2)] = c;
        }
        y[i] = if u.outcome { 1.0 } else { 0.0 };
    }
    let beta = ols(&design, &y)?;
    Ok(beta[1])
}

const LOGIT_MAX_ITER: usize = 100;
const PROPENSITY_CLIP: f64 = 0.01;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Logistic regression of treatment on covariates (with intercept) via
/// Newton-Raphson with a small ridge for stability.
fn fit_propensity(units: &[CausalUnit], dim: usize) -> Result<Vec<f64>, CausalError> {
    let n = units.len();
    let p = dim + 1;
    let mut design = DMatrix::zeros(n, p);
    let mut t = DVector::zeros(n);
    for (i, u) in units.iter().enumerate() {
        design[(i, 0)] = 1.0;
        for (j, &c) in u.covariates.iter().enumerate() {
            design[(i, j + 1)] = c;
        }
        t[i] = if u.treatment { 1.0 } else { 0.0 };
    }
    // Standardize covariate columns for a well-conditioned Newton solve;
    // fitted probabilities are invariant to this affine rescaling.
    for j in 1..p {
        let col = design.column(j);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt().max(1e-12);
        for i in 0..n {
            design[(i, j)] = (design[(i, j)] - mean) / sd;
        }
    }
    // A small L2 penalty keeps the optimum finite under (quasi-)
    // separation, which small samples with several covariates hit
    // routinely; at realistic n the bias is negligible.
    const RIDGE: f64 = 1e-3;
    let mut beta = DVector::zeros(p);
    for _ in 0..LOGIT_MAX_ITER {
        let eta = &design * &beta;
        let mu = eta.map(sigmoid);
        let mut grad = design.transpose() * (&t - &mu);
        for j in 1..p {
            grad[j] -= RIDGE * beta[j];
        }
        // X^T W X without materializing the n-by-n diagonal W.
        let mut weighted = design.clone();
        for i in 0..n {
            let w = (mu[i] * (1.0 - mu[i])).max(1e-10);
            for j in 0..p {
                weighted[(i, j)] *= w;
            }
        }
        let mut hess = design.transpose() * &weighted;
        for j in 1..p {
            hess[(j, j)] += RIDGE;
        }
        hess[(0, 0)] += 1e-10;
        let step = hess.lu().solve(&grad).ok_or(CausalError::Singular)?;
        beta += &step;
        if step.amax() < 1e-10 {
            let eta = &design * &beta;
            return Ok(eta.iter().map(|&e| sigmoid(e)).collect());
        }
    }
    Err(CausalError::NoConvergence(LOGIT_MAX_ITER))
}

/// ATE by inverse propensity weighting with clipped propensities and
/// self-normalized (Hájek) weight sums.
fn ate_ipw(units: &[CausalUnit], dim: usize) -> Result<f64, CausalError> {
    let prop = fit_propensity(units, dim)?;
    let mut wt_sum = 0.0;
    let mut wt_y = 0.0;
    let mut wc_sum = 0.0;
    let mut wc_y = 0.0;
    for (u, &e) in units.iter().zip(&prop) {
        let e = e.clamp(PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP);
        let y = if u.outcome { 1.0 } else { 0.0 };
        if u.treatment {
            let w = 1.0 / e;
            wt_sum += w;
            wt_y += w * y;
        } else {
            let w = 1.0 / (1.0 - e);
            wc_sum += w;
            wc_y += w * y;
        }
    }
    Ok(wt_y / wt_sum - wc_y / wc_sum)
}

/// Estimate the average treatment effect with the chosen estimator.
pub fn estimate_ate(
    units: &[CausalUnit],
    estimator: Estimator,
) -> Result<AteEstimate, CausalError> {
    let dim = validate(units)?;
    let ate = match estimator {
        Estimator::RegressionAdjustment => ate_regression(units, dim)?,
        Estimator::Ipw => ate_ipw(units, dim)?,
    };
    Ok(AteEstimate {
        estimator,
        ate,
        n: units.len(),
        n_treated: units.iter().filter(|u| u.treatment).count(),
    })
}

/// Which refutation check to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refutation {
    RandomCommonCause,
    PlaceboTreatment,
    SimulatedConfounder,
    SubsetValidation,
}

#[derive(Debug, Clone, Serialize)]
pub struct RefutationResult {
    pub refutation: Refutation,
    pub original_ate: f64,
    /// One re-estimate per repetition (or per grid strength for the
    /// simulated-confounder check).
    pub refuted_ates: Vec<f64>,
    pub mean_refuted_ate: f64,
}

/// Confounder strengths swept by the simulated-confounder check.
pub const CONFOUNDER_STRENGTHS: [f64; 3] = [0.1, 0.2, 0.3];

/// Run one refutation check against the given estimator.
pub fn refute(
    units: &[CausalUnit],
    estimator: Estimator,
    refutation: Refutation,
    repetitions: usize,
    seed: u64,
) -> Result<RefutationResult, CausalError> {
    let original = estimate_ate(units, estimator)?.ate;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut refuted = Vec::new();
    match refutation {
        Refutation::RandomCommonCause => {
            // Adding an independent covariate should leave the estimate
            // essentially unchanged.
            for _ in 0..repetitions {
                let mut aug: Vec<CausalUnit> = units.to_vec();
                for u in &mut aug {
                    u.covariates.push(rng.gen::<f64>());
                }
                refuted.push(estimate_ate(&aug, estimator)?.ate);
            }
        }
        Refutation::PlaceboTreatment => {
            // Permuting treatment labels should drive the estimate to
            // zero.
            for _ in 0..repetitions {
                let mut labels: Vec<bool> = units.iter().map(|u| u.treatment).collect();
                labels.shuffle(&mut rng);
                let placebo: Vec<CausalUnit> = units
                    .iter()
                    .zip(&labels)
                    .map(|(u, &t)| CausalUnit {
                        treatment: t,
                        ..u.clone()
                    })
                    .collect();
                refuted.push(estimate_ate(&placebo, estimator)?.ate);
            }
        }
        Refutation::SimulatedConfounder => {
            // Inject a synthetic confounder correlated with both
            // treatment and outcome at each grid strength, then adjust
            // for it; the estimate should move smoothly, not collapse.
            for &strength in &CONFOUNDER_STRENGTHS {
                let mut aug: Vec<CausalUnit> = units.to_vec();
                for u in &mut aug {
                    let t = if u.treatment { 1.0 } else { 0.0 };
                    let y = if u.outcome { 1.0 } else { 0.0 };
                    let c = strength * (t + y) / 2.0 + (1.0 - strength) * rng.gen::<f64>();
                    u.covariates.push(c);
                }
                refuted.push(estimate_ate(&aug, estimator)?.ate);
            }
        }
        Refutation::SubsetValidation => {
            // Re-estimating on random 80% subsets should stay close to
            // the full-sample estimate.
            let keep = (units.len() as f64 * 0.8).round() as usize;
            for _ in 0..repetitions {
                let mut idx: Vec<usize> = (0..units.len()).collect();
                idx.shuffle(&mut rng);
                let subset: Vec<CausalUnit> =
                    idx[..keep].iter().map(|&i| units[i].clone()).collect();
                refuted.push(estimate_ate(&subset, estimator)?.ate);
            }
        }
    }
    let mean = refuted.iter().sum::<f64>() / refuted.len() as f64;
    Ok(RefutationResult {
        refutation,
        original_ate: original,
        refuted_ates: refuted,
        mean_refuted_ate: mean,
    })
}

/// Join feature rows with leakage outcomes into analysis units. The
/// treatment is feature `treatment_idx` dichotomized at its median;
/// remaining features are covariates.
pub fn build_units(
    ids: &[String],
    features: &[Vec<f64>],
    outcomes: &[bool],
    treatment_idx: usize,
) -> Result<Vec<CausalUnit>, CausalError> {
    if ids.is_empty() {
        return Err(CausalError::Empty);
    }
    let dim = features[0].len();
    let mut col: Vec<f64> = features.iter().map(|f| f[treatment_idx]).collect();
    col.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if col.len() % 2 == 1 {
        col[col.len() / 2]
    } else {
        (col[col.len() / 2 - 1] + col[col.len() / 2]) / 2.0
    };
    let units: Vec<CausalUnit> = ids
        .iter()
        .zip(features)
        .zip(outcomes)
        .map(|((id, f), &y)| CausalUnit {
            id: id.clone(),
            treatment: f[treatment_idx] > median,
            outcome: y,
            covariates: (0..dim)
                .filter(|&j| j != treatment_idx)
                .map(|j| f[j])
                .collect(),
        })
        .collect();
    validate(&units)?;
    Ok(units)
}
