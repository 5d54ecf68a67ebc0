//! Predictor/filter covariance chains and the optimal test-channel
//! realization `Y_t = H_t X_t + (I - H_t) A_{t-1} Y_{t-1} + V_t`.

use crate::error::{Error, Result};
use crate::model::{qbar_schedule, SourceModel};
use crate::numerics::{Mat, SymMatrix};
use serde::Serialize;

/// Rank tolerance for the pseudoinverse of predictor covariances.
const PINV_RANK_TOL: f64 = 1e-10;

/// Ordering margin below which `synthesize` rejects a schedule.
const FEASIBILITY_TOL: f64 = 1e-9;

/// Paired predictor (`sigma_minus`) and filter (`sigma`) error covariances,
/// one of each per stage.
#[derive(Debug, Clone, Serialize)]
pub struct CovarianceSchedule {
    pub sigma_minus: Vec<SymMatrix>,
    pub sigma: Vec<SymMatrix>,
    /// Per-stage flag: smallest eigenvalue of `sigma_minus - sigma` is at
    /// least -1e-10.
    pub feasible: Vec<bool>,
}

impl CovarianceSchedule {
    pub fn horizon(&self) -> usize {
        self.sigma.len()
    }

    /// Smallest eigenvalue of the ordering margin over all stages.
    pub fn min_ordering_margin(&self) -> f64 {
        self.sigma_minus
            .iter()
            .zip(&self.sigma)
            .map(|(sm, s)| sm.sub(s).min_eigenvalue())
            .fold(f64::INFINITY, f64::min)
    }

    /// Average per-stage traces of the two diagonal blocks: the achieved
    /// distortions `(d1, d2)`.
    pub fn achieved_distortions(&self, p1: usize, p2: usize) -> (f64, f64) {
        let n = self.sigma.len() as f64;
        let d1: f64 = self.sigma.iter().map(|s| s.block_trace(0, p1)).sum();
        let d2: f64 = self.sigma.iter().map(|s| s.block_trace(p1, p2)).sum();
        (d1 / n, d2 / n)
    }
}

/// The synthesized test channel: gains, noise covariances, and affine
/// feedback coefficients `(I - H_t) A_{t-1}` (zero at the first stage).
#[derive(Debug, Clone, Serialize)]
pub struct RealizationSchedule {
    pub h: Vec<Mat>,
    pub q_v: Vec<SymMatrix>,
    pub feedback: Vec<Mat>,
}

impl RealizationSchedule {
    /// Negative-control variant with every gain scaled by `factor` and the
    /// feedback recomputed as `(I - factor*H_t) A_{t-1}`.
    pub fn with_scaled_h(&self, factor: f64, m: &SourceModel) -> RealizationSchedule {
        let p = m.state_dim();
        let eye = Mat::identity(p);
        let h: Vec<Mat> = self.h.iter().map(|h| h.scale(factor)).collect();
        let feedback: Vec<Mat> = h
            .iter()
            .enumerate()
            .map(|(t, h_t)| {
                if t == 0 {
                    Mat::zeros(p, p)
                } else {
                    eye.sub(h_t).matmul(&m.a[t - 1])
                }
            })
            .collect();
        RealizationSchedule {
            h,
            q_v: self.q_v.clone(),
            feedback,
        }
    }
}

/// One predictor update: `A_prev sigma_prev A_prev^T + Qbar_prev`.
pub fn predictor_step(sigma_prev: &SymMatrix, a_prev: &Mat, qbar_prev: &SymMatrix) -> SymMatrix {
    sigma_prev.congruence(a_prev).add(qbar_prev)
}

/// Chain the filter covariances into predictor covariances:
/// `sigma_minus[0] = Q_X1`, then the predictor step stage by stage.
pub fn forward_chain(m: &SourceModel, sigma: &[SymMatrix]) -> Result<CovarianceSchedule> {
    let p = m.state_dim();
    if sigma.len() != m.n {
        return Err(Error::Dimension(format!(
            "forward chain expects {} filter covariances, got {}",
            m.n,
            sigma.len()
        )));
    }
    if let Some(bad) = sigma.iter().position(|s| s.dim() != p) {
        return Err(Error::Dimension(format!(
            "sigma[{bad}] has dimension {}, expected {p}",
            sigma[bad].dim()
        )));
    }
    let qbar = qbar_schedule(m);
    let mut sigma_minus = Vec::with_capacity(m.n);
    sigma_minus.push(m.q_x1.clone());
    for t in 1..m.n {
        sigma_minus.push(predictor_step(&sigma[t - 1], &m.a[t - 1], &qbar.entries[t - 1]));
    }
    let feasible = sigma_minus
        .iter()
        .zip(sigma)
        .map(|(sm, s)| sm.sub(s).min_eigenvalue() >= -1e-10)
        .collect();
    Ok(CovarianceSchedule {
        sigma_minus,
        sigma: sigma.to_vec(),
        feasible,
    })
}

/// Synthesize the test channel from a feasible schedule:
/// `H_t = (sigma_minus - sigma) pinv(sigma_minus)`,
/// `Q_V = H sigma_minus - H sigma_minus H^T`,
/// `feedback_t = (I - H_t) A_{t-1}` (zero at t = 0).
pub fn synthesize(schedule: &CovarianceSchedule, m: &SourceModel) -> Result<RealizationSchedule> {
    let p = m.state_dim();
    let eye = Mat::identity(p);
    let mut h = Vec::with_capacity(schedule.horizon());
    let mut q_v = Vec::with_capacity(schedule.horizon());
    let mut feedback = Vec::with_capacity(schedule.horizon());

    for t in 0..schedule.horizon() {
        let sm = &schedule.sigma_minus[t];
        let s = &schedule.sigma[t];
        let gap = sm.sub(s);
        let margin = gap.min_eigenvalue();
        if margin < -FEASIBILITY_TOL {
            return Err(Error::InfeasibleSchedule {
                stage: t + 1,
                min_eigenvalue: margin,
            });
        }
        let h_t = gap.to_mat().matmul(&sm.pinv(PINV_RANK_TOL).to_mat());
        let h_sm = h_t.matmul(&sm.to_mat());
        let qv_t = SymMatrix::from_mat(&h_sm.sub(&h_sm.matmul(&h_t.transpose())))?;
        let qv_min = qv_t.min_eigenvalue();
        if qv_min < -1e-8 {
            return Err(Error::NotPsd {
                what: "test channel noise covariance",
                min_eigenvalue: qv_min,
            });
        }
        let fb = if t == 0 {
            Mat::zeros(p, p)
        } else {
            eye.sub(&h_t).matmul(&m.a[t - 1])
        };
        h.push(h_t);
        q_v.push(qv_t);
        feedback.push(fb);
    }
    Ok(RealizationSchedule { h, q_v, feedback })
}

/// Per-stage residuals of the sufficiency conditions.
///
/// Condition 1 compares `cov(X,Y|past) = sigma_minus H^T` against
/// `cov(Y,Y|past) = H sigma_minus H^T + Q_V`; the symmetry defect checks
/// `H sigma_minus` against its transpose. Condition 2 (matching conditional
/// means) holds structurally through the feedback construction.
#[derive(Debug, Clone, Serialize)]
pub struct SufficiencyReport {
    pub cond1: Vec<f64>,
    pub symmetry: Vec<f64>,
    pub cond2_structural: bool,
}

impl SufficiencyReport {
    pub fn max_residual(&self) -> f64 {
        self.cond1
            .iter()
            .chain(&self.symmetry)
            .fold(0.0f64, |m, v| m.max(*v))
    }
}

pub fn check_sufficient_conditions(
    r: &RealizationSchedule,
    schedule: &CovarianceSchedule,
) -> SufficiencyReport {
    let mut cond1 = Vec::with_capacity(r.h.len());
    let mut symmetry = Vec::with_capacity(r.h.len());
    for t in 0..r.h.len() {
        let sm = schedule.sigma_minus[t].to_mat();
        let h = &r.h[t];
        let cov_xy = sm.matmul(&h.transpose());
        let cov_yy = h.matmul(&sm).matmul(&h.transpose()).add(&r.q_v[t].to_mat());
        cond1.push(cov_xy.sub(&cov_yy).frobenius_norm());
        let h_sm = h.matmul(&sm);
        symmetry.push(h_sm.sub(&h_sm.transpose()).frobenius_norm());
    }
    SufficiencyReport {
        cond1,
        symmetry,
        cond2_structural: true,
    }
}

/// Rate of one stage in nats: `0.5 (logdet sigma_minus - logdet sigma)`.
pub fn stage_rate(sigma_minus_t: &SymMatrix, sigma_t: &SymMatrix) -> Result<f64> {
    Ok(0.5 * (sigma_minus_t.logdet()? - sigma_t.logdet()?))
}

/// Per-stage rates together with their sum and average.
#[derive(Debug, Clone, Serialize)]
pub struct RateBreakdown {
    pub per_stage: Vec<f64>,
    pub total: f64,
    pub average: f64,
}

pub fn total_rate(schedule: &CovarianceSchedule) -> Result<RateBreakdown> {
    let mut per_stage = Vec::with_capacity(schedule.horizon());
    for t in 0..schedule.horizon() {
        per_stage.push(stage_rate(&schedule.sigma_minus[t], &schedule.sigma[t])?);
    }
    let total: f64 = per_stage.iter().sum();
    let average = total / schedule.horizon().max(1) as f64;
    Ok(RateBreakdown {
        per_stage,
        total,
        average,
    })
}

/// Largest deviation between the synthesized `Q_V` and the full-rank
/// alternative `sigma - sigma inv(sigma_minus) sigma`, over stages where
/// `sigma_minus` is invertible. Returns 0 when no stage is invertible.
pub fn qv_formula_agreement(
    r: &RealizationSchedule,
    schedule: &CovarianceSchedule,
) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..r.q_v.len() {
        let sm = &schedule.sigma_minus[t];
        let Ok(inv) = sm.inverse_pd() else { continue };
        let s = schedule.sigma[t].to_mat();
        let alt = s.sub(&s.matmul(&inv.to_mat()).matmul(&s));
        worst = worst.max(alt.sub(&r.q_v[t].to_mat()).frobenius_norm());
    }
    worst
}
