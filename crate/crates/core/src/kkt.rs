//! Interior-regime KKT solver: backward covariance equations, multiplier
//! calibration against the distortion budgets, the scalar two-process
//! closed form, and the per-unit-time limit.

use crate::error::{Error, Result};
use crate::model::{qbar_schedule, state_covariances, DistortionSpec, SourceModel};
use crate::numerics::{solve_matrix_quadratic, SymMatrix};
use crate::realization::{
    forward_chain, synthesize, total_rate, CovarianceSchedule, RealizationSchedule,
};
use serde::Serialize;

/// Multiplier search range.
const LAMBDA_LO: f64 = 1e-8;
const LAMBDA_HI: f64 = 1e8;

/// Iterations of log-space bisection (shrinks the bracket below 1e-15
/// relative width).
const BISECT_ITERS: usize = 120;

/// Relative margin below which the interior classification is abandoned.
const STRICT_INTERIOR_TOL: f64 = 1e-8;

/// Lagrange data for the constrained program: scalar budget multipliers and
/// the per-stage semidefinite multipliers (zero throughout the interior
/// regime).
#[derive(Debug, Clone, Serialize)]
pub struct Multipliers {
    pub lambda1: f64,
    pub lambda2: f64,
    pub theta: Vec<SymMatrix>,
    pub v: Vec<SymMatrix>,
}

impl Multipliers {
    pub fn interior(lambda1: f64, lambda2: f64, dim: usize, n: usize) -> Self {
        Multipliers {
            lambda1,
            lambda2,
            theta: vec![SymMatrix::zeros(dim); n],
            v: vec![SymMatrix::zeros(dim); n],
        }
    }
}

/// Operating regime of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Ordering constraints strictly slack at every stage; the closed-form
    /// interior equations apply.
    Interior,
    /// The calibrated interior solution violates an ordering constraint;
    /// only the oracle can produce numbers here.
    BoundaryDetected,
    /// Budgets exceed the prior uncertainty; the zero-rate schedule is exact.
    ZeroRate,
}

/// KKT residual block: stationarity per stage (the backward equation for
/// non-terminal stages), complementary slackness, and primal/dual margins.
#[derive(Debug, Clone, Serialize)]
pub struct KktResiduals {
    pub stationarity: Vec<f64>,
    pub comp_slack_lambda: [f64; 2],
    pub comp_slack_v: Vec<f64>,
    pub comp_slack_theta: Vec<f64>,
    pub primal_min_sigma_eig: Vec<f64>,
    pub primal_min_ordering_eig: Vec<f64>,
    pub budget_slack: [f64; 2],
    pub dual_lambda: [f64; 2],
    pub dual_min_theta_eig: Vec<f64>,
    pub dual_min_v_eig: Vec<f64>,
}

impl KktResiduals {
    /// Largest stationarity / complementary-slackness residual.
    pub fn max_residual(&self) -> f64 {
        self.stationarity
            .iter()
            .chain(self.comp_slack_v.iter())
            .chain(self.comp_slack_theta.iter())
            .chain(self.comp_slack_lambda.iter())
            .fold(0.0f64, |m, v| m.max(*v))
    }
}

/// Complete output of one solve.
#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub rate_total: f64,
    pub rate_per_stage: Vec<f64>,
    pub rate_average: f64,
    /// Achieved average distortions `(d1, d2)`.
    pub achieved: (f64, f64),
    pub multipliers: Multipliers,
    pub schedule: CovarianceSchedule,
    /// Absent when the regime is boundary-detected (no feasible closed-form
    /// realization exists there).
    pub realization: Option<RealizationSchedule>,
    pub residuals: KktResiduals,
    pub regime: Regime,
    /// Signed `oracle rate - solver rate`, when an oracle run was requested.
    pub oracle_gap: Option<f64>,
}

/// `Lambda = diag(lambda1 I_p1, lambda2 I_p2)`.
pub fn lambda_matrix(lambda1: f64, lambda2: f64, p1: usize, p2: usize) -> SymMatrix {
    let mut entries = vec![lambda1; p1];
    entries.extend(vec![lambda2; p2]);
    SymMatrix::diag(&entries)
}

/// `C = 0.5 Lambda^{-1}`, entrywise on the diagonal.
fn half_lambda_inverse(lambda1: f64, lambda2: f64, p1: usize, p2: usize) -> SymMatrix {
    let mut entries = vec![0.5 / lambda1; p1];
    entries.extend(vec![0.5 / lambda2; p2]);
    SymMatrix::diag(&entries)
}

/// Quadratic solve with magnitude normalization so extreme multipliers do
/// not defeat the absolute Newton tolerance. `S + S Q S = C` is invariant
/// under `S -> s S'`, `C -> s C'`, `Q -> Q'/s`.
fn solve_quadratic_scaled(c: &SymMatrix, qbar: &SymMatrix) -> Result<SymMatrix> {
    let s = c.max_abs();
    if s <= 1.0 || !s.is_finite() {
        return solve_matrix_quadratic(c, qbar);
    }
    let solved = solve_matrix_quadratic(&c.scale(1.0 / s), &qbar.scale(s))?;
    Ok(solved.scale(s))
}

/// Backward interior schedule: `sigma[n-1] = 0.5 Lambda^{-1}` and, for each
/// earlier stage, the solution of `S + S Qbar_t S = 0.5 Lambda^{-1}`.
pub fn interior_schedule(
    lambda1: f64,
    lambda2: f64,
    m: &SourceModel,
) -> Result<Vec<SymMatrix>> {
    if !(lambda1 > 0.0 && lambda2 > 0.0) {
        return Err(Error::BracketingFailure {
            which: "interior schedule requires positive multipliers",
            lo: LAMBDA_LO,
            hi: LAMBDA_HI,
        });
    }
    let c = half_lambda_inverse(lambda1, lambda2, m.p1, m.p2);
    let qbar = qbar_schedule(m);
    let mut sigma = vec![SymMatrix::zeros(m.state_dim()); m.n];
    sigma[m.n - 1] = c.clone();

    if m.is_time_invariant() && m.n > 1 {
        let s = solve_quadratic_scaled(&c, &qbar.entries[0])?;
        for t in 0..m.n - 1 {
            sigma[t] = s.clone();
        }
    } else {
        for t in (0..m.n.saturating_sub(1)).rev() {
            sigma[t] = solve_quadratic_scaled(&c, &qbar.entries[t])?;
        }
    }
    Ok(sigma)
}

/// Average per-stage block traces of the interior schedule at the given
/// multipliers.
fn avg_block_traces(lambda1: f64, lambda2: f64, m: &SourceModel) -> Result<(f64, f64)> {
    let sigma = interior_schedule(lambda1, lambda2, m)?;
    let t1: f64 = sigma.iter().map(|s| s.block_trace(0, m.p1)).sum();
    let t2: f64 = sigma.iter().map(|s| s.block_trace(m.p1, m.p2)).sum();
    Ok((t1 / m.n as f64, t2 / m.n as f64))
}

/// Log-space bisection of a strictly decreasing trace map against a budget.
fn bisect_lambda(
    which: &'static str,
    eval: &mut dyn FnMut(f64) -> Result<f64>,
    target: f64,
) -> Result<f64> {
    let mut lo = LAMBDA_LO;
    let mut hi = LAMBDA_HI;
    let g_lo = eval(lo)? - target;
    let g_hi = eval(hi)? - target;
    if g_lo < 0.0 || g_hi > 0.0 {
        return Err(Error::BracketingFailure {
            which,
            lo: LAMBDA_LO,
            hi: LAMBDA_HI,
        });
    }
    for _ in 0..BISECT_ITERS {
        let mid = (0.5 * (lo.ln() + hi.ln())).exp();
        let g_mid = eval(mid)? - target;
        if g_mid > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo.ln() + hi.ln())).exp())
}

/// True when every `Qbar_t` is block-diagonal with respect to the
/// `(p1, p2)` split, which makes the two trace maps decouple.
fn qbar_is_block_diagonal(m: &SourceModel) -> bool {
    let qbar = qbar_schedule(m);
    qbar.entries.iter().all(|q| {
        let mut off = 0.0f64;
        for i in 0..m.p1 {
            for j in m.p1..m.state_dim() {
                off = off.max(q[(i, j)].abs());
            }
        }
        off <= 1e-14 * q.max_abs().max(1.0)
    })
}

/// Per-block trace map used on the decoupled path: the block equation
/// involves only that block of `Qbar` and that block's multiplier.
fn block_avg_trace(m: &SourceModel, block_start: usize, block_len: usize, lambda: f64) -> Result<f64> {
    let qbar = qbar_schedule(m);
    let c = SymMatrix::scaled_identity(block_len, 0.5 / lambda);
    let mut total = c.trace(); // terminal stage
    if m.n > 1 {
        if m.is_time_invariant() {
            let qb = qbar.entries[0].block(block_start, block_len);
            total += (m.n - 1) as f64 * solve_quadratic_scaled(&c, &qb)?.trace();
        } else {
            for t in 0..m.n - 1 {
                let qb = qbar.entries[t].block(block_start, block_len);
                total += solve_quadratic_scaled(&c, &qb)?.trace();
            }
        }
    }
    Ok(total / m.n as f64)
}

/// Outcome of multiplier calibration.
#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub multipliers: Multipliers,
    pub schedule: CovarianceSchedule,
    pub regime: Regime,
}

/// Calibrate `(lambda1, lambda2)` so both average block traces meet their
/// budgets, then chain and classify the result.
///
/// Over-generous budgets (both at or above the zero-rate traces) short-cut
/// to the exact zero-rate schedule with zero multipliers. A calibrated
/// schedule that violates the ordering constraint is classified
/// boundary-detected; numbers there must come from the oracle.
pub fn calibrate_multipliers(m: &SourceModel, d: &DistortionSpec) -> Result<CalibrationOutcome> {
    let p = m.state_dim();

    // Zero-rate clamp: budgets above the prior uncertainty.
    let prior = state_covariances(m);
    let n = m.n as f64;
    let zr1: f64 = prior.iter().map(|q| q.block_trace(0, m.p1)).sum::<f64>() / n;
    let zr2: f64 = prior.iter().map(|q| q.block_trace(m.p1, m.p2)).sum::<f64>() / n;
    if zr1 <= d.delta1 && zr2 <= d.delta2 {
        let schedule = forward_chain(m, &prior)?;
        return Ok(CalibrationOutcome {
            multipliers: Multipliers::interior(0.0, 0.0, p, m.n),
            schedule,
            regime: Regime::ZeroRate,
        });
    }

    let (lambda1, lambda2) = if qbar_is_block_diagonal(m) {
        let l1 = bisect_lambda(
            "lambda1",
            &mut |l| block_avg_trace(m, 0, m.p1, l),
            d.delta1,
        )?;
        let l2 = bisect_lambda(
            "lambda2",
            &mut |l| block_avg_trace(m, m.p1, m.p2, l),
            d.delta2,
        )?;
        (l1, l2)
    } else {
        calibrate_coupled(m, d)?
    };

    let sigma = interior_schedule(lambda1, lambda2, m)?;
    let schedule = forward_chain(m, &sigma)?;
    let regime = classify_schedule(&schedule);
    Ok(CalibrationOutcome {
        multipliers: Multipliers::interior(lambda1, lambda2, p, m.n),
        schedule,
        regime,
    })
}

fn classify_schedule(schedule: &CovarianceSchedule) -> Regime {
    let strict = schedule
        .sigma_minus
        .iter()
        .zip(&schedule.sigma)
        .all(|(sm, s)| {
            let margin = sm.sub(s).min_eigenvalue();
            margin >= STRICT_INTERIOR_TOL * sm.max_abs().max(1.0)
        });
    if strict {
        Regime::Interior
    } else {
        Regime::BoundaryDetected
    }
}

/// Two-dimensional damped Newton in log-multiplier space with a
/// finite-difference Jacobian; falls back to coordinate-wise bisection if
/// the Newton iteration stalls.
fn calibrate_coupled(m: &SourceModel, d: &DistortionSpec) -> Result<(f64, f64)> {
    // Initial guess from the block-diagonal approximation.
    let l1 = bisect_lambda(
        "lambda1 (initial guess)",
        &mut |l| block_avg_trace(m, 0, m.p1, l),
        d.delta1,
    )?;
    let l2 = bisect_lambda(
        "lambda2 (initial guess)",
        &mut |l| block_avg_trace(m, m.p1, m.p2, l),
        d.delta2,
    )?;

    let residual = |u: [f64; 2]| -> Result<[f64; 2]> {
        let (t1, t2) = avg_block_traces(u[0].exp(), u[1].exp(), m)?;
        Ok([t1 - d.delta1, t2 - d.delta2])
    };
    let norm = |r: [f64; 2]| r[0].abs().max(r[1].abs());
    let tol = 1e-11 * d.delta1.max(d.delta2).max(1.0);

    let mut u = [l1.ln(), l2.ln()];
    let mut r = residual(u)?;
    let mut newton_ok = false;
    for _ in 0..80 {
        if norm(r) <= tol {
            newton_ok = true;
            break;
        }
        // central-difference Jacobian in log space
        let h = 1e-6;
        let mut jac = [[0.0f64; 2]; 2];
        for j in 0..2 {
            let mut up = u;
            let mut dn = u;
            up[j] += h;
            dn[j] -= h;
            let rp = residual(up)?;
            let rn = residual(dn)?;
            for i in 0..2 {
                jac[i][j] = (rp[i] - rn[i]) / (2.0 * h);
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det.abs() <= 1e-300 {
            break;
        }
        let step = [
            -(jac[1][1] * r[0] - jac[0][1] * r[1]) / det,
            -(-jac[1][0] * r[0] + jac[0][0] * r[1]) / det,
        ];
        let mut accepted = false;
        let mut scale = 1.0;
        for _ in 0..40 {
            let cand = [u[0] + scale * step[0], u[1] + scale * step[1]];
            if cand[0].exp() >= LAMBDA_LO
                && cand[0].exp() <= LAMBDA_HI
                && cand[1].exp() >= LAMBDA_LO
                && cand[1].exp() <= LAMBDA_HI
            {
                if let Ok(rc) = residual(cand) {
                    if norm(rc) < norm(r) {
                        u = cand;
                        r = rc;
                        accepted = true;
                        break;
                    }
                }
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if newton_ok || norm(r) <= tol {
        return Ok((u[0].exp(), u[1].exp()));
    }

    // Derivative-free fallback: alternate coordinate-wise bisections on the
    // exact trace maps (each is decreasing in its own multiplier).
    let mut l = [u[0].exp(), u[1].exp()];
    for _ in 0..40 {
        l[0] = bisect_lambda(
            "lambda1",
            &mut |x| avg_block_traces(x, l[1], m).map(|t| t.0),
            d.delta1,
        )?;
        l[1] = bisect_lambda(
            "lambda2",
            &mut |x| avg_block_traces(l[0], x, m).map(|t| t.1),
            d.delta2,
        )?;
        let (t1, t2) = avg_block_traces(l[0], l[1], m)?;
        if (t1 - d.delta1).abs().max((t2 - d.delta2).abs()) <= tol {
            break;
        }
    }
    Ok((l[0], l[1]))
}

/// Frobenius inner product; equals `trace(a b)` for symmetric matrices.
fn frob_inner(a: &SymMatrix, b: &SymMatrix) -> f64 {
    let n = a.dim();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += a[(i, j)] * b[(i, j)];
        }
    }
    acc
}

/// Evaluate the KKT residual block at a schedule/multiplier pair.
///
/// Stage `n` carries the plain stationarity residual; earlier stages carry
/// the backward-equation residual. Residuals that require inverting a
/// singular multiplier combination are reported as infinity.
pub fn kkt_residuals(
    schedule: &CovarianceSchedule,
    multipliers: &Multipliers,
    m: &SourceModel,
    d: &DistortionSpec,
) -> KktResiduals {
    let n = schedule.horizon();
    let lambda = lambda_matrix(multipliers.lambda1, multipliers.lambda2, m.p1, m.p2);
    let qbar = qbar_schedule(m);

    let mut stationarity = Vec::with_capacity(n);
    for t in 0..n {
        let sigma = &schedule.sigma[t];
        if t + 1 == n {
            let res = match sigma.inverse_pd() {
                Ok(inv) => inv
                    .scale(-0.5)
                    .add(&lambda)
                    .add(&multipliers.theta[t])
                    .add(&multipliers.v[t])
                    .frobenius_norm(),
                Err(_) => f64::INFINITY,
            };
            stationarity.push(res);
        } else {
            let mut inner = lambda.add(&multipliers.theta[t]);
            inner = inner.sub(&multipliers.theta[t + 1].congruence(&m.a[t].transpose()));
            let res = match inner.inverse_pd() {
                Ok(inv) => {
                    let sm = sigma.to_mat();
                    let quad = sm.matmul(&qbar.entries[t].to_mat()).matmul(&sm);
                    sm.add(&quad).sub(&inv.scale(0.5).to_mat()).frobenius_norm()
                }
                Err(_) => f64::INFINITY,
            };
            stationarity.push(res);
        }
    }

    let tr1: f64 = schedule.sigma.iter().map(|s| s.block_trace(0, m.p1)).sum();
    let tr2: f64 = schedule
        .sigma
        .iter()
        .map(|s| s.block_trace(m.p1, m.p2))
        .sum();
    let n_f = n as f64;
    let comp_slack_lambda = [
        (multipliers.lambda1 * (tr1 - n_f * d.delta1)).abs(),
        (multipliers.lambda2 * (tr2 - n_f * d.delta2)).abs(),
    ];

    let comp_slack_v: Vec<f64> = (0..n)
        .map(|t| frob_inner(&multipliers.v[t], &schedule.sigma[t]).abs())
        .collect();
    let comp_slack_theta: Vec<f64> = (0..n)
        .map(|t| {
            frob_inner(
                &multipliers.theta[t],
                &schedule.sigma[t].sub(&schedule.sigma_minus[t]),
            )
            .abs()
        })
        .collect();

    let primal_min_sigma_eig: Vec<f64> = schedule.sigma.iter().map(|s| s.min_eigenvalue()).collect();
    let primal_min_ordering_eig: Vec<f64> = schedule
        .sigma_minus
        .iter()
        .zip(&schedule.sigma)
        .map(|(sm, s)| sm.sub(s).min_eigenvalue())
        .collect();
    let budget_slack = [n_f * d.delta1 - tr1, n_f * d.delta2 - tr2];

    KktResiduals {
        stationarity,
        comp_slack_lambda,
        comp_slack_v,
        comp_slack_theta,
        primal_min_sigma_eig,
        primal_min_ordering_eig,
        budget_slack,
        dual_lambda: [multipliers.lambda1, multipliers.lambda2],
        dual_min_theta_eig: multipliers.theta.iter().map(|t| t.min_eigenvalue()).collect(),
        dual_min_v_eig: multipliers.v.iter().map(|v| v.min_eigenvalue()).collect(),
    }
}

fn assemble_report(
    m: &SourceModel,
    d: &DistortionSpec,
    outcome: CalibrationOutcome,
) -> Result<SolveReport> {
    let CalibrationOutcome {
        multipliers,
        schedule,
        regime,
    } = outcome;
    let residuals = kkt_residuals(&schedule, &multipliers, m, d);
    let achieved = schedule.achieved_distortions(m.p1, m.p2);
    match regime {
        Regime::Interior | Regime::ZeroRate => {
            let realization = synthesize(&schedule, m)?;
            let rates = total_rate(&schedule)?;
            Ok(SolveReport {
                rate_total: rates.total,
                rate_per_stage: rates.per_stage,
                rate_average: rates.average,
                achieved,
                multipliers,
                schedule,
                realization: Some(realization),
                residuals,
                regime,
                oracle_gap: None,
            })
        }
        Regime::BoundaryDetected => Ok(SolveReport {
            rate_total: f64::NAN,
            rate_per_stage: Vec::new(),
            rate_average: f64::NAN,
            achieved,
            multipliers,
            schedule,
            realization: None,
            residuals,
            regime,
            oracle_gap: None,
        }),
    }
}

/// Full interior-path solve: calibrate, chain, synthesize, and report.
pub fn solve(m: &SourceModel, d: &DistortionSpec) -> Result<SolveReport> {
    let outcome = calibrate_multipliers(m, d)?;
    assemble_report(m, d, outcome)
}

// ---------------------------------------------------------------------------
// Scalar two-process closed form
// ---------------------------------------------------------------------------

/// Scalar-instance data extracted by the precondition checks.
struct ScalarInstance {
    q1: f64,
    q2: f64,
    a: [[f64; 2]; 2],
    sigma1_sq: f64,
    sigma2_sq: f64,
}

fn extract_scalar_instance(m: &SourceModel) -> Result<ScalarInstance> {
    if m.p1 != 1 || m.p2 != 1 {
        return Err(Error::NotScalar(format!(
            "state dimensions must be 1+1, got {}+{}",
            m.p1, m.p2
        )));
    }
    if !m.is_time_invariant() {
        return Err(Error::NotScalar(
            "system matrices must be constant over time".into(),
        ));
    }
    if m.q_x1[(0, 1)].abs() > 1e-14 * m.q_x1.max_abs().max(1.0) {
        return Err(Error::NotScalar(
            "initial states must be independent (diagonal Q_X1)".into(),
        ));
    }
    let (q1, q2, a) = if m.n > 1 {
        let qbar = qbar_schedule(m);
        let qb = &qbar.entries[0];
        if qb[(0, 1)].abs() > 1e-14 * qb.max_abs().max(1.0) {
            return Err(Error::NotScalar("Qbar must be diagonal".into()));
        }
        if qb[(0, 0)] <= 0.0 || qb[(1, 1)] <= 0.0 {
            return Err(Error::NotScalar(
                "Qbar must have strictly positive diagonal".into(),
            ));
        }
        let a = [
            [m.a[0][(0, 0)], m.a[0][(0, 1)]],
            [m.a[0][(1, 0)], m.a[0][(1, 1)]],
        ];
        (qb[(0, 0)], qb[(1, 1)], a)
    } else {
        (1.0, 1.0, [[0.0; 2]; 2]) // unused when n = 1
    };
    Ok(ScalarInstance {
        q1,
        q2,
        a,
        sigma1_sq: m.q_x1[(0, 0)],
        sigma2_sq: m.q_x1[(1, 1)],
    })
}

/// Interior filter variance for one process at multiplier `lambda`:
/// the positive root of `s + q s^2 = 1/(2 lambda)`.
fn scalar_interior_value(q: f64, lambda: f64) -> f64 {
    (-1.0 + (1.0 + 2.0 * q / lambda).sqrt()) / (2.0 * q)
}

/// Left side of the scalar calibration identity:
/// `1/(2 lambda) + (n-1) * interior(lambda)`.
pub fn scalar_calibration_lhs(q: f64, lambda: f64, n: usize) -> f64 {
    0.5 / lambda + (n - 1) as f64 * scalar_interior_value(q, lambda)
}

/// Closed-form solve for the scalar two-process instance: diagonal filter
/// covariances with zero cross terms, the terminal value `1/(2 lambda_i)`,
/// and the rate accumulated from the predictor recursion determinants.
/// Must agree with the generic path within 1e-8 total rate.
pub fn scalar_example(m: &SourceModel, d: &DistortionSpec) -> Result<SolveReport> {
    let inst = extract_scalar_instance(m)?;
    let n = m.n;

    let lam = |q: f64, delta: f64| -> Result<f64> {
        bisect_lambda(
            "scalar lambda",
            &mut |l| Ok(scalar_calibration_lhs(q, l, n) / n as f64),
            delta,
        )
    };
    let lambda1 = lam(inst.q1, d.delta1)?;
    let lambda2 = lam(inst.q2, d.delta2)?;

    let s1 = scalar_interior_value(inst.q1, lambda1);
    let s2 = scalar_interior_value(inst.q2, lambda2);
    let term1 = 0.5 / lambda1;
    let term2 = 0.5 / lambda2;

    let mut sigma = Vec::with_capacity(n);
    for t in 0..n {
        let (v1, v2) = if t + 1 == n { (term1, term2) } else { (s1, s2) };
        sigma.push(SymMatrix::diag(&[v1, v2]));
    }

    // Predictor recursion in (alpha, beta, gamma) form and the rate.
    let [[a11, a12], [a21, a22]] = inst.a;
    let mut alpha = inst.sigma1_sq;
    let mut beta = inst.sigma2_sq;
    let mut gamma = 0.0;
    let mut rate_per_stage = Vec::with_capacity(n);
    for t in 0..n {
        if t > 0 {
            let (p1v, p2v) = (sigma[t - 1][(0, 0)], sigma[t - 1][(1, 1)]);
            alpha = a11 * a11 * p1v + a12 * a12 * p2v + inst.q1;
            beta = a21 * a21 * p1v + a22 * a22 * p2v + inst.q2;
            gamma = a11 * a21 * p1v + a12 * a22 * p2v;
        }
        let det_minus = alpha * beta - gamma * gamma;
        let det = sigma[t][(0, 0)] * sigma[t][(1, 1)];
        if det_minus <= 0.0 || det <= 0.0 {
            return Err(Error::NonPositiveDefinite {
                context: "scalar closed form determinant",
                pivot: det_minus.min(det),
            });
        }
        // feasibility of the 2x2 ordering: eigenvalues of sigma_minus - sigma
        let d11 = alpha - sigma[t][(0, 0)];
        let d22 = beta - sigma[t][(1, 1)];
        let disc = (0.5 * (d11 - d22)).hypot(gamma);
        let min_eig = 0.5 * (d11 + d22) - disc;
        if min_eig <= STRICT_INTERIOR_TOL * alpha.max(beta).max(1.0) {
            return Err(Error::BoundaryRegime { stage: t + 1 });
        }
        rate_per_stage.push(0.5 * (det_minus / det).ln());
    }
    let rate_total: f64 = rate_per_stage.iter().sum();

    let schedule = forward_chain(m, &sigma)?;
    let multipliers = Multipliers::interior(lambda1, lambda2, 2, n);
    let residuals = kkt_residuals(&schedule, &multipliers, m, d);
    let achieved = schedule.achieved_distortions(1, 1);
    let realization = synthesize(&schedule, m)?;
    Ok(SolveReport {
        rate_total,
        rate_average: rate_total / n as f64,
        rate_per_stage,
        achieved,
        multipliers,
        schedule,
        realization: Some(realization),
        residuals,
        regime: Regime::Interior,
        oracle_gap: None,
    })
}

// ---------------------------------------------------------------------------
// Per-unit-time limit
// ---------------------------------------------------------------------------

/// Fixed point of the zero-rate covariance recursion `Q = A Q A^T + Qbar`,
/// when it exists (stable dynamics).
fn stationary_state_covariance(m: &SourceModel) -> Option<SymMatrix> {
    let qbar = qbar_schedule(m);
    let mut q = qbar.entries[0].clone();
    for _ in 0..200_000 {
        let next = q.congruence(&m.a[0]).add(&qbar.entries[0]);
        let delta = next.sub(&q).max_abs();
        let scale = next.max_abs().max(1.0);
        if !scale.is_finite() || scale > 1e12 {
            return None; // unstable dynamics, no fixed point
        }
        q = next;
        if delta <= 1e-14 * scale {
            return Some(q);
        }
    }
    None
}

/// Per-unit-time rate of a time-invariant model: calibrate the stationary
/// interior covariance against `trace(Sigma_i) = Delta_i` directly, then
/// `0.5 (logdet(A S A^T + Qbar) - logdet S)`.
pub fn per_unit_time_rate(m: &SourceModel, d: &DistortionSpec) -> Result<f64> {
    if m.n < 2 {
        return Err(Error::Validation(vec![
            "per-unit-time limit needs at least one transition (n >= 2)".to_string(),
        ]));
    }
    if !m.is_time_invariant() {
        return Err(Error::Validation(vec![
            "per-unit-time limit requires a time-invariant model".to_string(),
        ]));
    }
    let qbar = qbar_schedule(m).entries[0].clone();

    // Zero-rate clamp at the stationary point.
    if let Some(q_inf) = stationary_state_covariance(m) {
        if q_inf.block_trace(0, m.p1) <= d.delta1 && q_inf.block_trace(m.p1, m.p2) <= d.delta2 {
            return Ok(0.0);
        }
    }

    let stationary = |l1: f64, l2: f64| -> Result<SymMatrix> {
        let c = half_lambda_inverse(l1, l2, m.p1, m.p2);
        solve_quadratic_scaled(&c, &qbar)
    };

    let block_diag = qbar_is_block_diagonal(m);
    let (l1, l2) = if block_diag {
        let q1 = qbar.block(0, m.p1);
        let q2 = qbar.block(m.p1, m.p2);
        let l1 = bisect_lambda(
            "stationary lambda1",
            &mut |l| {
                solve_quadratic_scaled(&SymMatrix::scaled_identity(m.p1, 0.5 / l), &q1)
                    .map(|s| s.trace())
            },
            d.delta1,
        )?;
        let l2 = bisect_lambda(
            "stationary lambda2",
            &mut |l| {
                solve_quadratic_scaled(&SymMatrix::scaled_identity(m.p2, 0.5 / l), &q2)
                    .map(|s| s.trace())
            },
            d.delta2,
        )?;
        (l1, l2)
    } else {
        // coordinate bisection on the coupled stationary trace maps
        let mut l = [1.0, 1.0];
        for _ in 0..60 {
            l[0] = bisect_lambda(
                "stationary lambda1",
                &mut |x| stationary(x, l[1]).map(|s| s.block_trace(0, m.p1)),
                d.delta1,
            )?;
            l[1] = bisect_lambda(
                "stationary lambda2",
                &mut |x| stationary(l[0], x).map(|s| s.block_trace(m.p1, m.p2)),
                d.delta2,
            )?;
            let s = stationary(l[0], l[1])?;
            let r1 = (s.block_trace(0, m.p1) - d.delta1).abs();
            let r2 = (s.block_trace(m.p1, m.p2) - d.delta2).abs();
            if r1.max(r2) <= 1e-11 * d.delta1.max(d.delta2).max(1.0) {
                break;
            }
        }
        (l[0], l[1])
    };

    let sigma = stationary(l1, l2)?;
    let sigma_minus = sigma.congruence(&m.a[0]).add(&qbar);
    let margin = sigma_minus.sub(&sigma).min_eigenvalue();
    if margin <= STRICT_INTERIOR_TOL * sigma_minus.max_abs().max(1.0) {
        return Err(Error::BoundaryRegime { stage: 0 });
    }
    Ok(0.5 * (sigma_minus.logdet()? - sigma.logdet()?))
}
