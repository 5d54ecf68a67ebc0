//! Monte-Carlo validation of a synthesized realization: sampled state and
//! reproduction trajectories, empirical distortions, orthogonality of the
//! estimation error against past reproductions, and the causality structure.
//!
//! Sampling is reproducible: every path draws from its own ChaCha substream
//! (`stream = path index` under a shared seed), and all aggregations run in
//! a fixed order, so identical inputs give bit-identical results.

use crate::error::{Error, Result};
use crate::model::SourceModel;
use crate::numerics::{Mat, SymMatrix};
use crate::realization::RealizationSchedule;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

/// Sampled trajectories, flattened as `[path][stage][component]`.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub num_paths: usize,
    pub horizon: usize,
    /// Joint state dimension `p1 + p2`.
    pub dim: usize,
    pub p1: usize,
    pub p2: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub seed: u64,
}

impl PathEnsemble {
    #[inline]
    fn at(&self, path: usize, t: usize) -> usize {
        (path * self.horizon + t) * self.dim
    }

    pub fn x_at(&self, path: usize, t: usize) -> &[f64] {
        let base = self.at(path, t);
        &self.x[base..base + self.dim]
    }

    pub fn y_at(&self, path: usize, t: usize) -> &[f64] {
        let base = self.at(path, t);
        &self.y[base..base + self.dim]
    }
}

struct ChannelFactors {
    x1: Mat,
    w: Vec<Mat>,
    v: Vec<Mat>,
}

/// Generate one path into its slices (length `n * dim` each). The stream
/// index makes every path's draws independent of scheduling.
fn fill_path(
    m: &SourceModel,
    r: &RealizationSchedule,
    factors: &ChannelFactors,
    seed: u64,
    stream: u64,
    x: &mut [f64],
    y: &mut [f64],
) {
    let dim = m.state_dim();
    let qdim = m.noise_dim();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let draw = |len: usize, rng: &mut ChaCha12Rng| -> Vec<f64> {
        (0..len)
            .map(|_| StandardNormal.sample(rng))
            .collect::<Vec<f64>>()
    };

    let x0 = factors.x1.matvec(&draw(dim, &mut rng));
    x[..dim].copy_from_slice(&x0);

    for t in 0..m.n {
        let bt = t * dim;
        if t > 0 {
            let w = factors.w[t - 1].matvec(&draw(qdim, &mut rng));
            let ax = m.a[t - 1].matvec(&x[bt - dim..bt]);
            let bw = m.b[t - 1].matvec(&w);
            for i in 0..dim {
                x[bt + i] = ax[i] + bw[i];
            }
        }
        let v = factors.v[t].matvec(&draw(dim, &mut rng));
        let hx = r.h[t].matvec(&x[bt..bt + dim]);
        let fb = if t > 0 {
            r.feedback[t].matvec(&y[bt - dim..bt])
        } else {
            vec![0.0; dim]
        };
        for i in 0..dim {
            y[bt + i] = hx[i] + fb[i] + v[i];
        }
    }
}

/// Draw `N` joint trajectories of the source and the synthesized channel:
/// `x[t+1] = A x[t] + B w`, `y[t] = H x[t] + feedback * y[t-1] + v`.
pub fn sample_paths(
    m: &SourceModel,
    r: &RealizationSchedule,
    num_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    sample_paths_with_jobs(m, r, num_paths, seed, 1)
}

/// As `sample_paths`, generating path chunks on `jobs` worker threads.
/// Results are bit-identical for any worker count.
pub fn sample_paths_with_jobs(
    m: &SourceModel,
    r: &RealizationSchedule,
    num_paths: usize,
    seed: u64,
    jobs: usize,
) -> Result<PathEnsemble> {
    let dim = m.state_dim();
    let n = m.n;
    if r.h.len() != n {
        return Err(Error::Dimension(format!(
            "realization has {} stages, model has {n}",
            r.h.len()
        )));
    }

    // Factor every covariance once (negative eigenvalues floored at zero so
    // rank-deficient noise is legal).
    let factors = ChannelFactors {
        x1: m.q_x1.sqrt_factor_floored(),
        w: m.q_w.iter().map(|q| q.sqrt_factor_floored()).collect(),
        v: r.q_v.iter().map(|q| q.sqrt_factor_floored()).collect(),
    };

    let stride = n * dim;
    let mut x = vec![0.0; num_paths * stride];
    let mut y = vec![0.0; num_paths * stride];

    let jobs = jobs.max(1).min(num_paths.max(1));
    if jobs <= 1 {
        for path in 0..num_paths {
            let base = path * stride;
            fill_path(
                m,
                r,
                &factors,
                seed,
                path as u64,
                &mut x[base..base + stride],
                &mut y[base..base + stride],
            );
        }
    } else {
        let chunk_paths = num_paths.div_ceil(jobs);
        let chunk = chunk_paths * stride;
        std::thread::scope(|scope| {
            for (idx, (xc, yc)) in x.chunks_mut(chunk).zip(y.chunks_mut(chunk)).enumerate() {
                let factors = &factors;
                scope.spawn(move || {
                    let first = idx * chunk_paths;
                    for (p, (xs, ys)) in
                        xc.chunks_mut(stride).zip(yc.chunks_mut(stride)).enumerate()
                    {
                        fill_path(m, r, factors, seed, (first + p) as u64, xs, ys);
                    }
                });
            }
        });
    }

    Ok(PathEnsemble {
        num_paths,
        horizon: n,
        dim,
        p1: m.p1,
        p2: m.p2,
        x,
        y,
        seed,
    })
}

/// Add `coeff * x[t+1]` to every `y[t]`: an anticausal corruption used as a
/// negative control for the causality check.
pub fn apply_anticausal_corruption(e: &mut PathEnsemble, coeff: f64) {
    let dim = e.dim;
    for path in 0..e.num_paths {
        for t in 0..e.horizon.saturating_sub(1) {
            let src = e.at(path, t + 1);
            let dst = e.at(path, t);
            for i in 0..dim {
                let v = e.x[src + i];
                e.y[dst + i] += coeff * v;
            }
        }
    }
}

/// Sample mean and standard error of the mean over a slice of per-path
/// values (unbiased variance).
fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-stage empirical distortions for each process, with standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct DistortionReport {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub se1: Vec<f64>,
    pub se2: Vec<f64>,
    pub avg1: f64,
    pub avg2: f64,
}

pub fn empirical_distortion(e: &PathEnsemble) -> DistortionReport {
    let mut d1 = Vec::with_capacity(e.horizon);
    let mut d2 = Vec::with_capacity(e.horizon);
    let mut se1 = Vec::with_capacity(e.horizon);
    let mut se2 = Vec::with_capacity(e.horizon);
    let mut buf1 = vec![0.0; e.num_paths];
    let mut buf2 = vec![0.0; e.num_paths];
    for t in 0..e.horizon {
        for path in 0..e.num_paths {
            let x = e.x_at(path, t);
            let y = e.y_at(path, t);
            let mut s1 = 0.0;
            for i in 0..e.p1 {
                let diff = x[i] - y[i];
                s1 += diff * diff;
            }
            let mut s2 = 0.0;
            for i in e.p1..e.dim {
                let diff = x[i] - y[i];
                s2 += diff * diff;
            }
            buf1[path] = s1;
            buf2[path] = s2;
        }
        let (m1, s1) = mean_and_se(&buf1);
        let (m2, s2) = mean_and_se(&buf2);
        d1.push(m1);
        se1.push(s1);
        d2.push(m2);
        se2.push(s2);
    }
    let avg1 = d1.iter().sum::<f64>() / e.horizon as f64;
    let avg2 = d2.iter().sum::<f64>() / e.horizon as f64;
    DistortionReport {
        d1,
        d2,
        se1,
        se2,
        avg1,
        avg2,
    }
}

/// One `(t, s)` entry of the orthogonality report: the sample average of
/// `(x_t - y_t) y_s^T` per component, expressed in standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct OrthogonalityEntry {
    pub t: usize,
    pub s: usize,
    pub z: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OrthogonalityReport {
    pub entries: Vec<OrthogonalityEntry>,
    pub max_abs_z: f64,
}

/// Check `E{(X_t - Y_t) Y_s^T} = 0` for every `s <= t` in standard-error
/// units: the sampled, jointly Gaussian consequence of the conditional-mean
/// property of the optimal realization.
pub fn orthogonality_residuals(e: &PathEnsemble) -> OrthogonalityReport {
    let mut entries = Vec::new();
    let mut max_abs_z = 0.0f64;
    let mut products = vec![0.0; e.num_paths];
    for t in 0..e.horizon {
        for s in 0..=t {
            let mut z = vec![vec![0.0; e.dim]; e.dim];
            for i in 0..e.dim {
                for j in 0..e.dim {
                    for path in 0..e.num_paths {
                        let xt = e.x_at(path, t);
                        let yt = e.y_at(path, t);
                        let ys = e.y_at(path, s);
                        products[path] = (xt[i] - yt[i]) * ys[j];
                    }
                    let (mean, se) = mean_and_se(&products);
                    let zij = if se > 0.0 {
                        mean / se
                    } else if mean == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    };
                    z[i][j] = zij;
                    max_abs_z = max_abs_z.max(zij.abs());
                }
            }
            entries.push(OrthogonalityEntry { t, s, z });
        }
    }
    OrthogonalityReport { entries, max_abs_z }
}

/// Per-conditioning-stage causality diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct CausalityEntry {
    pub t: usize,
    pub max_abs_z: f64,
    /// Set when the conditioning covariance was numerically singular and the
    /// stage was skipped.
    pub singular_conditioning: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CausalityReport {
    pub entries: Vec<CausalityEntry>,
    pub max_abs_z: f64,
}

/// Joint sample covariance of the stacked vector `[x_1..x_n, y_1..y_n]`
/// (sample means removed). Layout: x-blocks first, then y-blocks.
fn joint_sample_covariance(e: &PathEnsemble) -> (Mat, Vec<f64>) {
    let w = 2 * e.horizon * e.dim;
    let mut mean = vec![0.0; w];
    let stack = |e: &PathEnsemble, path: usize, buf: &mut Vec<f64>| {
        buf.clear();
        for t in 0..e.horizon {
            buf.extend_from_slice(e.x_at(path, t));
        }
        for t in 0..e.horizon {
            buf.extend_from_slice(e.y_at(path, t));
        }
    };
    let mut buf = Vec::with_capacity(w);
    for path in 0..e.num_paths {
        stack(e, path, &mut buf);
        for (acc, v) in mean.iter_mut().zip(&buf) {
            *acc += v;
        }
    }
    let n = e.num_paths as f64;
    for v in mean.iter_mut() {
        *v /= n;
    }
    let mut cov = Mat::zeros(w, w);
    for path in 0..e.num_paths {
        stack(e, path, &mut buf);
        for i in 0..w {
            let di = buf[i] - mean[i];
            for j in i..w {
                cov[(i, j)] += di * (buf[j] - mean[j]);
            }
        }
    }
    for i in 0..w {
        for j in i..w {
            let v = cov[(i, j)] / (n - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (cov, mean)
}

fn submatrix(cov: &Mat, rows: &[usize], cols: &[usize]) -> Mat {
    let mut out = Mat::zeros(rows.len(), cols.len());
    for (i, &r) in rows.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            out[(i, j)] = cov[(r, c)];
        }
    }
    out
}

/// Verify the Markov consequence of causality: the partial covariance of
/// `Y_t` with `X_{t+1..n}` given `X_{1..t}` vanishes. Computed from the
/// joint sample covariance by Schur complement, reported in standard-error
/// units.
pub fn causality_check(e: &PathEnsemble) -> CausalityReport {
    let mut entries = Vec::new();
    let mut max_abs_z = 0.0f64;
    if e.horizon < 2 {
        return CausalityReport {
            entries,
            max_abs_z,
        };
    }
    let (cov, _) = joint_sample_covariance(e);
    let dim = e.dim;
    let x_base = 0;
    let y_base = e.horizon * dim;

    for t in 0..e.horizon - 1 {
        // U = y_t, Z = x_{0..=t}, V = x_{t+1..n} (0-based stages)
        let u_idx: Vec<usize> = (0..dim).map(|i| y_base + t * dim + i).collect();
        let z_idx: Vec<usize> = (0..(t + 1) * dim).map(|i| x_base + i).collect();
        let v_idx: Vec<usize> = ((t + 1) * dim..e.horizon * dim)
            .map(|i| x_base + i)
            .collect();

        let s_zz = SymMatrix::from_mat(&submatrix(&cov, &z_idx, &z_idx)).expect("square");
        let Ok(zz_inv) = s_zz.inverse_pd() else {
            entries.push(CausalityEntry {
                t,
                max_abs_z: f64::NAN,
                singular_conditioning: true,
            });
            continue;
        };
        let s_uz = submatrix(&cov, &u_idx, &z_idx);
        let s_vz = submatrix(&cov, &v_idx, &z_idx);
        let s_uv = submatrix(&cov, &u_idx, &v_idx);
        let s_uu = submatrix(&cov, &u_idx, &u_idx);
        let s_vv = submatrix(&cov, &v_idx, &v_idx);

        let uz_zzinv = s_uz.matmul(&zz_inv.to_mat());
        let partial_uv = s_uv.sub(&uz_zzinv.matmul(&s_vz.transpose()));
        let cond_uu = s_uu.sub(&uz_zzinv.matmul(&s_uz.transpose()));
        let vz_zzinv = s_vz.matmul(&zz_inv.to_mat());
        let cond_vv = s_vv.sub(&vz_zzinv.matmul(&s_vz.transpose()));

        let n = e.num_paths as f64;
        let mut stage_max = 0.0f64;
        for i in 0..u_idx.len() {
            for j in 0..v_idx.len() {
                let var_u = cond_uu[(i, i)].max(0.0);
                let var_v = cond_vv[(j, j)].max(0.0);
                let se = (var_u * var_v / n).sqrt();
                let z = if se > 0.0 {
                    partial_uv[(i, j)] / se
                } else if partial_uv[(i, j)] == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                };
                stage_max = stage_max.max(z.abs());
            }
        }
        max_abs_z = max_abs_z.max(stage_max);
        entries.push(CausalityEntry {
            t,
            max_abs_z: stage_max,
            singular_conditioning: false,
        });
    }
    CausalityReport { entries, max_abs_z }
}

/// Plug-in estimate of the total rate from sample conditional covariances:
/// `sum_t 0.5 (logdet Cov(X_t | Y^{t-1}) - logdet Cov(X_t | Y^t))`.
pub fn plug_in_rate(e: &PathEnsemble) -> Result<f64> {
    let (cov, _) = joint_sample_covariance(e);
    let dim = e.dim;
    let y_base = e.horizon * dim;

    let conditional = |x_idx: &[usize], y_count: usize| -> Result<SymMatrix> {
        let xx = SymMatrix::from_mat(&submatrix(&cov, x_idx, x_idx))?;
        if y_count == 0 {
            return Ok(xx);
        }
        let y_idx: Vec<usize> = (0..y_count * dim).map(|i| y_base + i).collect();
        let yy = SymMatrix::from_mat(&submatrix(&cov, &y_idx, &y_idx))?;
        let xy = submatrix(&cov, x_idx, &y_idx);
        let yy_pinv = yy.pinv(1e-10);
        let reduction = xy.matmul(&yy_pinv.to_mat()).matmul(&xy.transpose());
        SymMatrix::from_mat(&xx.to_mat().sub(&reduction))
    };

    let mut rate = 0.0;
    for t in 0..e.horizon {
        let x_idx: Vec<usize> = (0..dim).map(|i| t * dim + i).collect();
        let prior = conditional(&x_idx, t)?;
        let posterior = conditional(&x_idx, t + 1)?;
        rate += 0.5 * (prior.logdet()? - posterior.logdet()?);
    }
    Ok(rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kkt;
    use crate::model::{parse_problem, state_covariances};
    use crate::realization::{forward_chain, synthesize, total_rate};

    fn mc_problem(n: usize) -> (SourceModel, crate::model::DistortionSpec) {
        parse_problem(&format!(
            r#"{{"n": {n}, "p1": 1, "p2": 1, "q1": 1, "q2": 1,
                "A": [[0.9, 0.3], [0.3, 0.9]],
                "B": [[1.0, 0.0], [0.0, 1.0]],
                "Q_W": [[1.0, 0.0], [0.0, 1.0]],
                "Q_X1": [[1.0, 0.0], [0.0, 1.0]],
                "delta1": 0.3, "delta2": 0.3}}"#
        ))
        .unwrap()
    }

    fn zero_rate_realization(m: &SourceModel) -> (RealizationSchedule, Vec<SymMatrix>) {
        let prior = state_covariances(m);
        let sched = forward_chain(m, &prior).unwrap();
        (synthesize(&sched, m).unwrap(), prior)
    }

    #[test]
    fn degenerate_model_gives_zero_paths() {
        let (mut m, _) = mc_problem(3);
        m.q_x1 = SymMatrix::zeros(2);
        m.q_w = vec![SymMatrix::zeros(2); 2];
        let (r, _) = zero_rate_realization(&m);
        let e = sample_paths(&m, &r, 50, 9).unwrap();
        assert!(e.x.iter().all(|v| *v == 0.0));
        assert!(e.y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_rate_realization_reproduces_nothing() {
        let (m, _) = mc_problem(3);
        let (r, prior) = zero_rate_realization(&m);
        // H = 0 and Q_V = 0, so y is identically zero
        let e = sample_paths(&m, &r, 2000, 5).unwrap();
        assert!(e.y.iter().all(|v| *v == 0.0));
        // distortion at stage t is then the state second moment
        let rep = empirical_distortion(&e);
        for t in 0..3 {
            let expect = prior[t].block_trace(0, 1);
            assert!(
                (rep.d1[t] - expect).abs() <= 3.0 * rep.se1[t],
                "stage {t}: {} vs {expect} (se {})",
                rep.d1[t],
                rep.se1[t]
            );
        }
        // orthogonality residuals are exactly zero when y vanishes
        let orth = orthogonality_residuals(&e);
        assert_eq!(orth.max_abs_z, 0.0);
    }

    #[test]
    fn sampling_is_deterministic() {
        let (m, d) = mc_problem(3);
        let report = kkt::solve(&m, &d).unwrap();
        let r = report.realization.unwrap();
        let a = sample_paths(&m, &r, 500, 123).unwrap();
        let b = sample_paths(&m, &r, 500, 123).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        let c = sample_paths(&m, &r, 500, 124).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn parallel_sampling_is_bit_identical() {
        let (m, d) = mc_problem(4);
        let report = kkt::solve(&m, &d).unwrap();
        let r = report.realization.unwrap();
        let sequential = sample_paths(&m, &r, 1001, 9).unwrap();
        for jobs in [2, 3, 8] {
            let parallel = sample_paths_with_jobs(&m, &r, 1001, 9, jobs).unwrap();
            assert_eq!(sequential.x, parallel.x, "jobs {jobs}");
            assert_eq!(sequential.y, parallel.y, "jobs {jobs}");
        }
    }

    #[test]
    fn state_sample_covariance_matches_lyapunov() {
        let (m, _) = mc_problem(4);
        let (r, prior) = zero_rate_realization(&m);
        let e = sample_paths(&m, &r, 50_000, 77).unwrap();
        // sample covariance of x_t against the analytic recursion, in SE units
        for t in 0..4 {
            for i in 0..2 {
                let vals: Vec<f64> = (0..e.num_paths)
                    .map(|p| {
                        let x = e.x_at(p, t);
                        x[i] * x[i]
                    })
                    .collect();
                let (mean, se) = mean_and_se(&vals);
                let expect = prior[t][(i, i)];
                assert!(
                    (mean - expect).abs() <= 3.0 * se,
                    "t {t} i {i}: {mean} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn optimal_realization_passes_distortion_and_orthogonality() {
        let (m, d) = mc_problem(4);
        let report = kkt::solve(&m, &d).unwrap();
        let r = report.realization.unwrap();
        let e = sample_paths(&m, &r, 30_000, 7).unwrap();
        let rep = empirical_distortion(&e);
        for t in 0..4 {
            let expect1 = report.schedule.sigma[t].block_trace(0, 1);
            let expect2 = report.schedule.sigma[t].block_trace(1, 1);
            assert!(
                (rep.d1[t] - expect1).abs() <= 3.0 * rep.se1[t],
                "stage {t} d1 {} vs {expect1} se {}",
                rep.d1[t],
                rep.se1[t]
            );
            assert!(
                (rep.d2[t] - expect2).abs() <= 3.0 * rep.se2[t],
                "stage {t} d2"
            );
        }
        let orth = orthogonality_residuals(&e);
        assert!(orth.max_abs_z <= 3.5, "max orthogonality z {}", orth.max_abs_z);
        let caus = causality_check(&e);
        assert!(caus.max_abs_z <= 3.5, "max causality z {}", caus.max_abs_z);
    }

    #[test]
    fn mis_scaled_gain_fails_orthogonality() {
        let (m, d) = mc_problem(4);
        let report = kkt::solve(&m, &d).unwrap();
        let r = report.realization.unwrap().with_scaled_h(1.2, &m);
        let e = sample_paths(&m, &r, 30_000, 7).unwrap();
        let orth = orthogonality_residuals(&e);
        assert!(orth.max_abs_z > 5.0, "max z {}", orth.max_abs_z);
    }

    #[test]
    fn anticausal_corruption_fails_causality() {
        let (m, d) = mc_problem(4);
        let report = kkt::solve(&m, &d).unwrap();
        let r = report.realization.unwrap();
        let mut e = sample_paths(&m, &r, 30_000, 7).unwrap();
        apply_anticausal_corruption(&mut e, 0.5);
        let caus = causality_check(&e);
        assert!(caus.max_abs_z > 5.0, "max z {}", caus.max_abs_z);
    }

    #[test]
    fn causality_vacuous_for_single_stage() {
        let (m, d) = parse_problem(
            r#"{"n": 1, "p1": 1, "p2": 1, "q1": 1, "q2": 1,
                "Q_X1": [[4.0, 0.0], [0.0, 9.0]], "delta1": 1.0, "delta2": 1.0}"#,
        )
        .unwrap();
        let report = kkt::solve(&m, &d).unwrap();
        let r = report.realization.unwrap();
        let e = sample_paths(&m, &r, 1000, 3).unwrap();
        let caus = causality_check(&e);
        assert!(caus.entries.is_empty());
        assert_eq!(caus.max_abs_z, 0.0);
    }

    #[test]
    fn plug_in_rate_tracks_analytic_rate() {
        let (m, d) = mc_problem(4);
        let report = kkt::solve(&m, &d).unwrap();
        let r = report.realization.unwrap();
        let e = sample_paths(&m, &r, 100_000, 31).unwrap();
        let plug = plug_in_rate(&e).unwrap();
        let analytic = total_rate(&report.schedule).unwrap().total;
        let rel = (plug - analytic).abs() / analytic;
        assert!(rel <= 0.05, "plug-in {plug} vs analytic {analytic} (rel {rel})");
    }
}
