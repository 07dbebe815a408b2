//! Gaussian approximation of the latent field given hyperparameters.
//!
//! The joint posterior precision is `Q_prior + M' W M`, where M holds one
//! sparse row per likelihood observation and W the negated log-density
//! curvatures (floored at 1e-10: the bGEV log density is not globally
//! concave in the predictor, so Newton is safeguarded). The sparsity pattern
//! of the joint matrix is fixed per model, so the symbolic factorization is
//! done once and every (psi, Newton-iteration) pair only refills values.
//! Fixed effects occupy the last indices and are structurally coupled to
//! every field component, which keeps all prediction covariances inside the
//! factor pattern.

use std::collections::BTreeSet;

use crate::gmrf::{ar1_precision, kronecker_entries, spatial_precision, Ar1Spec, NonStatParams};
use crate::likelihoods::{d_log_density, log_density, LikelihoodFamily, Observation};
use crate::sparse::{cholesky, CholeskyFactor, SparseSym, SymbolicCholesky};
use crate::{Error, Result, N_MONTHS};

use super::{HyperVector, LatentModel, ObsRow, PrecisionSpec};

/// curvature floor: keeps `Q + M' W M` positive definite when a likelihood
/// row is locally convex in eta
const W_FLOOR: f64 = 1e-10;

const NEWTON_TOL: f64 = 1e-8;
const NEWTON_MAX_ITER: usize = 50;

/// Fixed joint sparsity pattern plus the slot maps that scatter prior and
/// observation contributions into the value array.
#[derive(Debug)]
pub struct JointAssembly {
    pub(crate) pattern: SparseSym,
    pub(crate) symbolic: std::sync::Arc<SymbolicCholesky>,
    /// position of each streamed Kronecker entry (SpatioTemporal) or each
    /// fixed-precision entry (Fixed)
    prior_slots: Vec<usize>,
    /// diagonal positions of the fixed-effect block
    fixed_diag_slots: Vec<usize>,
    /// per likelihood row: positions of all (p >= q) entry pairs
    row_pair_slots: Vec<Vec<usize>>,
    /// rows of the likelihood subset (indices into model.rows)
    pub(crate) lik_rows: Vec<usize>,
}

impl JointAssembly {
    pub(crate) fn build(
        spec: &PrecisionSpec,
        rows: &[ObsRow],
        n_z: usize,
        n_fixed: usize,
    ) -> Result<Self> {
        let dim = n_z + n_fixed;
        let mut pat: BTreeSet<(usize, usize)> = BTreeSet::new();
        let low = |i: usize, j: usize| if i >= j { (i, j) } else { (j, i) };

        match spec {
            PrecisionSpec::SpatioTemporal {
                fem,
                elevation,
                n_vertices,
            } => {
                // exemplar matrices fix the pattern; values are refilled per psi
                let qs = spatial_precision(fem, &NonStatParams::from_theta([0.0; 4], elevation))?;
                let qt = ar1_precision(&Ar1Spec { a: 0.5, n_t: N_MONTHS })?;
                debug_assert_eq!(qs.n(), *n_vertices);
                kronecker_entries(&qt, &qs, |i, j, _| {
                    pat.insert((i, j));
                });
            }
            PrecisionSpec::Fixed(q) => {
                for c in 0..q.n() {
                    for p in q.col_ptr()[c]..q.col_ptr()[c + 1] {
                        pat.insert((q.row_idx()[p], c));
                    }
                }
            }
        }
        // fixed effects: diagonal, mutual coupling, and structural coupling
        // to the whole field (keeps prediction covariances in-pattern)
        for a in 0..n_fixed {
            for b in 0..=a {
                pat.insert((n_z + a, n_z + b));
            }
            for j in 0..n_z {
                pat.insert((n_z + a, j));
            }
        }
        // observation cross-products
        for r in rows.iter().filter(|r| r.y.is_some()) {
            for (ai, &(p, _)) in r.entries.iter().enumerate() {
                for &(q, _) in &r.entries[..=ai] {
                    pat.insert(low(p, q));
                }
            }
        }

        let pattern = SparseSym::from_triplets(dim, pat.iter().map(|&(i, j)| (i, j, 0.0)));
        let position = |i: usize, j: usize| -> usize {
            pattern
                .position(i, j)
                .expect("pattern entry must exist by construction")
        };

        let mut prior_slots = Vec::new();
        match spec {
            PrecisionSpec::SpatioTemporal {
                fem,
                elevation,
                n_vertices,
            } => {
                let qs = spatial_precision(fem, &NonStatParams::from_theta([0.0; 4], elevation))?;
                let qt = ar1_precision(&Ar1Spec { a: 0.5, n_t: N_MONTHS })?;
                debug_assert_eq!(qs.n(), *n_vertices);
                kronecker_entries(&qt, &qs, |i, j, _| {
                    prior_slots.push(position(i, j));
                });
            }
            PrecisionSpec::Fixed(q) => {
                for c in 0..q.n() {
                    for p in q.col_ptr()[c]..q.col_ptr()[c + 1] {
                        prior_slots.push(position(q.row_idx()[p], c));
                    }
                }
            }
        }
        let fixed_diag_slots: Vec<usize> =
            (0..n_fixed).map(|k| position(n_z + k, n_z + k)).collect();
        let row_pair_slots: Vec<Vec<usize>> = rows
            .iter()
            .map(|r| {
                if r.y.is_none() {
                    return Vec::new();
                }
                let mut slots = Vec::with_capacity(r.entries.len() * (r.entries.len() + 1) / 2);
                for (ai, &(p, _)) in r.entries.iter().enumerate() {
                    for &(q, _) in &r.entries[..=ai] {
                        let (i, j) = low(p, q);
                        slots.push(position(i, j));
                    }
                }
                slots
            })
            .collect();
        let lik_rows: Vec<usize> = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.y.is_some())
            .map(|(i, _)| i)
            .collect();

        let pinned: Vec<usize> = (n_z..dim).collect();
        let symbolic = SymbolicCholesky::analyze(&pattern, &pinned);
        Ok(JointAssembly {
            pattern,
            symbolic,
            prior_slots,
            fixed_diag_slots,
            row_pair_slots,
            lik_rows,
        })
    }
}

/// Everything psi-dependent that the Newton iteration reuses: the likelihood
/// family, the prior values scattered into the joint layout, and the prior
/// log-determinant (via the Kronecker identity, so only the small factors
/// are ever factorized).
#[derive(Debug, Clone)]
pub struct PsiContext {
    pub psi: HyperVector,
    pub likelihood: LikelihoodFamily,
    pub logdet_prior: f64,
    base_values: Vec<f64>,
    q_t: Option<SparseSym>,
    q_s: Option<SparseSym>,
    q_fixed: Option<SparseSym>,
}

impl LatentModel {
    /// Prepare the psi-dependent pieces of the joint precision.
    pub fn psi_context(&self, psi: &HyperVector) -> Result<PsiContext> {
        if psi.family != self.family {
            return Err(Error::invalid(format!(
                "hyper vector family {:?} does not match model family {:?}",
                psi.family, self.family
            )));
        }
        let likelihood = psi.likelihood(&self.bgev_config);
        likelihood.validate()?;
        let mut base_values = vec![0.0; self.asm.pattern.nnz()];
        let (logdet_prior, q_t, q_s, q_fixed) = match &self.spec {
            PrecisionSpec::SpatioTemporal { fem, elevation, .. } => {
                let qs = spatial_precision(fem, &NonStatParams::from_theta(psi.theta(), elevation))?;
                let qt = ar1_precision(&Ar1Spec {
                    a: psi.a(),
                    n_t: N_MONTHS,
                })?;
                let mut slot = 0;
                kronecker_entries(&qt, &qs, |_, _, v| {
                    base_values[self.asm.prior_slots[slot]] += v;
                    slot += 1;
                });
                let logdet_qs = cholesky(&qs)?.logdet();
                let logdet_qt = cholesky(&qt)?.logdet();
                let logdet = qs.n() as f64 * logdet_qt + N_MONTHS as f64 * logdet_qs
                    + self.fixed_logdet;
                (logdet, Some(qt), Some(qs), None)
            }
            PrecisionSpec::Fixed(q) => {
                for (slot, &v) in self.asm.prior_slots.iter().zip(q.values()) {
                    base_values[*slot] += v;
                }
                let logdet = cholesky(q)?.logdet() + self.fixed_logdet;
                (logdet, None, None, Some(q.clone()))
            }
        };
        for (k, &slot) in self.asm.fixed_diag_slots.iter().enumerate() {
            let prec = if k == 0 {
                self.priors.intercept_precision
            } else {
                self.priors.gamma_precision
            };
            base_values[slot] += prec;
        }
        Ok(PsiContext {
            psi: psi.clone(),
            likelihood,
            logdet_prior,
            base_values,
            q_t,
            q_s,
            q_fixed,
        })
    }

    /// `Q_prior zeta` without forming the joint matrix (Kronecker action).
    pub(crate) fn prior_mul(&self, ctx: &PsiContext, zeta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_latent()];
        match (&ctx.q_t, &ctx.q_s, &ctx.q_fixed) {
            (Some(qt), Some(qs), None) => {
                let ns = qs.n();
                // columns of Z are the monthly blocks; (QT (x) QS) z via
                // W = QS Z then recombining with QT coefficients
                let mut w = vec![vec![0.0; ns]; N_MONTHS];
                for (k, wk) in w.iter_mut().enumerate() {
                    *wk = qs.mul_vec(&zeta[k * ns..(k + 1) * ns]);
                }
                for l in 0..N_MONTHS {
                    for p in qt.col_ptr()[l]..qt.col_ptr()[l + 1] {
                        let k = qt.row_idx()[p];
                        let v = qt.values()[p];
                        for i in 0..ns {
                            out[k * ns + i] += v * w[l][i];
                        }
                        if k != l {
                            for i in 0..ns {
                                out[l * ns + i] += v * w[k][i];
                            }
                        }
                    }
                }
            }
            (None, None, Some(q)) => {
                let z = &zeta[..q.n()];
                out[..q.n()].copy_from_slice(&q.mul_vec(z));
            }
            _ => unreachable!("inconsistent context"),
        }
        for k in 0..self.n_fixed {
            let prec = if k == 0 {
                self.priors.intercept_precision
            } else {
                self.priors.gamma_precision
            };
            out[self.n_z + k] += prec * zeta[self.n_z + k];
        }
        out
    }

    pub(crate) fn prior_quad(&self, ctx: &PsiContext, zeta: &[f64]) -> f64 {
        self.prior_mul(ctx, zeta)
            .iter()
            .zip(zeta)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub(crate) fn observation(&self, row: &ObsRow) -> Observation {
        Observation {
            y: row.y.unwrap_or(f64::NAN),
            trials: row.trials,
            elevation_km: row.elevation_km,
        }
    }
}

/// Per-row likelihood state at the current latent value.
struct LikState {
    loglik: f64,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

fn eval_rows(model: &LatentModel, ctx: &PsiContext, zeta: &[f64]) -> Result<LikState> {
    let mut loglik = 0.0;
    let n = model.asm.lik_rows.len();
    let mut d1 = vec![0.0; n];
    let mut d2 = vec![0.0; n];
    for (t, &ri) in model.asm.lik_rows.iter().enumerate() {
        let row = &model.rows[ri];
        let eta: f64 = row.entries.iter().map(|&(j, w)| w * zeta[j]).sum();
        let obs = model.observation(row);
        loglik += log_density(&ctx.likelihood, &obs, eta)?;
        let (g1, g2) = d_log_density(&ctx.likelihood, &obs, eta)?;
        d1[t] = g1;
        d2[t] = g2;
    }
    Ok(LikState { loglik, d1, d2 })
}

fn loglik_only(model: &LatentModel, ctx: &PsiContext, zeta: &[f64]) -> Result<f64> {
    let mut loglik = 0.0;
    for &ri in &model.asm.lik_rows {
        let row = &model.rows[ri];
        let eta: f64 = row.entries.iter().map(|&(j, w)| w * zeta[j]).sum();
        loglik += log_density(&ctx.likelihood, &model.observation(row), eta)?;
    }
    Ok(loglik)
}

/// Result of the Newton maximisation of `log pi(zeta | psi, y)`.
#[derive(Debug)]
pub struct GaussianApprox {
    pub mode: Vec<f64>,
    /// factor of the joint posterior precision at the mode
    pub factor: CholeskyFactor,
    pub logdet_h: f64,
    /// sum of log densities at the mode
    pub loglik: f64,
    /// zeta' Q_prior zeta at the mode
    pub prior_quad: f64,
    pub iterations: usize,
}

/// Safeguarded Newton iteration for the latent mode and curvature.
pub fn gaussian_approx(
    model: &LatentModel,
    ctx: &PsiContext,
    warm_start: Option<&[f64]>,
) -> Result<GaussianApprox> {
    let dim = model.n_latent();
    let mut zeta: Vec<f64> = match warm_start {
        Some(w) if w.len() == dim => w.to_vec(),
        _ => vec![0.0; dim],
    };
    let mut state = eval_rows(model, ctx, &zeta)?;
    let mut f_cur = -0.5 * model.prior_quad(ctx, &zeta) + state.loglik;
    if !f_cur.is_finite() {
        // a warm start outside the likelihood support; restart at the origin
        zeta = vec![0.0; dim];
        state = eval_rows(model, ctx, &zeta)?;
        f_cur = -0.5 * model.prior_quad(ctx, &zeta) + state.loglik;
        if !f_cur.is_finite() {
            return Err(Error::Optimizer(
                "objective non-finite at the origin".into(),
            ));
        }
    }

    let mut objectives: Vec<f64> = vec![f_cur];
    let mut values = vec![0.0; ctx.base_values.len()];
    for it in 0..NEWTON_MAX_ITER {
        // assemble H = Q_prior + M' W M at the current point
        values.copy_from_slice(&ctx.base_values);
        for (t, &ri) in model.asm.lik_rows.iter().enumerate() {
            let row = &model.rows[ri];
            let w = (-state.d2[t]).max(W_FLOOR);
            let slots = &model.asm.row_pair_slots[ri];
            let mut s = 0;
            for (ai, &(_, wa)) in row.entries.iter().enumerate() {
                for &(_, wb) in &row.entries[..=ai] {
                    values[slots[s]] += w * wa * wb;
                    s += 1;
                }
            }
        }
        let factor = model.asm.symbolic.factorize(&values)?;

        // gradient of the objective
        let mut grad = model.prior_mul(ctx, &zeta);
        for g in &mut grad {
            *g = -*g;
        }
        for (t, &ri) in model.asm.lik_rows.iter().enumerate() {
            for &(j, w) in &model.rows[ri].entries {
                grad[j] += w * state.d1[t];
            }
        }
        let delta = factor.solve(&grad);
        let delta_max = delta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        if delta_max < NEWTON_TOL {
            return Ok(GaussianApprox {
                logdet_h: factor.logdet(),
                mode: zeta,
                factor,
                loglik: state.loglik,
                prior_quad: model.prior_quad(ctx, &zeta),
                iterations: it,
            });
        }

        // step-halving line search on the objective
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = zeta
                .iter()
                .zip(&delta)
                .map(|(z, d)| z + step * d)
                .collect();
            match eval_rows(model, ctx, &trial) {
                Ok(trial_state) => {
                    let f_trial = -0.5 * model.prior_quad(ctx, &trial) + trial_state.loglik;
                    if f_trial.is_finite() && f_trial >= f_cur {
                        zeta = trial;
                        state = trial_state;
                        f_cur = f_trial;
                        accepted = true;
                        break;
                    }
                }
                Err(_) => {}
            }
            step *= 0.5;
        }
        objectives.push(f_cur);
        if !accepted {
            // no ascent direction left: accept as converged when the Newton
            // step is already small, otherwise report divergence
            if delta_max < 1e-6 {
                return Ok(GaussianApprox {
                    logdet_h: factor.logdet(),
                    mode: zeta,
                    factor,
                    loglik: state.loglik,
                    prior_quad: model.prior_quad(ctx, &zeta),
                    iterations: it,
                });
            }
            return Err(Error::NewtonDiverged {
                iterations: it,
                last: objectives.iter().rev().take(5).copied().collect(),
            });
        }
    }
    Err(Error::NewtonDiverged {
        iterations: NEWTON_MAX_ITER,
        last: objectives.iter().rev().take(5).copied().collect(),
    })
}

/// Log likelihood at an arbitrary latent value (used by test oracles).
pub fn log_likelihood_at(model: &LatentModel, ctx: &PsiContext, zeta: &[f64]) -> Result<f64> {
    loglik_only(model, ctx, zeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{FamilyKind, HyperVector, PriorSet};
    use crate::likelihoods::BgevConfig;
    use approx::assert_abs_diff_eq;

    /// Gaussian-likelihood toy model with fixed prior precision.
    fn gaussian_toy() -> (LatentModel, HyperVector) {
        // 3-dimensional latent, 5 observations of sums of components
        let q = SparseSym::from_triplets(
            3,
            vec![(0, 0, 2.0), (1, 1, 1.5), (2, 2, 1.0), (1, 0, 0.3), (2, 1, -0.2)],
        );
        let designs: Vec<Vec<(usize, f64)>> = vec![
            vec![(0, 1.0)],
            vec![(1, 1.0)],
            vec![(2, 1.0)],
            vec![(0, 0.5), (1, 0.5)],
            vec![(1, 0.7), (2, 0.3)],
        ];
        let ys = [0.8, -0.3, 1.2, 0.5, 0.1];
        let rows: Vec<ObsRow> = designs
            .into_iter()
            .zip(ys)
            .map(|(entries, y)| ObsRow {
                y: Some(y),
                trials: 0,
                elevation_km: 0.0,
                entries,
                station: 0,
                year: 0,
                month: 1,
            })
            .collect();
        let model = LatentModel::from_fixed_prior(
            q,
            rows,
            FamilyKind::Gaussian,
            PriorSet::default(),
            BgevConfig::default(),
        )
        .unwrap();
        // log precision 0 -> unit noise precision
        let psi = HyperVector::new(FamilyKind::Gaussian, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        (model, psi)
    }

    #[test]
    fn gaussian_case_matches_generalized_least_squares() {
        let (model, psi) = gaussian_toy();
        let ctx = model.psi_context(&psi).unwrap();
        let ga = gaussian_approx(&model, &ctx, None).unwrap();
        // dense closed form: (Q + M'M)^{-1} M'y with unit noise precision
        let mut h = model.asm.pattern.to_dense();
        h.fill(0.0);
        let q = match &model.spec {
            PrecisionSpec::Fixed(q) => q.to_dense(),
            _ => unreachable!(),
        };
        h += q;
        let mut rhs = nalgebra::DVector::zeros(3);
        for row in model.rows() {
            let mut m = nalgebra::DVector::zeros(3);
            for &(j, w) in &row.entries {
                m[j] = w;
            }
            h += &m * m.transpose();
            rhs += m * row.y.unwrap();
        }
        let mean = h.clone().try_inverse().unwrap() * rhs;
        for j in 0..3 {
            assert_abs_diff_eq!(ga.mode[j], mean[j], epsilon = 1e-8);
        }
        // quadratic objective: Newton reaches the mode immediately
        assert!(ga.iterations <= 2, "took {} iterations", ga.iterations);
        // curvature matches the dense Hessian determinant
        assert_abs_diff_eq!(
            ga.logdet_h,
            h.determinant().ln(),
            epsilon = 1e-8
        );
    }

    #[test]
    fn zero_observations_mode_is_prior() {
        let q = SparseSym::from_triplets(2, vec![(0, 0, 1.3), (1, 1, 0.9), (1, 0, 0.2)]);
        let model = LatentModel::from_fixed_prior(
            q.clone(),
            vec![],
            FamilyKind::Gaussian,
            PriorSet::default(),
            BgevConfig::default(),
        )
        .unwrap();
        let psi =
            HyperVector::new(FamilyKind::Gaussian, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.5]).unwrap();
        let ctx = model.psi_context(&psi).unwrap();
        let ga = gaussian_approx(&model, &ctx, None).unwrap();
        assert_eq!(ga.mode, vec![0.0, 0.0]);
        assert_abs_diff_eq!(ga.logdet_h, cholesky(&q).unwrap().logdet(), epsilon = 1e-12);
    }

    #[test]
    fn binomial_scalar_mode_matches_golden_section() {
        // one-dimensional latent with a binomial likelihood
        let q = SparseSym::from_triplets(1, vec![(0, 0, 0.8)]);
        let rows = vec![ObsRow {
            y: Some(7.0),
            trials: 20,
            elevation_km: 0.0,
            entries: vec![(0, 1.0)],
            station: 0,
            year: 0,
            month: 1,
        }];
        let model = LatentModel::from_fixed_prior(
            q,
            rows,
            FamilyKind::Binomial,
            PriorSet::default(),
            BgevConfig::default(),
        )
        .unwrap();
        let psi = HyperVector::new(FamilyKind::Binomial, vec![0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let ctx = model.psi_context(&psi).unwrap();
        let ga = gaussian_approx(&model, &ctx, None).unwrap();

        // golden-section oracle on the scalar objective
        let obj = |z: f64| -> f64 {
            let obs = Observation {
                y: 7.0,
                trials: 20,
                elevation_km: 0.0,
            };
            -0.5 * 0.8 * z * z + log_density(&ctx.likelihood, &obs, z).unwrap()
        };
        let (mut lo, mut hi) = (-5.0, 5.0);
        let phi = (5.0f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let x1 = hi - phi * (hi - lo);
            let x2 = lo + phi * (hi - lo);
            if obj(x1) < obj(x2) {
                lo = x1;
            } else {
                hi = x2;
            }
        }
        let oracle = 0.5 * (lo + hi);
        assert_abs_diff_eq!(ga.mode[0], oracle, epsilon = 1e-8);
    }

    #[test]
    fn bgev_curvature_floor_engages() {
        // the bGEV log density has convex stretches in eta; the safeguard
        // keeps the working precision positive
        let q = SparseSym::from_triplets(1, vec![(0, 0, 0.05)]);
        let rows = vec![ObsRow {
            y: Some(8.0),
            trials: 0,
            elevation_km: 0.5,
            entries: vec![(0, 1.0)],
            station: 0,
            year: 0,
            month: 1,
        }];
        let model = LatentModel::from_fixed_prior(
            q,
            rows,
            FamilyKind::Bgev,
            PriorSet::default(),
            BgevConfig::default(),
        )
        .unwrap();
        let mut vals = vec![0.0; 8];
        vals[1] = crate::inference::xi_to_internal(0.2);
        vals[7] = 0.5;
        let psi = HyperVector::new(FamilyKind::Bgev, vals).unwrap();
        let ctx = model.psi_context(&psi).unwrap();
        // far to the right of the observation the density is convex in eta
        let (_, d2) = d_log_density(
            &ctx.likelihood,
            &Observation {
                y: 8.0,
                trials: 0,
                elevation_km: 0.5,
            },
            20.0,
        )
        .unwrap();
        assert!(d2 > 0.0, "expected convex stretch, got d2 = {d2}");
        // Newton from a warm start inside that stretch still converges
        let ga = gaussian_approx(&model, &ctx, Some(&[20.0])).unwrap();
        assert!(ga.mode[0].is_finite());
        let (_, d2_mode) = d_log_density(
            &ctx.likelihood,
            &Observation {
                y: 8.0,
                trials: 0,
                elevation_km: 0.5,
            },
            ga.mode[0],
        )
        .unwrap();
        assert!(d2_mode < 0.0, "mode should sit in a concave region");
    }
}
