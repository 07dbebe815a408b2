//! Observation models: log-densities and their first two derivatives in the
//! linear predictor, as the Newton inner loop of the Laplace approximation
//! needs them.
//!
//! Links are fixed per family: log for the gamma mean and the negative
//! binomial mean, logit for the binomial probability, identity for the bGEV
//! location (the predictor is the alpha-quantile itself) and for the
//! Gaussian mean. The Gaussian family (known noise precision) exists because
//! the whole Laplace pipeline is exact for it, which the test suites exploit.

pub mod bgev;

pub use bgev::{gev_from_quantile_param, return_level, Bgev, BgevConfig};

use statrs::function::gamma::ln_gamma;

use crate::{Error, Result};

/// Family hyperparameters (per-observation data lives in [`Observation`]).
#[derive(Debug, Clone)]
pub enum LikelihoodFamily {
    /// mean exp(eta), shape phi, rate phi/mean
    Gamma(GammaHyper),
    /// location parameter (alpha-quantile) = eta, elevation-driven spread
    Bgev(BgevHyper),
    /// mean exp(eta), dispersion n: variance mu + mu^2/n
    NegBinomial(NegBinHyper),
    /// success probability logistic(eta), trials from the observation
    Binomial,
    /// identity link, known noise precision
    Gaussian(GaussianHyper),
}

#[derive(Debug, Clone, Copy)]
pub struct GammaHyper {
    pub phi: f64,
}

#[derive(Debug, Clone)]
pub struct BgevHyper {
    /// log spread at elevation zero
    pub log_spread_intercept: f64,
    /// elevation coefficient of the log spread
    pub beta1: f64,
    /// tail parameter, [0, 0.5)
    pub xi: f64,
    pub config: BgevConfig,
}

impl BgevHyper {
    /// `s_beta(s) = exp(intercept + beta1 x(s))`.
    pub fn spread_at(&self, elevation_km: f64) -> f64 {
        (self.log_spread_intercept + self.beta1 * elevation_km).exp()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NegBinHyper {
    pub n_disp: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GaussianHyper {
    pub precision: f64,
}

/// One observation: the response plus whatever per-site information the
/// family needs (binomial trials, bGEV site elevation).
#[derive(Debug, Clone, Copy)]
pub struct Observation {
    pub y: f64,
    /// binomial trial count (days observed); ignored elsewhere
    pub trials: u32,
    /// site elevation in km; enters the bGEV spread
    pub elevation_km: f64,
}

impl Observation {
    pub fn plain(y: f64) -> Self {
        Observation {
            y,
            trials: 0,
            elevation_km: 0.0,
        }
    }
}

impl LikelihoodFamily {
    pub fn validate(&self) -> Result<()> {
        match self {
            LikelihoodFamily::Gamma(h) if !(h.phi > 0.0 && h.phi.is_finite()) => {
                Err(Error::invalid(format!("gamma precision must be positive, got {}", h.phi)))
            }
            LikelihoodFamily::NegBinomial(h) if !(h.n_disp > 0.0 && h.n_disp.is_finite()) => {
                Err(Error::invalid(format!("dispersion must be positive, got {}", h.n_disp)))
            }
            LikelihoodFamily::Gaussian(h) if !(h.precision > 0.0 && h.precision.is_finite()) => {
                Err(Error::invalid(format!("noise precision must be positive, got {}", h.precision)))
            }
            LikelihoodFamily::Bgev(h) => {
                h.config.validate()?;
                if !(0.0..0.5).contains(&h.xi) {
                    return Err(Error::invalid(format!("xi must lie in [0, 0.5), got {}", h.xi)));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LikelihoodFamily::Gamma(_) => "gamma",
            LikelihoodFamily::Bgev(_) => "bgev",
            LikelihoodFamily::NegBinomial(_) => "nbinomial",
            LikelihoodFamily::Binomial => "binomial",
            LikelihoodFamily::Gaussian(_) => "gaussian",
        }
    }
}

/// numerically safe ln(a + e^eta)
fn ln_a_plus_exp(a: f64, eta: f64) -> f64 {
    let la = a.ln();
    let m = la.max(eta);
    m + ((la - m).exp() + (eta - m).exp()).ln()
}

/// ln(1 + e^eta)
fn softplus(eta: f64) -> f64 {
    if eta > 35.0 {
        eta
    } else if eta < -35.0 {
        eta.exp()
    } else {
        eta.exp().ln_1p()
    }
}

fn logistic(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

/// Log density (or mass) of `y` given linear predictor `eta`.
pub fn log_density(family: &LikelihoodFamily, obs: &Observation, eta: f64) -> Result<f64> {
    family.validate()?;
    let y = obs.y;
    match family {
        LikelihoodFamily::Gamma(h) => {
            if !(y > 0.0) {
                return Err(Error::Support(format!("gamma requires y > 0, got {y}")));
            }
            let phi = h.phi;
            // mean exp(eta): log f = phi ln phi - phi eta - lnG(phi)
            //                        + (phi-1) ln y - phi y exp(-eta)
            let log_rate_term = (y.ln() - eta).min(690.0).exp();
            Ok(phi * phi.ln() - phi * eta - ln_gamma(phi) + (phi - 1.0) * y.ln()
                - phi * log_rate_term)
        }
        LikelihoodFamily::NegBinomial(h) => {
            if y < 0.0 || y.fract() != 0.0 {
                return Err(Error::Support(format!(
                    "negative binomial requires integer y >= 0, got {y}"
                )));
            }
            let n = h.n_disp;
            Ok(ln_gamma(y + n) - ln_gamma(n) - ln_gamma(y + 1.0) + n * n.ln() + y * eta
                - (n + y) * ln_a_plus_exp(n, eta))
        }
        LikelihoodFamily::Binomial => {
            let n = obs.trials as f64;
            if y < 0.0 || y > n || y.fract() != 0.0 {
                return Err(Error::Support(format!(
                    "binomial requires integer 0 <= y <= {n}, got {y}"
                )));
            }
            Ok(ln_gamma(n + 1.0) - ln_gamma(y + 1.0) - ln_gamma(n - y + 1.0) + y * eta
                - n * softplus(eta))
        }
        LikelihoodFamily::Bgev(h) => {
            let s_beta = h.spread_at(obs.elevation_km);
            let d = Bgev::from_quantile_param(eta, s_beta, h.xi, &h.config)?;
            Ok(d.logpdf(y))
        }
        LikelihoodFamily::Gaussian(h) => {
            let lambda = h.precision;
            let r = y - eta;
            Ok(0.5 * (lambda.ln() - (2.0 * std::f64::consts::PI).ln()) - 0.5 * lambda * r * r)
        }
    }
}

/// First and second derivative of [`log_density`] in `eta`. Analytic where
/// closed-form; central finite differences with step `1e-5 max(1, |eta|)`
/// for the bGEV.
pub fn d_log_density(family: &LikelihoodFamily, obs: &Observation, eta: f64) -> Result<(f64, f64)> {
    family.validate()?;
    let y = obs.y;
    match family {
        LikelihoodFamily::Gamma(h) => {
            if !(y > 0.0) {
                return Err(Error::Support(format!("gamma requires y > 0, got {y}")));
            }
            let phi = h.phi;
            let ye = (y.ln() - eta).min(690.0).exp();
            Ok((phi * (ye - 1.0), -phi * ye))
        }
        LikelihoodFamily::NegBinomial(h) => {
            if y < 0.0 || y.fract() != 0.0 {
                return Err(Error::Support(format!(
                    "negative binomial requires integer y >= 0, got {y}"
                )));
            }
            let n = h.n_disp;
            // p = e^eta / (n + e^eta), stable both ways
            let p = 1.0 / (1.0 + (n.ln() - eta).min(690.0).exp());
            Ok((y - (n + y) * p, -(n + y) * p * (1.0 - p)))
        }
        LikelihoodFamily::Binomial => {
            let n = obs.trials as f64;
            if y < 0.0 || y > n || y.fract() != 0.0 {
                return Err(Error::Support(format!(
                    "binomial requires integer 0 <= y <= {n}, got {y}"
                )));
            }
            let p = logistic(eta);
            Ok((y - n * p, -n * p * (1.0 - p)))
        }
        LikelihoodFamily::Bgev(_) => {
            let h = 1e-5 * eta.abs().max(1.0);
            let fp = log_density(family, obs, eta + h)?;
            let fm = log_density(family, obs, eta - h)?;
            let f0 = log_density(family, obs, eta)?;
            Ok(((fp - fm) / (2.0 * h), (fp - 2.0 * f0 + fm) / (h * h)))
        }
        LikelihoodFamily::Gaussian(h) => Ok((h.precision * (y - eta), -h.precision)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// 5-point central stencils: ~1e-9 relative accuracy, independent of the
    /// analytic implementations and of the pinned 3-point bGEV step.
    fn stencil5(f: impl Fn(f64) -> f64, x: f64) -> (f64, f64) {
        let h = 1e-3 * x.abs().max(1.0);
        let (f2m, fm, f0, fp, f2p) = (f(x - 2.0 * h), f(x - h), f(x), f(x + h), f(x + 2.0 * h));
        let d1 = (f2m - 8.0 * fm + 8.0 * fp - f2p) / (12.0 * h);
        let d2 = (-f2m + 16.0 * fm - 30.0 * f0 + 16.0 * fp - f2p) / (12.0 * h * h);
        (d1, d2)
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn gamma_shape_one_is_exponential() {
        let fam = LikelihoodFamily::Gamma(GammaHyper { phi: 1.0 });
        let ld = log_density(&fam, &Observation::plain(1.0), 0.0).unwrap();
        assert_abs_diff_eq!(ld, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn negbin_size_one_is_geometric() {
        let fam = LikelihoodFamily::NegBinomial(NegBinHyper { n_disp: 1.0 });
        let ld = log_density(&fam, &Observation::plain(0.0), 0.0).unwrap();
        assert_abs_diff_eq!(ld, 0.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn binomial_closed_form() {
        let fam = LikelihoodFamily::Binomial;
        let obs = Observation {
            y: 15.0,
            trials: 30,
            elevation_km: 0.0,
        };
        let ld = log_density(&fam, &obs, 0.0).unwrap();
        let choose = ln_gamma(31.0) - 2.0 * ln_gamma(16.0);
        assert_abs_diff_eq!(ld, choose + 30.0 * 0.5f64.ln(), epsilon = 1e-10);
    }

    #[test]
    fn binomial_score_zero_at_mle() {
        // y = N logistic(eta): at eta = 0 that is N/2, an attainable count
        let fam = LikelihoodFamily::Binomial;
        let obs = Observation {
            y: 20.0,
            trials: 40,
            elevation_km: 0.0,
        };
        let (d1, d2) = d_log_density(&fam, &obs, 0.0).unwrap();
        assert_abs_diff_eq!(d1, 0.0, epsilon = 1e-12);
        assert!(d2 < 0.0);
    }

    #[test]
    fn gamma_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let phi = rng.gen_range(0.3..8.0);
            let fam = LikelihoodFamily::Gamma(GammaHyper { phi });
            let y = rng.gen_range(0.05..30.0);
            let eta = rng.gen_range(-3.0..3.5);
            let obs = Observation::plain(y);
            let (d1, d2) = d_log_density(&fam, &obs, eta).unwrap();
            let (f1, f2) = stencil5(|e| log_density(&fam, &obs, e).unwrap(), eta);
            assert!(rel_close(d1, f1, 1e-6), "gamma d1 {d1} vs {f1}");
            assert!(rel_close(d2, f2, 1e-6), "gamma d2 {d2} vs {f2}");
        }
    }

    #[test]
    fn negbin_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(0.5..25.0);
            let fam = LikelihoodFamily::NegBinomial(NegBinHyper { n_disp: n });
            let y = rng.gen_range(0..40) as f64;
            let eta = rng.gen_range(-3.0..3.5);
            let obs = Observation::plain(y);
            let (d1, d2) = d_log_density(&fam, &obs, eta).unwrap();
            let (f1, f2) = stencil5(|e| log_density(&fam, &obs, e).unwrap(), eta);
            assert!(rel_close(d1, f1, 1e-6), "negbin d1 {d1} vs {f1}");
            assert!(rel_close(d2, f2, 1e-6), "negbin d2 {d2} vs {f2}");
        }
    }

    #[test]
    fn bgev_fd_derivatives_near_independent_stencil() {
        // the implementation is pinned to 3-point differences with step
        // 1e-5 max(1,|eta|); compare against the 5-point stencil at the
        // 3-point noise floor
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fam = LikelihoodFamily::Bgev(BgevHyper {
            log_spread_intercept: 0.3,
            beta1: 0.2,
            xi: 0.15,
            config: BgevConfig::default(),
        });
        for _ in 0..100 {
            let eta = rng.gen_range(-1.0..4.0);
            let obs = Observation {
                y: eta + rng.gen_range(-1.5..4.0),
                trials: 0,
                elevation_km: rng.gen_range(0.0..2.0),
            };
            let (d1, d2) = d_log_density(&fam, &obs, eta).unwrap();
            let (f1, f2) = stencil5(|e| log_density(&fam, &obs, e).unwrap(), eta);
            assert!(rel_close(d1, f1, 2e-4), "bgev d1 {d1} vs {f1}");
            assert!(rel_close(d2, f2, 2e-4), "bgev d2 {d2} vs {f2}");
        }
    }

    #[test]
    fn binomial_curvature_nonpositive_everywhere() {
        let fam = LikelihoodFamily::Binomial;
        let obs = Observation {
            y: 3.0,
            trials: 10,
            elevation_km: 0.0,
        };
        for k in -40..=40 {
            let (_, d2) = d_log_density(&fam, &obs, k as f64 / 4.0).unwrap();
            assert!(d2 <= 0.0);
        }
    }

    #[test]
    fn support_violations_error() {
        let gamma = LikelihoodFamily::Gamma(GammaHyper { phi: 2.0 });
        assert!(log_density(&gamma, &Observation::plain(0.0), 0.0).is_err());
        assert!(log_density(&gamma, &Observation::plain(-1.0), 0.0).is_err());
        let nb = LikelihoodFamily::NegBinomial(NegBinHyper { n_disp: 2.0 });
        assert!(log_density(&nb, &Observation::plain(1.5), 0.0).is_err());
        let bin = LikelihoodFamily::Binomial;
        let obs = Observation {
            y: 11.0,
            trials: 10,
            elevation_km: 0.0,
        };
        assert!(log_density(&bin, &obs, 0.0).is_err());
    }

    #[test]
    fn densities_normalize() {
        // gamma: Simpson quadrature over y
        let fam = LikelihoodFamily::Gamma(GammaHyper { phi: 2.5 });
        let eta = 0.4;
        let (lo, hi, n) = (1e-8, 60.0, 60_001);
        let h = (hi - lo) / (n - 1) as f64;
        let mut total = 0.0;
        for k in 0..n {
            let y = lo + k as f64 * h;
            let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
            total += w * log_density(&fam, &Observation::plain(y), eta).unwrap().exp();
        }
        assert_abs_diff_eq!(total * h, 1.0, epsilon = 1e-4);

        // negative binomial and binomial: direct summation
        let nb = LikelihoodFamily::NegBinomial(NegBinHyper { n_disp: 3.0 });
        let s: f64 = (0..4000)
            .map(|y| log_density(&nb, &Observation::plain(y as f64), 1.2).unwrap().exp())
            .sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-4);

        let bin = LikelihoodFamily::Binomial;
        let s: f64 = (0..=25)
            .map(|y| {
                let obs = Observation {
                    y: y as f64,
                    trials: 25,
                    elevation_km: 0.0,
                };
                log_density(&bin, &obs, -0.7).unwrap().exp()
            })
            .sum();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-10);

        // gaussian: Simpson quadrature
        let g = LikelihoodFamily::Gaussian(GaussianHyper { precision: 2.0 });
        let (lo, hi, n) = (-8.0, 8.0, 16_001);
        let h = (hi - lo) / (n - 1) as f64;
        let mut total = 0.0;
        for k in 0..n {
            let y = lo + k as f64 * h;
            let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
            total += w * log_density(&g, &Observation::plain(y), 0.0).unwrap().exp();
        }
        assert_abs_diff_eq!(total * h, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn bgev_spread_uses_elevation() {
        let h = BgevHyper {
            log_spread_intercept: 0.5,
            beta1: 0.3,
            xi: 0.1,
            config: BgevConfig::default(),
        };
        assert_abs_diff_eq!(h.spread_at(0.0), 0.5f64.exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(h.spread_at(2.0), 1.1f64.exp(), epsilon = 1e-12);
    }
}
