//! Blended generalised extreme value distribution.
//!
//! A GEV right tail is blended smoothly into a Gumbel left tail:
//!
//! `F(x) = F_gev(x)^p(x) * F_gum(x)^(1-p(x))`
//!
//! where the weight `p` rises from 0 to 1 across the window
//! `[q_gev(p_a), q_gev(p_b)]` as the Beta(5,5) CDF of the affinely mapped
//! coordinate, and the Gumbel is chosen to match the GEV CDF at both window
//! endpoints. Below the window the distribution is exactly Gumbel, above it
//! exactly GEV, which removes the finite lower endpoint of the `xi > 0` GEV
//! while leaving its tail untouched.
//!
//! Parameters come reparametrised as `(mu_alpha, s_beta, xi)`: `mu_alpha` is
//! the alpha-quantile and `s_beta` the `(1-beta/2, beta/2)` inter-quantile
//! spread, both of the underlying GEV.

use crate::{Error, Result};

/// Tail parameters below this are treated as the Gumbel limit.
const XI_TINY: f64 = 1e-9;

/// Quantile levels defining the reparametrisation and the blending window.
#[derive(Debug, Clone, Copy)]
pub struct BgevConfig {
    /// quantile level pinned by the location parameter
    pub alpha: f64,
    /// spread is the (1 - beta/2) minus (beta/2) quantile difference
    pub beta: f64,
    /// lower blending-window probability
    pub p_a: f64,
    /// upper blending-window probability
    pub p_b: f64,
}

impl Default for BgevConfig {
    fn default() -> Self {
        BgevConfig {
            alpha: 0.5,
            beta: 0.8,
            p_a: 0.05,
            p_b: 0.20,
        }
    }
}

impl BgevConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.alpha) || !in_unit(self.beta) || !in_unit(self.p_a) || !in_unit(self.p_b) {
            return Err(Error::invalid("bGEV probabilities must lie in (0, 1)"));
        }
        if self.p_a >= self.p_b {
            return Err(Error::invalid(format!(
                "blending window needs p_a < p_b, got [{}, {}]",
                self.p_a, self.p_b
            )));
        }
        Ok(())
    }
}

fn ell(p: f64) -> f64 {
    -(p.ln())
}

/// GEV quantile; `xi = 0` uses the Gumbel limit `mu - sigma ln ell_p`.
pub fn gev_quantile(mu: f64, sigma: f64, xi: f64, p: f64) -> f64 {
    let lp = ell(p);
    if xi.abs() < XI_TINY {
        mu - sigma * lp.ln()
    } else {
        mu + sigma * (lp.powf(-xi) - 1.0) / xi
    }
}

pub fn gev_cdf(x: f64, mu: f64, sigma: f64, xi: f64) -> f64 {
    let z = (x - mu) / sigma;
    if xi.abs() < XI_TINY {
        (-(-z).exp()).exp()
    } else {
        let t = 1.0 + xi * z;
        if t <= 0.0 {
            if xi > 0.0 {
                0.0
            } else {
                1.0
            }
        } else {
            (-t.powf(-1.0 / xi)).exp()
        }
    }
}

pub fn gev_logpdf(x: f64, mu: f64, sigma: f64, xi: f64) -> f64 {
    let z = (x - mu) / sigma;
    if xi.abs() < XI_TINY {
        -sigma.ln() - z - (-z).exp()
    } else {
        let t = 1.0 + xi * z;
        if t <= 0.0 {
            f64::NEG_INFINITY
        } else {
            -sigma.ln() - (1.0 + 1.0 / xi) * t.ln() - t.powf(-1.0 / xi)
        }
    }
}

fn gumbel_cdf(x: f64, mu: f64, sigma: f64) -> f64 {
    (-(-(x - mu) / sigma).exp()).exp()
}

fn gumbel_logpdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -sigma.ln() - z - (-z).exp()
}

/// Beta(5,5) CDF, the blending weight profile (closed-form polynomial).
fn blend_weight(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u >= 1.0 {
        1.0
    } else {
        let u5 = u.powi(5);
        630.0
            * (u5 / 5.0 - 2.0 * u5 * u / 3.0 + 6.0 * u5 * u * u / 7.0 - u5 * u.powi(3) / 2.0
                + u5 * u.powi(4) / 9.0)
    }
}

fn blend_weight_deriv(u: f64) -> f64 {
    if !(0.0..=1.0).contains(&u) {
        0.0
    } else {
        let v = u * (1.0 - u);
        630.0 * v.powi(4)
    }
}

/// Recover `(mu, sigma, xi)` from the quantile parametrisation: solves
/// `q_alpha = mu_alpha` and `q_{1-beta/2} - q_{beta/2} = s_beta`.
pub fn gev_from_quantile_param(
    mu_alpha: f64,
    s_beta: f64,
    xi: f64,
    alpha: f64,
    beta: f64,
) -> Result<(f64, f64, f64)> {
    if s_beta <= 0.0 || !s_beta.is_finite() {
        return Err(Error::invalid(format!("spread must be positive, got {s_beta}")));
    }
    if !(0.0..1.0).contains(&alpha) || !(0.0..1.0).contains(&beta) || alpha == 0.0 || beta == 0.0 {
        return Err(Error::invalid("alpha and beta must lie in (0, 1)"));
    }
    let (lo, hi) = (ell(beta / 2.0), ell(1.0 - beta / 2.0));
    let la = ell(alpha);
    let (mu, sigma) = if xi.abs() < XI_TINY {
        let sigma = s_beta / (lo.ln() - hi.ln());
        (mu_alpha + sigma * la.ln(), sigma)
    } else {
        let denom = hi.powf(-xi) - lo.powf(-xi);
        let sigma = s_beta * xi / denom;
        (mu_alpha - sigma * (la.powf(-xi) - 1.0) / xi, sigma)
    };
    if !mu.is_finite() || !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::invalid(format!(
            "quantile parametrisation produced invalid (mu, sigma) = ({mu}, {sigma})"
        )));
    }
    Ok((mu, sigma, xi))
}

/// Blended GEV with precomputed window and matched Gumbel.
#[derive(Debug, Clone)]
pub struct Bgev {
    mu: f64,
    sigma: f64,
    xi: f64,
    /// window `[a, b]` with the matched Gumbel; `None` in the Gumbel limit
    blend: Option<Blend>,
}

#[derive(Debug, Clone)]
struct Blend {
    a: f64,
    b: f64,
    gum_mu: f64,
    gum_sigma: f64,
}

impl Bgev {
    pub fn new(mu: f64, sigma: f64, xi: f64, cfg: &BgevConfig) -> Result<Self> {
        cfg.validate()?;
        if sigma <= 0.0 || !sigma.is_finite() {
            return Err(Error::invalid(format!("scale must be positive, got {sigma}")));
        }
        if xi < 0.0 || xi >= 1.0 {
            return Err(Error::invalid(format!("tail parameter must lie in [0, 1), got {xi}")));
        }
        let blend = if xi.abs() < XI_TINY {
            None
        } else {
            let a = gev_quantile(mu, sigma, xi, cfg.p_a);
            let b = gev_quantile(mu, sigma, xi, cfg.p_b);
            // Gumbel matching F at both endpoints:
            //   a - gmu = -gsigma ln ell_{p_a},  b - gmu = -gsigma ln ell_{p_b}
            let gum_sigma = (b - a) / (ell(cfg.p_a).ln() - ell(cfg.p_b).ln());
            let gum_mu = a + gum_sigma * ell(cfg.p_a).ln();
            Some(Blend {
                a,
                b,
                gum_mu,
                gum_sigma,
            })
        };
        Ok(Bgev {
            mu,
            sigma,
            xi,
            blend,
        })
    }

    pub fn from_quantile_param(
        mu_alpha: f64,
        s_beta: f64,
        xi: f64,
        cfg: &BgevConfig,
    ) -> Result<Self> {
        let (mu, sigma, xi) = gev_from_quantile_param(mu_alpha, s_beta, xi, cfg.alpha, cfg.beta)?;
        Bgev::new(mu, sigma, xi, cfg)
    }

    pub fn gev_params(&self) -> (f64, f64, f64) {
        (self.mu, self.sigma, self.xi)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match &self.blend {
            None => gumbel_cdf(x, self.mu, self.sigma),
            Some(bl) => {
                if x <= bl.a {
                    gumbel_cdf(x, bl.gum_mu, bl.gum_sigma)
                } else if x >= bl.b {
                    gev_cdf(x, self.mu, self.sigma, self.xi)
                } else {
                    let p = blend_weight((x - bl.a) / (bl.b - bl.a));
                    let lf = gev_cdf(x, self.mu, self.sigma, self.xi).ln();
                    let lg = gumbel_cdf(x, bl.gum_mu, bl.gum_sigma).ln();
                    (p * lf + (1.0 - p) * lg).exp()
                }
            }
        }
    }

    pub fn logpdf(&self, x: f64) -> f64 {
        match &self.blend {
            None => gumbel_logpdf(x, self.mu, self.sigma),
            Some(bl) => {
                if x <= bl.a {
                    gumbel_logpdf(x, bl.gum_mu, bl.gum_sigma)
                } else if x >= bl.b {
                    gev_logpdf(x, self.mu, self.sigma, self.xi)
                } else {
                    let u = (x - bl.a) / (bl.b - bl.a);
                    let p = blend_weight(u);
                    let dp = blend_weight_deriv(u) / (bl.b - bl.a);
                    let ff = gev_cdf(x, self.mu, self.sigma, self.xi);
                    let fg = gumbel_cdf(x, bl.gum_mu, bl.gum_sigma);
                    let log_f = p * ff.ln() + (1.0 - p) * fg.ln();
                    let dens_f = gev_logpdf(x, self.mu, self.sigma, self.xi).exp();
                    let dens_g = gumbel_logpdf(x, bl.gum_mu, bl.gum_sigma).exp();
                    let bracket =
                        dp * (ff.ln() - fg.ln()) + p * dens_f / ff + (1.0 - p) * dens_g / fg;
                    if bracket <= 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        log_f + bracket.ln()
                    }
                }
            }
        }
    }

    /// Quantile: closed form outside the window, bisection inside
    /// (the CDF is continuous and strictly increasing there).
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(0.0 < p && p < 1.0) {
            return Err(Error::invalid(format!("quantile level must lie in (0, 1), got {p}")));
        }
        match &self.blend {
            None => Ok(gev_quantile(self.mu, self.sigma, 0.0, p)),
            Some(bl) => {
                // window probabilities: F(a) = p_a and F(b) = p_b exactly
                let fa = self.cdf(bl.a);
                let fb = self.cdf(bl.b);
                if p <= fa {
                    Ok(gev_quantile(bl.gum_mu, bl.gum_sigma, 0.0, p))
                } else if p >= fb {
                    Ok(gev_quantile(self.mu, self.sigma, self.xi, p))
                } else {
                    let (mut lo, mut hi) = (bl.a, bl.b);
                    for _ in 0..200 {
                        let mid = 0.5 * (lo + hi);
                        if self.cdf(mid) < p {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                        if hi - lo <= 1e-14 * hi.abs().max(1.0) {
                            break;
                        }
                    }
                    Ok(0.5 * (lo + hi))
                }
            }
        }
    }
}

/// T-year return level: the `(1 - 1/T)` quantile of the blended GEV.
pub fn return_level(
    mu_alpha: f64,
    s_beta: f64,
    xi: f64,
    cfg: &BgevConfig,
    t_years: f64,
) -> Result<f64> {
    if !(t_years > 1.0) {
        return Err(Error::invalid(format!("return period must exceed 1 year, got {t_years}")));
    }
    Bgev::from_quantile_param(mu_alpha, s_beta, xi, cfg)?.quantile(1.0 - 1.0 / t_years)
}
