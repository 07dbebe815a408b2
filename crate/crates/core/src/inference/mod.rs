//! Nested Laplace inference for the latent Gaussian model.
//!
//! The latent vector stacks the twelve monthly field blocks then the fixed
//! effects (intercept, centred longitude, centred latitude, elevation):
//! `zeta = (z_1, ..., z_12, alpha, gamma1, gamma2, gamma3)`. Given a
//! hyperparameter vector psi, [`gauss::gaussian_approx`] maximises
//! `log pi(zeta | psi) + sum log pi(y | zeta, psi)` by safeguarded Newton
//! iteration; [`hyper::log_hyper_posterior`] turns that into the Laplace
//! approximation of `log pi(psi | y)`; [`hyper::optimize_hyper`] climbs it
//! with a simplex search and integrates over a cross-pattern grid around the
//! mode. Latent posterior marginals are Gaussian mixtures over the grid.

pub mod gauss;
pub mod hyper;
pub mod optim;

pub use gauss::{gaussian_approx, GaussianApprox, PsiContext};
pub use hyper::{log_hyper_posterior, optimize_hyper, Exploration, FitOptions};

use serde::{Deserialize, Serialize};

use crate::geodata::StationRecord;
use crate::gmrf::FemMatrices;
use crate::likelihoods::{
    BgevConfig, BgevHyper, GammaHyper, GaussianHyper, LikelihoodFamily, NegBinHyper,
};
use crate::mesh::{projector, TriangleMesh};
use crate::sparse::SparseSym;
use crate::{Error, Result, N_MONTHS};

/// Gaussian prior precisions/sds; every hyper prior lives on its internal
/// (log or transformed) scale.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PriorSet {
    /// intercept precision (stand-in for the improper flat prior)
    pub intercept_precision: f64,
    /// precision of each covariate coefficient
    pub gamma_precision: f64,
    /// sd of each theta weight (unit precision by default)
    pub theta_sd: f64,
    /// sd of log((1+a)/(1-a))
    pub a_transform_sd: f64,
    /// sd of the remaining family hyperparameters on internal scales
    pub hyper_sd: f64,
}

impl Default for PriorSet {
    fn default() -> Self {
        PriorSet {
            intercept_precision: 1e-9,
            gamma_precision: 0.001,
            theta_sd: 1.0,
            a_transform_sd: 2.6,
            hyper_sd: 10.0,
        }
    }
}

/// a -> log((1+a)/(1-a))
pub fn a_to_internal(a: f64) -> f64 {
    ((1.0 + a) / (1.0 - a)).ln()
}

/// inverse of [`a_to_internal`]
pub fn a_from_internal(t: f64) -> f64 {
    (t / 2.0).tanh()
}

/// xi in [0, 0.5) -> logit(xi / 0.5)
pub fn xi_to_internal(xi: f64) -> f64 {
    (xi / (0.5 - xi)).ln()
}

pub fn xi_from_internal(t: f64) -> f64 {
    0.5 / (1.0 + (-t).exp())
}

/// Observation families the model can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FamilyKind {
    Gamma,
    Bgev,
    NegBinomial,
    Binomial,
    Gaussian,
}

/// Precipitation scenarios and their fixed family pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// monthly mean precipitation (gamma)
    Mean,
    /// monthly maximum precipitation (blended GEV)
    Max,
    /// longest dry spell per month (negative binomial)
    DrySpell,
    /// dry days per month out of days observed (binomial)
    NoRain,
}

impl Scenario {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Scenario::Mean),
            "max" => Ok(Scenario::Max),
            "dryspell" => Ok(Scenario::DrySpell),
            "norain" => Ok(Scenario::NoRain),
            other => Err(Error::invalid(format!(
                "unknown scenario {other:?} (expected mean|max|dryspell|norain)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Mean => "mean",
            Scenario::Max => "max",
            Scenario::DrySpell => "dryspell",
            Scenario::NoRain => "norain",
        }
    }

    pub fn family_kind(&self) -> FamilyKind {
        match self {
            Scenario::Mean => FamilyKind::Gamma,
            Scenario::Max => FamilyKind::Bgev,
            Scenario::DrySpell => FamilyKind::NegBinomial,
            Scenario::NoRain => FamilyKind::Binomial,
        }
    }

    /// Response value of a dataset row under this scenario; `None` marks a
    /// missing observation. Gamma support excludes exact zeros, so an
    /// entirely dry month is treated as missing for the mean scenario.
    pub fn value(&self, r: &StationRecord) -> Option<f64> {
        match self {
            Scenario::Mean => r.rain_mean.filter(|&v| v > 0.0),
            Scenario::Max => r.rain_max,
            Scenario::DrySpell => r.dry_spell_max.map(f64::from),
            Scenario::NoRain => {
                if r.days_observed == 0 {
                    None
                } else {
                    r.dry_day_count.map(f64::from)
                }
            }
        }
    }
}

/// Hyperparameter vector on internal scales. Layout:
/// family-specific head, then `theta1..theta4`, then the transformed AR(1)
/// coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperVector {
    pub family: FamilyKind,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Transform {
    Identity,
    Exp,
    Xi,
    ArCoef,
}

impl Transform {
    fn apply(&self, v: f64) -> f64 {
        match self {
            Transform::Identity => v,
            Transform::Exp => v.exp(),
            Transform::Xi => xi_from_internal(v),
            Transform::ArCoef => a_from_internal(v),
        }
    }
}

impl FamilyKind {
    fn head_internal_names(&self) -> &'static [&'static str] {
        match self {
            FamilyKind::Gamma => &["log_phi"],
            FamilyKind::Bgev => &["log_spread", "xi_internal", "beta1"],
            FamilyKind::NegBinomial => &["log_n"],
            FamilyKind::Binomial => &[],
            FamilyKind::Gaussian => &["log_precision"],
        }
    }

    fn head_report_names(&self) -> &'static [&'static str] {
        match self {
            FamilyKind::Gamma => &["phi"],
            FamilyKind::Bgev => &["s_beta", "xi", "beta1"],
            FamilyKind::NegBinomial => &["n"],
            FamilyKind::Binomial => &[],
            FamilyKind::Gaussian => &["precision"],
        }
    }

    fn head_transforms(&self) -> &'static [Transform] {
        match self {
            FamilyKind::Gamma | FamilyKind::NegBinomial | FamilyKind::Gaussian => &[Transform::Exp],
            FamilyKind::Bgev => &[Transform::Exp, Transform::Xi, Transform::Identity],
            FamilyKind::Binomial => &[],
        }
    }

    pub fn head_len(&self) -> usize {
        self.head_internal_names().len()
    }

    pub fn hyper_dim(&self) -> usize {
        self.head_len() + 5
    }
}

impl HyperVector {
    pub fn new(family: FamilyKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != family.hyper_dim() {
            return Err(Error::Dimension(format!(
                "{family:?} expects {} hyperparameters, got {}",
                family.hyper_dim(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("hyperparameters must be finite"));
        }
        Ok(HyperVector { family, values })
    }

    /// Default initial point: unit-scale field, moderate positive temporal
    /// correlation, family heads at their customary starting values
    /// (phi = n = precision = 1, xi = 0.1, unit spread).
    pub fn default_init(family: FamilyKind) -> Self {
        let mut values = Vec::with_capacity(family.hyper_dim());
        match family {
            FamilyKind::Gamma | FamilyKind::NegBinomial | FamilyKind::Gaussian => values.push(0.0),
            FamilyKind::Bgev => {
                values.push(0.0);
                values.push(xi_to_internal(0.1));
                values.push(0.0);
            }
            FamilyKind::Binomial => {}
        }
        values.extend_from_slice(&[0.0, 0.0, 0.0, 0.0]); // theta
        values.push(a_to_internal(0.5));
        HyperVector { family, values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn theta(&self) -> [f64; 4] {
        let h = self.family.head_len();
        [
            self.values[h],
            self.values[h + 1],
            self.values[h + 2],
            self.values[h + 3],
        ]
    }

    pub fn a(&self) -> f64 {
        a_from_internal(*self.values.last().expect("nonempty"))
    }

    pub fn internal_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .family
            .head_internal_names()
            .iter()
            .map(|s| s.to_string())
            .collect();
        names.extend(["theta1", "theta2", "theta3", "theta4"].map(String::from));
        names.push("a_internal".into());
        names
    }

    pub fn report_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .family
            .head_report_names()
            .iter()
            .map(|s| s.to_string())
            .collect();
        names.extend(["theta1", "theta2", "theta3", "theta4"].map(String::from));
        names.push("a".into());
        names
    }

    fn transform(&self, idx: usize) -> Transform {
        let h = self.family.head_len();
        if idx < h {
            self.family.head_transforms()[idx]
        } else if idx < h + 4 {
            Transform::Identity
        } else {
            Transform::ArCoef
        }
    }

    /// Map one internal coordinate to its reporting scale.
    pub fn to_report(&self, idx: usize, internal: f64) -> f64 {
        self.transform(idx).apply(internal)
    }

    /// Build the likelihood family this psi implies.
    pub fn likelihood(&self, bgev_config: &BgevConfig) -> LikelihoodFamily {
        match self.family {
            FamilyKind::Gamma => LikelihoodFamily::Gamma(GammaHyper {
                phi: self.values[0].exp(),
            }),
            FamilyKind::NegBinomial => LikelihoodFamily::NegBinomial(NegBinHyper {
                n_disp: self.values[0].exp(),
            }),
            FamilyKind::Gaussian => LikelihoodFamily::Gaussian(GaussianHyper {
                precision: self.values[0].exp(),
            }),
            FamilyKind::Binomial => LikelihoodFamily::Binomial,
            FamilyKind::Bgev => LikelihoodFamily::Bgev(BgevHyper {
                log_spread_intercept: self.values[0],
                beta1: self.values[2],
                xi: xi_from_internal(self.values[1]),
                config: *bgev_config,
            }),
        }
    }

    /// log prior density of the internal vector (independent Gaussians).
    pub fn log_prior(&self, priors: &PriorSet) -> f64 {
        let h = self.family.head_len();
        let mut lp = 0.0;
        for (i, &v) in self.values.iter().enumerate() {
            let sd = if i < h {
                priors.hyper_sd
            } else if i < h + 4 {
                priors.theta_sd
            } else {
                priors.a_transform_sd
            };
            lp += -0.5 * (v / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        lp
    }
}

/// One dataset row wired into the joint latent vector.
#[derive(Debug, Clone)]
pub struct ObsRow {
    /// response; `None` rows are retained for prediction but excluded from
    /// the likelihood
    pub y: Option<f64>,
    pub trials: u32,
    pub elevation_km: f64,
    /// sparse joint-index entries: barycentric z weights plus fixed-effect
    /// covariates
    pub entries: Vec<(usize, f64)>,
    pub station: usize,
    pub year: i32,
    pub month: u32,
}

/// Prior precision structure of the latent vector.
#[derive(Debug, Clone)]
pub enum PrecisionSpec {
    /// Kronecker AR(1) x SPDE field plus independent fixed-effect priors
    SpatioTemporal {
        fem: FemMatrices,
        elevation: Vec<f64>,
        n_vertices: usize,
    },
    /// fixed prior precision (test harness for exactness/quadrature checks)
    Fixed(SparseSym),
}

/// Assembled latent model: observation rows, precision builder, likelihood
/// family, priors.
#[derive(Debug)]
pub struct LatentModel {
    pub family: FamilyKind,
    pub priors: PriorSet,
    pub bgev_config: BgevConfig,
    pub(crate) spec: PrecisionSpec,
    pub(crate) rows: Vec<ObsRow>,
    pub(crate) n_z: usize,
    pub(crate) n_fixed: usize,
    pub(crate) asm: gauss::JointAssembly,
    /// sum of log prior precisions of the fixed effects
    pub(crate) fixed_logdet: f64,
    /// station metadata kept for prediction/reporting
    pub stations: Vec<StationInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationInfo {
    pub id: String,
    pub lon_centred: f64,
    pub lat_centred: f64,
    pub elevation_km: f64,
}

impl LatentModel {
    pub fn n_latent(&self) -> usize {
        self.n_z + self.n_fixed
    }

    pub fn n_fixed(&self) -> usize {
        self.n_fixed
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn rows(&self) -> &[ObsRow] {
        &self.rows
    }

    pub fn n_likelihood_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.y.is_some()).count()
    }

    /// Index of fixed effect `k` (0 = intercept, 1..3 = gammas).
    pub fn fixed_index(&self, k: usize) -> usize {
        assert!(k < self.n_fixed);
        self.n_z + k
    }

    pub fn fixed_names(&self) -> Vec<&'static str> {
        ["alpha", "gamma1", "gamma2", "gamma3"][..self.n_fixed].to_vec()
    }

    /// Generic constructor from raw parts (fixed prior precision, no fixed
    /// effects); the harness for the exactness and quadrature checks.
    pub fn from_fixed_prior(
        q: SparseSym,
        rows: Vec<ObsRow>,
        family: FamilyKind,
        priors: PriorSet,
        bgev_config: BgevConfig,
    ) -> Result<Self> {
        let n_z = q.n();
        for r in &rows {
            for &(j, _) in &r.entries {
                if j >= n_z {
                    return Err(Error::Dimension(format!(
                        "row entry index {j} exceeds latent dimension {n_z}"
                    )));
                }
            }
        }
        let spec = PrecisionSpec::Fixed(q);
        let asm = gauss::JointAssembly::build(&spec, &rows, n_z, 0)?;
        Ok(LatentModel {
            family,
            priors,
            bgev_config,
            spec,
            rows,
            n_z,
            n_fixed: 0,
            asm,
            fixed_logdet: 0.0,
            stations: Vec::new(),
        })
    }
}

/// Build the latent model for a scenario: one likelihood row per dataset
/// record (missing responses retained but masked), the field replicated over
/// the twelve months, fixed effects ordered last. The mesh must already
/// carry vertex elevations.
pub fn build_model(
    records: &[StationRecord],
    mesh: &TriangleMesh,
    scenario: Scenario,
    priors: PriorSet,
    bgev_config: BgevConfig,
) -> Result<LatentModel> {
    if records.is_empty() {
        return Err(Error::data("empty dataset"));
    }
    // unique stations in first-appearance order
    let mut stations: Vec<StationInfo> = Vec::new();
    let mut station_of: std::collections::BTreeMap<&str, usize> = Default::default();
    for r in records {
        r.validate()?;
        if let Some(&s) = station_of.get(r.station_id.as_str()) {
            let st = &stations[s];
            if (st.lon_centred - r.lon_centred).abs() > 1e-9
                || (st.lat_centred - r.lat_centred).abs() > 1e-9
            {
                return Err(Error::data(format!(
                    "station {} has inconsistent coordinates",
                    r.station_id
                )));
            }
        } else {
            station_of.insert(r.station_id.as_str(), stations.len());
            stations.push(StationInfo {
                id: r.station_id.clone(),
                lon_centred: r.lon_centred,
                lat_centred: r.lat_centred,
                elevation_km: r.elevation_km,
            });
        }
    }

    let locations: Vec<[f64; 2]> = stations
        .iter()
        .map(|s| [s.lon_centred, s.lat_centred])
        .collect();
    let a = projector(mesh, &locations);
    for (s, st) in stations.iter().enumerate() {
        if !a.in_domain(s) {
            return Err(Error::Mesh(format!(
                "station {} at ({}, {}) lies outside the mesh",
                st.id, st.lon_centred, st.lat_centred
            )));
        }
    }

    let n_vertices = mesh.n_vertices();
    let n_z = n_vertices * N_MONTHS;
    let n_fixed = 4;
    let family = scenario.family_kind();

    let rows: Vec<ObsRow> = records
        .iter()
        .map(|r| {
            let s = station_of[r.station_id.as_str()];
            let k = (r.month - 1) as usize;
            let mut entries: Vec<(usize, f64)> = a
                .row(s)
                .iter()
                .map(|&(v, w)| (k * n_vertices + v, w))
                .collect();
            entries.push((n_z, 1.0));
            entries.push((n_z + 1, r.lon_centred));
            entries.push((n_z + 2, r.lat_centred));
            entries.push((n_z + 3, r.elevation_km));
            ObsRow {
                y: scenario.value(r),
                trials: r.days_observed,
                elevation_km: r.elevation_km,
                entries,
                station: s,
                year: r.year,
                month: r.month,
            }
        })
        .collect();

    let spec = PrecisionSpec::SpatioTemporal {
        fem: crate::gmrf::assemble_fem(mesh)?,
        elevation: mesh.vertex_elevations_km().to_vec(),
        n_vertices,
    };
    let asm = gauss::JointAssembly::build(&spec, &rows, n_z, n_fixed)?;
    let fixed_logdet =
        priors.intercept_precision.ln() + 3.0 * priors.gamma_precision.ln();
    Ok(LatentModel {
        family,
        priors,
        bgev_config,
        spec,
        rows,
        n_z,
        n_fixed,
        asm,
        fixed_logdet,
        stations,
    })
}

/// Per-component posterior summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginalSummary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Summary row of a reported quantity (hyper or fixed effect).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    /// both interval endpoints share a sign
    pub significant: bool,
}

/// Fit output: hyperparameter mode and grid, per-grid-point latent
/// means/sds, and reporting-scale summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub family: FamilyKind,
    pub psi_mode: HyperVector,
    pub mode_log_posterior: f64,
    pub grid: Vec<GridPoint>,
    /// per grid point: posterior mean of the latent vector
    pub latent_mean: Vec<Vec<f64>>,
    /// per grid point: posterior sd of each latent component
    pub latent_sd: Vec<Vec<f64>>,
    pub hyper_summary: Vec<SummaryRow>,
    pub fixed_summary: Vec<SummaryRow>,
    pub n_latent: usize,
    pub n_fixed: usize,
    pub objective_evaluations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPoint {
    pub psi: Vec<f64>,
    pub log_posterior: f64,
    pub weight: f64,
}

/// standard normal CDF
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

/// Mean, sd and (0.025, 0.975) quantiles of a Gaussian mixture.
pub(crate) fn mixture_summary(weights: &[f64], means: &[f64], sds: &[f64]) -> MarginalSummary {
    let mean: f64 = weights.iter().zip(means).map(|(w, m)| w * m).sum();
    let second: f64 = weights
        .iter()
        .zip(means)
        .zip(sds)
        .map(|((w, m), s)| w * (s * s + m * m))
        .sum();
    let var = (second - mean * mean).max(0.0);
    let sd = var.sqrt();
    let cdf = |x: f64| -> f64 {
        weights
            .iter()
            .zip(means)
            .zip(sds)
            .map(|((w, m), s)| w * normal_cdf((x - m) / s.max(1e-300)))
            .sum()
    };
    let quantile = |p: f64| -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (m, s) in means.iter().zip(sds) {
            lo = lo.min(m - 12.0 * s - 1e-12);
            hi = hi.max(m + 12.0 * s + 1e-12);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-12 * hi.abs().max(1.0) {
                break;
            }
        }
        0.5 * (lo + hi)
    };
    let q025 = quantile(0.025);
    let q975 = quantile(0.975);
    MarginalSummary {
        mean,
        sd,
        q025,
        q975,
    }
}

/// Posterior marginal of every latent component: Gaussian mixture over the
/// hyperparameter grid.
pub fn latent_marginals(fit: &FitResult) -> Vec<MarginalSummary> {
    let weights: Vec<f64> = fit.grid.iter().map(|g| g.weight).collect();
    let n = fit.n_latent;
    (0..n)
        .map(|j| {
            let means: Vec<f64> = fit.latent_mean.iter().map(|m| m[j]).collect();
            let sds: Vec<f64> = fit.latent_sd.iter().map(|s| s[j]).collect();
            mixture_summary(&weights, &means, &sds)
        })
        .collect()
}
