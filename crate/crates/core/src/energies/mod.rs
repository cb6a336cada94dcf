//! Benchmark target densities `p(x) ∝ exp(-E(x))`.
//!
//! Every preset exposes its energy and energy gradient, a ground-truth
//! sampler, and a reference log-partition function. Gaussian mixtures and
//! funnels are normalised, so their log-partition is exactly zero; the
//! Manywell variants are not, and their log-partition is computed by
//! quadrature of the factorised two-dimensional wells.

mod ground_truth;
mod linalg;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, streams};

pub use ground_truth::{GroundTruthSampler, SamplerMethod, MANYWELL_GRID_KNOTS, MANYWELL_GRID_RANGE};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Default construction seed for presets with random parameters.
pub const DEFAULT_CONSTRUCTION_SEED: u64 = 42;

#[derive(Debug, thiserror::Error)]
pub enum EnergyError {
    #[error("unknown energy preset {0:?}")]
    UnknownKind(String),
    #[error("expected a {expected}-dimensional point, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("sample count must be positive")]
    EmptySample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum EnergyKind {
    Gmm25,
    Gmm25SlightDistort,
    Gmm25Distort,
    Gmm125,
    Gmm40,
    FunnelEasy,
    FunnelHard,
    Manywell,
    ManywellDistorted,
    /// Isotropic Gaussian test target (not one of the benchmarks).
    Gaussian,
}

impl EnergyKind {
    pub const ALL: [EnergyKind; 9] = [
        EnergyKind::Gmm25,
        EnergyKind::Gmm25SlightDistort,
        EnergyKind::Gmm25Distort,
        EnergyKind::Gmm125,
        EnergyKind::Gmm40,
        EnergyKind::FunnelEasy,
        EnergyKind::FunnelHard,
        EnergyKind::Manywell,
        EnergyKind::ManywellDistorted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnergyKind::Gmm25 => "gmm25",
            EnergyKind::Gmm25SlightDistort => "gmm25-slight-distort",
            EnergyKind::Gmm25Distort => "gmm25-distort",
            EnergyKind::Gmm125 => "gmm125",
            EnergyKind::Gmm40 => "gmm40",
            EnergyKind::FunnelEasy => "funnel-easy",
            EnergyKind::FunnelHard => "funnel-hard",
            EnergyKind::Manywell => "manywell",
            EnergyKind::ManywellDistorted => "manywell-distorted",
            EnergyKind::Gaussian => "gaussian",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            EnergyKind::Gmm25 | EnergyKind::Gmm25SlightDistort | EnergyKind::Gmm25Distort | EnergyKind::Gmm40 => 2,
            EnergyKind::Gmm125 => 3,
            EnergyKind::FunnelEasy | EnergyKind::FunnelHard => 10,
            EnergyKind::Manywell | EnergyKind::ManywellDistorted => 32,
            EnergyKind::Gaussian => 1,
        }
    }

    pub fn is_mixture(self) -> bool {
        matches!(
            self,
            EnergyKind::Gmm25
                | EnergyKind::Gmm25SlightDistort
                | EnergyKind::Gmm25Distort
                | EnergyKind::Gmm125
                | EnergyKind::Gmm40
        )
    }

    pub fn is_funnel(self) -> bool {
        matches!(self, EnergyKind::FunnelEasy | EnergyKind::FunnelHard)
    }

    pub fn is_manywell(self) -> bool {
        matches!(self, EnergyKind::Manywell | EnergyKind::ManywellDistorted)
    }
}

impl fmt::Display for EnergyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnergyKind {
    type Err = EnergyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let kind = match norm.as_str() {
            "gmm25" | "25gmm" => EnergyKind::Gmm25,
            "gmm25-slight-distort" | "slightly-distorted-25gmm" => EnergyKind::Gmm25SlightDistort,
            "gmm25-distort" | "distorted-25gmm" => EnergyKind::Gmm25Distort,
            "gmm125" | "125gmm" => EnergyKind::Gmm125,
            "gmm40" | "40gmm" => EnergyKind::Gmm40,
            "funnel-easy" | "easy-funnel" => EnergyKind::FunnelEasy,
            "funnel-hard" | "hard-funnel" => EnergyKind::FunnelHard,
            "manywell" => EnergyKind::Manywell,
            "manywell-distorted" | "distorted-manywell" => EnergyKind::ManywellDistorted,
            "gaussian" => EnergyKind::Gaussian,
            _ => return Err(EnergyError::UnknownKind(s.to_string())),
        };
        Ok(kind)
    }
}

impl From<EnergyKind> for String {
    fn from(k: EnergyKind) -> String {
        k.name().to_string()
    }
}

impl TryFrom<String> for EnergyKind {
    type Error = EnergyError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Gaussian mixture with equal weights and full covariances `C_k = F_k F_kᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub dim: usize,
    pub means: Vec<Vec<f64>>,
    /// Row-major `dim x dim` sampling factors.
    pub factors: Vec<Vec<f64>>,
    /// Row-major `dim x dim` covariances.
    pub covariances: Vec<Vec<f64>>,
    precisions: Vec<Vec<f64>>,
    /// `log w_k - ½ log det(2π C_k)`.
    log_coef: Vec<f64>,
}

impl Mixture {
    fn new(dim: usize, means: Vec<Vec<f64>>, factors: Vec<Vec<f64>>) -> Self {
        let k = means.len();
        let log_w = -(k as f64).ln();
        let mut covariances = Vec::with_capacity(k);
        let mut precisions = Vec::with_capacity(k);
        let mut log_coef = Vec::with_capacity(k);
        for f in &factors {
            let cov = linalg::outer_product(dim, f);
            let chol = linalg::cholesky(dim, &cov).expect("mixture covariance is positive definite");
            let logdet = 2.0 * (0..dim).map(|i| chol[i * dim + i].ln()).sum::<f64>();
            precisions.push(linalg::spd_inverse(dim, &chol));
            covariances.push(cov);
            log_coef.push(log_w - 0.5 * (dim as f64 * LN_2PI + logdet));
        }
        Self { dim, means, factors, covariances, precisions, log_coef }
    }

    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    /// Per-component log-densities (including weights) and the offsets `x - μ_k`.
    fn component_terms(&self, x: ArrayView1<'_, f64>, diffs: &mut [f64], logs: &mut [f64]) {
        let d = self.dim;
        for k in 0..self.means.len() {
            let diff = &mut diffs[k * d..(k + 1) * d];
            for i in 0..d {
                diff[i] = x[i] - self.means[k][i];
            }
            let p = &self.precisions[k];
            let mut quad = 0.0;
            for i in 0..d {
                let mut row = 0.0;
                for j in 0..d {
                    row += p[i * d + j] * diff[j];
                }
                quad += diff[i] * row;
            }
            logs[k] = self.log_coef[k] - 0.5 * quad;
        }
    }

    fn energy_and_grad(&self, x: ArrayView1<'_, f64>, grad: Option<&mut [f64]>) -> f64 {
        let d = self.dim;
        let k = self.means.len();
        let mut diffs = vec![0.0; k * d];
        let mut logs = vec![0.0; k];
        self.component_terms(x, &mut diffs, &mut logs);
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for l in logs.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        let energy = -(max + sum.ln());
        if let Some(g) = grad {
            g.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..k {
                let w = logs[c] / sum;
                let p = &self.precisions[c];
                let diff = &diffs[c * d..(c + 1) * d];
                for i in 0..d {
                    let mut row = 0.0;
                    for j in 0..d {
                        row += p[i * d + j] * diff[j];
                    }
                    g[i] += w * row;
                }
            }
        }
        energy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnergyParams {
    Mixture(Mixture),
    /// `x_0 ~ N(0, var0)`, `x_{1:} | x_0 ~ N(0, exp(x_0) I)`.
    Funnel { var0: f64 },
    /// Per two-dimensional well coefficients `(a1, a2, a3, a4)` of
    /// `a1 x⁴ - 6 a2 x² - 0.5 a3 x + 0.5 a4 y²`.
    Manywell { wells: Vec<[f64; 4]> },
}

/// An immutable, fully constructed target density.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergySpec {
    pub kind: EnergyKind,
    pub dim: usize,
    pub construction_seed: u64,
    pub params: EnergyParams,
}

fn grid_means(dim: usize) -> Vec<Vec<f64>> {
    let axis = [-10.0, -5.0, 0.0, 5.0, 10.0];
    let mut means = vec![vec![]];
    for _ in 0..dim {
        means = means
            .into_iter()
            .flat_map(|prefix: Vec<f64>| {
                axis.iter().map(move |&a| {
                    let mut m = prefix.clone();
                    m.push(a);
                    m
                })
            })
            .collect();
    }
    means
}

fn scaled_identity(dim: usize, s: f64) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        m[i * dim + i] = s;
    }
    m
}

/// Distorted 2-d factors: `A = √0.3 I + d Ξ`, `C = AᵀA`, sampling factor `Aᵀ`.
fn distorted_factors(n: usize, d: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, streams::ENERGY_CONSTRUCTION);
    let base = 0.3f64.sqrt();
    (0..n)
        .map(|_| {
            let xi: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            let a = [base + d * xi[0], d * xi[1], d * xi[2], base + d * xi[3]];
            // transpose
            vec![a[0], a[2], a[1], a[3]]
        })
        .collect()
}

/// Builds preset `kind`. `construction_seed` drives the random draws of the
/// distorted mixtures, the 40-component mixture means, and the distorted
/// Manywell coefficients; other presets ignore it.
pub fn build_energy(kind: EnergyKind, construction_seed: u64) -> EnergySpec {
    let dim = kind.dim();
    let params = match kind {
        EnergyKind::Gmm25 | EnergyKind::Gmm125 => {
            let means = grid_means(dim);
            let f = scaled_identity(dim, 0.3f64.sqrt());
            let factors = vec![f; means.len()];
            EnergyParams::Mixture(Mixture::new(dim, means, factors))
        }
        EnergyKind::Gmm25SlightDistort | EnergyKind::Gmm25Distort => {
            let d = if kind == EnergyKind::Gmm25SlightDistort { 0.05 } else { 0.1 };
            let means = grid_means(dim);
            let factors = distorted_factors(means.len(), d, construction_seed);
            EnergyParams::Mixture(Mixture::new(dim, means, factors))
        }
        EnergyKind::Gmm40 => {
            let mut rng = rng::stream(construction_seed, streams::ENERGY_CONSTRUCTION);
            let means: Vec<Vec<f64>> =
                (0..40).map(|_| (0..dim).map(|_| rng.random_range(-40.0..40.0)).collect()).collect();
            let factors = vec![scaled_identity(dim, 1.0); 40];
            EnergyParams::Mixture(Mixture::new(dim, means, factors))
        }
        EnergyKind::FunnelEasy => EnergyParams::Funnel { var0: 1.0 },
        EnergyKind::FunnelHard => EnergyParams::Funnel { var0: 9.0 },
        EnergyKind::Gaussian => return build_gaussian(dim, 1.0),
        EnergyKind::Manywell => EnergyParams::Manywell { wells: vec![[1.0; 4]; dim / 2] },
        EnergyKind::ManywellDistorted => {
            let mut rng = rng::stream(construction_seed, streams::ENERGY_CONSTRUCTION);
            let wells = (0..dim / 2)
                .map(|_| std::array::from_fn(|_| rng.random_range(0.75..1.25)))
                .collect();
            EnergyParams::Manywell { wells }
        }
    };
    EnergySpec { kind, dim, construction_seed, params }
}

/// `N(0, var I)` in `dim` dimensions, normalised.
pub fn build_gaussian(dim: usize, var: f64) -> EnergySpec {
    assert!(dim > 0 && var > 0.0, "build_gaussian needs dim > 0 and var > 0");
    let mixture = Mixture::new(dim, vec![vec![0.0; dim]], vec![scaled_identity(dim, var.sqrt())]);
    EnergySpec { kind: EnergyKind::Gaussian, dim, construction_seed: 0, params: EnergyParams::Mixture(mixture) }
}

/// Builds a preset by name, e.g. `"gmm25"`, `"funnel-hard"`.
pub fn build_energy_named(name: &str, construction_seed: u64) -> Result<EnergySpec, EnergyError> {
    Ok(build_energy(name.parse()?, construction_seed))
}

/// Log-density of one double well's quartic coordinate, `-(a1 x⁴ - 6 a2 x² - 0.5 a3 x)`.
pub(crate) fn well_log_density(w: &[f64; 4], x: f64) -> f64 {
    let x2 = x * x;
    -(w[0] * x2 * x2) + 6.0 * w[1] * x2 + 0.5 * w[2] * x
}

/// `ln ∫ exp(f(x)) dx` over `[lo, hi]` by composite Simpson on `n` intervals
/// (`n` even), evaluated stably in the log domain.
pub fn log_integral(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    assert!(n >= 2 && n % 2 == 0, "Simpson's rule needs an even interval count");
    let h = (hi - lo) / n as f64;
    let vals: Vec<f64> = (0..=n).map(|i| f(lo + h * i as f64)).collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = vals
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * (v - max).exp()
        })
        .sum();
    max + (sum * h / 3.0).ln()
}

/// Quadrature range and resolution for the Manywell log-partition.
pub const WELL_QUADRATURE_RANGE: f64 = 6.0;
pub const WELL_QUADRATURE_INTERVALS: usize = 20_000;

impl EnergySpec {
    fn check(&self, x: ArrayView1<'_, f64>) -> Result<(), EnergyError> {
        if x.len() != self.dim {
            return Err(EnergyError::DimMismatch { expected: self.dim, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(EnergyError::NonFinite);
        }
        Ok(())
    }

    fn eval(&self, x: ArrayView1<'_, f64>, grad: Option<&mut [f64]>) -> f64 {
        match &self.params {
            EnergyParams::Mixture(m) => m.energy_and_grad(x, grad),
            EnergyParams::Funnel { var0 } => {
                let x0 = x[0];
                let rest = self.dim - 1;
                let inv = (-x0).exp();
                let sq: f64 = x.iter().skip(1).map(|v| v * v).sum();
                let e = 0.5 * x0 * x0 / var0
                    + 0.5 * (LN_2PI + var0.ln())
                    + 0.5 * sq * inv
                    + 0.5 * rest as f64 * (x0 + LN_2PI);
                if let Some(g) = grad {
                    g[0] = x0 / var0 - 0.5 * sq * inv + 0.5 * rest as f64;
                    for i in 1..self.dim {
                        g[i] = x[i] * inv;
                    }
                }
                e
            }
            EnergyParams::Manywell { wells } => {
                let mut e = 0.0;
                let mut grad = grad;
                for (i, w) in wells.iter().enumerate() {
                    let (a, b) = (x[2 * i], x[2 * i + 1]);
                    e += -well_log_density(w, a) + 0.5 * w[3] * b * b;
                    if let Some(g) = grad.as_deref_mut() {
                        g[2 * i] = 4.0 * w[0] * a * a * a - 12.0 * w[1] * a - 0.5 * w[2];
                        g[2 * i + 1] = w[3] * b;
                    }
                }
                e
            }
        }
    }

    /// `E(x)`, the negative log unnormalised density.
    pub fn energy(&self, x: &[f64]) -> Result<f64, EnergyError> {
        let x = ArrayView1::from(x);
        self.check(x)?;
        Ok(self.eval(x, None))
    }

    /// `∇E(x)`.
    pub fn grad_energy(&self, x: &[f64]) -> Result<Vec<f64>, EnergyError> {
        let x = ArrayView1::from(x);
        self.check(x)?;
        let mut g = vec![0.0; self.dim];
        self.eval(x, Some(&mut g));
        Ok(g)
    }

    /// Energies of every row. Rows with non-finite entries map to `+∞`.
    pub fn energy_batch(&self, xs: &Array2<f64>) -> Array1<f64> {
        assert_eq!(xs.ncols(), self.dim, "energy_batch: wrong dimension");
        xs.rows()
            .into_iter()
            .map(|r| if r.iter().all(|v| v.is_finite()) { self.eval(r, None) } else { f64::INFINITY })
            .collect()
    }

    /// Energies `(n,1)` and gradients `(n,dim)` of every row.
    pub fn energy_and_grad_batch(&self, xs: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        assert_eq!(xs.ncols(), self.dim, "energy_and_grad_batch: wrong dimension");
        let n = xs.nrows();
        let mut e = Array2::zeros((n, 1));
        let mut g = Array2::zeros((n, self.dim));
        for (i, r) in xs.rows().into_iter().enumerate() {
            let mut gi = vec![0.0; self.dim];
            e[[i, 0]] = self.eval(r, Some(&mut gi));
            g.row_mut(i).assign(&ArrayView1::from(&gi[..]));
        }
        (e, g)
    }

    /// Reference `log Z`. Zero for the normalised presets; for Manywell the
    /// sum over wells of a quadrature of the quartic factor plus the Gaussian
    /// factor's closed form.
    pub fn log_partition(&self) -> f64 {
        match &self.params {
            EnergyParams::Mixture(_) | EnergyParams::Funnel { .. } => 0.0,
            EnergyParams::Manywell { wells } => wells
                .iter()
                .map(|w| {
                    log_integral(
                        |x| well_log_density(w, x),
                        -WELL_QUADRATURE_RANGE,
                        WELL_QUADRATURE_RANGE,
                        WELL_QUADRATURE_INTERVALS,
                    ) + 0.5 * (LN_2PI - w[3].ln())
                })
                .sum(),
        }
    }

    pub fn ground_truth_sampler(&self) -> GroundTruthSampler {
        GroundTruthSampler::new(self)
    }

    /// `n` ground-truth samples drawn from stream `seed`.
    pub fn sample_ground_truth(&self, n: usize, seed: u64) -> Result<Array2<f64>, EnergyError> {
        self.ground_truth_sampler().sample(n, seed)
    }
}
