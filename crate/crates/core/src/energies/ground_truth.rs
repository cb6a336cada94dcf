//! Exact or near-exact samplers from the normalised targets.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{well_log_density, EnergyError, EnergyParams, EnergySpec};
use crate::rng::{self, streams};

/// The Manywell quartic coordinate is sampled by inverse-CDF on a uniform
/// grid of this many knots over `[-R, R]`.
pub const MANYWELL_GRID_KNOTS: usize = 8192;
pub const MANYWELL_GRID_RANGE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMethod {
    ExactMixture,
    ExactFunnel,
    GridInverseCdf,
}

/// Tabulated CDF of one quartic factor.
#[derive(Debug, Clone)]
struct CdfTable {
    knots: Vec<f64>,
    cdf: Vec<f64>,
}

impl CdfTable {
    fn new(w: &[f64; 4]) -> Self {
        let n = MANYWELL_GRID_KNOTS;
        let h = 2.0 * MANYWELL_GRID_RANGE / (n - 1) as f64;
        let knots: Vec<f64> = (0..n).map(|i| -MANYWELL_GRID_RANGE + h * i as f64).collect();
        let logs: Vec<f64> = knots.iter().map(|&x| well_log_density(w, x)).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dens: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let mut cdf = vec![0.0; n];
        for i in 1..n {
            cdf[i] = cdf[i - 1] + 0.5 * h * (dens[i - 1] + dens[i]);
        }
        let total = cdf[n - 1];
        cdf.iter_mut().for_each(|c| *c /= total);
        Self { knots, cdf }
    }

    /// Piecewise-linear inverse of the tabulated CDF.
    fn invert(&self, u: f64) -> f64 {
        let i = self.cdf.partition_point(|&c| c < u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.knots[i - 1] + t * (self.knots[i] - self.knots[i - 1])
    }
}

#[derive(Debug, Clone)]
pub struct GroundTruthSampler {
    spec: EnergySpec,
    tables: Vec<CdfTable>,
}

impl GroundTruthSampler {
    pub fn new(spec: &EnergySpec) -> Self {
        let tables = match &spec.params {
            EnergyParams::Manywell { wells } => {
                let mut tables: Vec<CdfTable> = Vec::with_capacity(wells.len());
                for (i, w) in wells.iter().enumerate() {
                    match wells[..i].iter().position(|o| o == w) {
                        Some(j) => tables.push(tables[j].clone()),
                        None => tables.push(CdfTable::new(w)),
                    }
                }
                tables
            }
            _ => Vec::new(),
        };
        Self { spec: spec.clone(), tables }
    }

    pub fn method(&self) -> SamplerMethod {
        match self.spec.params {
            EnergyParams::Mixture(_) => SamplerMethod::ExactMixture,
            EnergyParams::Funnel { .. } => SamplerMethod::ExactFunnel,
            EnergyParams::Manywell { .. } => SamplerMethod::GridInverseCdf,
        }
    }

    /// `n` independent samples; `seed` selects the ground-truth stream.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Array2<f64>, EnergyError> {
        if n == 0 {
            return Err(EnergyError::EmptySample);
        }
        let mut rng = rng::stream(seed, streams::GROUND_TRUTH);
        let d = self.spec.dim;
        let mut out = Array2::zeros((n, d));
        match &self.spec.params {
            EnergyParams::Mixture(m) => {
                let mut z = vec![0.0; d];
                for mut row in out.rows_mut() {
                    let k = rng.random_range(0..m.n_components());
                    z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                    let f = &m.factors[k];
                    for i in 0..d {
                        row[i] = m.means[k][i] + (0..d).map(|j| f[i * d + j] * z[j]).sum::<f64>();
                    }
                }
            }
            EnergyParams::Funnel { var0 } => {
                for mut row in out.rows_mut() {
                    let x0 = var0.sqrt() * rng.sample::<f64, _>(StandardNormal);
                    row[0] = x0;
                    let s = (0.5 * x0).exp();
                    for i in 1..d {
                        row[i] = s * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            EnergyParams::Manywell { wells } => {
                for mut row in out.rows_mut() {
                    for (i, w) in wells.iter().enumerate() {
                        row[2 * i] = self.tables[i].invert(rng.random::<f64>());
                        row[2 * i + 1] = rng.sample::<f64, _>(StandardNormal) / w[3].sqrt();
                    }
                }
            }
        }
        Ok(out)
    }
}
