//! Evaluation: evidence bounds and the 2-Wasserstein distance between sample
//! sets.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::energies::{EnergyError, EnergySpec};
use crate::kernels::{sample_backward, sample_forward, ForwardOptions, KernelError};
use crate::policy::SamplerModel;
use crate::rng::{stream, streams, SeededRng};
use crate::schedule::Schedule;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample sets differ in shape: {0:?} vs {1:?}")]
    SizeMismatch((usize, usize), (usize, usize)),
    #[error("model diverged: {dropped} of {total} trajectories were non-finite")]
    Divergent { dropped: usize, total: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
}

/// Fraction of non-finite trajectories at which a model counts as diverged.
pub const DIVERGENCE_FRACTION: f64 = 0.1;

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &Array1<f64>) -> Result<Self, MetricsError> {
        let n = xs.len();
        if n < 2 {
            return Err(MetricsError::TooFewSamples(n));
        }
        let mean = xs.mean().expect("non-empty");
        let se = (xs.var(1.0) / n as f64).sqrt();
        Ok(Self { mean, se, n })
    }
}

fn check_divergence(dropped: usize, kept: usize) -> Result<(), MetricsError> {
    let total = dropped + kept;
    if total == 0 || dropped as f64 >= DIVERGENCE_FRACTION * total as f64 {
        return Err(MetricsError::Divergent { dropped, total });
    }
    Ok(())
}

/// Mean of `-log_ratio` over `n` forward trajectories. With a normalised
/// target this lower-bounds `log Z`.
pub fn elbo(
    model: &SamplerModel,
    energy: &EnergySpec,
    schedule: &Schedule,
    sigma2: f64,
    n: usize,
    rng: &mut SeededRng,
) -> Result<Estimate, MetricsError> {
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let opts = ForwardOptions { sigma2, explore: 0.0, record_noise: false };
    let batch = sample_forward(model, energy, schedule, opts, n, rng)?;
    check_divergence(batch.dropped, batch.len())?;
    Estimate::from_samples(&batch.log_ratio(0.0).mapv(|r| -r))
}

/// Mean of `-log_ratio` over trajectories sampled backward from the
/// terminal states `x1`, normally ground-truth draws.
pub fn eubo(
    model: &SamplerModel,
    energy: &EnergySpec,
    schedule: &Schedule,
    sigma2: f64,
    x1: &Array2<f64>,
    rng: &mut SeededRng,
) -> Result<Estimate, MetricsError> {
    if x1.nrows() < 2 {
        return Err(MetricsError::TooFewSamples(x1.nrows()));
    }
    let batch = sample_backward(model, energy, x1, schedule, sigma2, rng)?;
    check_divergence(batch.dropped, batch.len())?;
    Estimate::from_samples(&batch.log_ratio(0.0).mapv(|r| -r))
}

/// Minimum-cost perfect matching for a dense square cost matrix by
/// shortest augmenting paths with potentials. Returns `assignment[row] = col`.
pub fn min_cost_assignment(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    const FREE: usize = usize::MAX;
    let cost = cost.as_standard_layout();
    let c = cost.as_slice().expect("standard layout");
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut col4row = vec![FREE; n];
    let mut row4col = vec![FREE; n];
    let mut path = vec![FREE; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut seen_row = vec![false; n];
    let mut seen_col = vec![false; n];
    let mut remaining: Vec<usize> = Vec::with_capacity(n);
    // Column reduction, then match each column to its cheapest row if free.
    for j in 0..n {
        let (best, min) = (0..n).map(|i| (i, c[i * n + j])).fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        v[j] = min;
        if col4row[best] == FREE {
            col4row[best] = j;
            row4col[j] = best;
        }
    }
    for cur in 0..n {
        if col4row[cur] != FREE {
            continue;
        }
        dist.fill(f64::INFINITY);
        seen_row.fill(false);
        seen_col.fill(false);
        remaining.clear();
        remaining.extend((0..n).rev());
        let mut min_val = 0.0;
        let mut i = cur;
        let sink = loop {
            seen_row[i] = true;
            let row = &c[i * n..(i + 1) * n];
            let base = min_val - u[i];
            let mut lowest = f64::INFINITY;
            let mut index = 0;
            for (k, &j) in remaining.iter().enumerate() {
                let r = base + row[j] - v[j];
                if r < dist[j] {
                    path[j] = i;
                    dist[j] = r;
                }
                // Ties go to free columns, which end the search.
                if dist[j] < lowest || (dist[j] == lowest && row4col[j] == FREE) {
                    lowest = dist[j];
                    index = k;
                }
            }
            min_val = lowest;
            let j = remaining.swap_remove(index);
            seen_col[j] = true;
            if row4col[j] == FREE {
                break j;
            }
            i = row4col[j];
        };
        u[cur] += min_val;
        for r in 0..n {
            if seen_row[r] && r != cur {
                u[r] += min_val - dist[col4row[r]];
            }
        }
        for j in 0..n {
            if seen_col[j] {
                v[j] -= min_val - dist[j];
            }
        }
        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            std::mem::swap(&mut col4row[r], &mut j);
            if r == cur {
                break;
            }
        }
    }
    col4row
}

/// Pairwise squared Euclidean distances between the rows of `a` and `b`.
pub fn squared_distances(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut c = Array2::zeros((a.nrows(), b.nrows()));
    for (i, x) in a.rows().into_iter().enumerate() {
        for (j, y) in b.rows().into_iter().enumerate() {
            c[[i, j]] = x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
        }
    }
    c
}

/// 2-Wasserstein distance between two equal-size empirical measures:
/// `sqrt(min_π (1/n) Σ_i ||a_i - b_π(i)||²)` over permutations `π`.
pub fn wasserstein2(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::SizeMismatch(a.dim(), b.dim()));
    }
    let n = a.nrows();
    if n == 0 {
        return Err(MetricsError::TooFewSamples(0));
    }
    let cost = squared_distances(a, b);
    let perm = min_cost_assignment(&cost);
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Ok((total.max(0.0) / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub elbo: f64,
    pub elbo_se: f64,
    pub eubo: f64,
    pub eubo_se: f64,
    /// `elbo - log Z`.
    pub elbo_gap: f64,
    /// `eubo - log Z`.
    pub eubo_gap: f64,
    /// `None` when the evaluation skipped the assignment problem.
    pub w2: Option<f64>,
    pub logz_hat: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl MetricsReport {
    /// `ELBO ≤ log Z ≤ EUBO`, each within `k` standard errors.
    pub fn sandwich_holds(&self, log_z: f64, k: f64) -> bool {
        self.elbo <= log_z + k * self.elbo_se && log_z <= self.eubo + k * self.eubo_se
    }
}

/// Samples produced for one evaluation, kept for dumping.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub model_samples: Array2<f64>,
    pub ground_truth: Array2<f64>,
}

/// ELBO, EUBO and (if `with_w2`) W2 from `n` samples. Forward and backward
/// paths come from the eval stream of `seed`; ground truth from its
/// ground-truth stream.
pub fn evaluate(
    model: &SamplerModel,
    energy: &EnergySpec,
    schedule: &Schedule,
    sigma2: f64,
    n: usize,
    seed: u64,
    with_w2: bool,
) -> Result<Evaluation, MetricsError> {
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let mut rng = stream(seed, streams::EVAL);
    let opts = ForwardOptions { sigma2, explore: 0.0, record_noise: false };
    let fwd = sample_forward(model, energy, schedule, opts, n, &mut rng)?;
    check_divergence(fwd.dropped, fwd.len())?;
    let lo = Estimate::from_samples(&fwd.log_ratio(0.0).mapv(|r| -r))?;
    let gt = energy.sample_ground_truth(n, seed)?;
    let hi = eubo(model, energy, schedule, sigma2, &gt, &mut rng)?;
    let model_samples = fwd.terminal().clone();
    // Dropped rows leave fewer model samples than ground-truth ones.
    let w2 = if with_w2 {
        Some(wasserstein2(&model_samples, &gt.slice(ndarray::s![..model_samples.nrows(), ..]).to_owned())?)
    } else {
        None
    };
    let log_z = energy.log_partition();
    let report = MetricsReport {
        elbo: lo.mean,
        elbo_se: lo.se,
        eubo: hi.mean,
        eubo_se: hi.se,
        elbo_gap: lo.mean - log_z,
        eubo_gap: hi.mean - log_z,
        w2,
        logz_hat: model.log_z(),
        n_samples: n,
        seed,
    };
    Ok(Evaluation { report, model_samples, ground_truth: gt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energies::{build_energy, build_gaussian, EnergyKind};
    use crate::policy::NetConfig;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..=p.len() {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_force(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let n = a.nrows();
        let best = permutations(n)
            .into_iter()
            .map(|p| {
                (0..n)
                    .map(|i| a.row(i).iter().zip(b.row(p[i]).iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        (best / n as f64).sqrt()
    }

    fn random_points(rng: &mut SeededRng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-3.0..3.0))
    }

    #[test]
    fn w2_small_examples() {
        assert_eq!(wasserstein2(&array![[0.0]], &array![[1.0]]).unwrap(), 1.0);
        let a = array![[0.0, 1.0], [2.0, -1.0], [4.0, 4.0]];
        assert_eq!(wasserstein2(&a, &a).unwrap(), 0.0);
        // Sorted 1-d samples are matched in order.
        let x = array![[3.0], [0.0], [1.0]];
        let y = array![[2.5], [-1.0], [0.0]];
        let want = ((0.25 + 1.0 + 1.0) / 3.0f64).sqrt();
        assert!((wasserstein2(&x, &y).unwrap() - want).abs() < 1e-15);
        assert!(wasserstein2(&x, &a).is_err());
    }

    #[test]
    fn assignment_on_a_known_matrix() {
        let c = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let p = min_cost_assignment(&c);
        let total: f64 = p.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum();
        assert_eq!(total, 5.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn w2_matches_exhaustive_search(seed in any::<u64>(), n in 1usize..=8, d in 1usize..=3) {
            let mut rng = stream(seed, 0);
            let a = random_points(&mut rng, n, d);
            let b = random_points(&mut rng, n, d);
            let got = wasserstein2(&a, &b).unwrap();
            prop_assert!((got - brute_force(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn w2_is_symmetric_and_permutation_invariant(seed in any::<u64>(), n in 2usize..40) {
            let mut rng = stream(seed, 0);
            let a = random_points(&mut rng, n, 2);
            let b = random_points(&mut rng, n, 2);
            let w = wasserstein2(&a, &b).unwrap();
            prop_assert!((w - wasserstein2(&b, &a).unwrap()).abs() < 1e-12);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let p = a.select(ndarray::Axis(0), &idx);
            prop_assert!((w - wasserstein2(&p, &b).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_model_has_zero_bounds() {
        let m = SamplerModel::new(NetConfig::new(2), 0).unwrap();
        let e = build_gaussian(2, 4.0);
        let s = Schedule::uniform(1).unwrap();
        let lo = elbo(&m, &e, &s, 4.0, 256, &mut stream(0, streams::EVAL)).unwrap();
        assert!(lo.mean.abs() < 1e-12 && lo.se < 1e-12);
        let gt = e.sample_ground_truth(256, 0).unwrap();
        let hi = eubo(&m, &e, &s, 4.0, &gt, &mut stream(0, streams::EVAL)).unwrap();
        assert!(hi.mean.abs() < 1e-12 && hi.se < 1e-12);
    }

    #[test]
    fn bounds_sandwich_log_z_for_untrained_models() {
        let e = build_energy(EnergyKind::Gmm25, 42);
        let s = Schedule::harmonic(5).unwrap();
        for seed in 0..3 {
            let mut m = SamplerModel::new(NetConfig::new(2), seed).unwrap();
            m.perturb_parameters(0.05, seed);
            let ev = evaluate(&m, &e, &s, 5.0, 512, seed, true).unwrap();
            assert!(ev.report.sandwich_holds(e.log_partition(), 3.0), "{:?}", ev.report);
            assert!(ev.report.elbo <= ev.report.eubo);
            assert_eq!(ev.report.elbo_gap, ev.report.elbo);
        }
    }

    #[test]
    fn evaluation_is_seeded() {
        let e = build_energy(EnergyKind::FunnelEasy, 42);
        let s = Schedule::uniform(3).unwrap();
        let m = SamplerModel::new(NetConfig::new(10), 1).unwrap();
        let a = evaluate(&m, &e, &s, 1.0, 64, 7, true).unwrap().report;
        let b = evaluate(&m, &e, &s, 1.0, 64, 7, true).unwrap().report;
        assert_eq!(a, b);
        let json = serde_json::to_string(&a).unwrap();
        for key in ["elbo", "eubo", "elbo_gap", "eubo_gap", "w2", "logz_hat", "n_samples", "seed"] {
            assert!(json.contains(&format!("\"{key}\"")));
        }
    }

    #[test]
    fn too_few_samples() {
        let m = SamplerModel::new(NetConfig::new(2), 0).unwrap();
        let e = build_energy(EnergyKind::Gmm25, 42);
        let s = Schedule::harmonic(2).unwrap();
        assert!(matches!(elbo(&m, &e, &s, 5.0, 1, &mut stream(0, 0)), Err(MetricsError::TooFewSamples(1))));
    }
}
