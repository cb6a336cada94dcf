use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    OnPolicy,
    Explore,
    BackwardFromBuffer,
    Replayed,
}

/// One path `X_0, ..., X_1` with its cached log-densities.
///
/// `log_pb[i]` is `log p_b(X_{t_i} | X_{t_{i+1}})`; entry 0 is the Dirac step
/// into the origin and is always 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `(T+1) x d`.
    pub states: Array2<f64>,
    pub log_pf: Vec<f64>,
    pub log_pb: Vec<f64>,
    pub energy: f64,
    pub provenance: Provenance,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.log_pf.len()
    }

    /// `Σ log p_f + E(X_1) - Σ log p_b + log_z`.
    pub fn log_ratio(&self, log_z: f64) -> f64 {
        self.log_pf.iter().sum::<f64>() + self.energy - self.log_pb.iter().sum::<f64>() + log_z
    }
}

#[derive(Serialize)]
struct Record<'a> {
    states: Vec<Vec<f64>>,
    log_pf: &'a [f64],
    log_pb: &'a [f64],
    energy: f64,
    provenance: Provenance,
}

/// A batch of paths sharing one schedule, stored time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    /// `T + 1` matrices of shape `n x d`; `states[0]` is all zeros.
    pub states: Vec<Array2<f64>>,
    /// `n x T`.
    pub log_pf: Array2<f64>,
    /// `n x T`, column 0 fixed at 0.
    pub log_pb: Array2<f64>,
    pub energy: Array1<f64>,
    /// Standard-normal draws used for each step, when recorded.
    pub noise: Option<Vec<Array2<f64>>>,
    pub provenance: Provenance,
    /// Rows removed because their states or energies were not finite.
    pub dropped: usize,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.energy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.states[0].ncols()
    }

    pub fn terminal(&self) -> &Array2<f64> {
        self.states.last().expect("at least one state")
    }

    /// Fraction of the originally sampled rows that were dropped.
    pub fn dropped_fraction(&self) -> f64 {
        let total = self.len() + self.dropped;
        if total == 0 {
            0.0
        } else {
            self.dropped as f64 / total as f64
        }
    }

    /// All states stacked time-major: `((T+1) n) x d`.
    pub fn stacked_states(&self) -> Array2<f64> {
        let views: Vec<_> = self.states.iter().map(|s| s.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("equal widths")
    }

    /// Per-row `Σ log p_f + E(X_1) - Σ log p_b + log_z`.
    pub fn log_ratio(&self, log_z: f64) -> Array1<f64> {
        let pf = self.log_pf.sum_axis(Axis(1));
        let pb = self.log_pb.sum_axis(Axis(1));
        &pf + &self.energy - &pb + log_z
    }

    pub fn row_is_finite(&self, i: usize) -> bool {
        self.energy[i].is_finite()
            && self.states.iter().all(|s| s.row(i).iter().all(|v| v.is_finite()))
            && self.log_pf.row(i).iter().chain(self.log_pb.row(i).iter()).all(|v| v.is_finite())
    }

    /// Keeps the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let pick = |a: &Array2<f64>| a.select(Axis(0), rows);
        Self {
            states: self.states.iter().map(pick).collect(),
            log_pf: pick(&self.log_pf),
            log_pb: pick(&self.log_pb),
            energy: self.energy.select(Axis(0), rows),
            noise: self.noise.as_ref().map(|n| n.iter().map(pick).collect()),
            provenance: self.provenance,
            dropped: self.dropped,
        }
    }

    /// Removes rows with any non-finite state, energy or log-density and
    /// counts them in `dropped`.
    pub fn drop_non_finite(mut self) -> Self {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.row_is_finite(i)).collect();
        if keep.len() == self.len() {
            return self;
        }
        let removed = self.len() - keep.len();
        self = self.select(&keep);
        self.dropped += removed;
        self
    }

    pub fn trajectory(&self, i: usize) -> Trajectory {
        let mut states = Array2::zeros((self.states.len(), self.dim()));
        for (k, s) in self.states.iter().enumerate() {
            states.row_mut(k).assign(&s.row(i));
        }
        Trajectory {
            states,
            log_pf: self.log_pf.row(i).to_vec(),
            log_pb: self.log_pb.row(i).to_vec(),
            energy: self.energy[i],
            provenance: self.provenance,
        }
    }

    /// Reassembles a batch from single trajectories with equal shapes.
    pub fn from_trajectories(trajs: &[&Trajectory], provenance: Provenance) -> Self {
        assert!(!trajs.is_empty(), "from_trajectories needs at least one trajectory");
        let (steps1, d) = trajs[0].states.dim();
        let n = trajs.len();
        let mut states = vec![Array2::zeros((n, d)); steps1];
        let mut log_pf = Array2::zeros((n, steps1 - 1));
        let mut log_pb = Array2::zeros((n, steps1 - 1));
        let mut energy = Array1::zeros(n);
        for (i, t) in trajs.iter().enumerate() {
            assert_eq!(t.states.dim(), (steps1, d), "trajectory shapes differ");
            for (k, s) in states.iter_mut().enumerate() {
                s.row_mut(i).assign(&t.states.row(k));
            }
            log_pf.row_mut(i).assign(&ndarray::ArrayView1::from(&t.log_pf[..]));
            log_pb.row_mut(i).assign(&ndarray::ArrayView1::from(&t.log_pb[..]));
            energy[i] = t.energy;
        }
        Self { states, log_pf, log_pb, energy, noise: None, provenance, dropped: 0 }
    }

    /// One JSON object per trajectory: `states`, `log_pf`, `log_pb`, `energy`, `provenance`.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for i in 0..self.len() {
            let states = self.states.iter().map(|s| s.row(i).to_vec()).collect();
            let pf = self.log_pf.row(i).to_vec();
            let pb = self.log_pb.row(i).to_vec();
            let rec = Record { states, log_pf: &pf, log_pb: &pb, energy: self.energy[i], provenance: self.provenance };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
