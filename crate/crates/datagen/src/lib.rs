//! Ground-truth trajectory synthesis: samples system parameters and initial
//! states per phase regime, integrates the plant, records measurement traces,
//! and reads/writes newline-delimited JSON datasets.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use dynamics::{
    delta_t, gamma_t, measurement_rate, plant_step, AugmentedState, BlochState, ControlInput,
    SystemParams,
};
use integrate::TimeGrid;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DATASET_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid regime: {0}")]
    BadRegime(String),
    #[error(transparent)]
    Dynamics(#[from] dynamics::DynamicsError),
    #[error("non-finite plant state at step {step}")]
    NonFinite { step: usize },
}

fn io_err(path: &Path, source: std::io::Error) -> DatagenError {
    DatagenError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    /// Within-distribution test draws.
    Wd,
    /// Out-of-distribution test draws.
    Ood,
}

/// Closed parameter interval; lo == hi pins the value exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi && lo.is_finite() && hi.is_finite());
        Interval { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Interval::new(v, v)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

/// Sampling regime for one phase/split combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseRegime {
    pub phase: u8,
    pub split: Split,
    pub alpha: Interval,
    pub r: Interval,
    pub m: Interval,
    pub omega0: Interval,
}

impl PhaseRegime {
    pub fn new(phase: u8, split: Split) -> Result<Self, DatagenError> {
        let (alpha, r) = match split {
            Split::Train => (Interval::new(0.4, 0.7), Interval::new(0.2, 0.5)),
            Split::Wd => (Interval::new(0.45, 0.65), Interval::new(0.25, 0.45)),
            Split::Ood => (Interval::new(0.2, 0.8), Interval::new(0.1, 0.6)),
        };
        let (m, omega0) = match phase {
            1 => (Interval::point(0.4), Interval::point(1.0)),
            // phase 3 control runs draw from the phase 2 parameter ranges
            2 | 3 => match split {
                Split::Train => (Interval::new(0.3, 0.5), Interval::new(0.8, 1.2)),
                Split::Wd => (Interval::new(0.32, 0.48), Interval::new(0.85, 1.15)),
                Split::Ood => (Interval::new(0.2, 0.6), Interval::new(0.6, 1.5)),
            },
            other => return Err(DatagenError::BadRegime(format!("phase {other} not in 1..=3"))),
        };
        Ok(PhaseRegime { phase, split, alpha, r, m, omega0 })
    }

    /// Horizon defaults: T = 5, dt = 0.01 for the filtering phases; the
    /// control phase settles fast and runs T = 1, dt = 0.002.
    pub fn default_grid(phase: u8) -> Result<TimeGrid, DatagenError> {
        match phase {
            1 | 2 => Ok(TimeGrid::new(0.0, 5.0, 500)),
            3 => Ok(TimeGrid::new(0.0, 1.0, 500)),
            other => Err(DatagenError::BadRegime(format!("phase {other} not in 1..=3"))),
        }
    }
}

/// One simulated plant run on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<AugmentedState>,
    pub dy: Vec<f64>,
    pub controls: Vec<ControlInput>,
    pub params: SystemParams,
    pub seed: u64,
}

impl Trajectory {
    pub fn y0(&self) -> [f64; 5] {
        self.states[0].to_array()
    }

    /// dY samples for the first `k` grid points (encoder prefix).
    pub fn dy_prefix(&self, k: usize) -> &[f64] {
        &self.dy[..k]
    }

    /// Flat truth trajectory, node i at `[5i .. 5i+5]`, layout
    /// [x, y, z, delta, gamma].
    pub fn truth_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.states.len() * 5);
        for s in &self.states {
            out.extend_from_slice(&s.to_array());
        }
        out
    }
}

/// Uniform independent draws within the regime intervals (alpha, r, M,
/// omega0 in that fixed order); detection efficiency and temperature stay at
/// their defaults.
pub fn sample_params<R: Rng>(regime: &PhaseRegime, rng: &mut R) -> SystemParams {
    let alpha = regime.alpha.sample(rng);
    let r = regime.r.sample(rng);
    let m = regime.m.sample(rng);
    let omega0 = regime.omega0.sample(rng);
    SystemParams::new(alpha, r, m, omega0)
}

/// Bloch vector uniform over the unit ball (Gaussian direction, cube-root
/// radius); the hidden rates start at their exact t = 0 values, zero.
pub fn sample_initial_state<R: Rng>(rng: &mut R) -> AugmentedState {
    let dir = loop {
        let n: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if norm > 1e-12 {
            break [n[0] / norm, n[1] / norm, n[2] / norm];
        }
    };
    let radius = rng.random::<f64>().cbrt();
    AugmentedState::new(
        BlochState::new(dir[0] * radius, dir[1] * radius, dir[2] * radius),
        0.0,
        0.0,
    )
}

/// y0 + eps * v with v a uniformly random unit direction in 5-d, so the
/// perturbed state sits at Euclidean distance exactly eps.
pub fn perturb_initial<R: Rng>(y0: &AugmentedState, eps: f64, rng: &mut R) -> AugmentedState {
    assert!(eps >= 0.0 && eps.is_finite());
    let mut n = [0.0f64; 5];
    let norm = loop {
        for v in &mut n {
            *v = StandardNormal.sample(rng);
        }
        let norm = n.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            break norm;
        }
    };
    let base = y0.to_array();
    let mut out = [0.0f64; 5];
    for i in 0..5 {
        out[i] = base[i] + eps * n[i] / norm;
    }
    AugmentedState::from_array(out)
}

/// Integrate the plant over the grid with zero-order-held controls, recording
/// the augmented state, the measurement-rate trace, and the applied controls
/// at every node. Optional Gaussian observation noise perturbs dY only; the
/// evolution itself stays deterministic.
pub fn simulate_trajectory<R: Rng>(
    p: &SystemParams,
    y0: &AugmentedState,
    controls: Option<&[ControlInput]>,
    grid: TimeGrid,
    noise_std: f64,
    rng: &mut R,
) -> Result<Trajectory, DatagenError> {
    p.validate()?;
    let n_points = grid.n_points();
    if let Some(c) = controls {
        if c.len() != n_points {
            return Err(DatagenError::Shape(format!(
                "control schedule has {} entries, grid has {n_points} points",
                c.len()
            )));
        }
    }
    let u_at = |i: usize| controls.map_or(ControlInput::ZERO, |c| c[i]);
    let mut states = Vec::with_capacity(n_points);
    let mut dy = Vec::with_capacity(n_points);
    let mut ctrl = Vec::with_capacity(n_points);
    let mut s = y0.bloch;
    let dt = grid.dt();
    for i in 0..n_points {
        let t = grid.point(i);
        if !(s.x.is_finite() && s.y.is_finite() && s.z.is_finite()) {
            return Err(DatagenError::NonFinite { step: i });
        }
        let mut record = measurement_rate(&s, p);
        if noise_std > 0.0 {
            let noise: f64 = StandardNormal.sample(rng);
            record += noise_std * noise;
        }
        states.push(AugmentedState::new(s, delta_t(t, p), gamma_t(t, p)));
        dy.push(record);
        ctrl.push(u_at(i));
        if i < grid.n_steps {
            s = plant_step(t, dt, &s, &u_at(i), p);
        }
    }
    Ok(Trajectory { grid, states, dy, controls: ctrl, params: *p, seed: 0 })
}

/// Like [`simulate_trajectory`] but the control for each step comes from a
/// feedback closure observing the current node (index, time, true state,
/// recorded dY). Used to synthesize controlled training data.
pub fn simulate_with_feedback<F>(
    p: &SystemParams,
    y0: &AugmentedState,
    grid: TimeGrid,
    mut feedback: F,
) -> Result<Trajectory, DatagenError>
where
    F: FnMut(usize, f64, &AugmentedState, f64) -> ControlInput,
{
    p.validate()?;
    let n_points = grid.n_points();
    let mut states = Vec::with_capacity(n_points);
    let mut dy = Vec::with_capacity(n_points);
    let mut ctrl = Vec::with_capacity(n_points);
    let mut s = y0.bloch;
    let dt = grid.dt();
    for i in 0..n_points {
        let t = grid.point(i);
        if !(s.x.is_finite() && s.y.is_finite() && s.z.is_finite()) {
            return Err(DatagenError::NonFinite { step: i });
        }
        let aug = AugmentedState::new(s, delta_t(t, p), gamma_t(t, p));
        let record = measurement_rate(&s, p);
        let u = feedback(i, t, &aug, record);
        states.push(aug);
        dy.push(record);
        ctrl.push(u);
        if i < grid.n_steps {
            s = plant_step(t, dt, &s, &u, p);
        }
    }
    Ok(Trajectory { grid, states, dy, controls: ctrl, params: *p, seed: 0 })
}

/// First line of every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: u32,
    pub regime: PhaseRegime,
    pub t0: f64,
    pub t1: f64,
    pub n_steps: usize,
    pub n_traj: usize,
    pub seed: u64,
    pub noise_std: f64,
}

impl DatasetHeader {
    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.t0, self.t1, self.n_steps)
    }
}

/// One dataset line: columnar arrays over grid nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub params: SystemParams,
    pub seed: u64,
    pub y0: [f64; 5],
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub delta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub dy: Vec<f64>,
    pub ux: Vec<f64>,
    pub uy: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        let n = traj.states.len();
        let mut rec = TrajectoryRecord {
            params: traj.params,
            seed: traj.seed,
            y0: traj.y0(),
            t: Vec::with_capacity(n),
            x: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
            delta: Vec::with_capacity(n),
            gamma: Vec::with_capacity(n),
            dy: traj.dy.clone(),
            ux: Vec::with_capacity(n),
            uy: Vec::with_capacity(n),
        };
        for (i, s) in traj.states.iter().enumerate() {
            rec.t.push(traj.grid.point(i));
            rec.x.push(s.bloch.x);
            rec.y.push(s.bloch.y);
            rec.z.push(s.bloch.z);
            rec.delta.push(s.delta);
            rec.gamma.push(s.gamma);
            rec.ux.push(traj.controls[i].ux);
            rec.uy.push(traj.controls[i].uy);
        }
        rec
    }

    pub fn into_trajectory(self, grid: TimeGrid) -> Result<Trajectory, DatagenError> {
        let n = grid.n_points();
        let cols: [(&str, usize); 9] = [
            ("t", self.t.len()),
            ("x", self.x.len()),
            ("y", self.y.len()),
            ("z", self.z.len()),
            ("delta", self.delta.len()),
            ("gamma", self.gamma.len()),
            ("dy", self.dy.len()),
            ("ux", self.ux.len()),
            ("uy", self.uy.len()),
        ];
        for (name, len) in cols {
            if len != n {
                return Err(DatagenError::Shape(format!(
                    "column {name} has {len} entries, grid has {n} points"
                )));
            }
        }
        let mut states = Vec::with_capacity(n);
        let mut controls = Vec::with_capacity(n);
        for i in 0..n {
            states.push(AugmentedState::new(
                BlochState::new(self.x[i], self.y[i], self.z[i]),
                self.delta[i],
                self.gamma[i],
            ));
            controls.push(ControlInput::new(self.ux[i], self.uy[i]));
        }
        if states[0].to_array() != self.y0 {
            return Err(DatagenError::Shape("y0 does not match the first node".into()));
        }
        Ok(Trajectory { grid, states, dy: self.dy, controls, params: self.params, seed: self.seed })
    }
}

/// Stream trajectories to a dataset file: header line, then one record line
/// per trajectory.
pub fn write_dataset(
    path: &Path,
    header: &DatasetHeader,
    trajectories: &[Trajectory],
) -> Result<(), DatagenError> {
    if header.n_traj != trajectories.len() {
        return Err(DatagenError::Shape(format!(
            "header count {} != {} trajectories",
            header.n_traj,
            trajectories.len()
        )));
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let emit = |w: &mut BufWriter<File>, v: String| -> Result<(), DatagenError> {
        w.write_all(v.as_bytes()).map_err(|e| io_err(path, e))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))
    };
    emit(&mut w, serde_json::to_string(header).expect("header serializes"))?;
    for traj in trajectories {
        let rec = TrajectoryRecord::from_trajectory(traj);
        emit(&mut w, serde_json::to_string(&rec).expect("record serializes"))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Parse a dataset file written by [`write_dataset`] / [`generate_dataset`].
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Trajectory>), DatagenError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let parse_err = |line: usize, msg: String| DatagenError::Parse {
        path: path.display().to_string(),
        line: line + 1,
        msg,
    };
    let header: DatasetHeader = match lines.next() {
        Some((i, Ok(text))) => {
            serde_json::from_str(&text).map_err(|e| parse_err(i, e.to_string()))?
        }
        Some((_, Err(e))) => return Err(io_err(path, e)),
        None => return Err(parse_err(0, "empty dataset file".into())),
    };
    if header.schema != DATASET_SCHEMA {
        return Err(parse_err(0, format!("unsupported schema {}", header.schema)));
    }
    let grid = header.grid();
    let mut out = Vec::with_capacity(header.n_traj);
    for (i, line) in lines {
        let text = line.map_err(|e| io_err(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord =
            serde_json::from_str(&text).map_err(|e| parse_err(i, e.to_string()))?;
        out.push(rec.into_trajectory(grid).map_err(|e| parse_err(i, e.to_string()))?);
    }
    if out.len() != header.n_traj {
        return Err(parse_err(
            0,
            format!("header promises {} trajectories, file has {}", header.n_traj, out.len()),
        ));
    }
    Ok((header, out))
}

/// Sample and integrate `n_traj` uncontrolled trajectories and write them to
/// `path`. Trajectory i draws from an independent, replayable RNG stream of
/// the master seed, so output is byte-identical for a fixed seed regardless
/// of batching.
pub fn generate_dataset(
    regime: &PhaseRegime,
    n_traj: usize,
    grid: TimeGrid,
    seed: u64,
    noise_std: f64,
    path: &Path,
) -> Result<DatasetHeader, DatagenError> {
    if n_traj == 0 {
        return Err(DatagenError::Shape("n_traj must be >= 1".into()));
    }
    let mut trajectories = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let params = sample_params(regime, &mut rng);
        let y0 = sample_initial_state(&mut rng);
        let mut traj = simulate_trajectory(&params, &y0, None, grid, noise_std, &mut rng)?;
        traj.seed = i as u64;
        trajectories.push(traj);
    }
    let header = DatasetHeader {
        schema: DATASET_SCHEMA,
        regime: *regime,
        t0: grid.t0,
        t1: grid.t1,
        n_steps: grid.n_steps,
        n_traj,
        seed,
        noise_std,
    };
    write_dataset(path, &header, &trajectories)?;
    Ok(header)
}
