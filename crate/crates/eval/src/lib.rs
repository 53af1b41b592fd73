//! Metric computation and report emission: control metrics (energy,
//! deviation, fidelity), observable traces, latent dumps, and the tabular
//! JSON/CSV reports.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use aqnode::{AqnodeModel, SignalSpec, SignalTrack};
use control::{ClosedLoopResult, ControllerLabel};
use datagen::{Split, Trajectory};
use dynamics::{fidelity, populations, purity, AugmentedState, BlochState, ControlInput};
use integrate::TimeGrid;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report parse error on {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] aqnode::AqnodeError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.to_path_buf(), source }
}

/// Whether a metrics row scores the true plant track or the model's
/// decoded predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    Real,
    Predicted,
}

/// One row of the closed-loop metrics table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlMetrics {
    pub mode: MetricMode,
    pub controller: ControllerLabel,
    pub split: Split,
    /// Bloch-track MSE between predicted and real closed-loop trajectories.
    pub traj_mse: f64,
    /// Integral of u_x^2 + u_y^2 over the run.
    pub energy: f64,
    /// Squared distance of the final state from the target.
    pub deviation: f64,
    /// (1 + Y(T) . target) / 2.
    pub fidelity: f64,
}

/// Trapezoidal quadrature of u_x^2 + u_y^2 on the control grid.
pub fn energy_trapezoid(controls: &[ControlInput], grid: TimeGrid) -> Result<f64, EvalError> {
    if controls.len() != grid.n_points() {
        return Err(EvalError::Shape(format!(
            "control schedule has {} entries, grid has {} points",
            controls.len(),
            grid.n_points()
        )));
    }
    let dt = grid.dt();
    let mut acc = 0.0;
    for (i, u) in controls.iter().enumerate() {
        let w = if i == 0 || i == grid.n_steps { 0.5 } else { 1.0 };
        acc += w * (u.ux * u.ux + u.uy * u.uy);
    }
    Ok(acc * dt)
}

/// Score one closed-loop run. Deviation and fidelity come from the final
/// plant state (`Real`) or the final decoded prediction (`Predicted`);
/// energy and the predicted-vs-real Bloch MSE are mode-independent.
pub fn control_metrics(
    res: &ClosedLoopResult,
    target: &BlochState,
    mode: MetricMode,
    split: Split,
) -> Result<ControlMetrics, EvalError> {
    let n = res.grid.n_points();
    if res.plant.len() != n || res.predicted.len() != n || res.controls.len() != n {
        return Err(EvalError::Shape("closed-loop tracks do not cover the grid".into()));
    }
    let energy = energy_trapezoid(&res.controls, res.grid)?;
    let mut mse = 0.0;
    for (s, p) in res.plant.iter().zip(&res.predicted) {
        let e = [p[0] - s.bloch.x, p[1] - s.bloch.y, p[2] - s.bloch.z];
        mse += e[0] * e[0] + e[1] * e[1] + e[2] * e[2];
    }
    mse /= (3 * n) as f64;

    let final_state = match mode {
        MetricMode::Real => res.plant[n - 1].bloch,
        MetricMode::Predicted => {
            let p = &res.predicted[n - 1];
            BlochState::new(p[0], p[1], p[2])
        }
    };
    let d = [final_state.x - target.x, final_state.y - target.y, final_state.z - target.z];
    Ok(ControlMetrics {
        mode,
        controller: res.label,
        split,
        traj_mse: mse,
        energy,
        deviation: d[0] * d[0] + d[1] * d[1] + d[2] * d[2],
        fidelity: fidelity(&final_state, target),
    })
}

/// Real and Predicted rows for one run, in that order.
pub fn control_metrics_rows(
    res: &ClosedLoopResult,
    target: &BlochState,
    split: Split,
) -> Result<[ControlMetrics; 2], EvalError> {
    Ok([
        control_metrics(res, target, MetricMode::Real, split)?,
        control_metrics(res, target, MetricMode::Predicted, split)?,
    ])
}

/// Per-time physical observables of a Bloch trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableTrace {
    pub t: Vec<f64>,
    pub purity: Vec<f64>,
    /// Coherence x(t).
    pub coherence: Vec<f64>,
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
}

pub fn trace_observables(states: &[AugmentedState], grid: TimeGrid) -> Result<ObservableTrace, EvalError> {
    if states.len() != grid.n_points() {
        return Err(EvalError::Shape("state track does not cover the grid".into()));
    }
    let mut tr = ObservableTrace {
        t: grid.points(),
        purity: Vec::with_capacity(states.len()),
        coherence: Vec::with_capacity(states.len()),
        p1: Vec::with_capacity(states.len()),
        p2: Vec::with_capacity(states.len()),
    };
    for s in states {
        let (p1, p2) = populations(&s.bloch);
        tr.purity.push(purity(&s.bloch));
        tr.coherence.push(s.bloch.x);
        tr.p1.push(p1);
        tr.p2.push(p2);
    }
    Ok(tr)
}

/// One trajectory's worth of latent rows for the CSV dump.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrack {
    pub traj_id: usize,
    pub label: String,
    pub grid: TimeGrid,
    /// Node i occupies `[i * latent_dim .. (i+1) * latent_dim]`.
    pub latents: Vec<f64>,
    pub latent_dim: usize,
}

impl LatentTrack {
    pub fn from_closed_loop(res: &ClosedLoopResult, traj_id: usize, label: &str) -> Self {
        LatentTrack {
            traj_id,
            label: label.to_string(),
            grid: res.grid,
            latents: res.latents.clone(),
            latent_dim: res.latent_dim,
        }
    }
}

/// CSV with columns traj_id, label, t, h_1..h_d.
pub fn write_latents_csv(tracks: &[LatentTrack], out: &Path) -> Result<(), EvalError> {
    let d = tracks.first().map(|tr| tr.latent_dim).unwrap_or(0);
    if tracks.iter().any(|tr| tr.latent_dim != d) {
        return Err(EvalError::Shape("latent tracks disagree on latent_dim".into()));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(out).map_err(io_err(out))?);
    let mut header = String::from("traj_id,label,t");
    for j in 1..=d {
        header.push_str(&format!(",h_{j}"));
    }
    writeln!(f, "{header}").map_err(io_err(out))?;
    for tr in tracks {
        if tr.latents.len() != tr.grid.n_points() * d {
            return Err(EvalError::Shape("latent track does not cover its grid".into()));
        }
        for i in 0..tr.grid.n_points() {
            let mut row = format!("{},{},{}", tr.traj_id, tr.label, tr.grid.point(i));
            for v in &tr.latents[i * d..(i + 1) * d] {
                row.push_str(&format!(",{v}"));
            }
            writeln!(f, "{row}").map_err(io_err(out))?;
        }
    }
    Ok(())
}

/// Encode and roll out every trajectory, dumping raw latents tagged with
/// `label`.
pub fn dump_latents(
    model: &AqnodeModel,
    trajs: &[Trajectory],
    label: &str,
    out: &Path,
) -> Result<(), EvalError> {
    let mut tracks = Vec::with_capacity(trajs.len());
    for (id, tr) in trajs.iter().enumerate() {
        let signals = match model.signal_spec {
            SignalSpec::Filtering => SignalTrack::filtering(tr.grid, tr.dy.clone())?,
            SignalSpec::Control => SignalTrack::control(
                tr.grid,
                tr.dy.clone(),
                tr.controls.iter().map(|u| u.ux).collect(),
                tr.controls.iter().map(|u| u.uy).collect(),
            )?,
        };
        let h0 = model.encode(&tr.y0(), tr.dy_prefix(model.prefix_len))?;
        let latents = model.rollout(&h0, &signals)?;
        tracks.push(LatentTrack {
            traj_id: id,
            label: label.to_string(),
            grid: tr.grid,
            latents,
            latent_dim: model.latent_dim,
        });
    }
    write_latents_csv(&tracks, out)
}

/// Rows that know how to render themselves as CSV.
pub trait CsvRow {
    fn headers() -> &'static [&'static str];
    fn fields(&self) -> Vec<String>;
}

impl CsvRow for ControlMetrics {
    fn headers() -> &'static [&'static str] {
        &["split", "mode", "control", "mse", "energy", "dev", "fidelity"]
    }

    fn fields(&self) -> Vec<String> {
        let mode = match self.mode {
            MetricMode::Real => "real",
            MetricMode::Predicted => "predicted",
        };
        let ctrl = match self.controller {
            ControllerLabel::Pd => "pd",
            ControllerLabel::Lqr => "lqr",
        };
        let split = match self.split {
            Split::Train => "train",
            Split::Wd => "wd",
            Split::Ood => "ood",
        };
        vec![
            split.into(),
            mode.into(),
            ctrl.into(),
            self.traj_mse.to_string(),
            self.energy.to_string(),
            self.deviation.to_string(),
            self.fidelity.to_string(),
        ]
    }
}

/// One row of the per-component MSE tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReportRow {
    pub label: String,
    pub mse: trainer::MseRow,
}

impl CsvRow for MseReportRow {
    fn headers() -> &'static [&'static str] {
        &["label", "mse_x", "mse_y", "mse_z", "mse_delta", "mse_gamma"]
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.label.clone(),
            self.mse.x.to_string(),
            self.mse.y.to_string(),
            self.mse.z.to_string(),
            self.mse.delta.to_string(),
            self.mse.gamma.to_string(),
        ]
    }
}

/// Write `<base>.json` (machine-readable, lossless) and `<base>.csv`
/// (human-readable table) for any report row type.
pub fn emit_report<T: Serialize + CsvRow>(rows: &[T], out_base: &Path) -> Result<(), EvalError> {
    let json_path = out_base.with_extension("json");
    let json = serde_json::to_string_pretty(rows)
        .map_err(|e| EvalError::Parse { path: json_path.clone(), msg: e.to_string() })?;
    std::fs::write(&json_path, json + "\n").map_err(io_err(&json_path))?;

    let csv_path = out_base.with_extension("csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&csv_path).map_err(io_err(&csv_path))?);
    writeln!(f, "{}", T::headers().join(",")).map_err(io_err(&csv_path))?;
    for row in rows {
        writeln!(f, "{}", row.fields().join(",")).map_err(io_err(&csv_path))?;
    }
    Ok(())
}

/// Parse back the JSON side of an emitted report.
pub fn load_report<T: DeserializeOwned>(out_base: &Path) -> Result<Vec<T>, EvalError> {
    let json_path = out_base.with_extension("json");
    let text = std::fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    serde_json::from_str(&text).map_err(|e| EvalError::Parse { path: json_path, msg: e.to_string() })
}
