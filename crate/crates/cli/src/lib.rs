//! Command-line plumbing: subcommand types, the one checked-in defaults
//! file, dataset/training/evaluation/control/perturbation runners, and
//! artifact writers. `main.rs` stays a thin argv shell so tests and the
//! acceptance suite drive the same code paths.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use aqnode::{AqnodeModel, SignalSpec};
use clap::{Parser, Subcommand, ValueEnum};
use control::{
    closed_loop_run, lqr_control, lqr_gain_schedule, ClosedLoopResult, Controller, LqrConfig,
    PdGains, RateSource,
};
use datagen::{
    sample_initial_state, sample_params, simulate_trajectory, simulate_with_feedback,
    write_dataset, DatasetHeader, PhaseRegime, Split, DATASET_SCHEMA,
};
use dynamics::{AugmentedState, BlochState, ControlInput};
use eval::{
    control_metrics_rows, emit_report, write_latents_csv, ControlMetrics, LatentTrack,
    MseReportRow,
};
use integrate::TimeGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use trainer::{Checkpoint, MseRow, PerturbationStudy, TrainConfig, TrainReport};

pub const OUT_ROOT_ENV: &str = "QLAB_OUT";
pub const META_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {path}: {msg}")]
    Json { path: PathBuf, msg: String },
    #[error(transparent)]
    Data(#[from] datagen::DatagenError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
    #[error(transparent)]
    Control(#[from] control::ControlError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Model(#[from] aqnode::AqnodeError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// defaults file

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub t0: f64,
    pub t1: f64,
    pub n_steps: usize,
}

impl GridSpec {
    pub fn to_grid(self) -> TimeGrid {
        TimeGrid::new(self.t0, self.t1, self.n_steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDefaults {
    pub phase1: GridSpec,
    pub phase2: GridSpec,
    pub phase3: GridSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDefaults {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub prefix_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDefaults {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kappa: f64,
    pub beta: f64,
    pub checkpoint_every: usize,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrDefaults {
    pub q_diag: [f64; 3],
    pub r_diag: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlTaskDefaults {
    pub y0: [f64; 3],
    pub target: [f64; 3],
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase3MixDefaults {
    pub lqr_fraction: f64,
    pub sinusoid_fraction: f64,
    pub jitter_radius: f64,
    pub sinusoid_max_amplitude: f64,
    pub sinusoid_freq_lo: f64,
    pub sinusoid_freq_hi: f64,
    pub exploration_amplitude: f64,
    pub exploration_freq_lo: f64,
    pub exploration_freq_hi: f64,
}

/// Single source for every physical and run default, checked in at
/// `configs/defaults.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Defaults {
    pub schema: u32,
    pub zeta: f64,
    pub kbt: f64,
    pub grids: GridDefaults,
    pub model: ModelDefaults,
    pub training: TrainingDefaults,
    pub pd_gains: PdGains,
    pub lqr: LqrDefaults,
    pub control_task: ControlTaskDefaults,
    pub phase3_mix: Phase3MixDefaults,
    pub perturbation_eps: Vec<f64>,
}

impl Defaults {
    pub fn grid(&self, phase: u8) -> Result<TimeGrid, CliError> {
        match phase {
            1 => Ok(self.grids.phase1.to_grid()),
            2 => Ok(self.grids.phase2.to_grid()),
            3 => Ok(self.grids.phase3.to_grid()),
            other => Err(CliError::Usage(format!("phase must be 1, 2, or 3 (got {other})"))),
        }
    }

    pub fn lqr_config(&self) -> LqrConfig {
        let mut q = [[0.0; 3]; 3];
        let mut r = [[0.0; 2]; 2];
        for i in 0..3 {
            q[i][i] = self.lqr.q_diag[i];
        }
        for i in 0..2 {
            r[i][i] = self.lqr.r_diag[i];
        }
        LqrConfig { q, r, target: self.target(), p_terminal: [[0.0; 3]; 3] }
    }

    pub fn target(&self) -> BlochState {
        let t = self.control_task.target;
        BlochState::new(t[0], t[1], t[2])
    }

    pub fn y0(&self) -> AugmentedState {
        let s = self.control_task.y0;
        AugmentedState::new(BlochState::new(s[0], s[1], s[2]), 0.0, 0.0)
    }

    /// Training config for one phase with all defaults applied; dataset
    /// paths come from the caller.
    pub fn train_config(
        &self,
        phase: u8,
        train_data: PathBuf,
        wd_data: Option<PathBuf>,
        ood_data: Option<PathBuf>,
        seed: u64,
    ) -> TrainConfig {
        TrainConfig {
            phase,
            train_data,
            wd_data,
            ood_data,
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            loss_weights: aqnode::LossWeights {
                kappa: self.training.kappa,
                beta: self.training.beta,
            },
            prefix_len: self.model.prefix_len,
            latent_dim: self.model.latent_dim,
            hidden_dim: self.model.hidden_dim,
            signal_spec: if phase == 3 { SignalSpec::Control } else { SignalSpec::Filtering },
            seed,
            checkpoint_every: self.training.checkpoint_every,
            checkpoint_dir: None,
            threads: 1,
        }
    }
}

pub fn defaults() -> &'static Defaults {
    static CACHE: OnceLock<Defaults> = OnceLock::new();
    CACHE.get_or_init(|| {
        serde_json::from_str(include_str!("../../../configs/defaults.json"))
            .expect("configs/defaults.json is malformed")
    })
}

// ---------------------------------------------------------------------------
// argv surface

#[derive(Debug, Parser)]
#[command(name = "qlab", version, about = "qubit filtering and control laboratory")]
pub struct Cli {
    /// Worker threads for gradient computation (1 = bitwise reproducible).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Output root; falls back to $QLAB_OUT, then ./runs.
    #[arg(long, global = true)]
    pub out_root: Option<PathBuf>,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "lower")]
pub enum SplitArg {
    Train,
    Wd,
    Ood,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Wd => Split::Wd,
            SplitArg::Ood => Split::Ood,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "lower")]
pub enum ControllerArg {
    Pd,
    Lqr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "lower")]
pub enum RatesArg {
    /// Riccati design drift from model-identified rates.
    Model,
    /// Riccati design drift from the closed-form rates.
    Analytic,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Write a trajectory dataset for one phase regime.
    Generate {
        #[arg(long)]
        phase: u8,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Gaussian observation noise on the measurement record
        /// (phases 1 and 2 only).
        #[arg(long, default_value_t = 0.0)]
        noise_std: f64,
    },
    /// Train a model from a JSON config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override config fields, e.g. --set epochs=50.
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Per-component MSE of a checkpoint against a dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop control runs against freshly drawn plants.
    Control {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        controller: ControllerArg,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        n_runs: Option<usize>,
        #[arg(long, default_value_t = 3)]
        phase: u8,
        #[arg(long, value_enum, default_value_t = RatesArg::Model)]
        rates: RatesArg,
    },
    /// Initial-state perturbation study on a trained checkpoint.
    Perturb {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated perturbation radii.
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluation dataset; generated fresh when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        phase: u8,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn out_root(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

// ---------------------------------------------------------------------------
// generate

fn jitter_bloch<R: Rng>(base: &[f64; 3], radius: f64, rng: &mut R) -> BlochState {
    let mut v = [0.0f64; 3];
    for vi in &mut v {
        *vi = StandardNormal.sample(rng);
    }
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-300);
    let eps = radius * rng.random::<f64>();
    let mut s = [
        base[0] + eps * v[0] / norm,
        base[1] + eps * v[1] / norm,
        base[2] + eps * v[2] / norm,
    ];
    // keep the jittered state physical
    let r = (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
    if r > 1.0 {
        for si in &mut s {
            *si /= r;
        }
    }
    BlochState::new(s[0], s[1], s[2])
}

/// Two sinusoid components per channel, added on top of the LQR feedback in
/// the driven training runs. Without it u = -K(x, y) makes the controls an
/// exact linear readout of the transverse state, and the model learns to
/// invert them instead of filtering the measurement record; that shortcut is
/// circular once the model's own predictions close the loop.
fn exploration_dither<R: Rng>(mix: &Phase3MixDefaults, rng: &mut R) -> [(f64, f64, f64); 4] {
    std::array::from_fn(|_| {
        let amp = mix.exploration_amplitude * rng.random::<f64>();
        let freq = rng.random_range(mix.exploration_freq_lo..=mix.exploration_freq_hi);
        let phase = std::f64::consts::TAU * rng.random::<f64>();
        (amp, freq, phase)
    })
}

fn dither_at(c: &[(f64, f64, f64); 4], t: f64) -> (f64, f64) {
    let s = |k: usize| c[k].0 * (c[k].1 * t + c[k].2).sin();
    (s(0) + s(1), s(2) + s(3))
}

fn sinusoid_schedule<R: Rng>(
    grid: TimeGrid,
    mix: &Phase3MixDefaults,
    rng: &mut R,
) -> Vec<ControlInput> {
    let channel = |rng: &mut R| {
        let amp = mix.sinusoid_max_amplitude * rng.random::<f64>();
        let freq = rng.random_range(mix.sinusoid_freq_lo..=mix.sinusoid_freq_hi);
        let phase = std::f64::consts::TAU * rng.random::<f64>();
        (amp, freq, phase)
    };
    let (ax, fx, px) = channel(rng);
    let (ay, fy, py) = channel(rng);
    (0..grid.n_points())
        .map(|i| {
            let t = grid.point(i);
            ControlInput::new(ax * (fx * t + px).sin(), ay * (fy * t + py).sin())
        })
        .collect()
}

/// Phase-3 training mix: closed-loop LQR runs from jittered initial states
/// with exploration dither on the feedback (exposing the model to
/// feedback-shaped controls without an invertible u -> state map), random
/// smooth sinusoidal drives, and free decay, in the configured proportions.
pub fn generate_phase3_dataset(
    split: Split,
    n: usize,
    grid: TimeGrid,
    seed: u64,
    out: &Path,
) -> Result<DatasetHeader, CliError> {
    let d = defaults();
    let regime = PhaseRegime::new(3, split)?;
    let target = d.target();
    let lqr_cfg = d.lqr_config();
    let mix = &d.phase3_mix;
    // period-5 category pattern realizes the fractions exactly
    let period = 5usize;
    let lqr_slots = (mix.lqr_fraction * period as f64).round() as usize;
    let sin_slots = (mix.sinusoid_fraction * period as f64).round() as usize;

    let mut trajs = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let params = sample_params(&regime, &mut rng);
        let slot = i % period;
        let mut traj = if slot < lqr_slots {
            let y0 = AugmentedState::new(
                jitter_bloch(&d.control_task.y0, mix.jitter_radius, &mut rng),
                0.0,
                0.0,
            );
            let dither = exploration_dither(mix, &mut rng);
            let sched = lqr_gain_schedule(RateSource::Analytic, &params, &y0, grid, &lqr_cfg)?;
            simulate_with_feedback(&params, &y0, grid, |k, t, s, _| {
                let u = lqr_control(&sched.k[k], &s.bloch, &target);
                let (dx, dy) = dither_at(&dither, t);
                ControlInput::new(u.ux + dx, u.uy + dy)
            })?
        } else if slot < lqr_slots + sin_slots {
            let y0 = sample_initial_state(&mut rng);
            let controls = sinusoid_schedule(grid, mix, &mut rng);
            simulate_trajectory(&params, &y0, Some(&controls), grid, 0.0, &mut rng)?
        } else {
            let y0 = sample_initial_state(&mut rng);
            simulate_trajectory(&params, &y0, None, grid, 0.0, &mut rng)?
        };
        traj.seed = i as u64;
        trajs.push(traj);
    }
    let header = DatasetHeader {
        schema: DATASET_SCHEMA,
        regime,
        t0: grid.t0,
        t1: grid.t1,
        n_steps: grid.n_steps,
        n_traj: n,
        seed,
        noise_std: 0.0,
    };
    write_dataset(out, &header, &trajs)?;
    Ok(header)
}

/// Route one `generate` invocation; returns the header and written path.
pub fn generate_cmd(
    phase: u8,
    split: Split,
    n: usize,
    out: Option<PathBuf>,
    seed: u64,
    noise_std: f64,
    root: &Path,
) -> Result<(DatasetHeader, PathBuf), CliError> {
    let d = defaults();
    let grid = d.grid(phase)?;
    let split_name = match split {
        Split::Train => "train",
        Split::Wd => "wd",
        Split::Ood => "ood",
    };
    let path = out.unwrap_or_else(|| {
        root.join("datasets").join(format!("phase{phase}_{split_name}_n{n}_seed{seed}.jsonl"))
    });
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let header = if phase == 3 {
        if noise_std != 0.0 {
            return Err(CliError::Usage(
                "observation noise is only wired into the phase 1/2 generators".into(),
            ));
        }
        generate_phase3_dataset(split, n, grid, seed, &path)?
    } else {
        let regime = PhaseRegime::new(phase, split)?;
        datagen::generate_dataset(&regime, n, grid, seed, noise_std, &path)?
    };
    Ok((header, path))
}

// ---------------------------------------------------------------------------
// train

/// Apply `--set key=value` overrides onto the JSON form of a train config.
pub fn apply_overrides(
    value: &mut serde_json::Value,
    overrides: &[String],
) -> Result<(), CliError> {
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::Usage("train config must be a JSON object".into()))?;
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override '{ov}' is not key=value")))?;
        let parsed = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        obj.insert(key.to_string(), parsed);
    }
    Ok(())
}

/// Deterministic slice of a training report (excludes wall-clock timing so
/// fixed-seed artifacts stay byte-identical).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReportFile {
    pub schema: u32,
    pub seed: u64,
    pub epoch_loss: Vec<f64>,
    pub final_train_mse: Option<MseRow>,
    pub final_wd_mse: Option<MseRow>,
    pub final_ood_mse: Option<MseRow>,
    pub config: TrainConfig,
}

impl TrainReportFile {
    pub fn from_report(r: &TrainReport) -> Self {
        TrainReportFile {
            schema: META_SCHEMA,
            seed: r.seed,
            epoch_loss: r.epoch_loss.clone(),
            final_train_mse: r.final_train_mse,
            final_wd_mse: r.final_wd_mse,
            final_ood_mse: r.final_ood_mse,
            config: r.config.clone(),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Json { path: path.to_path_buf(), msg: e.to_string() })?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Json { path: path.to_path_buf(), msg: e.to_string() })
}

fn write_meta(dir: &Path, seed: u64, echo: serde_json::Value) -> Result<(), CliError> {
    let meta = serde_json::json!({
        "schema": META_SCHEMA,
        "seed": seed,
        "invocation": echo,
        "defaults_schema": defaults().schema,
    });
    write_json(&dir.join("meta.json"), &meta)
}

pub fn train_cmd(
    config_path: &Path,
    overrides: &[String],
    out_dir: &Path,
    threads: usize,
) -> Result<(AqnodeModel, TrainReport), CliError> {
    let mut value: serde_json::Value = read_json(config_path)?;
    apply_overrides(&mut value, overrides)?;
    let mut cfg: TrainConfig = serde_json::from_value(value)
        .map_err(|e| CliError::Json { path: config_path.to_path_buf(), msg: e.to_string() })?;
    cfg.threads = threads;
    if cfg.checkpoint_dir.is_none() {
        cfg.checkpoint_dir = Some(out_dir.to_path_buf());
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let (model, report) = trainer::train(&cfg)?;
    write_json(&out_dir.join("train_report.json"), &TrainReportFile::from_report(&report))?;
    write_json(
        &out_dir.join("timing.json"),
        &serde_json::json!({ "wall_clock_secs": report.wall_clock_secs }),
    )?;
    write_meta(out_dir, cfg.seed, serde_json::json!({ "cmd": "train", "config": cfg }))?;
    Ok((model, report))
}

pub fn load_model(path: &Path) -> Result<AqnodeModel, CliError> {
    Ok(Checkpoint::load(path)?.to_model()?)
}

// ---------------------------------------------------------------------------
// evaluate

pub fn evaluate_cmd(
    model_path: &Path,
    data_path: &Path,
    out_base: &Path,
) -> Result<MseRow, CliError> {
    let model = load_model(model_path)?;
    let (header, trajs) = datagen::read_dataset(data_path)?;
    let row = trainer::evaluate_split(&model, &trajs)?;
    if let Some(dir) = out_base.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let label = data_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    emit_report(&[MseReportRow { label, mse: row }], out_base)?;
    if let Some(dir) = out_base.parent() {
        write_meta(
            dir,
            header.seed,
            serde_json::json!({
                "cmd": "evaluate",
                "model": model_path,
                "data": data_path,
            }),
        )?;
    }
    Ok(row)
}

// ---------------------------------------------------------------------------
// control

/// One scored closed-loop run.
#[derive(Debug)]
pub struct ControlRun {
    pub params: dynamics::SystemParams,
    pub result: ClosedLoopResult,
    pub real: ControlMetrics,
    pub predicted: ControlMetrics,
}

/// A batch of runs plus their summary means.
#[derive(Debug)]
pub struct ControlOutcome {
    pub runs: Vec<ControlRun>,
    pub mean_real_fidelity: f64,
    pub mean_pred_fidelity: f64,
    pub mean_real_deviation: f64,
    pub mean_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSummaryFile {
    pub schema: u32,
    pub controller: String,
    pub split: String,
    pub seed: u64,
    pub n_runs: usize,
    pub mean_real_fidelity: f64,
    pub mean_pred_fidelity: f64,
    pub mean_real_deviation: f64,
    pub mean_energy: f64,
}

/// Draw `n_runs` plants from the split regime (fixed seed streams), run the
/// model-in-the-loop controller on each, and score them.
pub fn run_control_experiment(
    model: &AqnodeModel,
    controller: ControllerArg,
    split: Split,
    phase: u8,
    n_runs: usize,
    seed: u64,
    rates: RatesArg,
) -> Result<ControlOutcome, CliError> {
    if split == Split::Train {
        return Err(CliError::Usage("control runs evaluate on wd or ood splits".into()));
    }
    if n_runs == 0 {
        return Err(CliError::Usage("control experiment needs n_runs >= 1".into()));
    }
    let d = defaults();
    let grid = d.grid(phase)?;
    let regime = PhaseRegime::new(phase, split)?;
    let y0 = d.y0();
    let target = d.target();
    let lqr_cfg = d.lqr_config();

    let mut runs = Vec::with_capacity(n_runs);
    for j in 0..n_runs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        let params = sample_params(&regime, &mut rng);
        let result = match controller {
            ControllerArg::Pd => closed_loop_run(
                &params,
                model,
                &Controller::Pd(d.pd_gains),
                &y0,
                grid,
                &target,
            )?,
            ControllerArg::Lqr => {
                let source = match rates {
                    RatesArg::Model => RateSource::Model(model),
                    RatesArg::Analytic => RateSource::Analytic,
                };
                let sched = lqr_gain_schedule(source, &params, &y0, grid, &lqr_cfg)?;
                closed_loop_run(&params, model, &Controller::Lqr(&sched), &y0, grid, &target)?
            }
        };
        let [real, predicted] = control_metrics_rows(&result, &target, split)?;
        runs.push(ControlRun { params, result, real, predicted });
    }
    let n = runs.len() as f64;
    Ok(ControlOutcome {
        mean_real_fidelity: runs.iter().map(|r| r.real.fidelity).sum::<f64>() / n,
        mean_pred_fidelity: runs.iter().map(|r| r.predicted.fidelity).sum::<f64>() / n,
        mean_real_deviation: runs.iter().map(|r| r.real.deviation).sum::<f64>() / n,
        mean_energy: runs.iter().map(|r| r.real.energy).sum::<f64>() / n,
        runs,
    })
}

/// Per-node CSV of one closed-loop run: plant, prediction, control, record.
pub fn write_trace_csv(res: &ClosedLoopResult, out: &Path) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(out).map_err(io_err(out))?);
    writeln!(
        f,
        "t,x,y,z,delta,gamma,pred_x,pred_y,pred_z,pred_delta,pred_gamma,ux,uy,dy"
    )
    .map_err(io_err(out))?;
    for i in 0..res.grid.n_points() {
        let s = &res.plant[i];
        let p = &res.predicted[i];
        let u = &res.controls[i];
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            res.grid.point(i),
            s.bloch.x,
            s.bloch.y,
            s.bloch.z,
            s.delta,
            s.gamma,
            p[0],
            p[1],
            p[2],
            p[3],
            p[4],
            u.ux,
            u.uy,
            res.dy[i]
        )
        .map_err(io_err(out))?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn control_cmd(
    model_path: &Path,
    controller: ControllerArg,
    split: Split,
    out_dir: &Path,
    seed: u64,
    n_runs: usize,
    phase: u8,
    rates: RatesArg,
) -> Result<ControlOutcome, CliError> {
    let model = load_model(model_path)?;
    let outcome =
        run_control_experiment(&model, controller, split, phase, n_runs, seed, rates)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let ctrl_name = match controller {
        ControllerArg::Pd => "pd",
        ControllerArg::Lqr => "lqr",
    };
    let split_name = if split == Split::Wd { "wd" } else { "ood" };
    let mut rows = Vec::with_capacity(2 * outcome.runs.len());
    let mut latents = Vec::with_capacity(outcome.runs.len());
    for (j, run) in outcome.runs.iter().enumerate() {
        rows.push(run.real);
        rows.push(run.predicted);
        write_trace_csv(&run.result, &out_dir.join(format!("trace_run{j}.csv")))?;
        latents.push(LatentTrack::from_closed_loop(
            &run.result,
            j,
            &format!("{ctrl_name}_{split_name}"),
        ));
    }
    emit_report(&rows, &out_dir.join("control_report"))?;
    write_latents_csv(&latents, &out_dir.join("latents.csv"))?;
    write_json(
        &out_dir.join("summary.json"),
        &ControlSummaryFile {
            schema: META_SCHEMA,
            controller: ctrl_name.into(),
            split: split_name.into(),
            seed,
            n_runs,
            mean_real_fidelity: outcome.mean_real_fidelity,
            mean_pred_fidelity: outcome.mean_pred_fidelity,
            mean_real_deviation: outcome.mean_real_deviation,
            mean_energy: outcome.mean_energy,
        },
    )?;
    write_meta(
        out_dir,
        seed,
        serde_json::json!({
            "cmd": "control",
            "model": model_path,
            "controller": ctrl_name,
            "split": split_name,
            "phase": phase,
            "n_runs": n_runs,
        }),
    )?;
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// perturb

#[allow(clippy::too_many_arguments)]
pub fn perturb_cmd(
    model_path: &Path,
    eps_list: &[f64],
    data: Option<&Path>,
    phase: u8,
    n: usize,
    seed: u64,
    out_base: &Path,
    root: &Path,
) -> Result<PerturbationStudy, CliError> {
    if eps_list.is_empty() {
        return Err(CliError::Usage("perturbation study needs at least one eps".into()));
    }
    let model = load_model(model_path)?;
    let trajs = match data {
        Some(p) => datagen::read_dataset(p)?.1,
        None => {
            let (_, path) = generate_cmd(
                phase,
                Split::Wd,
                n,
                Some(root.join("datasets").join(format!("perturb_phase{phase}_wd_seed{seed}.jsonl"))),
                seed,
                0.0,
                root,
            )?;
            datagen::read_dataset(&path)?.1
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let study = trainer::perturbation_study(&model, &trajs, eps_list, &mut rng)?;

    if let Some(dir) = out_base.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    write_json(&out_base.with_extension("json"), &study)?;
    let csv_path = out_base.with_extension("csv");
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(&csv_path).map_err(io_err(&csv_path))?);
    let mut header = String::from("t");
    for row in &study.rows {
        header.push_str(&format!(",dev_eps_{}", row.eps));
    }
    writeln!(f, "{header}").map_err(io_err(&csv_path))?;
    for i in 0..study.t.len() {
        let mut line = format!("{}", study.t[i]);
        for row in &study.rows {
            line.push_str(&format!(",{}", row.deviation[i]));
        }
        writeln!(f, "{line}").map_err(io_err(&csv_path))?;
    }
    if let Some(dir) = out_base.parent() {
        write_meta(
            dir,
            seed,
            serde_json::json!({ "cmd": "perturb", "model": model_path, "eps": eps_list }),
        )?;
    }
    Ok(study)
}

// ---------------------------------------------------------------------------
// dispatch

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let root = out_root(cli.out_root);
    match cli.cmd {
        Cmd::Generate { phase, split, n, out, seed, noise_std } => {
            let (header, path) =
                generate_cmd(phase, split.into(), n, out, seed, noise_std, &root)?;
            println!(
                "wrote {} trajectories (phase {}, seed {}) to {}",
                header.n_traj,
                header.regime.phase,
                header.seed,
                path.display()
            );
        }
        Cmd::Train { config, out, set } => {
            let out_dir = out.unwrap_or_else(|| root.join("train"));
            let (_, report) = train_cmd(&config, &set, &out_dir, cli.threads)?;
            let last = report.epoch_loss.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} epochs (final mean loss {:.3e}) in {:.1}s; artifacts in {}",
                report.epoch_loss.len(),
                last,
                report.wall_clock_secs,
                out_dir.display()
            );
        }
        Cmd::Evaluate { model, data, out } => {
            let out_base = out.unwrap_or_else(|| root.join("eval").join("mse_report"));
            let row = evaluate_cmd(&model, &data, &out_base)?;
            println!(
                "per-component MSE: x {:.3e}  y {:.3e}  z {:.3e}  delta {:.3e}  gamma {:.3e}",
                row.x, row.y, row.z, row.delta, row.gamma
            );
            println!("report at {}.{{json,csv}}", out_base.display());
        }
        Cmd::Control { model, controller, split, out, seed, n_runs, phase, rates } => {
            let d = defaults();
            let n_runs = n_runs.unwrap_or(d.control_task.n_runs);
            let ctrl_name = match controller {
                ControllerArg::Pd => "pd",
                ControllerArg::Lqr => "lqr",
            };
            let split_name = match split {
                SplitArg::Wd => "wd",
                SplitArg::Ood => "ood",
                SplitArg::Train => "train",
            };
            let out_dir =
                out.unwrap_or_else(|| root.join(format!("control_{ctrl_name}_{split_name}")));
            let outcome = control_cmd(
                &model,
                controller,
                split.into(),
                &out_dir,
                seed,
                n_runs,
                phase,
                rates,
            )?;
            println!(
                "{} runs: mean real fidelity {:.3}, mean deviation {:.3}, mean energy {:.1}; artifacts in {}",
                outcome.runs.len(),
                outcome.mean_real_fidelity,
                outcome.mean_real_deviation,
                outcome.mean_energy,
                out_dir.display()
            );
        }
        Cmd::Perturb { model, eps, out, data, phase, n, seed } => {
            let eps_list = eps.unwrap_or_else(|| defaults().perturbation_eps.clone());
            let out_base = out.unwrap_or_else(|| root.join("perturb").join("perturbation"));
            let study = perturb_cmd(
                &model,
                &eps_list,
                data.as_deref(),
                phase,
                n,
                seed,
                &out_base,
                &root,
            )?;
            for row in &study.rows {
                let t0 = row.deviation.first().copied().unwrap_or(f64::NAN);
                let t_end = row.deviation.last().copied().unwrap_or(f64::NAN);
                println!("eps {:.3}: deviation {:.3e} at t0, {:.3e} at T", row.eps, t0, t_end);
            }
            println!("study at {}.{{json,csv}}", out_base.display());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_file_matches_library_defaults() {
        let d = defaults();
        assert_eq!(d.schema, 1);
        assert_eq!(d.zeta, dynamics::ZETA_DEFAULT);
        assert_eq!(d.kbt, dynamics::KBT_DEFAULT);
        for phase in 1..=3u8 {
            assert_eq!(d.grid(phase).unwrap(), PhaseRegime::default_grid(phase).unwrap());
        }
        assert_eq!(d.pd_gains, PdGains::default());
        let lqr = d.lqr_config();
        let lib = LqrConfig::default();
        assert_eq!(lqr.q, lib.q);
        assert_eq!(lqr.r, lib.r);
        assert_eq!(lqr.target, lib.target);
        let tc = TrainConfig::default();
        assert_eq!(d.training.epochs, tc.epochs);
        assert_eq!(d.training.batch_size, tc.batch_size);
        assert_eq!(d.training.learning_rate, tc.learning_rate);
        assert_eq!(d.training.checkpoint_every, tc.checkpoint_every);
        assert_eq!(d.model.latent_dim, tc.latent_dim);
        assert_eq!(d.model.hidden_dim, tc.hidden_dim);
        assert_eq!(d.model.prefix_len, tc.prefix_len);
        assert_eq!(
            (d.training.kappa, d.training.beta),
            (tc.loss_weights.kappa, tc.loss_weights.beta)
        );
        let p = dynamics::SystemParams::new(0.5, 0.3, 0.4, 1.0);
        assert_eq!(p.zeta, d.zeta);
        assert_eq!(p.kbt, d.kbt);
    }

    #[test]
    fn spec_invocations_parse() {
        for argv in [
            vec!["qlab", "generate", "--phase", "1", "--split", "train", "--n", "1", "--seed", "7"],
            vec!["qlab", "train", "--config", "cfg.json", "--out", "outdir"],
            vec!["qlab", "evaluate", "--model", "m.json", "--data", "d.jsonl", "--out", "r"],
            vec!["qlab", "control", "--model", "m.json", "--controller", "lqr", "--split", "wd", "--out", "c"],
            vec!["qlab", "perturb", "--model", "m.json", "--eps", "0.05,0.1,0.3", "--out", "p"],
            vec!["qlab", "--threads", "4", "generate", "--phase", "2", "--split", "ood", "--n", "3"],
        ] {
            Cli::try_parse_from(&argv).unwrap_or_else(|e| panic!("{argv:?} failed: {e}"));
        }
        assert!(Cli::try_parse_from(["qlab", "generate", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["qlab", "nonsense"]).is_err());
        assert!(Cli::try_parse_from(["qlab", "train"]).is_err());

        let cli = Cli::try_parse_from([
            "qlab", "perturb", "--model", "m.json", "--eps", "0.05,0.1",
        ])
        .unwrap();
        match cli.cmd {
            Cmd::Perturb { eps, .. } => assert_eq!(eps.unwrap(), vec![0.05, 0.1]),
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn out_root_precedence() {
        assert_eq!(out_root(Some(PathBuf::from("/tmp/x"))), PathBuf::from("/tmp/x"));
        // without the flag the result is the env var or the checked default
        let fallback = out_root(None);
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(v) => assert_eq!(fallback, PathBuf::from(v)),
            None => assert_eq!(fallback, PathBuf::from("runs")),
        }
    }

    #[test]
    fn overrides_apply_and_reject_garbage() {
        let mut v = serde_json::json!({ "epochs": 200, "learning_rate": 1e-3 });
        apply_overrides(
            &mut v,
            &["epochs=50".into(), "learning_rate=0.01".into(), "train_data=\"x.jsonl\"".into()],
        )
        .unwrap();
        assert_eq!(v["epochs"], 50);
        assert_eq!(v["learning_rate"], 0.01);
        assert_eq!(v["train_data"], "x.jsonl");
        // bare strings pass through as strings
        apply_overrides(&mut v, &["train_data=y.jsonl".into()]).unwrap();
        assert_eq!(v["train_data"], "y.jsonl");
        assert!(apply_overrides(&mut v, &["no_equals_sign".into()]).is_err());
    }

    #[test]
    fn phase3_mix_composition_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let grid = TimeGrid::new(0.0, 0.2, 40);
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        let h1 = generate_phase3_dataset(Split::Train, 10, grid, 3, &p1).unwrap();
        generate_phase3_dataset(Split::Train, 10, grid, 3, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(h1.regime.phase, 3);

        let (_, trajs) = datagen::read_dataset(&p1).unwrap();
        assert_eq!(trajs.len(), 10);
        for (i, tr) in trajs.iter().enumerate() {
            let active = tr.controls.iter().any(|u| u.ux != 0.0 || u.uy != 0.0);
            match i % 5 {
                4 => assert!(!active, "trajectory {i} should be free decay"),
                _ => assert!(active, "trajectory {i} should be driven"),
            }
            for s in &tr.states {
                assert!(s.bloch.norm() <= 1.0 + 1e-6, "unphysical state in trajectory {i}");
            }
            assert!(h1.regime.alpha.contains(tr.params.alpha));
            assert!(h1.regime.omega0.contains(tr.params.omega0));
        }
    }

    #[test]
    fn jittered_starts_stay_in_ball_and_hit_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = [0.0, 0.0, -1.0];
        for _ in 0..500 {
            let s = jitter_bloch(&base, 0.1, &mut rng);
            assert!(s.norm() <= 1.0 + 1e-12);
            let d = ((s.x - base[0]).powi(2)
                + (s.y - base[1]).powi(2)
                + (s.z - base[2]).powi(2))
            .sqrt();
            assert!(d <= 0.1 + 1e-12 + 0.1); // projection can only shrink the ball excursion
        }
    }

    #[test]
    fn trace_csv_has_full_rows() {
        let grid = TimeGrid::new(0.0, 0.1, 2);
        let n = grid.n_points();
        let res = ClosedLoopResult {
            grid,
            label: control::ControllerLabel::Pd,
            plant: vec![
                AugmentedState::new(BlochState::new(0.0, 0.0, -1.0), 0.0, 0.0);
                n
            ],
            predicted: vec![[0.1, 0.2, 0.3, 0.4, 0.5]; n],
            controls: vec![ControlInput::new(1.0, -1.0); n],
            dy: vec![0.6; n],
            latents: vec![0.0; 2 * n],
            latent_dim: 2,
            metrics: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace_csv(&res, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + n);
        assert_eq!(lines[0].split(',').count(), 14);
        assert_eq!(lines[1].split(',').count(), 14);
    }
}
