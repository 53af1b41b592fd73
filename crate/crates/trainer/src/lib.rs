//! Training orchestration: mini-batched adjoint gradients with Adam,
//! checkpointing, split evaluation, and the initial-state perturbation
//! study.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use aqnode::{AdjointWorkspace, AqnodeModel, LossWeights, SignalSpec, SignalTrack, AUG_DIM};
use datagen::{perturb_initial, read_dataset, Trajectory};
use nn::{AdamState, Mlp};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint parse error on {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error(transparent)]
    Data(#[from] datagen::DatagenError),
    #[error(transparent)]
    Model(#[from] aqnode::AqnodeError),
    #[error("gradient step failed at epoch {epoch}, batch {batch}: {msg}")]
    Step { epoch: usize, batch: usize, msg: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Everything a training run needs; doubles as the config echo in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: u8,
    pub train_data: PathBuf,
    pub wd_data: Option<PathBuf>,
    pub ood_data: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss_weights: LossWeights,
    pub prefix_len: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub signal_spec: SignalSpec,
    pub seed: u64,
    /// Epoch interval between checkpoint files; 0 disables intermediate
    /// checkpoints (the final one is always written when a dir is set).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: 1,
            train_data: PathBuf::new(),
            wd_data: None,
            ood_data: None,
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            loss_weights: LossWeights::default(),
            prefix_len: 10,
            latent_dim: 16,
            hidden_dim: 64,
            signal_spec: SignalSpec::Filtering,
            seed: 0,
            checkpoint_every: 25,
            checkpoint_dir: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch size must be >= 1".into()));
        }
        if self.threads < 1 {
            return Err(TrainError::Config("threads must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if self.latent_dim < 1 || self.hidden_dim < 1 {
            return Err(TrainError::Config("latent and hidden dims must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-component mean squared error over every trajectory and grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub delta: f64,
    pub gamma: f64,
}

impl MseRow {
    pub fn to_array(&self) -> [f64; 5] {
        [self.x, self.y, self.z, self.delta, self.gamma]
    }

    pub fn max(&self) -> f64 {
        self.to_array().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.to_array().iter().sum::<f64>() / 5.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean total loss per epoch, in epoch order.
    pub epoch_loss: Vec<f64>,
    pub final_train_mse: Option<MseRow>,
    pub final_wd_mse: Option<MseRow>,
    pub final_ood_mse: Option<MseRow>,
    pub wall_clock_secs: f64,
    pub seed: u64,
    pub config: TrainConfig,
}

/// On-disk model + optimizer snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: u32,
    pub encoder_dims: Vec<usize>,
    pub dynamics_dims: Vec<usize>,
    pub decoder_dims: Vec<usize>,
    pub latent_dim: usize,
    pub prefix_len: usize,
    pub signal_spec: SignalSpec,
    pub encoder_params: Vec<f64>,
    pub dynamics_params: Vec<f64>,
    pub decoder_params: Vec<f64>,
    pub optimizer: Option<AdamState>,
    pub epoch: usize,
    pub seed: u64,
    pub epoch_loss: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(
        model: &AqnodeModel,
        optimizer: Option<&AdamState>,
        epoch: usize,
        seed: u64,
        epoch_loss: &[f64],
    ) -> Self {
        Checkpoint {
            schema: CHECKPOINT_SCHEMA,
            encoder_dims: model.encoder.dims.clone(),
            dynamics_dims: model.dynamics.dims.clone(),
            decoder_dims: model.decoder.dims.clone(),
            latent_dim: model.latent_dim,
            prefix_len: model.prefix_len,
            signal_spec: model.signal_spec,
            encoder_params: model.encoder.flatten(),
            dynamics_params: model.dynamics.flatten(),
            decoder_params: model.decoder.flatten(),
            optimizer: optimizer.cloned(),
            epoch,
            seed,
            epoch_loss: epoch_loss.to_vec(),
        }
    }

    pub fn to_model(&self) -> Result<AqnodeModel, TrainError> {
        let build = |dims: &[usize], flat: &[f64]| {
            Mlp::unflatten(dims, flat)
                .map_err(|e| TrainError::Config(format!("checkpoint nets malformed: {e}")))
        };
        let encoder = build(&self.encoder_dims, &self.encoder_params)?;
        let dynamics = build(&self.dynamics_dims, &self.dynamics_params)?;
        let decoder = build(&self.decoder_dims, &self.decoder_params)?;
        Ok(AqnodeModel::from_parts(
            encoder,
            dynamics,
            decoder,
            self.latent_dim,
            self.prefix_len,
            self.signal_spec,
        )?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let json = serde_json::to_string(self)
            .map_err(|e| TrainError::Checkpoint { path: path.to_path_buf(), msg: e.to_string() })?;
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(json.as_bytes()).map_err(io_err(path))?;
        f.write_all(b"\n").map_err(io_err(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| TrainError::Checkpoint { path: path.to_path_buf(), msg: e.to_string() })?;
        if ckpt.schema != CHECKPOINT_SCHEMA {
            return Err(TrainError::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("schema {} unsupported (want {})", ckpt.schema, CHECKPOINT_SCHEMA),
            });
        }
        Ok(ckpt)
    }
}

/// Inputs to one adjoint pass, borrowed from the dataset.
struct PreparedTrajectory {
    y0: [f64; AUG_DIM],
    prefix: Vec<f64>,
    signals: SignalTrack,
    truth: Vec<f64>,
}

fn prepare(
    trajs: &[Trajectory],
    prefix_len: usize,
    spec: SignalSpec,
) -> Result<Vec<PreparedTrajectory>, TrainError> {
    trajs
        .iter()
        .map(|tr| {
            if prefix_len > tr.dy.len() {
                return Err(TrainError::Config(format!(
                    "prefix length {} exceeds the {}-point grid",
                    prefix_len,
                    tr.dy.len()
                )));
            }
            let signals = match spec {
                SignalSpec::Filtering => SignalTrack::filtering(tr.grid, tr.dy.clone())?,
                SignalSpec::Control => {
                    let ux = tr.controls.iter().map(|u| u.ux).collect();
                    let uy = tr.controls.iter().map(|u| u.uy).collect();
                    SignalTrack::control(tr.grid, tr.dy.clone(), ux, uy)?
                }
            };
            Ok(PreparedTrajectory {
                y0: tr.y0(),
                prefix: tr.dy_prefix(prefix_len).to_vec(),
                signals,
                truth: tr.truth_flat(),
            })
        })
        .collect()
}

/// Elementwise pairwise-tree sum of the slot gradients, fixed order, so the
/// result is independent of which thread filled which slot.
fn pairwise_sum_into(slots: &[Vec<f64>], lo: usize, hi: usize, out: &mut [f64]) {
    debug_assert!(hi > lo);
    if hi - lo == 1 {
        out.copy_from_slice(&slots[lo]);
        return;
    }
    let mid = lo + (hi - lo) / 2;
    let mut right = vec![0.0; out.len()];
    pairwise_sum_into(slots, lo, mid, out);
    pairwise_sum_into(slots, mid, hi, &mut right);
    for (o, r) in out.iter_mut().zip(&right) {
        *o += r;
    }
}

/// Per-trajectory gradients for `batch`, computed in parallel, reduced in
/// fixed index order. Returns the mean loss over the batch.
#[allow(clippy::too_many_arguments)]
fn batch_gradient(
    model: &AqnodeModel,
    data: &[PreparedTrajectory],
    batch: &[usize],
    weights: &LossWeights,
    threads: usize,
    slots: &mut [Vec<f64>],
    workspaces: &mut [AdjointWorkspace],
    grad_out: &mut [f64],
) -> Result<f64, aqnode::AqnodeError> {
    let k = batch.len();
    let losses: Vec<f64> = if threads <= 1 || k == 1 {
        let ws = &mut workspaces[0];
        let mut losses = Vec::with_capacity(k);
        for (slot, &ti) in slots.iter_mut().take(k).zip(batch) {
            let tr = &data[ti];
            let (lb, _) = model.adjoint_gradients_into(
                ws, &tr.y0, &tr.prefix, &tr.signals, &tr.truth, weights, slot,
            )?;
            losses.push(lb.total);
        }
        losses
    } else {
        // contiguous chunk per worker; which thread fills which slot is
        // irrelevant because the reduction below is slot-index ordered
        let n_workers = threads.min(k);
        let chunk = k.div_ceil(n_workers);
        let mut results: Vec<Result<f64, aqnode::AqnodeError>> = Vec::with_capacity(k);
        std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(n_workers);
            for ((slot_chunk, idx_chunk), ws) in slots[..k]
                .chunks_mut(chunk)
                .zip(batch.chunks(chunk))
                .zip(workspaces.iter_mut())
            {
                handles.push(scope.spawn(move || {
                    let mut out = Vec::with_capacity(idx_chunk.len());
                    for (slot, &ti) in slot_chunk.iter_mut().zip(idx_chunk) {
                        let tr = &data[ti];
                        out.push(
                            model
                                .adjoint_gradients_into(
                                    ws, &tr.y0, &tr.prefix, &tr.signals, &tr.truth, weights, slot,
                                )
                                .map(|(lb, _)| lb.total),
                        );
                    }
                    out
                }));
            }
            for h in handles {
                results.extend(h.join().expect("gradient worker panicked"));
            }
        });
        results.into_iter().collect::<Result<Vec<f64>, _>>()?
    };

    pairwise_sum_into(&slots[..k], 0, k, grad_out);
    let scale = 1.0 / k as f64;
    for g in grad_out.iter_mut() {
        *g *= scale;
    }
    // same fixed-order pairwise rule for the scalar losses
    fn pairwise_scalar(v: &[f64]) -> f64 {
        match v.len() {
            1 => v[0],
            n => pairwise_scalar(&v[..n / 2]) + pairwise_scalar(&v[n / 2..]),
        }
    }
    Ok(pairwise_scalar(&losses) * scale)
}

/// Mean total loss over a dataset without touching the model.
pub fn mean_loss(
    model: &AqnodeModel,
    trajs: &[Trajectory],
    weights: &LossWeights,
) -> Result<f64, TrainError> {
    let data = prepare(trajs, model.prefix_len, model.signal_spec)?;
    let mut acc = 0.0;
    for tr in &data {
        let pred = model.predict(&tr.y0, &tr.prefix, &tr.signals)?;
        acc += AqnodeModel::loss(&pred, &tr.truth, weights)?.total;
    }
    Ok(acc / data.len().max(1) as f64)
}

/// Per-component MSE of model predictions against a dataset.
pub fn evaluate_split(model: &AqnodeModel, trajs: &[Trajectory]) -> Result<MseRow, TrainError> {
    let data = prepare(trajs, model.prefix_len, model.signal_spec)?;
    let mut preds = Vec::with_capacity(data.len());
    for tr in &data {
        preds.push(model.predict(&tr.y0, &tr.prefix, &tr.signals)?);
    }
    let truths: Vec<&[f64]> = data.iter().map(|tr| tr.truth.as_slice()).collect();
    mse_from_predictions(&preds, &truths)
}

/// Per-component MSE between prediction tracks and truth tracks, averaged
/// over every trajectory and grid point.
pub fn mse_from_predictions(preds: &[Vec<f64>], truths: &[&[f64]]) -> Result<MseRow, TrainError> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(TrainError::Config("prediction/truth trajectory counts differ".into()));
    }
    let mut acc = [0.0f64; AUG_DIM];
    let mut n_points = 0usize;
    for (p, t) in preds.iter().zip(truths) {
        if p.len() != t.len() || p.len() % AUG_DIM != 0 {
            return Err(TrainError::Config("prediction/truth shapes differ".into()));
        }
        n_points += p.len() / AUG_DIM;
        for (i, (pv, tv)) in p.iter().zip(t.iter()).enumerate() {
            let d = pv - tv;
            acc[i % AUG_DIM] += d * d;
        }
    }
    let n = n_points as f64;
    Ok(MseRow {
        x: acc[0] / n,
        y: acc[1] / n,
        z: acc[2] / n,
        delta: acc[3] / n,
        gamma: acc[4] / n,
    })
}

/// Train on in-memory datasets. Deterministic for a fixed seed at any
/// thread count: gradients land in per-trajectory slots and reduce in a
/// fixed pairwise order.
pub fn train_on(
    cfg: &TrainConfig,
    train_trajs: &[Trajectory],
    wd_trajs: Option<&[Trajectory]>,
    ood_trajs: Option<&[Trajectory]>,
) -> Result<(AqnodeModel, TrainReport), TrainError> {
    cfg.validate()?;
    if train_trajs.is_empty() {
        return Err(TrainError::Config("training dataset is empty".into()));
    }
    let start = Instant::now();
    let data = prepare(train_trajs, cfg.prefix_len, cfg.signal_spec)?;
    let mut model = AqnodeModel::init(
        cfg.latent_dim,
        cfg.hidden_dim,
        cfg.prefix_len,
        cfg.signal_spec,
        cfg.seed,
    )?;
    let n_params = model.n_params();
    let mut params = model.flatten_params();
    let mut adam = AdamState::new(n_params, cfg.learning_rate);

    let batch = cfg.batch_size.min(data.len());
    let mut slots: Vec<Vec<f64>> = (0..batch).map(|_| vec![0.0; n_params]).collect();
    let n_workers = cfg.threads.min(batch).max(1);
    let grid = data[0].signals.grid;
    let mut workspaces: Vec<AdjointWorkspace> =
        (0..n_workers).map(|_| AdjointWorkspace::new(&model, &grid)).collect();
    let mut grad = vec![0.0; n_params];

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (bi, chunk) in order.chunks(batch).enumerate() {
            let mean = batch_gradient(
                &model,
                &data,
                chunk,
                &cfg.loss_weights,
                cfg.threads,
                &mut slots,
                &mut workspaces,
                &mut grad,
            )
            .map_err(|e| TrainError::Step { epoch, batch: bi, msg: e.to_string() })?;
            if !mean.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            adam.step(&mut params, &grad)
                .map_err(|e| TrainError::Step { epoch, batch: bi, msg: e.to_string() })?;
            model.load_flat_params(&params)?;
            loss_sum += mean;
            n_batches += 1;
        }
        epoch_loss.push(loss_sum / n_batches as f64);

        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("checkpoint_epoch_{:04}.json", epoch + 1));
                Checkpoint::from_model(&model, Some(&adam), epoch + 1, cfg.seed, &epoch_loss)
                    .save(&path)?;
            }
        }
    }

    if let Some(dir) = &cfg.checkpoint_dir {
        let path = dir.join("checkpoint_final.json");
        Checkpoint::from_model(&model, Some(&adam), cfg.epochs, cfg.seed, &epoch_loss)
            .save(&path)?;
    }

    let report = TrainReport {
        final_train_mse: Some(evaluate_split(&model, train_trajs)?),
        final_wd_mse: wd_trajs.map(|t| evaluate_split(&model, t)).transpose()?,
        final_ood_mse: ood_trajs.map(|t| evaluate_split(&model, t)).transpose()?,
        epoch_loss,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        config: cfg.clone(),
    };
    Ok((model, report))
}

/// Train from dataset files named in the config.
pub fn train(cfg: &TrainConfig) -> Result<(AqnodeModel, TrainReport), TrainError> {
    let (_, train_trajs) = read_dataset(&cfg.train_data)?;
    let wd = cfg.wd_data.as_ref().map(|p| read_dataset(p)).transpose()?.map(|(_, t)| t);
    let ood = cfg.ood_data.as_ref().map(|p| read_dataset(p)).transpose()?.map(|(_, t)| t);
    train_on(cfg, &train_trajs, wd.as_deref(), ood.as_deref())
}

/// Deviation-vs-time rows of the initial-state perturbation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub eps: f64,
    /// Mean over trials of the 5-component prediction error norm per node.
    pub deviation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationStudy {
    pub t: Vec<f64>,
    pub rows: Vec<PerturbationRow>,
}

/// Perturb each trajectory's initial state by exactly `eps`, re-encode,
/// roll out against the original measurement record, and track the mean
/// prediction error norm over time.
pub fn perturbation_study<R: Rng>(
    model: &AqnodeModel,
    trajs: &[Trajectory],
    eps_list: &[f64],
    rng: &mut R,
) -> Result<PerturbationStudy, TrainError> {
    if trajs.is_empty() {
        return Err(TrainError::Config("perturbation study needs trajectories".into()));
    }
    let data = prepare(trajs, model.prefix_len, model.signal_spec)?;
    let grid = data[0].signals.grid;
    let n_points = grid.n_points();
    if data.iter().any(|tr| tr.signals.grid != grid) {
        return Err(TrainError::Config("perturbation study needs one shared grid".into()));
    }
    let t: Vec<f64> = grid.points();
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let mut dev = vec![0.0f64; n_points];
        for tr in &data {
            let y0 = dynamics::AugmentedState::from_array(tr.y0);
            let perturbed = perturb_initial(&y0, eps, rng);
            let pred = model.predict(&perturbed.to_array(), &tr.prefix, &tr.signals)?;
            for (i, d) in dev.iter_mut().enumerate() {
                let mut acc = 0.0;
                for c in 0..AUG_DIM {
                    let e = pred[AUG_DIM * i + c] - tr.truth[AUG_DIM * i + c];
                    acc += e * e;
                }
                *d += acc.sqrt();
            }
        }
        let n = data.len() as f64;
        dev.iter_mut().for_each(|d| *d /= n);
        rows.push(PerturbationRow { eps, deviation: dev });
    }
    Ok(PerturbationStudy { t, rows })
}
