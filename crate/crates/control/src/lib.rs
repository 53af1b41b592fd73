//! Feedback control on model-predicted states: a PD law, a finite-horizon
//! time-varying LQR built by backward Riccati integration, and the
//! closed-loop runner coupling controller, latent model, and true plant.

use aqnode::{AqnodeModel, LatentStepper, SignalSpec, SignalTrack};
use dynamics::{
    a0_matrix, delta_t, gamma_t, measurement_rate, plant_step, AugmentedState, BlochState,
    ControlInput, SystemParams, A_X, A_Y,
};
use integrate::{integrate_backward, IntegrateError, TimeGrid};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Mat3 = [[f64; 3]; 3];
/// 3 rows x 2 columns.
pub type Mat32 = [[f64; 2]; 3];
/// 2 rows x 3 columns.
pub type Mat23 = [[f64; 3]; 2];
pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("R matrix is not invertible (|det| = {det:.3e})")]
    SingularR { det: f64 },
    #[error("Riccati integration blew up at t = {t}")]
    RiccatiBlowup { t: f64 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite control at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Model(#[from] aqnode::AqnodeError),
    #[error(transparent)]
    Dynamics(#[from] dynamics::DynamicsError),
}

/// Proportional-derivative gains for the two control fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdGains {
    pub kp_x: f64,
    pub kp_y: f64,
    pub kd_x: f64,
    pub kd_y: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        PdGains { kp_x: 5.0, kp_y: 10.0, kd_x: 8.0, kd_y: 10.0 }
    }
}

/// Finite-horizon LQR problem data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqrConfig {
    pub q: Mat3,
    pub r: Mat2,
    pub target: BlochState,
    /// Terminal condition P(T); no terminal cost by default.
    pub p_terminal: Mat3,
}

impl Default for LqrConfig {
    fn default() -> Self {
        LqrConfig {
            q: [[1000.0, 0.0, 0.0], [0.0, 1000.0, 0.0], [0.0, 0.0, 1000.0]],
            r: [[0.1, 0.0], [0.0, 50.0]],
            target: BlochState::new(0.0, 0.0, 1.0),
            p_terminal: [[0.0; 3]; 3],
        }
    }
}

impl LqrConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        let sym3 = (0..3).all(|i| (0..3).all(|j| (self.q[i][j] - self.q[j][i]).abs() < 1e-12));
        let sym2 = (self.r[0][1] - self.r[1][0]).abs() < 1e-12;
        let symp =
            (0..3).all(|i| (0..3).all(|j| (self.p_terminal[i][j] - self.p_terminal[j][i]).abs() < 1e-12));
        if !(sym3 && sym2 && symp) {
            return Err(ControlError::Shape("Q, R, P(T) must be symmetric".into()));
        }
        inv2(&self.r)?;
        Ok(())
    }
}

/// Solved LQR feedback: P(t) and K(t) = R^-1 B^T P(t) on the run grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub grid: TimeGrid,
    pub p: Vec<Mat3>,
    pub k: Vec<Mat23>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerLabel {
    Pd,
    Lqr,
}

/// Controller choice for a closed-loop run.
#[derive(Debug, Clone)]
pub enum Controller<'a> {
    Pd(PdGains),
    Lqr(&'a GainSchedule),
}

impl Controller<'_> {
    pub fn label(&self) -> ControllerLabel {
        match self {
            Controller::Pd(_) => ControllerLabel::Pd,
            Controller::Lqr(_) => ControllerLabel::Lqr,
        }
    }
}

/// Synchronized tracks from one closed-loop run; every sequence has one
/// entry per grid node.
#[derive(Debug, Clone)]
pub struct ClosedLoopResult {
    pub grid: TimeGrid,
    pub label: ControllerLabel,
    /// True plant states with the analytic rates attached.
    pub plant: Vec<AugmentedState>,
    /// Decoded model states [x, y, z, delta, gamma] driving the controller.
    pub predicted: Vec<[f64; 5]>,
    /// u_i is held over step i -> i+1; the final entry is computed, unapplied.
    pub controls: Vec<ControlInput>,
    pub dy: Vec<f64>,
    /// Flat latent trajectory, node i at `[i*latent_dim ..]`.
    pub latents: Vec<f64>,
    pub latent_dim: usize,
    pub metrics: Option<serde_json::Value>,
}

fn mat3_t(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += a[i][k] * b[k][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

fn inv2(r: &Mat2) -> Result<Mat2, ControlError> {
    let det = r[0][0] * r[1][1] - r[0][1] * r[1][0];
    let scale = r.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if det.abs() < 1e-12 * scale * scale {
        return Err(ControlError::SingularR { det });
    }
    Ok([[r[1][1] / det, -r[0][1] / det], [-r[1][0] / det, r[0][0] / det]])
}

/// Control matrix with columns A_x * target and A_y * target.
pub fn lqr_b_matrix(target: &BlochState) -> Mat32 {
    let t = target.to_array();
    let mut b = [[0.0; 2]; 3];
    for i in 0..3 {
        b[i][0] = A_X[i][0] * t[0] + A_X[i][1] * t[1] + A_X[i][2] * t[2];
        b[i][1] = A_Y[i][0] * t[0] + A_Y[i][1] * t[1] + A_Y[i][2] * t[2];
    }
    b
}

/// K = R^-1 B^T P for one node.
fn gain_from_p(r_inv: &Mat2, b: &Mat32, p: &Mat3) -> Mat23 {
    // bt_p = B^T P (2x3)
    let mut bt_p = [[0.0; 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += b[k][i] * p[k][j];
            }
            bt_p[i][j] = acc;
        }
    }
    let mut k_mat = [[0.0; 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            k_mat[i][j] = r_inv[i][0] * bt_p[0][j] + r_inv[i][1] * bt_p[1][j];
        }
    }
    k_mat
}

fn flatten_p(p: &Mat3, out: &mut [f64]) {
    for i in 0..3 {
        out[3 * i..3 * i + 3].copy_from_slice(&p[i]);
    }
}

fn unflatten_p(flat: &[f64]) -> Mat3 {
    let mut p = [[0.0; 3]; 3];
    for i in 0..3 {
        p[i].copy_from_slice(&flat[3 * i..3 * i + 3]);
    }
    p
}

/// dP/dt = -A^T P - P A + P S P - Q with S = B R^-1 B^T, evaluated on
/// flattened row-major storage.
fn riccati_rhs(a: &Mat3, s_mat: &Mat3, q: &Mat3, flat: &[f64], out: &mut [f64]) {
    let p = unflatten_p(flat);
    let at_p = mat3_mul(&mat3_t(a), &p);
    let p_a = mat3_mul(&p, a);
    let psp = mat3_mul(&mat3_mul(&p, s_mat), &p);
    let mut d = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            d[i][j] = -at_p[i][j] - p_a[i][j] + psp[i][j] - q[i][j];
        }
    }
    flatten_p(&d, out);
}

/// Backward Riccati sweep from P(T) over a continuously evaluable drift
/// A(t); K(t) attaches at every grid node.
pub fn riccati_solve_fn<F>(
    a_of_t: F,
    b: &Mat32,
    cfg: &LqrConfig,
    grid: TimeGrid,
) -> Result<GainSchedule, ControlError>
where
    F: Fn(f64) -> Mat3,
{
    cfg.validate()?;
    let r_inv = inv2(&cfg.r)?;
    // S = B R^-1 B^T
    let mut s_mat = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = 0.0;
            for (m, row_m) in r_inv.iter().enumerate() {
                for (n, &r_mn) in row_m.iter().enumerate() {
                    acc += b[i][m] * r_mn * b[j][n];
                }
            }
            s_mat[i][j] = acc;
        }
    }
    let mut terminal = [0.0; 9];
    flatten_p(&cfg.p_terminal, &mut terminal);
    let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
        riccati_rhs(&a_of_t(t), &s_mat, &cfg.q, y, dy);
    };
    let flat_traj = integrate_backward(&mut rhs, &terminal, &grid)
        .map_err(|IntegrateError::NonFinite { t, .. }| ControlError::RiccatiBlowup { t })?;
    let p: Vec<Mat3> = flat_traj.iter().map(|f| unflatten_p(f)).collect();
    let k = p.iter().map(|pi| gain_from_p(&r_inv, b, pi)).collect();
    Ok(GainSchedule { grid, p, k })
}

/// Backward Riccati sweep with the drift given per grid node; stage times
/// between nodes use linear interpolation of A.
pub fn riccati_solve(
    a_schedule: &[Mat3],
    b: &Mat32,
    cfg: &LqrConfig,
    grid: TimeGrid,
) -> Result<GainSchedule, ControlError> {
    if a_schedule.len() != grid.n_points() {
        return Err(ControlError::Shape(format!(
            "drift schedule has {} entries, grid has {} points",
            a_schedule.len(),
            grid.n_points()
        )));
    }
    let a_of_t = |t: f64| -> Mat3 {
        let s = ((t - grid.t0) / grid.dt()).clamp(0.0, grid.n_steps as f64);
        let i = (s.floor() as usize).min(grid.n_steps.saturating_sub(1));
        let w = s - i as f64;
        let (a0, a1) = (&a_schedule[i], &a_schedule[i + 1]);
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = (1.0 - w) * a0[r][c] + w * a1[r][c];
            }
        }
        out
    };
    riccati_solve_fn(a_of_t, b, cfg, grid)
}

/// u* = -K (y_hat - target).
pub fn lqr_control(k: &Mat23, state_hat: &BlochState, target: &BlochState) -> ControlInput {
    let e = [state_hat.x - target.x, state_hat.y - target.y, state_hat.z - target.z];
    ControlInput::new(
        -(k[0][0] * e[0] + k[0][1] * e[1] + k[0][2] * e[2]),
        -(k[1][0] * e[0] + k[1][1] * e[1] + k[1][2] * e[2]),
    )
}

/// u_x = -kp_x (x_hat - x_target) - kd_x (x_hat - x_hat_prev)/dt, and the
/// y-component analog; the derivative is a backward finite difference of
/// the predicted state.
pub fn pd_control(
    state_hat: &BlochState,
    state_hat_prev: &BlochState,
    dt: f64,
    g: &PdGains,
    target: &BlochState,
) -> ControlInput {
    assert!(dt > 0.0, "pd_control needs dt > 0");
    let dx = (state_hat.x - state_hat_prev.x) / dt;
    let dy = (state_hat.y - state_hat_prev.y) / dt;
    ControlInput::new(
        -g.kp_x * (state_hat.x - target.x) - g.kd_x * dx,
        -g.kp_y * (state_hat.y - target.y) - g.kd_y * dy,
    )
}

/// A0(t) design drift per node from rate tracks.
pub fn a0_schedule_from_rates(
    delta: &[f64],
    gamma: &[f64],
    p: &SystemParams,
) -> Result<Vec<Mat3>, ControlError> {
    if delta.len() != gamma.len() {
        return Err(ControlError::Shape("rate tracks differ in length".into()));
    }
    Ok(delta.iter().zip(gamma).map(|(&d, &g)| a0_matrix(d, g, p)).collect())
}

/// A0(t) per node from the closed-form rates.
pub fn a0_schedule_analytic(p: &SystemParams, grid: TimeGrid) -> Vec<Mat3> {
    (0..grid.n_points())
        .map(|i| {
            let t = grid.point(i);
            a0_matrix(delta_t(t, p), gamma_t(t, p), p)
        })
        .collect()
}

/// Model-estimated rate tracks from an open-loop (u = 0) system
/// identification pass: the uncontrolled plant provides the measurement
/// record, the model filters it, and the decoded delta/gamma come back.
pub fn predict_rates_open_loop(
    model: &AqnodeModel,
    p: &SystemParams,
    y0: &AugmentedState,
    grid: TimeGrid,
) -> Result<(Vec<f64>, Vec<f64>), ControlError> {
    p.validate()?;
    let n_points = grid.n_points();
    let mut dy = Vec::with_capacity(n_points);
    let mut s = y0.bloch;
    for i in 0..n_points {
        dy.push(measurement_rate(&s, p));
        if i < grid.n_steps {
            s = plant_step(grid.point(i), grid.dt(), &s, &ControlInput::ZERO, p);
        }
    }
    if model.prefix_len > n_points {
        return Err(ControlError::Shape("encoder prefix longer than the grid".into()));
    }
    let prefix = dy[..model.prefix_len].to_vec();
    let track = match model.signal_spec {
        SignalSpec::Filtering => SignalTrack::filtering(grid, dy)?,
        SignalSpec::Control => {
            let zeros = vec![0.0; n_points];
            SignalTrack::control(grid, dy, zeros.clone(), zeros)?
        }
    };
    let pred = model.predict(&y0.to_array(), &prefix, &track)?;
    let delta = (0..n_points).map(|i| pred[5 * i + 3]).collect();
    let gamma = (0..n_points).map(|i| pred[5 * i + 4]).collect();
    Ok((delta, gamma))
}

/// Where the Riccati design drift gets its rate tracks.
#[derive(Debug, Clone, Copy)]
pub enum RateSource<'a> {
    /// Decoded from the model after an open-loop identification pass.
    Model(&'a AqnodeModel),
    /// Closed-form ground truth.
    Analytic,
}

/// Full LQR design pipeline: rates -> A0 schedule -> backward Riccati.
pub fn lqr_gain_schedule(
    source: RateSource,
    p: &SystemParams,
    y0: &AugmentedState,
    grid: TimeGrid,
    cfg: &LqrConfig,
) -> Result<GainSchedule, ControlError> {
    let a_schedule = match source {
        RateSource::Model(model) => {
            let (delta, gamma) = predict_rates_open_loop(model, p, y0, grid)?;
            a0_schedule_from_rates(&delta, &gamma, p)?
        }
        RateSource::Analytic => a0_schedule_analytic(p, grid),
    };
    let b = lqr_b_matrix(&cfg.target);
    riccati_solve(&a_schedule, &b, cfg, grid)
}

/// Run the model-in-the-loop controller against the true plant.
///
/// Per step i: the plant emits dY_i; the latent advances one step driven by
/// the held (t_i, u_i, dY_i); the decoder yields the prediction at node i+1;
/// the controller maps it to u_{i+1}; the plant advances one RK4 step under
/// the held u_i. The final node's control is computed but never applied.
pub fn closed_loop_run(
    p: &SystemParams,
    model: &AqnodeModel,
    controller: &Controller,
    y0: &AugmentedState,
    grid: TimeGrid,
    target: &BlochState,
) -> Result<ClosedLoopResult, ControlError> {
    p.validate()?;
    if model.signal_spec != SignalSpec::Control {
        return Err(ControlError::Shape(
            "closed-loop runs need a model with control-signal inputs".into(),
        ));
    }
    if let Controller::Lqr(gs) = controller {
        if gs.grid != grid {
            return Err(ControlError::GridMismatch(format!(
                "gain schedule solved on [{}, {}] x {} steps, run grid is [{}, {}] x {}",
                gs.grid.t0, gs.grid.t1, gs.grid.n_steps, grid.t0, grid.t1, grid.n_steps
            )));
        }
        if gs.k.len() != grid.n_points() {
            return Err(ControlError::Shape("gain schedule is missing nodes".into()));
        }
    }
    let dt = grid.dt();
    let n_points = grid.n_points();
    let l = model.latent_dim;

    let mut plant = Vec::with_capacity(n_points);
    let mut predicted: Vec<[f64; 5]> = Vec::with_capacity(n_points);
    let mut controls = Vec::with_capacity(n_points);
    let mut dy_track = Vec::with_capacity(n_points);
    let mut latents = Vec::with_capacity(n_points * l);

    let bloch_of = |v: &[f64; 5]| BlochState::new(v[0], v[1], v[2]);
    let eval_u = |i: usize, yhat: &[f64; 5], yhat_prev: &[f64; 5]| -> ControlInput {
        match controller {
            Controller::Pd(g) => {
                pd_control(&bloch_of(yhat), &bloch_of(yhat_prev), dt, g, target)
            }
            Controller::Lqr(gs) => lqr_control(&gs.k[i], &bloch_of(yhat), target),
        }
    };

    // initialization: the encoder prefix holds the only record available at
    // t0, the first sample repeated
    let mut s = y0.bloch;
    let dy0 = measurement_rate(&s, p);
    let prefix = vec![dy0; model.prefix_len];
    let mut h = model.encode(&y0.to_array(), &prefix)?;
    let mut h_next = vec![0.0; l];
    let mut stepper = LatentStepper::new(model);
    let mut yhat: [f64; 5] = model
        .decode_one(&h)
        .try_into()
        .map_err(|_| ControlError::Shape("decoder output is not 5-dimensional".into()))?;
    let mut yhat_prev = yhat;
    let mut u = eval_u(0, &yhat, &yhat_prev);

    for i in 0..n_points {
        let t = grid.point(i);
        if !(u.ux.is_finite() && u.uy.is_finite()) {
            return Err(ControlError::NonFinite { step: i });
        }
        let dy_i = measurement_rate(&s, p);
        plant.push(AugmentedState::new(s, delta_t(t, p), gamma_t(t, p)));
        predicted.push(yhat);
        controls.push(u);
        dy_track.push(dy_i);
        latents.extend_from_slice(&h);

        if i == grid.n_steps {
            break;
        }
        model.step_latent(&mut stepper, &h, t, dt, dy_i, u.ux, u.uy, &mut h_next, i)?;
        h.copy_from_slice(&h_next);
        yhat_prev = yhat;
        yhat = model
            .decode_one(&h)
            .try_into()
            .map_err(|_| ControlError::Shape("decoder output is not 5-dimensional".into()))?;
        s = plant_step(t, dt, &s, &u, p);
        u = eval_u(i + 1, &yhat, &yhat_prev);
    }

    Ok(ClosedLoopResult {
        grid,
        label: controller.label(),
        plant,
        predicted,
        controls,
        dy: dy_track,
        latents,
        latent_dim: l,
        metrics: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DESIGN_A: Mat3 = [[-0.2, 1.0, 0.0], [-1.0, -0.2, 0.5], [0.0, -0.5, -0.1]];
    const DESIGN_B: Mat32 = [[1.0, 0.0], [0.0, 1.0], [0.0, 0.3]];
    const DESIGN_Q: Mat3 = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
    const DESIGN_R: Mat2 = [[0.5, 0.0], [0.0, 2.0]];

    fn design_cfg() -> LqrConfig {
        LqrConfig {
            q: DESIGN_Q,
            r: DESIGN_R,
            target: BlochState::new(0.0, 0.0, 0.0),
            p_terminal: [[0.0; 3]; 3],
        }
    }

    /// Independent ARE fixed point: forward-Euler flow on the stationarity
    /// residual until it vanishes.
    fn are_fixed_point(a: &Mat3, b: &Mat32, q: &Mat3, r: &Mat2, h: f64, tol: f64) -> Mat3 {
        let r_inv = inv2(r).unwrap();
        let mut s_mat = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for m in 0..2 {
                    for n in 0..2 {
                        acc += b[i][m] * r_inv[m][n] * b[j][n];
                    }
                }
                s_mat[i][j] = acc;
            }
        }
        let mut p = [[0.0; 3]; 3];
        for _ in 0..2_000_000 {
            let at_p = mat3_mul(&mat3_t(a), &p);
            let p_a = mat3_mul(&p, a);
            let psp = mat3_mul(&mat3_mul(&p, &s_mat), &p);
            let mut worst = 0.0f64;
            for i in 0..3 {
                for j in 0..3 {
                    let resid = at_p[i][j] + p_a[i][j] - psp[i][j] + q[i][j];
                    p[i][j] += h * resid;
                    worst = worst.max(resid.abs());
                }
            }
            if worst < tol {
                return p;
            }
        }
        panic!("ARE fixed-point iteration did not converge");
    }

    #[test]
    fn b_matrix_examples() {
        let b = lqr_b_matrix(&BlochState::new(0.0, 0.0, 1.0));
        assert_eq!(b, [[0.0, 1.0], [-1.0, 0.0], [0.0, 0.0]]);
        let z = lqr_b_matrix(&BlochState::new(0.0, 0.0, 0.0));
        assert_eq!(z, [[0.0; 2]; 3]);
        let e1 = lqr_b_matrix(&BlochState::new(1.0, 0.0, 0.0));
        assert_eq!(e1, [[0.0, 0.0], [0.0, 0.0], [0.0, -1.0]]);
    }

    #[test]
    fn riccati_zero_cost_stays_zero() {
        let cfg = LqrConfig {
            q: [[0.0; 3]; 3],
            r: DESIGN_R,
            target: BlochState::new(0.0, 0.0, 1.0),
            p_terminal: [[0.0; 3]; 3],
        };
        let grid = TimeGrid::new(0.0, 2.0, 100);
        let sched = riccati_solve_fn(|_| DESIGN_A, &DESIGN_B, &cfg, grid).unwrap();
        for (p, k) in sched.p.iter().zip(&sched.k) {
            assert_eq!(*p, [[0.0; 3]; 3]);
            assert_eq!(*k, [[0.0; 3]; 2]);
        }
    }

    #[test]
    fn riccati_scalar_surrogate_hits_algebraic_limit() {
        // decoupled first coordinate: a=0, b=1, q=1, r=1 -> P00 -> sqrt(qr)=1
        let a: Mat3 = [[0.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
        let b: Mat32 = [[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
        let cfg = LqrConfig {
            q: [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
            r: [[1.0, 0.0], [0.0, 1.0]],
            target: BlochState::new(0.0, 0.0, 0.0),
            p_terminal: [[0.0; 3]; 3],
        };
        let grid = TimeGrid::new(0.0, 20.0, 4000);
        let sched = riccati_solve_fn(|_| a, &b, &cfg, grid).unwrap();
        assert!((sched.p[0][0][0] - 1.0).abs() < 1e-6, "P00(0) = {}", sched.p[0][0][0]);
        assert!((sched.k[0][0][0] - 1.0).abs() < 1e-6, "K00(0) = {}", sched.k[0][0][0]);
        assert_eq!(*sched.p.last().unwrap(), [[0.0; 3]; 3]);
    }

    #[test]
    fn riccati_matches_are_oracle() {
        let p_inf = are_fixed_point(&DESIGN_A, &DESIGN_B, &DESIGN_Q, &DESIGN_R, 0.01, 1e-13);
        let grid = TimeGrid::new(0.0, 35.0, 7000);
        let sched = riccati_solve_fn(|_| DESIGN_A, &DESIGN_B, &design_cfg(), grid).unwrap();
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                worst = worst.max((sched.p[0][i][j] - p_inf[i][j]).abs());
            }
        }
        assert!(worst < 1e-6, "|P(0) - P_inf|_max = {worst:.3e}");
    }

    #[test]
    fn riccati_symmetry_and_gain_identity_on_qubit_problem() {
        let p = SystemParams::new(0.55, 0.35, 0.4, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 500);
        let cfg = LqrConfig::default();
        let sched = lqr_gain_schedule(RateSource::Analytic, &p,
            &AugmentedState::new(BlochState::new(0.0, 0.0, -1.0), 0.0, 0.0), grid, &cfg).unwrap();
        let r_inv = inv2(&cfg.r).unwrap();
        let b = lqr_b_matrix(&cfg.target);
        for (pm, km) in sched.p.iter().zip(&sched.k) {
            for i in 0..3 {
                for j in 0..3 {
                    assert!((pm[i][j] - pm[j][i]).abs() < 1e-9);
                }
            }
            let kk = gain_from_p(&r_inv, &b, pm);
            for i in 0..2 {
                for j in 0..3 {
                    assert!((km[i][j] - kk[i][j]).abs() < 1e-12);
                }
            }
        }
        assert_eq!(*sched.p.last().unwrap(), cfg.p_terminal);
    }

    #[test]
    fn riccati_blowup_reports_time() {
        // unstabilizable growth: a=+5 block with no actuation, long horizon
        let a: Mat3 = [[5.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
        let b: Mat32 = [[0.0; 2]; 3];
        let cfg = LqrConfig {
            q: [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
            r: [[1.0, 0.0], [0.0, 1.0]],
            target: BlochState::new(0.0, 0.0, 0.0),
            p_terminal: [[0.0; 3]; 3],
        };
        let grid = TimeGrid::new(0.0, 100.0, 2000);
        match riccati_solve_fn(|_| a, &b, &cfg, grid) {
            Err(ControlError::RiccatiBlowup { t }) => assert!(t > 0.0 && t < 100.0),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn singular_r_rejected() {
        let cfg = LqrConfig { r: [[0.0, 0.0], [0.0, 0.0]], ..LqrConfig::default() };
        let grid = TimeGrid::new(0.0, 1.0, 10);
        match riccati_solve_fn(|_| DESIGN_A, &DESIGN_B, &cfg, grid) {
            Err(ControlError::SingularR { .. }) => {}
            other => panic!("expected singular R, got {other:?}"),
        }
    }

    #[test]
    fn schedule_interpolation_agrees_with_function_form() {
        // time-varying drift, both entry points on the same problem
        let grid = TimeGrid::new(0.0, 1.0, 400);
        let a_of_t = |t: f64| -> Mat3 {
            let mut a = DESIGN_A;
            a[0][0] = -0.2 - 0.3 * t;
            a[2][2] = -0.1 - 0.1 * t * t;
            a
        };
        let nodes: Vec<Mat3> = (0..grid.n_points()).map(|i| a_of_t(grid.point(i))).collect();
        let s1 = riccati_solve_fn(a_of_t, &DESIGN_B, &design_cfg(), grid).unwrap();
        let s2 = riccati_solve(&nodes, &DESIGN_B, &design_cfg(), grid).unwrap();
        let mut worst = 0.0f64;
        for (pa, pb) in s1.p.iter().zip(&s2.p) {
            for i in 0..3 {
                for j in 0..3 {
                    worst = worst.max((pa[i][j] - pb[i][j]).abs());
                }
            }
        }
        // t*t is the only term the piecewise-linear drift cannot represent
        assert!(worst < 1e-5, "interpolated vs functional drift drift {worst:.3e}");
    }

    #[test]
    fn lqr_control_examples() {
        let k: Mat23 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let target = BlochState::new(0.0, 0.0, 1.0);
        let u = lqr_control(&k, &target, &target);
        assert_eq!((u.ux, u.uy), (0.0, 0.0));
        let yhat = BlochState::new(0.2, -0.1, 1.0);
        let u = lqr_control(&k, &yhat, &target);
        assert!((u.ux + 0.2).abs() < 1e-15 && (u.uy - 0.1).abs() < 1e-15);
        let doubled = BlochState::new(0.4, -0.2, 1.0);
        let u2 = lqr_control(&k, &doubled, &target);
        assert!((u2.ux - 2.0 * u.ux).abs() < 1e-15);
        assert!((u2.uy - 2.0 * u.uy).abs() < 1e-15);
    }

    #[test]
    fn pd_control_examples() {
        let g = PdGains::default();
        let target = BlochState::new(0.0, 0.0, 1.0);
        let at_rest = pd_control(&target, &target, 0.01, &g, &target);
        assert_eq!((at_rest.ux, at_rest.uy), (0.0, 0.0));

        // x_hat = 0.2 moving at dx/dt = 0.1: u_x = -5(0.2) - 8(0.1) = -1.8
        let dt = 0.01;
        let cur = BlochState::new(0.2, 0.0, 0.0);
        let prev = BlochState::new(0.2 - 0.1 * dt, 0.0, 0.0);
        let u = pd_control(&cur, &prev, dt, &g, &target);
        assert!((u.ux + 1.8).abs() < 1e-12, "u_x = {}", u.ux);

        // constant prediction kills the derivative term exactly
        let held = pd_control(&cur, &cur, dt, &g, &target);
        assert_eq!(held.ux, -g.kp_x * 0.2);
    }

    #[test]
    fn pd_is_linear_in_error_and_derivative() {
        let g = PdGains { kp_x: 3.0, kp_y: 7.0, kd_x: 2.0, kd_y: 4.0 };
        let zero = BlochState::new(0.0, 0.0, 0.0);
        let dt = 0.05;
        let e = BlochState::new(0.3, -0.2, 0.1);
        let ep = BlochState::new(0.25, -0.1, 0.1);
        let u1 = pd_control(&e, &ep, dt, &g, &zero);
        let e2 = BlochState::new(2.0 * e.x, 2.0 * e.y, 2.0 * e.z);
        let ep2 = BlochState::new(2.0 * ep.x, 2.0 * ep.y, 2.0 * ep.z);
        let u2 = pd_control(&e2, &ep2, dt, &g, &zero);
        assert!((u2.ux - 2.0 * u1.ux).abs() < 1e-12);
        assert!((u2.uy - 2.0 * u1.uy).abs() < 1e-12);
    }

    #[test]
    fn lqr_beats_zero_control_on_design_model() {
        // realized quadratic cost on the A0-linear error dynamics, default
        // qubit problem, off-axis initial error
        let p = SystemParams::new(0.55, 0.35, 0.4, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 500);
        let cfg = LqrConfig::default();
        let y0 = AugmentedState::new(BlochState::new(0.3, 0.2, -0.9), 0.0, 0.0);
        let sched =
            lqr_gain_schedule(RateSource::Analytic, &p, &y0, grid, &cfg).unwrap();
        let b = lqr_b_matrix(&cfg.target);
        let a_nodes = a0_schedule_analytic(&p, grid);

        let cost = |use_feedback: bool| -> f64 {
            let mut e = [
                y0.bloch.x - cfg.target.x,
                y0.bloch.y - cfg.target.y,
                y0.bloch.z - cfg.target.z,
            ];
            let mut j = 0.0;
            let dt = grid.dt();
            let integrand = |e: &[f64; 3], u: &ControlInput| -> f64 {
                let mut s = 0.0;
                for i in 0..3 {
                    for jj in 0..3 {
                        s += e[i] * cfg.q[i][jj] * e[jj];
                    }
                }
                s + cfg.r[0][0] * u.ux * u.ux + cfg.r[1][1] * u.uy * u.uy
            };
            for i in 0..grid.n_points() {
                let u = if use_feedback {
                    let bs = BlochState::new(
                        e[0] + cfg.target.x,
                        e[1] + cfg.target.y,
                        e[2] + cfg.target.z,
                    );
                    lqr_control(&sched.k[i], &bs, &cfg.target)
                } else {
                    ControlInput::ZERO
                };
                let w = if i == 0 || i == grid.n_steps { 0.5 } else { 1.0 };
                j += w * dt * integrand(&e, &u);
                if i < grid.n_steps {
                    // error dynamics e' = A0 e + B u, RK4 with held u
                    let a = &a_nodes[i];
                    let f = |e: &[f64; 3]| -> [f64; 3] {
                        let mut d = [0.0; 3];
                        for r in 0..3 {
                            d[r] = a[r][0] * e[0] + a[r][1] * e[1] + a[r][2] * e[2]
                                + b[r][0] * u.ux
                                + b[r][1] * u.uy;
                        }
                        d
                    };
                    let k1 = f(&e);
                    let mid1 = [e[0] + 0.5 * dt * k1[0], e[1] + 0.5 * dt * k1[1], e[2] + 0.5 * dt * k1[2]];
                    let k2 = f(&mid1);
                    let mid2 = [e[0] + 0.5 * dt * k2[0], e[1] + 0.5 * dt * k2[1], e[2] + 0.5 * dt * k2[2]];
                    let k3 = f(&mid2);
                    let end = [e[0] + dt * k3[0], e[1] + dt * k3[1], e[2] + dt * k3[2]];
                    let k4 = f(&end);
                    for r in 0..3 {
                        e[r] += dt / 6.0 * (k1[r] + 2.0 * k2[r] + 2.0 * k3[r] + k4[r]);
                    }
                }
            }
            j
        };
        let j_lqr = cost(true);
        let j_zero = cost(false);
        assert!(
            j_lqr < j_zero,
            "LQR cost {j_lqr:.1} should beat zero-control cost {j_zero:.1}"
        );
        assert!(j_lqr > 0.0);
    }

    fn control_model(seed: u64) -> AqnodeModel {
        AqnodeModel::init(6, 8, 4, SignalSpec::Control, seed).unwrap()
    }

    #[test]
    fn zero_gain_closed_loop_matches_open_loop_bitwise() {
        let p = SystemParams::new(0.5, 0.3, 0.4, 1.0);
        let y0 = AugmentedState::new(BlochState::new(0.4, -0.2, -0.5), 0.0, 0.0);
        let grid = TimeGrid::new(0.0, 1.0, 200);
        let model = control_model(7);
        let gains = PdGains { kp_x: 0.0, kp_y: 0.0, kd_x: 0.0, kd_y: 0.0 };
        let run = closed_loop_run(
            &p,
            &model,
            &Controller::Pd(gains),
            &y0,
            grid,
            &BlochState::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        assert!(run.controls.iter().all(|u| u.ux == 0.0 && u.uy == 0.0));

        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let open = datagen::simulate_trajectory(&p, &y0, None, grid, 0.0, &mut rng).unwrap();
        assert_eq!(run.plant, open.states);
        assert_eq!(run.dy, open.dy);
    }

    #[test]
    fn closed_loop_is_deterministic_and_synchronized() {
        let p = SystemParams::new(0.5, 0.3, 0.4, 1.0);
        let y0 = AugmentedState::new(BlochState::new(0.0, 0.0, -1.0), 0.0, 0.0);
        let grid = TimeGrid::new(0.0, 0.5, 100);
        let model = control_model(3);
        let cfg = LqrConfig::default();
        let sched = lqr_gain_schedule(RateSource::Model(&model), &p, &y0, grid, &cfg).unwrap();
        let run1 = closed_loop_run(&p, &model, &Controller::Lqr(&sched), &y0, grid, &cfg.target)
            .unwrap();
        let run2 = closed_loop_run(&p, &model, &Controller::Lqr(&sched), &y0, grid, &cfg.target)
            .unwrap();
        assert_eq!(run1.plant, run2.plant);
        assert_eq!(run1.controls, run2.controls);
        assert_eq!(run1.predicted, run2.predicted);
        assert_eq!(run1.latents, run2.latents);
        assert_eq!(run1.label, ControllerLabel::Lqr);

        let n = grid.n_points();
        assert_eq!(run1.plant.len(), n);
        assert_eq!(run1.predicted.len(), n);
        assert_eq!(run1.controls.len(), n);
        assert_eq!(run1.dy.len(), n);
        assert_eq!(run1.latents.len(), n * run1.latent_dim);
    }

    #[test]
    fn closed_loop_rejects_mismatched_schedule_and_filtering_models() {
        let p = SystemParams::new(0.5, 0.3, 0.4, 1.0);
        let y0 = AugmentedState::new(BlochState::new(0.0, 0.0, -1.0), 0.0, 0.0);
        let grid = TimeGrid::new(0.0, 0.5, 100);
        let other_grid = TimeGrid::new(0.0, 1.0, 100);
        let model = control_model(3);
        let cfg = LqrConfig::default();
        let sched =
            lqr_gain_schedule(RateSource::Analytic, &p, &y0, other_grid, &cfg).unwrap();
        match closed_loop_run(&p, &model, &Controller::Lqr(&sched), &y0, grid, &cfg.target) {
            Err(ControlError::GridMismatch(_)) => {}
            other => panic!("expected grid mismatch, got {other:?}"),
        }

        let filtering = AqnodeModel::init(6, 8, 4, SignalSpec::Filtering, 1).unwrap();
        assert!(matches!(
            closed_loop_run(&p, &filtering, &Controller::Pd(PdGains::default()), &y0, grid, &cfg.target),
            Err(ControlError::Shape(_))
        ));
    }

    #[test]
    fn predicted_rate_tracks_have_grid_length() {
        let p = SystemParams::new(0.5, 0.3, 0.4, 1.0);
        let y0 = AugmentedState::new(BlochState::new(0.2, 0.1, -0.8), 0.0, 0.0);
        let grid = TimeGrid::new(0.0, 0.5, 100);
        let model = control_model(11);
        let (delta, gamma) = predict_rates_open_loop(&model, &p, &y0, grid).unwrap();
        assert_eq!(delta.len(), grid.n_points());
        assert_eq!(gamma.len(), grid.n_points());
        assert!(delta.iter().chain(&gamma).all(|v| v.is_finite()));
    }

    proptest! {
        #[test]
        fn lqr_zero_error_zero_control(kx in -10.0f64..10.0, ky in -10.0f64..10.0) {
            let k: Mat23 = [[kx, ky, 1.0], [ky, kx, -1.0]];
            let t = BlochState::new(0.3, -0.4, 0.5);
            let u = lqr_control(&k, &t, &t);
            prop_assert_eq!((u.ux, u.uy), (0.0, 0.0));
        }

        #[test]
        fn b_matrix_linear_in_target(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, s in 0.1f64..3.0) {
            let b1 = lqr_b_matrix(&BlochState::new(x, y, z));
            let b2 = lqr_b_matrix(&BlochState::new(s * x, s * y, s * z));
            for i in 0..3 {
                for j in 0..2 {
                    prop_assert!((b2[i][j] - s * b1[i][j]).abs() < 1e-12);
                }
            }
        }
    }
}
