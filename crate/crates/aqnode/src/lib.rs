//! Augmented neural ODE: an encoder initializes a latent state from the
//! initial augmented state and a short measurement prefix, a learned ODE
//! evolves the latent conditioned on exogenous signals (time, controls,
//! measurement record), and a decoder maps the latent back to the augmented
//! state [x, y, z, delta, gamma].
//!
//! Gradients come from the adjoint method realized as the exact discrete
//! adjoint of the RK4 rollout: the costate sweeps backward through every
//! integrator stage, picking up decoder-loss jumps at each grid node, so the
//! result matches finite differences of the actual computed loss to machine
//! precision rather than to O(dt^2).

use integrate::TimeGrid;
use nn::{Mlp, MlpCache, MlpGrads, VjpScratch};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const AUG_DIM: usize = 5;

/// Soft scale for the asinh compression of control-field inputs; chosen near
/// the hold-phase control magnitude so the feature stays ~linear there.
pub const U_FEATURE_SCALE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum AqnodeError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite latent state at step {step}")]
    NonFinite { step: usize },
    #[error("signal track error: {0}")]
    Signal(String),
}

/// Which exogenous inputs the dynamics net receives after the latent state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalSpec {
    /// [t, dY] — state/parameter filtering from the measurement record.
    Filtering,
    /// [t, u_x, u_y, dY] — closed-loop operation with control inputs.
    Control,
}

impl SignalSpec {
    pub fn n_signals(&self) -> usize {
        match self {
            SignalSpec::Filtering => 2,
            SignalSpec::Control => 4,
        }
    }
}

/// Exogenous samples on a time grid, zero-order held inside each RK4 step.
#[derive(Debug, Clone)]
pub struct SignalTrack {
    pub grid: TimeGrid,
    pub dy: Vec<f64>,
    pub ux: Vec<f64>,
    pub uy: Vec<f64>,
}

impl SignalTrack {
    pub fn filtering(grid: TimeGrid, dy: Vec<f64>) -> Result<Self, AqnodeError> {
        if dy.len() != grid.n_points() {
            return Err(AqnodeError::Signal(format!(
                "dY track has {} samples, grid has {} points",
                dy.len(),
                grid.n_points()
            )));
        }
        Ok(SignalTrack { grid, dy, ux: Vec::new(), uy: Vec::new() })
    }

    pub fn control(
        grid: TimeGrid,
        dy: Vec<f64>,
        ux: Vec<f64>,
        uy: Vec<f64>,
    ) -> Result<Self, AqnodeError> {
        let n = grid.n_points();
        if dy.len() != n || ux.len() != n || uy.len() != n {
            return Err(AqnodeError::Signal(format!(
                "signal tracks (dy {}, ux {}, uy {}) must all have {} samples",
                dy.len(),
                ux.len(),
                uy.len(),
                n
            )));
        }
        Ok(SignalTrack { grid, dy, ux, uy })
    }

    /// (dY, u_x, u_y) held over step `i`; controls read as zero when the
    /// track carries none.
    fn sample(&self, i: usize, spec: SignalSpec) -> (f64, f64, f64) {
        match spec {
            SignalSpec::Filtering => (self.dy[i], 0.0, 0.0),
            SignalSpec::Control => (self.dy[i], self.ux[i], self.uy[i]),
        }
    }
}

/// Loss weights: total = kappa * state_part + beta * param_part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub kappa: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { kappa: 1.0, beta: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub state: f64,
    pub param: f64,
}

/// Gradient of the trajectory loss over all model parameters, plus the
/// terminal time-adjoint a_t(t_N) = a(t_N) . f(t_N), reported diagnostically.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub grad: Vec<f64>,
    pub loss: LossBreakdown,
    pub a_t_terminal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AqnodeModel {
    pub encoder: Mlp,
    pub dynamics: Mlp,
    pub decoder: Mlp,
    pub latent_dim: usize,
    pub prefix_len: usize,
    pub signal_spec: SignalSpec,
}

impl AqnodeModel {
    /// One-hidden-layer architecture for all three nets.
    pub fn init(
        latent_dim: usize,
        hidden: usize,
        prefix_len: usize,
        signal_spec: SignalSpec,
        seed: u64,
    ) -> Result<Self, AqnodeError> {
        let mk = |dims: &[usize], s: u64| {
            Mlp::init(dims, s).map_err(|e| AqnodeError::Shape(e.to_string()))
        };
        let encoder = mk(&[AUG_DIM + prefix_len, hidden, latent_dim], seed)?;
        let dynamics = mk(
            &[latent_dim + signal_spec.n_signals(), hidden, latent_dim],
            seed.wrapping_add(1),
        )?;
        let decoder = mk(&[latent_dim, hidden, AUG_DIM], seed.wrapping_add(2))?;
        let m = AqnodeModel { encoder, dynamics, decoder, latent_dim, prefix_len, signal_spec };
        m.validate()?;
        Ok(m)
    }

    pub fn from_parts(
        encoder: Mlp,
        dynamics: Mlp,
        decoder: Mlp,
        latent_dim: usize,
        prefix_len: usize,
        signal_spec: SignalSpec,
    ) -> Result<Self, AqnodeError> {
        let m = AqnodeModel { encoder, dynamics, decoder, latent_dim, prefix_len, signal_spec };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), AqnodeError> {
        let fail = |msg: String| Err(AqnodeError::Shape(msg));
        if self.encoder.in_dim() != AUG_DIM + self.prefix_len {
            return fail(format!(
                "encoder input dim {} != 5 + prefix {}",
                self.encoder.in_dim(),
                self.prefix_len
            ));
        }
        if self.encoder.out_dim() != self.latent_dim {
            return fail("encoder output dim != latent_dim".into());
        }
        if self.dynamics.in_dim() != self.latent_dim + self.signal_spec.n_signals() {
            return fail("dynamics input dim != latent_dim + signal count".into());
        }
        if self.dynamics.out_dim() != self.latent_dim {
            return fail("dynamics output dim != latent_dim".into());
        }
        if self.decoder.in_dim() != self.latent_dim {
            return fail("decoder input dim != latent_dim".into());
        }
        if self.decoder.out_dim() != AUG_DIM {
            return fail("decoder output dim != 5".into());
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.dynamics.n_params() + self.decoder.n_params()
    }

    /// Flat layout: encoder, then dynamics, then decoder (each per-layer
    /// weights row-major followed by biases).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(self.encoder.flatten());
        out.extend(self.dynamics.flatten());
        out.extend(self.decoder.flatten());
        out
    }

    pub fn load_flat_params(&mut self, flat: &[f64]) -> Result<(), AqnodeError> {
        if flat.len() != self.n_params() {
            return Err(AqnodeError::Shape(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.n_params()
            )));
        }
        let ne = self.encoder.n_params();
        let nd = self.dynamics.n_params();
        self.encoder.load_flat(&flat[..ne]).map_err(|e| AqnodeError::Shape(e.to_string()))?;
        self.dynamics
            .load_flat(&flat[ne..ne + nd])
            .map_err(|e| AqnodeError::Shape(e.to_string()))?;
        self.decoder
            .load_flat(&flat[ne + nd..])
            .map_err(|e| AqnodeError::Shape(e.to_string()))?;
        Ok(())
    }

    /// Latent initialization h(t0) = Encoder([y0 | dY prefix]).
    pub fn encode(&self, y0: &[f64], dy_prefix: &[f64]) -> Result<Vec<f64>, AqnodeError> {
        if y0.len() != AUG_DIM {
            return Err(AqnodeError::Shape(format!("y0 has {} entries, want 5", y0.len())));
        }
        if dy_prefix.len() != self.prefix_len {
            return Err(AqnodeError::Shape(format!(
                "prefix has {} samples, encoder wants {}",
                dy_prefix.len(),
                self.prefix_len
            )));
        }
        let mut input = Vec::with_capacity(AUG_DIM + self.prefix_len);
        input.extend_from_slice(y0);
        input.extend_from_slice(dy_prefix);
        Ok(self.encoder.forward(&input))
    }

    /// Write t and the held signals after the latent block of a dynamics
    /// input buffer. Control fields enter through asinh(u / U_FEATURE_SCALE):
    /// linear below the scale, logarithmic above, so transient spikes two
    /// orders above hold-phase magnitudes cannot saturate the first layer.
    fn fill_signal_tail(&self, buf: &mut [f64], t: f64, sig: (f64, f64, f64)) {
        let l = self.latent_dim;
        match self.signal_spec {
            SignalSpec::Filtering => {
                buf[l] = t;
                buf[l + 1] = sig.0;
            }
            SignalSpec::Control => {
                buf[l] = t;
                buf[l + 1] = (sig.1 / U_FEATURE_SCALE).asinh();
                buf[l + 2] = (sig.2 / U_FEATURE_SCALE).asinh();
                buf[l + 3] = sig.0;
            }
        }
    }

    /// One RK4 step of dh/dt = Dyn([h | t | signals]); t advances through the
    /// stages, the sampled signals are held. Stage inputs and activation
    /// caches stay behind in the buffers for the adjoint sweep.
    #[allow(clippy::too_many_arguments)]
    fn latent_step(
        &self,
        h: &[f64],
        t: f64,
        dt: f64,
        sig: (f64, f64, f64),
        h_next: &mut [f64],
        stage_inputs: &mut [Vec<f64>; 4],
        stage_caches: &mut [MlpCache; 4],
        s_vals: &mut [Vec<f64>; 4],
    ) {
        let l = self.latent_dim;
        let half = 0.5 * dt;
        let stage_times = [t, t + half, t + half, t + dt];
        let stage_scale = [0.0, half, half, dt];
        for s in 0..4 {
            let buf = &mut stage_inputs[s];
            if s == 0 {
                buf[..l].copy_from_slice(h);
            } else {
                let prev = &s_vals[s - 1];
                let scale = stage_scale[s];
                for j in 0..l {
                    buf[j] = h[j] + scale * prev[j];
                }
            }
            self.fill_signal_tail(buf, stage_times[s], sig);
            self.dynamics.forward_cached(&stage_inputs[s], &mut stage_caches[s]);
            s_vals[s].copy_from_slice(stage_caches[s].output());
        }
        let w = dt / 6.0;
        for j in 0..l {
            h_next[j] = h[j]
                + w * (s_vals[0][j] + 2.0 * s_vals[1][j] + 2.0 * s_vals[2][j] + s_vals[3][j]);
        }
    }

    /// Single latent RK4 step with externally held signals, for closed-loop
    /// stepping. `step_index` only labels the error on blow-up.
    #[allow(clippy::too_many_arguments)]
    pub fn step_latent(
        &self,
        scratch: &mut LatentStepper,
        h: &[f64],
        t: f64,
        dt: f64,
        dy: f64,
        ux: f64,
        uy: f64,
        h_next: &mut [f64],
        step_index: usize,
    ) -> Result<(), AqnodeError> {
        self.latent_step(
            h,
            t,
            dt,
            (dy, ux, uy),
            h_next,
            &mut scratch.stage_inputs,
            &mut scratch.stage_caches,
            &mut scratch.s_vals,
        );
        if h_next.iter().any(|v| !v.is_finite()) {
            return Err(AqnodeError::NonFinite { step: step_index });
        }
        Ok(())
    }

    /// Decoder applied to one latent vector.
    pub fn decode_one(&self, h: &[f64]) -> Vec<f64> {
        self.decoder.forward(h)
    }

    /// RK4 latent rollout with zero-order-held signals; returns the flat
    /// latent trajectory, node i at `[i*latent_dim .. (i+1)*latent_dim]`.
    pub fn rollout(&self, h0: &[f64], signals: &SignalTrack) -> Result<Vec<f64>, AqnodeError> {
        if h0.len() != self.latent_dim {
            return Err(AqnodeError::Shape("h0 length != latent_dim".into()));
        }
        let mut ws = AdjointWorkspace::new(self, &signals.grid);
        ws.latents[..self.latent_dim].copy_from_slice(h0);
        self.rollout_into(&mut ws, signals)?;
        Ok(ws.latents)
    }

    fn rollout_into(
        &self,
        ws: &mut AdjointWorkspace,
        signals: &SignalTrack,
    ) -> Result<(), AqnodeError> {
        let l = self.latent_dim;
        let grid = signals.grid;
        let dt = grid.dt();
        for i in 0..grid.n_steps {
            let t = grid.point(i);
            let sig = signals.sample(i, self.signal_spec);
            let (before, rest) = ws.latents.split_at_mut((i + 1) * l);
            let h = &before[i * l..];
            let h_next = &mut rest[..l];
            self.latent_step(
                h,
                t,
                dt,
                sig,
                h_next,
                &mut ws.stage_inputs,
                &mut ws.stage_caches,
                &mut ws.s_vals,
            );
            if h_next.iter().any(|v| !v.is_finite()) {
                return Err(AqnodeError::NonFinite { step: i });
            }
        }
        Ok(())
    }

    /// Rollout that files each step's stage caches in the workspace for the
    /// adjoint sweep, instead of leaving only the last step behind.
    fn rollout_store_into(
        &self,
        ws: &mut AdjointWorkspace,
        signals: &SignalTrack,
    ) -> Result<(), AqnodeError> {
        let l = self.latent_dim;
        let grid = signals.grid;
        let dt = grid.dt();
        let AdjointWorkspace { latents, stage_inputs, step_caches, s_vals, .. } = ws;
        for i in 0..grid.n_steps {
            let t = grid.point(i);
            let sig = signals.sample(i, self.signal_spec);
            let (before, rest) = latents.split_at_mut((i + 1) * l);
            let h = &before[i * l..];
            let h_next = &mut rest[..l];
            self.latent_step(h, t, dt, sig, h_next, stage_inputs, &mut step_caches[i], s_vals);
            if h_next.iter().any(|v| !v.is_finite()) {
                return Err(AqnodeError::NonFinite { step: i });
            }
        }
        Ok(())
    }

    /// Pointwise decoder application over a flat latent trajectory; returns
    /// flat predictions, node i at `[i*5 .. (i+1)*5]`.
    pub fn decode_trajectory(&self, latents: &[f64]) -> Result<Vec<f64>, AqnodeError> {
        if latents.is_empty() || latents.len() % self.latent_dim != 0 {
            return Err(AqnodeError::Shape("latent buffer not a multiple of latent_dim".into()));
        }
        let n = latents.len() / self.latent_dim;
        let mut cache = MlpCache::new(&self.decoder);
        let mut out = vec![0.0; n * AUG_DIM];
        for i in 0..n {
            self.decoder.forward_cached(
                &latents[i * self.latent_dim..(i + 1) * self.latent_dim],
                &mut cache,
            );
            out[i * AUG_DIM..(i + 1) * AUG_DIM].copy_from_slice(cache.output());
        }
        Ok(out)
    }

    /// Encode, roll out, decode: the full truth-free forward path.
    pub fn predict(
        &self,
        y0: &[f64],
        dy_prefix: &[f64],
        signals: &SignalTrack,
    ) -> Result<Vec<f64>, AqnodeError> {
        let h0 = self.encode(y0, dy_prefix)?;
        let latents = self.rollout(&h0, signals)?;
        self.decode_trajectory(&latents)
    }

    /// Trajectory loss: means over grid nodes of the squared state residual
    /// (x, y, z) and the squared parameter residual (delta, gamma).
    pub fn loss(pred: &[f64], truth: &[f64], w: &LossWeights) -> Result<LossBreakdown, AqnodeError> {
        if pred.len() != truth.len() || pred.len() % AUG_DIM != 0 || pred.is_empty() {
            return Err(AqnodeError::Shape(format!(
                "prediction ({}) and truth ({}) must be equal non-empty multiples of 5",
                pred.len(),
                truth.len()
            )));
        }
        let n = pred.len() / AUG_DIM;
        let mut state = 0.0;
        let mut param = 0.0;
        for i in 0..n {
            let p = &pred[i * AUG_DIM..(i + 1) * AUG_DIM];
            let t = &truth[i * AUG_DIM..(i + 1) * AUG_DIM];
            for c in 0..3 {
                let d = p[c] - t[c];
                state += d * d;
            }
            for c in 3..5 {
                let d = p[c] - t[c];
                param += d * d;
            }
        }
        state /= n as f64;
        param /= n as f64;
        Ok(LossBreakdown { total: w.kappa * state + w.beta * param, state, param })
    }

    /// Loss gradient over all parameters via the discrete adjoint sweep.
    pub fn adjoint_gradients(
        &self,
        y0: &[f64],
        dy_prefix: &[f64],
        signals: &SignalTrack,
        truth: &[f64],
        w: &LossWeights,
    ) -> Result<GradientReport, AqnodeError> {
        let mut ws = AdjointWorkspace::new(self, &signals.grid);
        let mut grad = vec![0.0; self.n_params()];
        let (loss, a_t) =
            self.adjoint_gradients_into(&mut ws, y0, dy_prefix, signals, truth, w, &mut grad)?;
        Ok(GradientReport { grad, loss, a_t_terminal: a_t })
    }

    /// Allocation-free adjoint pass: overwrites `grad_out` with the flat
    /// gradient, returns the loss breakdown and the terminal a_t diagnostic.
    ///
    /// Backward recurrence per RK4 step, with stage values recomputed from
    /// the stored node latents: given the incoming costate a on h_{i+1},
    ///   kbar_4 = dt/6 a,  kbar_3 = dt/3 a + dt ibar_4,
    ///   kbar_2 = dt/3 a + dt/2 ibar_3,  kbar_1 = dt/6 a + dt/2 ibar_2,
    ///   a <- a + ibar_1 + ibar_2 + ibar_3 + ibar_4,
    /// where ibar_s is the latent block of the dynamics-net input cotangent
    /// produced by the VJP at stage s with cotangent kbar_s.
    #[allow(clippy::too_many_arguments)]
    pub fn adjoint_gradients_into(
        &self,
        ws: &mut AdjointWorkspace,
        y0: &[f64],
        dy_prefix: &[f64],
        signals: &SignalTrack,
        truth: &[f64],
        w: &LossWeights,
        grad_out: &mut [f64],
    ) -> Result<(LossBreakdown, f64), AqnodeError> {
        let l = self.latent_dim;
        let grid = signals.grid;
        let n_nodes = grid.n_points();
        if truth.len() != n_nodes * AUG_DIM {
            return Err(AqnodeError::Shape(format!(
                "truth has {} entries, grid wants {}",
                truth.len(),
                n_nodes * AUG_DIM
            )));
        }
        if grad_out.len() != self.n_params() {
            return Err(AqnodeError::Shape("gradient buffer length != n_params".into()));
        }
        if y0.len() != AUG_DIM || dy_prefix.len() != self.prefix_len {
            return Err(AqnodeError::Shape("bad y0 or prefix length".into()));
        }
        ws.reset(self, &grid);

        // forward: encode (cache kept for the final VJP), then roll out
        ws.enc_in[..AUG_DIM].copy_from_slice(y0);
        ws.enc_in[AUG_DIM..].copy_from_slice(dy_prefix);
        self.encoder.forward_cached(&ws.enc_in, &mut ws.enc_cache);
        ws.latents[..l].copy_from_slice(ws.enc_cache.output());
        self.rollout_store_into(ws, signals)?;

        // backward sweep; loss residuals accumulate along the way
        let dt = grid.dt();
        let nf = n_nodes as f64;
        let mut state_sum = 0.0;
        let mut param_sum = 0.0;
        ws.a.fill(0.0);
        let mut a_t_terminal = 0.0;
        for i in (0..n_nodes).rev() {
            // decoder-loss jump at node i
            let h_i = &ws.latents[i * l..(i + 1) * l];
            self.decoder.forward_cached(h_i, &mut ws.dec_cache);
            {
                let p = ws.dec_cache.output();
                let tr = &truth[i * AUG_DIM..(i + 1) * AUG_DIM];
                for c in 0..3 {
                    let d = p[c] - tr[c];
                    state_sum += d * d;
                    ws.cot5[c] = 2.0 * w.kappa * d / nf;
                }
                for c in 3..5 {
                    let d = p[c] - tr[c];
                    param_sum += d * d;
                    ws.cot5[c] = 2.0 * w.beta * d / nf;
                }
            }
            self.decoder.vjp_cached(
                &ws.dec_cache,
                &ws.cot5,
                &mut ws.grads_dec,
                &mut ws.hbar,
                &mut ws.vjp_dec,
            );
            for j in 0..l {
                ws.a[j] += ws.hbar[j];
            }

            if i == n_nodes - 1 {
                // diagnostic a_t(t_N) = a(t_N) . f(t_N)
                let sig = signals.sample(i, self.signal_spec);
                ws.stage_inputs[0][..l].copy_from_slice(h_i);
                self.fill_signal_tail(&mut ws.stage_inputs[0], grid.point(i), sig);
                self.dynamics.forward_cached(&ws.stage_inputs[0], &mut ws.stage_caches[0]);
                a_t_terminal = ws
                    .a
                    .iter()
                    .zip(ws.stage_caches[0].output())
                    .map(|(ai, fi)| ai * fi)
                    .sum();
            }

            if i == 0 {
                break;
            }

            // reverse the step (i-1) -> i through the stored stage caches
            let step = i - 1;
            let w16 = dt / 6.0;
            let w13 = dt / 3.0;
            for j in 0..l {
                let aj = ws.a[j];
                ws.kbar[3][j] = w16 * aj;
                ws.kbar[2][j] = w13 * aj;
                ws.kbar[1][j] = w13 * aj;
                ws.kbar[0][j] = w16 * aj;
                ws.a_new[j] = aj;
            }
            let chain_scale = [0.0, 0.5 * dt, 0.5 * dt, dt];
            for s in (0..4).rev() {
                self.dynamics.vjp_cached(
                    &ws.step_caches[step][s],
                    &ws.kbar[s],
                    &mut ws.grads_dyn,
                    &mut ws.ibar,
                    &mut ws.vjp_dyn,
                );
                for j in 0..l {
                    ws.a_new[j] += ws.ibar[j];
                }
                if s > 0 {
                    let cs = chain_scale[s];
                    for j in 0..l {
                        ws.kbar[s - 1][j] += cs * ws.ibar[j];
                    }
                }
            }
            ws.a.copy_from_slice(&ws.a_new);
        }

        // encoder VJP from the costate at t0
        self.encoder.vjp_cached(
            &ws.enc_cache,
            &ws.a,
            &mut ws.grads_enc,
            &mut ws.enc_in_bar,
            &mut ws.vjp_enc,
        );

        let off = ws.grads_enc.write_flat(grad_out, 0);
        let off = ws.grads_dyn.write_flat(grad_out, off);
        let off = ws.grads_dec.write_flat(grad_out, off);
        debug_assert_eq!(off, self.n_params());
        let loss = LossBreakdown {
            total: w.kappa * state_sum / nf + w.beta * param_sum / nf,
            state: state_sum / nf,
            param: param_sum / nf,
        };
        Ok((loss, a_t_terminal))
    }

    /// Central-difference comparison over every parameter; returns the worst
    /// relative error. For small verification models only.
    pub fn grad_check(
        &self,
        y0: &[f64],
        dy_prefix: &[f64],
        signals: &SignalTrack,
        truth: &[f64],
        w: &LossWeights,
        fd_step: f64,
    ) -> Result<f64, AqnodeError> {
        let report = self.adjoint_gradients(y0, dy_prefix, signals, truth, w)?;
        let base = self.flatten_params();
        let mut probe = self.clone();
        let mut flat = base.clone();
        let mut worst = 0.0f64;
        for j in 0..base.len() {
            flat[j] = base[j] + fd_step;
            probe.load_flat_params(&flat)?;
            let lp = Self::loss(&probe.predict(y0, dy_prefix, signals)?, truth, w)?.total;
            flat[j] = base[j] - fd_step;
            probe.load_flat_params(&flat)?;
            let lm = Self::loss(&probe.predict(y0, dy_prefix, signals)?, truth, w)?.total;
            flat[j] = base[j];
            let fd = (lp - lm) / (2.0 * fd_step);
            let a = report.grad[j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        Ok(worst)
    }
}

/// Stage buffers for single-step latent advances outside training.
#[derive(Debug, Clone)]
pub struct LatentStepper {
    stage_inputs: [Vec<f64>; 4],
    stage_caches: [MlpCache; 4],
    s_vals: [Vec<f64>; 4],
}

impl LatentStepper {
    pub fn new(model: &AqnodeModel) -> Self {
        let l = model.latent_dim;
        let din = model.dynamics.in_dim();
        LatentStepper {
            stage_inputs: std::array::from_fn(|_| vec![0.0; din]),
            stage_caches: std::array::from_fn(|_| MlpCache::new(&model.dynamics)),
            s_vals: std::array::from_fn(|_| vec![0.0; l]),
        }
    }
}

/// Reusable buffers for one trajectory's forward rollout plus adjoint sweep.
#[derive(Debug, Clone)]
pub struct AdjointWorkspace {
    latents: Vec<f64>,
    stage_inputs: [Vec<f64>; 4],
    stage_caches: [MlpCache; 4],
    // per-step stage caches kept from the forward pass so the backward sweep
    // never re-runs the dynamics net; ~1.5 MB for a 500-step grid
    step_caches: Vec<[MlpCache; 4]>,
    s_vals: [Vec<f64>; 4],
    dec_cache: MlpCache,
    enc_cache: MlpCache,
    vjp_dyn: VjpScratch,
    vjp_dec: VjpScratch,
    vjp_enc: VjpScratch,
    a: Vec<f64>,
    a_new: Vec<f64>,
    kbar: [Vec<f64>; 4],
    ibar: Vec<f64>,
    hbar: Vec<f64>,
    cot5: [f64; AUG_DIM],
    grads_enc: MlpGrads,
    grads_dyn: MlpGrads,
    grads_dec: MlpGrads,
    enc_in: Vec<f64>,
    enc_in_bar: Vec<f64>,
}

impl AdjointWorkspace {
    pub fn new(model: &AqnodeModel, grid: &TimeGrid) -> Self {
        let l = model.latent_dim;
        let din = model.dynamics.in_dim();
        AdjointWorkspace {
            latents: vec![0.0; grid.n_points() * l],
            stage_inputs: std::array::from_fn(|_| vec![0.0; din]),
            stage_caches: std::array::from_fn(|_| MlpCache::new(&model.dynamics)),
            step_caches: Vec::new(),
            s_vals: std::array::from_fn(|_| vec![0.0; l]),
            dec_cache: MlpCache::new(&model.decoder),
            enc_cache: MlpCache::new(&model.encoder),
            vjp_dyn: VjpScratch::new(&model.dynamics),
            vjp_dec: VjpScratch::new(&model.decoder),
            vjp_enc: VjpScratch::new(&model.encoder),
            a: vec![0.0; l],
            a_new: vec![0.0; l],
            kbar: std::array::from_fn(|_| vec![0.0; l]),
            ibar: vec![0.0; din],
            hbar: vec![0.0; l],
            cot5: [0.0; AUG_DIM],
            grads_enc: MlpGrads::zeros(&model.encoder),
            grads_dyn: MlpGrads::zeros(&model.dynamics),
            grads_dec: MlpGrads::zeros(&model.decoder),
            enc_in: vec![0.0; model.encoder.in_dim()],
            enc_in_bar: vec![0.0; model.encoder.in_dim()],
        }
    }

    fn reset(&mut self, model: &AqnodeModel, grid: &TimeGrid) {
        let need = grid.n_points() * model.latent_dim;
        if self.latents.len() != need {
            self.latents.resize(need, 0.0);
        }
        while self.step_caches.len() < grid.n_steps {
            self.step_caches.push(std::array::from_fn(|_| MlpCache::new(&model.dynamics)));
        }
        self.grads_enc.clear();
        self.grads_dyn.clear();
        self.grads_dec.clear();
    }
}
