//! Fixed-step classical Runge-Kutta 4 integration for flat real state vectors.
//!
//! One integrator serves every ODE in the workspace: the Bloch plant, the
//! latent rollout, the adjoint pass, and the backward Riccati solve. States of
//! any shape (vectors, 3x3 matrices, parameter cotangents) are flattened to
//! contiguous `&[f64]` slices; callers keep the shape metadata.

use thiserror::Error;

/// Uniform time grid over `[t0, t1]` with `n_steps` RK4 steps (`n_steps + 1` points).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, n_steps: usize) -> Self {
        assert!(n_steps > 0, "grid needs at least one step");
        assert!(t1 > t0, "grid must be strictly monotone (t1 > t0)");
        assert!(t0.is_finite() && t1.is_finite());
        TimeGrid { t0, t1, n_steps }
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }

    /// Time of grid point `i`, `i` in `0..=n_steps`.
    pub fn point(&self, i: usize) -> f64 {
        debug_assert!(i <= self.n_steps);
        self.t0 + i as f64 * self.dt()
    }

    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n_points()).map(|i| self.point(i)).collect()
    }
}

#[derive(Debug, Error)]
pub enum IntegrateError {
    #[error("non-finite state during RK4 step at t = {t}{}", step.map(|s| format!(" (step {s})")).unwrap_or_default())]
    NonFinite { t: f64, step: Option<usize> },
}

/// Reusable stage buffers so inner loops never allocate.
#[derive(Debug, Clone)]
pub struct RkScratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    ytmp: Vec<f64>,
}

impl RkScratch {
    pub fn new(dim: usize) -> Self {
        RkScratch {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            ytmp: vec![0.0; dim],
        }
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// One classical RK4 step from `y` at time `t` with step `dt` (negative `dt`
/// integrates backward). The right-hand side writes `dy/dt` into its last
/// argument. `y_next` may not alias `y`.
pub fn rk4_step<F>(
    f: &mut F,
    t: f64,
    dt: f64,
    y: &[f64],
    y_next: &mut [f64],
    ws: &mut RkScratch,
) -> Result<(), IntegrateError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let dim = y.len();
    assert_eq!(y_next.len(), dim);
    assert_eq!(ws.k1.len(), dim, "scratch dimension mismatch");
    let half = 0.5 * dt;

    f(t, y, &mut ws.k1);
    for i in 0..dim {
        ws.ytmp[i] = y[i] + half * ws.k1[i];
    }
    f(t + half, &ws.ytmp, &mut ws.k2);
    for i in 0..dim {
        ws.ytmp[i] = y[i] + half * ws.k2[i];
    }
    f(t + half, &ws.ytmp, &mut ws.k3);
    for i in 0..dim {
        ws.ytmp[i] = y[i] + dt * ws.k3[i];
    }
    f(t + dt, &ws.ytmp, &mut ws.k4);

    let w = dt / 6.0;
    for i in 0..dim {
        y_next[i] = y[i] + w * (ws.k1[i] + 2.0 * ws.k2[i] + 2.0 * ws.k3[i] + ws.k4[i]);
    }
    if !all_finite(y_next) {
        return Err(IntegrateError::NonFinite { t, step: None });
    }
    Ok(())
}

/// Convenience allocating wrapper around [`rk4_step`].
pub fn rk4_step_owned<F>(f: &mut F, t: f64, dt: f64, y: &[f64]) -> Result<Vec<f64>, IntegrateError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let mut ws = RkScratch::new(y.len());
    let mut out = vec![0.0; y.len()];
    rk4_step(f, t, dt, y, &mut out, &mut ws)?;
    Ok(out)
}

/// Integrate forward over the grid; returns `n_steps + 1` states, the first
/// equal to `y0`, element `i` at `grid.point(i)`.
pub fn integrate_forward<F>(
    f: &mut F,
    y0: &[f64],
    grid: &TimeGrid,
) -> Result<Vec<Vec<f64>>, IntegrateError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if !all_finite(y0) {
        return Err(IntegrateError::NonFinite { t: grid.t0, step: Some(0) });
    }
    let dt = grid.dt();
    let mut ws = RkScratch::new(y0.len());
    let mut out = Vec::with_capacity(grid.n_points());
    out.push(y0.to_vec());
    let mut next = vec![0.0; y0.len()];
    for i in 0..grid.n_steps {
        let t = grid.point(i);
        rk4_step(f, t, dt, out.last().unwrap(), &mut next, &mut ws)
            .map_err(|IntegrateError::NonFinite { t, .. }| IntegrateError::NonFinite {
                t,
                step: Some(i),
            })?;
        out.push(next.clone());
    }
    Ok(out)
}

/// Integrate backward from `yT` at `t1` down to `t0`. The output is indexed
/// like [`integrate_forward`]: element `i` sits at `grid.point(i)`, so the
/// terminal condition lands at index `n_steps` (the integration runs from the
/// back, the returned order is ascending in time).
pub fn integrate_backward<F>(
    f: &mut F,
    y_terminal: &[f64],
    grid: &TimeGrid,
) -> Result<Vec<Vec<f64>>, IntegrateError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if !all_finite(y_terminal) {
        return Err(IntegrateError::NonFinite { t: grid.t1, step: Some(grid.n_steps) });
    }
    let dt = -grid.dt();
    let mut ws = RkScratch::new(y_terminal.len());
    let mut out = vec![Vec::new(); grid.n_points()];
    out[grid.n_steps] = y_terminal.to_vec();
    let mut next = vec![0.0; y_terminal.len()];
    for i in (1..=grid.n_steps).rev() {
        let t = grid.point(i);
        rk4_step(f, t, dt, &out[i], &mut next, &mut ws)
            .map_err(|IntegrateError::NonFinite { t, .. }| IntegrateError::NonFinite {
                t,
                step: Some(i - 1),
            })?;
        out[i - 1] = next.clone();
    }
    Ok(out)
}
