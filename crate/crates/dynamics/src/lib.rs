//! Plant physics for a dissipative, weakly measured qubit in Bloch form.
//!
//! The density matrix rho = (I + x sigma_x + y sigma_y + z sigma_z)/2 is
//! carried as the real vector (x, y, z). Environmental memory enters through
//! the time-dependent rates gamma(t) (dissipation, transiently negative in the
//! non-Markovian regime) and delta(t) (diffusion); weak continuous monitoring
//! of sigma_z adds a measurement-induced damping M/2 on the coherences and the
//! deterministic record dY/dt = -sqrt(M zeta) z.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ZETA_DEFAULT: f64 = 0.9;
pub const KBT_DEFAULT: f64 = 1.0;

/// Bloch-ball membership tolerance for physicality checks.
pub const BLOCH_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid system parameters: {0}")]
    InvalidParams(String),
    #[error("Bloch vector outside the unit ball: |s| = {norm}")]
    Unphysical { norm: f64 },
}

/// Physical configuration of plant, bath, and monitoring channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// System-bath coupling strength alpha (dimensionless).
    pub alpha: f64,
    /// Bath cutoff ratio r = omega_c / omega_0.
    pub r: f64,
    /// Measurement interaction strength M >= 0.
    #[serde(rename = "m")]
    pub m_strength: f64,
    /// System frequency omega_0 > 0.
    pub omega0: f64,
    /// Detection efficiency zeta in (0, 1).
    pub zeta: f64,
    /// Environmental temperature k_B T (natural units).
    pub kbt: f64,
}

impl SystemParams {
    pub fn new(alpha: f64, r: f64, m_strength: f64, omega0: f64) -> Self {
        SystemParams { alpha, r, m_strength, omega0, zeta: ZETA_DEFAULT, kbt: KBT_DEFAULT }
    }

    pub fn with_zeta(mut self, zeta: f64) -> Self {
        self.zeta = zeta;
        self
    }

    pub fn with_kbt(mut self, kbt: f64) -> Self {
        self.kbt = kbt;
        self
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(DynamicsError::InvalidParams(msg.to_string()))
            }
        };
        check(self.alpha > 0.0 && self.alpha.is_finite(), "alpha must be > 0")?;
        check(self.r > 0.0 && self.r.is_finite(), "r must be > 0")?;
        check(self.m_strength >= 0.0 && self.m_strength.is_finite(), "M must be >= 0")?;
        check(self.omega0 > 0.0 && self.omega0.is_finite(), "omega0 must be > 0")?;
        check(self.zeta > 0.0 && self.zeta < 1.0, "zeta must lie in (0,1)")?;
        check(self.kbt > 0.0 && self.kbt.is_finite(), "kbt must be > 0")?;
        Ok(())
    }

    /// Long-time (Markovian) dissipation rate alpha^2 omega0 r^2 / (1 + r^2).
    pub fn gamma_limit(&self) -> f64 {
        self.alpha * self.alpha * self.omega0 * self.r * self.r / (1.0 + self.r * self.r)
    }

    /// Long-time diffusion rate 2 alpha^2 kbt r^2 / (1 + r^2).
    pub fn delta_limit(&self) -> f64 {
        2.0 * self.alpha * self.alpha * self.kbt * self.r * self.r / (1.0 + self.r * self.r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlochState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl BlochState {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        BlochState { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, other: &BlochState) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        BlochState { x: a[0], y: a[1], z: a[2] }
    }
}

/// Bloch vector augmented with the hidden dissipation parameters, the
/// quantity the filter is trained to reconstruct. Flat layout [x, y, z,
/// delta, gamma].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub bloch: BlochState,
    pub delta: f64,
    pub gamma: f64,
}

impl AugmentedState {
    pub fn new(bloch: BlochState, delta: f64, gamma: f64) -> Self {
        AugmentedState { bloch, delta, gamma }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.bloch.x, self.bloch.y, self.bloch.z, self.delta, self.gamma]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        AugmentedState { bloch: BlochState::new(a[0], a[1], a[2]), delta: a[3], gamma: a[4] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub ux: f64,
    pub uy: f64,
}

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput { ux: 0.0, uy: 0.0 };

    pub fn new(ux: f64, uy: f64) -> Self {
        ControlInput { ux, uy }
    }
}

/// Generators of the control rotations: d/dt s |_(u_x) = u_x A_X s, and
/// analogously for u_y. Antisymmetric, so pure control preserves the Bloch
/// norm along the exact flow.
pub const A_X: [[f64; 3]; 3] = [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]];
pub const A_Y: [[f64; 3]; 3] = [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];

/// Dissipation rate gamma(t) with the exponential envelope on both
/// oscillatory terms, so the rate settles to `gamma_limit` as t -> infinity.
pub fn gamma_t(t: f64, p: &SystemParams) -> f64 {
    let rw = p.r * p.omega0;
    let phase = p.omega0 * t;
    p.gamma_limit() * (1.0 - (-rw * t).exp() * (phase.cos() + p.r * phase.sin()))
}

/// High-temperature diffusion rate delta(t); settles to `delta_limit`.
pub fn delta_t(t: f64, p: &SystemParams) -> f64 {
    let rw = p.r * p.omega0;
    let phase = p.omega0 * t;
    p.delta_limit() * (1.0 - (-rw * t).exp() * (phase.cos() - phase.sin() / p.r))
}

/// Bloch-vector drift: precession at omega_0, coherence damping Delta + M/2,
/// longitudinal relaxation with the affine -2 gamma drive, and the control
/// rotations. This affine z-equation is the exact single-qubit form; the
/// linearized A0 variant lives in the control design only.
pub fn bloch_rhs(
    s: &BlochState,
    aug: &AugmentedState,
    p: &SystemParams,
    u: &ControlInput,
) -> BlochState {
    let damp = aug.delta + 0.5 * p.m_strength;
    BlochState {
        x: -damp * s.x - p.omega0 * s.y + u.uy * s.z,
        y: -damp * s.y + p.omega0 * s.x - u.ux * s.z,
        z: -2.0 * aug.gamma - 2.0 * aug.delta * s.z - u.uy * s.x + u.ux * s.y,
    }
}

/// Measurement record rate dY/dt = sqrt(M zeta) tr(-sigma_z rho) = -sqrt(M zeta) z.
pub fn measurement_rate(s: &BlochState, p: &SystemParams) -> f64 {
    -(p.m_strength * p.zeta).sqrt() * s.z
}

/// Drift matrix used by the LQR design: the linearized form with -2 delta - 2
/// gamma on the z diagonal (the plant itself uses the affine `bloch_rhs`).
pub fn a0_matrix(delta: f64, gamma: f64, p: &SystemParams) -> [[f64; 3]; 3] {
    let damp = delta + 0.5 * p.m_strength;
    [
        [-damp, -p.omega0, 0.0],
        [p.omega0, -damp, 0.0],
        [0.0, 0.0, -2.0 * delta - 2.0 * gamma],
    ]
}

/// Plant right-hand side at absolute time t: rates evaluated analytically,
/// control held constant by the caller. Used by the single shared stepper so
/// open-loop simulation and closed-loop runs agree bitwise when u = 0.
pub fn plant_rhs(t: f64, s: &BlochState, u: &ControlInput, p: &SystemParams) -> BlochState {
    let aug = AugmentedState::new(*s, delta_t(t, p), gamma_t(t, p));
    bloch_rhs(s, &aug, p, u)
}

/// One RK4 step of the plant under a zero-order-held control.
pub fn plant_step(t: f64, dt: f64, s: &BlochState, u: &ControlInput, p: &SystemParams) -> BlochState {
    let k1 = plant_rhs(t, s, u, p);
    let s2 = advance(s, 0.5 * dt, &k1);
    let k2 = plant_rhs(t + 0.5 * dt, &s2, u, p);
    let s3 = advance(s, 0.5 * dt, &k2);
    let k3 = plant_rhs(t + 0.5 * dt, &s3, u, p);
    let s4 = advance(s, dt, &k3);
    let k4 = plant_rhs(t + dt, &s4, u, p);
    let w = dt / 6.0;
    BlochState {
        x: s.x + w * (k1.x + 2.0 * k2.x + 2.0 * k3.x + k4.x),
        y: s.y + w * (k1.y + 2.0 * k2.y + 2.0 * k3.y + k4.y),
        z: s.z + w * (k1.z + 2.0 * k2.z + 2.0 * k3.z + k4.z),
    }
}

fn advance(s: &BlochState, h: f64, k: &BlochState) -> BlochState {
    BlochState { x: s.x + h * k.x, y: s.y + h * k.y, z: s.z + h * k.z }
}

/// Density matrix reconstruction (I + x sigma_x + y sigma_y + z sigma_z)/2.
pub fn density_from_bloch(s: &BlochState) -> Result<[[Complex64; 2]; 2], DynamicsError> {
    let norm = s.norm();
    if norm > 1.0 + BLOCH_TOL {
        return Err(DynamicsError::Unphysical { norm });
    }
    let half = 0.5;
    Ok([
        [
            Complex64::new(half * (1.0 + s.z), 0.0),
            Complex64::new(half * s.x, -half * s.y),
        ],
        [
            Complex64::new(half * s.x, half * s.y),
            Complex64::new(half * (1.0 - s.z), 0.0),
        ],
    ])
}

pub fn purity(s: &BlochState) -> f64 {
    (1.0 + s.x * s.x + s.y * s.y + s.z * s.z) / 2.0
}

/// Eigenstate occupations (P1, P2) = ((1+z)/2, (1-z)/2).
pub fn populations(s: &BlochState) -> (f64, f64) {
    ((1.0 + s.z) / 2.0, (1.0 - s.z) / 2.0)
}

pub fn fidelity(s: &BlochState, target: &BlochState) -> f64 {
    0.5 * (1.0 + s.dot(target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p_default() -> SystemParams {
        SystemParams::new(0.5, 0.5, 0.4, 1.0)
    }

    #[test]
    fn rates_vanish_exactly_at_zero() {
        let p = p_default();
        assert_eq!(gamma_t(0.0, &p), 0.0);
        assert_eq!(delta_t(0.0, &p), 0.0);
    }

    #[test]
    fn gamma_frozen_values() {
        let p = p_default();
        assert_eq!(p.gamma_limit(), 0.05);
        let expect = 0.05 * (1.0 + (-std::f64::consts::FRAC_PI_2).exp());
        assert!((gamma_t(std::f64::consts::PI, &p) - expect).abs() < 1e-15);
        // long-time limit within 1% at t = 10/(r omega0)
        let t_late = 10.0 / (p.r * p.omega0);
        assert!((gamma_t(t_late, &p) - 0.05).abs() / 0.05 < 0.01);
    }

    #[test]
    fn delta_frozen_values() {
        let p = p_default();
        assert_eq!(p.delta_limit(), 0.1);
        let expect = 0.1 * (1.0 + (-std::f64::consts::FRAC_PI_2).exp());
        assert!((delta_t(std::f64::consts::PI, &p) - expect).abs() < 1e-15);
        let t_late = 10.0 / (p.r * p.omega0);
        assert!((delta_t(t_late, &p) - 0.1).abs() / 0.1 < 0.01);
    }

    #[test]
    fn rhs_pure_precession() {
        let p = SystemParams::new(1.0, 1.0, 0.0, 1.0);
        let s = BlochState::new(1.0, 0.0, 0.0);
        let aug = AugmentedState::new(s, 0.0, 0.0);
        let f = bloch_rhs(&s, &aug, &p, &ControlInput::ZERO);
        assert_eq!(f.to_array(), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn rhs_control_rotation_about_x() {
        let p = SystemParams::new(1.0, 1.0, 0.0, 1.0);
        let s = BlochState::new(0.0, 0.0, 1.0);
        let aug = AugmentedState::new(s, 0.0, 0.0);
        let f = bloch_rhs(&s, &aug, &p, &ControlInput::new(1.0, 0.0));
        assert_eq!(f.to_array(), [0.0, -1.0, 0.0]);
    }

    #[test]
    fn rhs_affine_gamma_drive() {
        let p = SystemParams::new(1.0, 1.0, 0.0, 1.0);
        let s = BlochState::new(0.0, 0.0, 0.0);
        let aug = AugmentedState::new(s, 0.0, 0.1);
        let f = bloch_rhs(&s, &aug, &p, &ControlInput::ZERO);
        assert!((f.z - (-0.2)).abs() < 1e-16);
        assert_eq!((f.x, f.y), (0.0, 0.0));
    }

    #[test]
    fn measurement_examples() {
        let p = SystemParams::new(0.5, 0.5, 0.25, 1.0).with_zeta(0.64);
        assert_eq!(measurement_rate(&BlochState::new(0.3, -0.2, 0.0), &p), 0.0);
        assert!((measurement_rate(&BlochState::new(0.0, 0.0, 1.0), &p) + 0.4).abs() < 1e-15);
        assert!((measurement_rate(&BlochState::new(0.0, 0.0, -1.0), &p) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn density_examples() {
        let up = density_from_bloch(&BlochState::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(up[0][0], Complex64::new(1.0, 0.0));
        assert_eq!(up[1][1], Complex64::new(0.0, 0.0));
        let mixed = density_from_bloch(&BlochState::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(mixed[0][0], Complex64::new(0.5, 0.0));
        let plus = density_from_bloch(&BlochState::new(1.0, 0.0, 0.0)).unwrap();
        for row in plus {
            for e in row {
                assert_eq!(e, Complex64::new(0.5, 0.0));
            }
        }
        assert!(density_from_bloch(&BlochState::new(1.2, 0.0, 0.3)).is_err());
    }

    #[test]
    fn purity_and_population_examples() {
        assert_eq!(purity(&BlochState::new(0.0, 0.0, 1.0)), 1.0);
        assert_eq!(purity(&BlochState::new(0.0, 0.0, 0.0)), 0.5);
        assert!((purity(&BlochState::new(0.6, 0.0, 0.0)) - 0.68).abs() < 1e-15);
        assert_eq!(populations(&BlochState::new(0.0, 0.0, -1.0)), (0.0, 1.0));
        assert_eq!(populations(&BlochState::new(0.0, 0.0, 0.0)), (0.5, 0.5));
        assert_eq!(populations(&BlochState::new(0.0, 0.0, 0.5)), (0.75, 0.25));
    }

    #[test]
    fn fidelity_examples() {
        let t = BlochState::new(0.0, 0.0, 1.0);
        assert_eq!(fidelity(&t, &t), 1.0);
        assert_eq!(fidelity(&BlochState::new(0.0, 0.0, -1.0), &t), 0.0);
        assert_eq!(fidelity(&BlochState::new(1.0, 0.0, 0.0), &t), 0.5);
    }

    #[test]
    fn control_generators_match_b_columns() {
        // B(target) columns are A_X * target and A_Y * target.
        let mul = |m: &[[f64; 3]; 3], v: [f64; 3]| {
            [
                m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
                m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
                m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
            ]
        };
        assert_eq!(mul(&A_X, [0.0, 0.0, 1.0]), [0.0, -1.0, 0.0]);
        assert_eq!(mul(&A_Y, [0.0, 0.0, 1.0]), [1.0, 0.0, 0.0]);
        assert_eq!(mul(&A_X, [1.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
        assert_eq!(mul(&A_Y, [1.0, 0.0, 0.0]), [0.0, 0.0, -1.0]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(A_X[i][j], -A_X[j][i]);
                assert_eq!(A_Y[i][j], -A_Y[j][i]);
            }
        }
    }

    #[test]
    fn a0_diagonal_uses_linearized_z() {
        let p = SystemParams::new(0.5, 0.5, 0.4, 1.0);
        let a = a0_matrix(0.1, 0.05, &p);
        assert_eq!(a[0][0], -(0.1 + 0.2));
        assert_eq!(a[1][1], -(0.1 + 0.2));
        assert_eq!(a[0][1], -1.0);
        assert_eq!(a[1][0], 1.0);
        assert_eq!(a[2][2], -2.0 * 0.1 - 2.0 * 0.05);
        assert_eq!(a[2][0], 0.0);
        assert_eq!(a[0][2], 0.0);
    }

    #[test]
    fn plant_step_matches_generic_rk4() {
        let p = p_default();
        let s0 = BlochState::new(0.3, -0.2, 0.5);
        let u = ControlInput::new(0.7, -0.4);
        let stepped = plant_step(0.25, 0.01, &s0, &u, &p);
        let mut f = |t: f64, y: &[f64], dy: &mut [f64]| {
            let s = BlochState::new(y[0], y[1], y[2]);
            let d = plant_rhs(t, &s, &u, &p);
            dy.copy_from_slice(&d.to_array());
        };
        let generic = integrate::rk4_step_owned(&mut f, 0.25, 0.01, &s0.to_array()).unwrap();
        assert_eq!(stepped.to_array().to_vec(), generic);
    }

    proptest! {
        #[test]
        fn rates_zero_at_origin_for_all_params(
            alpha in 0.05..2.0f64, r in 0.05..3.0f64, omega0 in 0.2..3.0f64, kbt in 0.1..5.0f64
        ) {
            let p = SystemParams::new(alpha, r, 0.4, omega0).with_kbt(kbt);
            prop_assert_eq!(gamma_t(0.0, &p), 0.0);
            prop_assert_eq!(delta_t(0.0, &p), 0.0);
        }

        #[test]
        fn long_time_limits_within_one_percent(
            alpha in 0.2..0.8f64, r in 0.1..0.6f64, omega0 in 0.6..1.5f64
        ) {
            let p = SystemParams::new(alpha, r, 0.4, omega0);
            let t = 10.0 / (r * omega0);
            prop_assert!((gamma_t(t, &p) - p.gamma_limit()).abs() / p.gamma_limit() < 0.01);
            prop_assert!((delta_t(t, &p) - p.delta_limit()).abs() / p.delta_limit() < 0.01);
        }

        #[test]
        fn purity_equals_density_trace_square(
            x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64
        ) {
            let mut s = BlochState::new(x, y, z);
            let n = s.norm();
            if n > 1.0 {
                s = BlochState::new(x / n, y / n, z / n);
            }
            let rho = density_from_bloch(&s).unwrap();
            // tr(rho^2)
            let mut tr = Complex64::new(0.0, 0.0);
            for i in 0..2 {
                for k in 0..2 {
                    tr += rho[i][k] * rho[k][i];
                }
            }
            prop_assert!((tr.im).abs() < 1e-15);
            prop_assert!((tr.re - purity(&s)).abs() < 1e-12);
        }

        #[test]
        fn unitary_part_preserves_norm(
            x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64,
            ux in -5.0..5.0f64, uy in -5.0..5.0f64, omega0 in 0.2..3.0f64
        ) {
            let p = SystemParams::new(0.5, 0.5, 0.0, omega0);
            let s = BlochState::new(x, y, z);
            let aug = AugmentedState::new(s, 0.0, 0.0);
            let f = bloch_rhs(&s, &aug, &p, &ControlInput::new(ux, uy));
            prop_assert!(s.dot(&f).abs() < 1e-12);
        }

        #[test]
        fn populations_sum_to_one(z in -1.0..1.0f64) {
            let (p1, p2) = populations(&BlochState::new(0.0, 0.0, z));
            prop_assert_eq!(p1 + p2, 1.0);
        }

        #[test]
        fn augmented_roundtrip(
            x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64,
            d in 0.0..0.3f64, g in -0.1..0.3f64
        ) {
            let aug = AugmentedState::new(BlochState::new(x, y, z), d, g);
            prop_assert_eq!(AugmentedState::from_array(aug.to_array()), aug);
        }
    }
}
