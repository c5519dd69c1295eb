//! Phase parameters, capillary models, energy and entropy functionals.
//!
//! Phase `0` is the reference phase. The interior saturations
//! `s* = (s_1, ..., s_N)` live in `Δ* = {s_i ≥ 0, Σ s_i ≤ 1}` and the reference
//! saturation is `s_0 = 1 − Σ s_i`.

use thiserror::Error;

use crate::mesh::{Point, Quadrature};

/// Tolerance on the simplex constraint before the energy reports `+∞`.
pub const EPS_SIMPLEX: f64 = 1e-9;

/// Largest phase count supported by the bundled capillary models.
pub const MAX_PHASES: usize = 3;

const BC_ROOT_TOL: f64 = 1e-12;
const BC_EPS: f64 = 1e-14;
const BC_CLAMP: f64 = 1e-12;
const ENTROPY_NEG_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhysicsError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("capillary pressure singular at s_1 = {0}")]
    Singularity(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("negative saturation {value} in cell {cell}, phase {phase}")]
    NegativeSaturation { cell: usize, phase: usize, value: f64 },
    #[error("prox root bracketing failed: h(lo = {lo}) = {h_lo}, h(hi = {hi}) = {h_hi}")]
    Bracket { lo: f64, hi: f64, h_lo: f64, h_hi: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase {
    pub viscosity: f64,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSet {
    pub phases: Vec<Phase>,
    pub permeability: f64,
    /// Always 1; kept for bookkeeping.
    pub porosity: f64,
    pub gravity: Point,
}

impl PhaseSet {
    pub fn new(phases: Vec<Phase>, permeability: f64, gravity: Point) -> Result<Self, PhysicsError> {
        if phases.len() < 2 {
            return Err(PhysicsError::InvalidParameter("at least two phases are required".into()));
        }
        for (i, p) in phases.iter().enumerate() {
            if !(p.viscosity > 0.0) || !p.viscosity.is_finite() {
                return Err(PhysicsError::InvalidParameter(format!("viscosity of phase {i} must be positive")));
            }
            if !(p.density >= 0.0) || !p.density.is_finite() {
                return Err(PhysicsError::InvalidParameter(format!("density of phase {i} must be nonnegative")));
            }
        }
        if !(permeability > 0.0) || !permeability.is_finite() {
            return Err(PhysicsError::InvalidParameter("permeability must be positive".into()));
        }
        Ok(Self { phases, permeability, porosity: 1.0, gravity })
    }

    pub fn n_phases(&self) -> usize {
        self.phases.len()
    }

    /// `Ψ_i(x) = −ρ_i g·x`.
    pub fn potential(&self, i: usize, x: Point) -> f64 {
        gravity_potential(self.phases[i].density, self.gravity, x)
    }

    /// `κ / μ_i`.
    pub fn mobility(&self, i: usize) -> f64 {
        self.permeability / self.phases[i].viscosity
    }

    /// Parabola parameter `2 μ_i / κ` of the action's dual set.
    pub fn parabola(&self, i: usize) -> f64 {
        2.0 * self.phases[i].viscosity / self.permeability
    }
}

/// `−ρ g·x`.
pub fn gravity_potential(density: f64, gravity: Point, x: Point) -> f64 {
    -density * (gravity[0] * x[0] + gravity[1] * x[1])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lipschitz {
    Bounded(f64),
    Unbounded,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CapillaryModel {
    /// `π_1 = α (1 − s_1)^{−1/2}`.
    BrooksCorey { alpha: f64 },
    /// `π_1 = α s_1`.
    LinearTwoPhase { alpha: f64 },
    /// `π_i = α_i s_i`, `i = 1, 2`.
    QuadraticThreePhase { alpha1: f64, alpha2: f64 },
}

impl CapillaryModel {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        let ok = |a: f64| a >= 0.0 && a.is_finite();
        let valid = match *self {
            Self::BrooksCorey { alpha } | Self::LinearTwoPhase { alpha } => ok(alpha),
            Self::QuadraticThreePhase { alpha1, alpha2 } => ok(alpha1) && ok(alpha2),
        };
        if valid {
            Ok(())
        } else {
            Err(PhysicsError::InvalidParameter(format!("capillary coefficients must be nonnegative: {self:?}")))
        }
    }

    pub fn n_phases(&self) -> usize {
        match self {
            Self::BrooksCorey { .. } | Self::LinearTwoPhase { .. } => 2,
            Self::QuadraticThreePhase { .. } => 3,
        }
    }

    /// `π_i(s_i)` for `i ≥ 1`. Brooks–Corey is singular at `s_1 ≥ 1`.
    pub fn phase_pressure(&self, i: usize, s: f64) -> Result<f64, PhysicsError> {
        match *self {
            Self::BrooksCorey { alpha } => {
                if s >= 1.0 {
                    Err(PhysicsError::Singularity(s))
                } else {
                    Ok(alpha / (1.0 - s).sqrt())
                }
            }
            _ => Ok(self.phase_pressure_clamped(i, s)),
        }
    }

    /// `π_i(s_i)` with the Brooks–Corey argument `1 − s_1` clamped at `1e−12`.
    pub fn phase_pressure_clamped(&self, i: usize, s: f64) -> f64 {
        match *self {
            Self::BrooksCorey { alpha } => alpha / (1.0 - s).max(BC_CLAMP).sqrt(),
            Self::LinearTwoPhase { alpha } => alpha * s,
            Self::QuadraticThreePhase { alpha1, alpha2 } => {
                if i == 1 {
                    alpha1 * s
                } else {
                    alpha2 * s
                }
            }
        }
    }

    /// Derivative of [`CapillaryModel::phase_pressure_clamped`].
    pub fn phase_pressure_derivative(&self, i: usize, s: f64) -> f64 {
        match *self {
            Self::BrooksCorey { alpha } => {
                let u = 1.0 - s;
                if u <= BC_CLAMP {
                    0.0
                } else {
                    0.5 * alpha * u.powf(-1.5)
                }
            }
            Self::LinearTwoPhase { alpha } => alpha,
            Self::QuadraticThreePhase { alpha1, alpha2 } => {
                if i == 1 {
                    alpha1
                } else {
                    alpha2
                }
            }
        }
    }

    /// `(π_1, ..., π_N)` at `s*`.
    pub fn pressure(&self, s_star: &[f64]) -> Result<Vec<f64>, PhysicsError> {
        self.check_len(s_star)?;
        s_star.iter().enumerate().map(|(k, &s)| self.phase_pressure(k + 1, s)).collect()
    }

    /// `Π(s*)`, `+∞` outside `Δ*` (with slack [`EPS_SIMPLEX`]).
    pub fn potential(&self, s_star: &[f64]) -> f64 {
        if s_star.len() + 1 != self.n_phases() {
            return f64::INFINITY;
        }
        let sum: f64 = s_star.iter().sum();
        if s_star.iter().any(|&s| s < -EPS_SIMPLEX) || sum > 1.0 + EPS_SIMPLEX {
            return f64::INFINITY;
        }
        match *self {
            Self::BrooksCorey { alpha } => {
                let u = (1.0 - s_star[0]).max(0.0);
                -2.0 * alpha * u.sqrt() + 2.0 * alpha
            }
            Self::LinearTwoPhase { alpha } => 0.5 * alpha * s_star[0] * s_star[0],
            Self::QuadraticThreePhase { alpha1, alpha2 } => {
                0.5 * alpha1 * s_star[0] * s_star[0] + 0.5 * alpha2 * s_star[1] * s_star[1]
            }
        }
    }

    /// Upper bound on `D²Π`.
    pub fn lipschitz(&self) -> Lipschitz {
        match *self {
            Self::BrooksCorey { .. } => Lipschitz::Unbounded,
            Self::LinearTwoPhase { alpha } => Lipschitz::Bounded(alpha),
            Self::QuadraticThreePhase { alpha1, alpha2 } => Lipschitz::Bounded(alpha1.max(alpha2)),
        }
    }

    /// Smallest `s_1 ∈ [0, 1]` with `π_1(s_1) ≥ value`, for two-phase models.
    pub fn inverse_pressure(&self, value: f64) -> Result<f64, PhysicsError> {
        match *self {
            Self::LinearTwoPhase { alpha } => {
                if alpha > 0.0 {
                    Ok((value / alpha).clamp(0.0, 1.0))
                } else {
                    Err(PhysicsError::InvalidParameter("π_1 ≡ 0 is not invertible".into()))
                }
            }
            Self::BrooksCorey { alpha } => {
                if alpha <= 0.0 {
                    Err(PhysicsError::InvalidParameter("π_1 ≡ 0 is not invertible".into()))
                } else if value <= alpha {
                    Ok(0.0)
                } else {
                    Ok((1.0 - (alpha / value).powi(2)).clamp(0.0, 1.0))
                }
            }
            Self::QuadraticThreePhase { .. } => {
                Err(PhysicsError::InvalidParameter("inverse pressure needs a two-phase model".into()))
            }
        }
    }

    /// Proximal map of `τ(Ψ·c + Π(c*)) + χ_Δ(c)` evaluated at `c_bar`, written into `out`.
    pub fn prox_energy(&self, c_bar: &[f64], psi: &[f64], tau: f64, out: &mut [f64]) -> Result<(), PhysicsError> {
        let n = self.n_phases();
        if c_bar.len() != n || psi.len() != n || out.len() != n {
            return Err(PhysicsError::DimensionMismatch { expected: n, got: c_bar.len() });
        }
        match *self {
            Self::BrooksCorey { alpha } => {
                let r = prox_energy_brooks_corey([c_bar[0], c_bar[1]], [psi[0], psi[1]], tau, alpha)?;
                out.copy_from_slice(&r);
            }
            Self::LinearTwoPhase { alpha } => {
                out.copy_from_slice(&prox_energy_linear2([c_bar[0], c_bar[1]], [psi[0], psi[1]], tau, alpha));
            }
            Self::QuadraticThreePhase { alpha1, alpha2 } => {
                let r = prox_energy_quadratic3(
                    [c_bar[0], c_bar[1], c_bar[2]],
                    [psi[0], psi[1], psi[2]],
                    tau,
                    alpha1,
                    alpha2,
                );
                out.copy_from_slice(&r);
            }
        }
        Ok(())
    }

    fn check_len(&self, s_star: &[f64]) -> Result<(), PhysicsError> {
        if s_star.len() + 1 != self.n_phases() {
            Err(PhysicsError::DimensionMismatch { expected: self.n_phases() - 1, got: s_star.len() })
        } else {
            Ok(())
        }
    }
}

/// Brooks–Corey prox. Returns `(c̃_0, c̃_1)` with `c̃_1` the positive part of the
/// root on `(−∞, 1)` of `2c − β + τα(1 − c)^{−1/2}`.
pub fn prox_energy_brooks_corey(c_bar: [f64; 2], psi: [f64; 2], tau: f64, alpha: f64) -> Result<[f64; 2], PhysicsError> {
    let beta = c_bar[1] - tau * psi[1] - c_bar[0] + tau * psi[0] + 1.0;
    let ta = tau * alpha;
    let h = |c: f64| 2.0 * c - beta + ta / (1.0 - c).sqrt();
    let dh = |c: f64| 2.0 + 0.5 * ta / (1.0 - c).powf(1.5);

    if ta == 0.0 {
        let c = (0.5 * beta).clamp(0.0, 1.0);
        return Ok([1.0 - c, c]);
    }
    // h is increasing: a nonnegative value at 0 puts the root at or below 0.
    if h(0.0) >= 0.0 {
        return Ok([1.0, 0.0]);
    }
    let mut lo = 0.0;
    let mut hi = 1.0 - BC_EPS;
    let h_hi = h(hi);
    if h_hi <= 0.0 {
        return Ok([1.0 - hi, hi]);
    }
    if !h_hi.is_finite() {
        return Err(PhysicsError::Bracket { lo, hi, h_lo: h(lo), h_hi });
    }

    let mut c = 0.5 * (lo + hi);
    for _ in 0..200 {
        let v = h(c);
        if v == 0.0 {
            break;
        }
        if v < 0.0 {
            lo = c;
        } else {
            hi = c;
        }
        let newton = c - v / dh(c);
        let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        let done = (next - c).abs() <= BC_ROOT_TOL * 1e-3 || hi - lo <= BC_ROOT_TOL * 1e-3;
        c = next;
        if done {
            break;
        }
    }
    let c = c.max(0.0);
    Ok([1.0 - c, c])
}

/// Prox for `Π = α s_1²/2`: closed form clamped to `[0, 1]`.
pub fn prox_energy_linear2(c_bar: [f64; 2], psi: [f64; 2], tau: f64, alpha: f64) -> [f64; 2] {
    let beta = c_bar[1] - tau * psi[1] - c_bar[0] + tau * psi[0] + 1.0;
    let c = (beta / (2.0 + tau * alpha)).clamp(0.0, 1.0);
    [1.0 - c, c]
}

/// Three-phase quadratic prox: unconstrained closed form, else the best of the
/// three clamped boundary-segment minimizers of `Δ*`.
pub fn prox_energy_quadratic3(c_bar: [f64; 3], psi: [f64; 3], tau: f64, alpha1: f64, alpha2: f64) -> [f64; 3] {
    let d0 = c_bar[0] - tau * psi[0];
    let g = [c_bar[1] - tau * psi[1] - d0 + 1.0, c_bar[2] - tau * psi[2] - d0 + 1.0];
    let h = [[2.0 + tau * alpha1, 1.0], [1.0, 2.0 + tau * alpha2]];
    let det = h[0][0] * h[1][1] - 1.0;
    let u = [(h[1][1] * g[0] - g[1]) / det, (h[0][0] * g[1] - g[0]) / det];
    if u[0] >= 0.0 && u[1] >= 0.0 && u[0] + u[1] <= 1.0 {
        return [1.0 - u[0] - u[1], u[0], u[1]];
    }

    let hv = |p: [f64; 2]| [h[0][0] * p[0] + h[0][1] * p[1], h[1][0] * p[0] + h[1][1] * p[1]];
    let f = |p: [f64; 2]| {
        let q = hv(p);
        0.5 * (p[0] * q[0] + p[1] * q[1]) - g[0] * p[0] - g[1] * p[1]
    };
    let segments = [([0.0, 0.0], [0.0, 1.0]), ([0.0, 0.0], [1.0, 0.0]), ([1.0, 0.0], [-1.0, 1.0])];
    let mut best = [1.0, 0.0, 0.0];
    let mut best_f = f64::INFINITY;
    for (k, (p, d)) in segments.into_iter().enumerate() {
        let hp = hv(p);
        let hd = hv(d);
        let curv = d[0] * hd[0] + d[1] * hd[1];
        let t = (d[0] * (g[0] - hp[0]) + d[1] * (g[1] - hp[1])) / curv;
        let t = t.clamp(0.0, 1.0);
        let fx = f([p[0] + t * d[0], p[1] + t * d[1]]);
        if fx < best_f {
            best_f = fx;
            best = match k {
                0 => [1.0 - t, 0.0, t],
                1 => [1.0 - t, t, 0.0],
                _ => [0.0, 1.0 - t, t],
            };
        }
    }
    best
}

/// Moreau's identity: `prox_{f*}(c̄) = c̄ − prox_f(c̄)`.
pub fn prox_conjugate_via_moreau(prox_primal: &[f64], c_bar: &[f64]) -> Vec<f64> {
    c_bar.iter().zip(prox_primal).map(|(c, p)| c - p).collect()
}

/// Phase saturations per cell (or node), stored cell-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SaturationState {
    pub n_phases: usize,
    pub values: Vec<f64>,
}

impl SaturationState {
    pub fn new(n_phases: usize, n_cells: usize) -> Self {
        Self { n_phases, values: vec![0.0; n_phases * n_cells] }
    }

    pub fn from_cells(n_phases: usize, values: Vec<f64>) -> Result<Self, PhysicsError> {
        if n_phases == 0 || values.len() % n_phases != 0 {
            return Err(PhysicsError::DimensionMismatch { expected: n_phases, got: values.len() });
        }
        Ok(Self { n_phases, values })
    }

    /// Builds a state from interior saturations `s*`; `s_0 = 1 − Σ s_i`.
    pub fn from_interior(n_phases: usize, n_cells: usize, mut f: impl FnMut(usize) -> Vec<f64>) -> Self {
        let mut st = Self::new(n_phases, n_cells);
        for k in 0..n_cells {
            let star = f(k);
            let sum: f64 = star.iter().sum();
            st.values[k * n_phases] = 1.0 - sum;
            st.values[k * n_phases + 1..(k + 1) * n_phases].copy_from_slice(&star);
        }
        st
    }

    pub fn n_cells(&self) -> usize {
        self.values.len() / self.n_phases
    }

    #[inline]
    pub fn get(&self, cell: usize, phase: usize) -> f64 {
        self.values[cell * self.n_phases + phase]
    }

    #[inline]
    pub fn set(&mut self, cell: usize, phase: usize, v: f64) {
        self.values[cell * self.n_phases + phase] = v;
    }

    pub fn cell(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_phases..(k + 1) * self.n_phases]
    }

    pub fn phase(&self, i: usize) -> Vec<f64> {
        (0..self.n_cells()).map(|k| self.get(k, i)).collect()
    }

    pub fn mass<Q: Quadrature + ?Sized>(&self, i: usize, quad: &Q) -> f64 {
        (0..self.n_cells()).map(|k| self.get(k, i) * quad.weight(k)).sum()
    }

    pub fn min_saturation(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn simplex_violation(&self) -> f64 {
        (0..self.n_cells())
            .map(|k| (self.cell(k).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn check_state<Q: Quadrature + ?Sized>(state: &SaturationState, quad: &Q, n_phases: usize) -> Result<(), PhysicsError> {
    if state.n_cells() != quad.len() {
        return Err(PhysicsError::DimensionMismatch { expected: quad.len(), got: state.n_cells() });
    }
    if state.n_phases != n_phases {
        return Err(PhysicsError::DimensionMismatch { expected: n_phases, got: state.n_phases });
    }
    Ok(())
}

/// `Σ_K (Π(s*_K) + Σ_i s_{i,K} Ψ_i(x_K)) m_K`, `+∞` if some cell leaves `Δ`.
pub fn total_energy<Q: Quadrature + ?Sized>(
    state: &SaturationState,
    quad: &Q,
    model: &CapillaryModel,
    phases: &PhaseSet,
) -> Result<f64, PhysicsError> {
    check_state(state, quad, model.n_phases())?;
    if phases.n_phases() != model.n_phases() {
        return Err(PhysicsError::DimensionMismatch { expected: model.n_phases(), got: phases.n_phases() });
    }
    let mut total = 0.0;
    for k in 0..state.n_cells() {
        let s = state.cell(k);
        let sum: f64 = s.iter().sum();
        if (sum - 1.0).abs() > EPS_SIMPLEX || s.iter().any(|&v| v < -EPS_SIMPLEX) {
            return Ok(f64::INFINITY);
        }
        let x = quad.point(k);
        let pot: f64 = s.iter().enumerate().map(|(i, &si)| si * phases.potential(i, x)).sum();
        total += (model.potential(&s[1..]) + pot) * quad.weight(k);
    }
    Ok(total)
}

/// `h(s) = s log s − s + 1`, `h(0) = 1`.
pub fn entropy_density(s: f64) -> f64 {
    if s <= 0.0 {
        1.0
    } else {
        s * s.ln() - s + 1.0
    }
}

/// `Σ_i μ_i Σ_K h(s_{i,K}) m_K`.
pub fn total_entropy<Q: Quadrature + ?Sized>(
    state: &SaturationState,
    quad: &Q,
    phases: &PhaseSet,
) -> Result<f64, PhysicsError> {
    check_state(state, quad, phases.n_phases())?;
    let mut total = 0.0;
    for i in 0..state.n_phases {
        let mu = phases.phases[i].viscosity;
        for k in 0..state.n_cells() {
            let s = state.get(k, i);
            if s < -ENTROPY_NEG_TOL {
                return Err(PhysicsError::NegativeSaturation { cell: k, phase: i, value: s });
            }
            total += mu * entropy_density(s) * quad.weight(k);
        }
    }
    Ok(total)
}
