//! Augmented-Lagrangian (ALG2) solver for one JKO step and the outer time loop.
//!
//! Discrete spaces on the Kuhn space-time mesh:
//!
//! | field        | space                          |
//! |--------------|--------------------------------|
//! | `φ`          | P1, one value per node         |
//! | `a, s`       | P0, one value per element      |
//! | `b, m`       | P0 vectors, one per element    |
//! | `c, s̃₁`      | nodal on the `t = 1` trace     |
//!
//! Trace integrals use the lumped weights `∫ψ_j` of the spatial grid, so the
//! terminal subproblem decouples node by node.

pub mod elliptic;
pub mod projection;

use thiserror::Error;

pub use elliptic::SpaceTimeLaplacian;
pub use projection::project_parabola;

use crate::diagnostics::{DiagnosticsSeries, Record};
use crate::mesh::{build_space_time_mesh, MeshError, NodalQuadrature, SpaceTimeMesh, SpatialGrid};
use crate::physics::{CapillaryModel, PhaseSet, PhysicsError, SaturationState, MAX_PHASES};
use crate::Interrupted;

const ACTION_S_EPS: f64 = 1e-14;
const ACTION_M_EPS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum Alg2Error {
    #[error("parabola projection failed for a = {a}, b = {b:?}, alpha = {alpha}")]
    Cubic { a: f64, b: [f64; 2], alpha: f64 },
    #[error("linear solver: {0}")]
    Linear(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("no convergence after {iterations} iterations (primal {primal:.3e}, dual {dual:.3e})")]
    NonConvergence { iterations: usize, primal: f64, dual: f64, history: Vec<(f64, f64)> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alg2Config {
    pub r: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub n_inner: usize,
    /// Relative per-phase mass drift allowed at declared convergence.
    pub mass_tol: f64,
    pub accept_unconverged: bool,
    /// Rescale `r` when one residual dominates the other by this factor
    /// (checked every 10 iterations); `None` keeps `r` fixed.
    pub balance: Option<f64>,
    /// Over-relaxation `ω ∈ (0, 2)` applied to `Λφ` in Steps 2 and 3.
    pub relaxation: f64,
    /// Nesterov extrapolation of `(q, σ)` with restart on residual growth.
    pub accelerate: bool,
    /// Length `L` of the rescaled inner time interval `[0, L]`.
    pub time_length: f64,
}

impl Default for Alg2Config {
    fn default() -> Self {
        Self { r: 1.0, tol: 1e-6, max_iter: 5000, n_inner: 1, mass_tol: 1e-7, accept_unconverged: false, balance: None, relaxation: 1.0, accelerate: false, time_length: 1.0 }
    }
}

impl Alg2Config {
    pub fn validate(&self) -> Result<(), Alg2Error> {
        if !(self.r > 0.0) || !(self.tol > 0.0) || !(self.mass_tol > 0.0) {
            return Err(Alg2Error::Invalid("r, tol and mass_tol must be positive".into()));
        }
        if !(self.time_length > 0.0) || !self.time_length.is_finite() {
            return Err(Alg2Error::Invalid("time_length must be positive".into()));
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(Alg2Error::Invalid("relaxation must lie in (0, 2)".into()));
        }
        if matches!(self.balance, Some(b) if !(b > 1.0)) {
            return Err(Alg2Error::Invalid("balance factor must exceed 1".into()));
        }
        if self.n_inner == 0 || self.max_iter == 0 {
            return Err(Alg2Error::Invalid("n_inner and max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Saddle-point fields of one phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseFields {
    pub phi: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<[f64; 2]>,
    pub c: Vec<f64>,
    pub s: Vec<f64>,
    pub m: Vec<[f64; 2]>,
    pub s1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alg2State {
    pub phases: Vec<PhaseFields>,
    pub r: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionValue {
    pub per_phase: Vec<f64>,
    pub total: f64,
}

/// `A(s, m) = |m|²/(2s)` with the degenerate branches thresholded.
pub fn action_density(s: f64, m: [f64; 2]) -> f64 {
    let m2 = m[0] * m[0] + m[1] * m[1];
    if s <= ACTION_S_EPS {
        if m2.sqrt() <= ACTION_M_EPS {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        m2 / (2.0 * s)
    }
}

/// `Σ_i (μ_i/κ) ∫∫ A(s_i, m_i)`.
pub fn action_value(mesh: &SpaceTimeMesh, state: &Alg2State, phases: &PhaseSet) -> ActionValue {
    let per_phase: Vec<f64> = state
        .phases
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let w = phases.phases[i].viscosity / phases.permeability;
            let sum: f64 = mesh
                .elements
                .iter()
                .enumerate()
                .map(|(e, el)| el.measure * action_density(f.s[e], f.m[e]))
                .sum();
            w * sum
        })
        .collect();
    let total = per_phase.iter().sum();
    ActionValue { per_phase, total }
}

#[derive(Clone, Debug)]
pub struct JkoStep {
    pub s_next: SaturationState,
    pub state: Alg2State,
    pub action: ActionValue,
    pub iterations: usize,
    pub primal: f64,
    pub dual: f64,
    pub converged: bool,
    pub history: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alg2StepInfo {
    pub iterations: usize,
    pub primal: f64,
    pub dual: f64,
    pub action: f64,
    pub converged: bool,
    /// Largest `a + |b|²/α` over elements and phases, in the unscaled time variable.
    pub max_cone_violation: f64,
    /// Smallest element value of the curve `s`.
    pub min_curve_saturation: f64,
}

#[derive(Clone, Debug)]
pub struct Alg2Trajectory {
    pub final_state: SaturationState,
    pub series: DiagnosticsSeries,
    pub steps: Vec<Alg2StepInfo>,
}

pub struct Alg2Solver {
    mesh: SpaceTimeMesh,
    model: CapillaryModel,
    phases: PhaseSet,
    config: Alg2Config,
    laplacian: SpaceTimeLaplacian,
    weights: Vec<f64>,
    /// `Ψ_i` at trace node `j`, stored at `j * n_phases + i`.
    potentials: Vec<f64>,
}

impl Alg2Solver {
    pub fn new(grid: &SpatialGrid, model: CapillaryModel, phases: PhaseSet, config: Alg2Config) -> Result<Self, Alg2Error> {
        config.validate()?;
        model.validate()?;
        if model.n_phases() != phases.n_phases() {
            return Err(Alg2Error::Invalid(format!(
                "capillary model has {} phases, phase table has {}",
                model.n_phases(),
                phases.n_phases()
            )));
        }
        let mut mesh = build_space_time_mesh(grid, config.n_inner)?;
        let l = config.time_length;
        if l != 1.0 {
            mesh.spacing[0] *= l;
            for node in &mut mesh.nodes {
                node[0] *= l;
            }
            for el in &mut mesh.elements {
                el.measure *= l;
            }
        }
        let laplacian = SpaceTimeLaplacian::new(&mesh)?;
        let weights = grid.lumped_weights();
        let n = phases.n_phases();
        let mut potentials = vec![0.0; grid.n_nodes() * n];
        for j in 0..grid.n_nodes() {
            let x = grid.node_point(j);
            for i in 0..n {
                potentials[j * n + i] = phases.potential(i, x);
            }
        }
        Ok(Self { mesh, model, phases, config, laplacian, weights, potentials })
    }

    /// Cone parameter in the rescaled time variable.
    fn cone(&self, i: usize) -> f64 {
        self.phases.parabola(i) * self.config.time_length
    }

    pub fn mesh(&self) -> &SpaceTimeMesh {
        &self.mesh
    }

    pub fn config(&self) -> &Alg2Config {
        &self.config
    }

    pub fn n_phases(&self) -> usize {
        self.phases.n_phases()
    }

    /// Spatial nodes with their lumped weights; the sampling of `s_next`.
    pub fn quadrature(&self) -> NodalQuadrature {
        self.mesh.grid.nodal_quadrature()
    }

    fn check_prev(&self, s_prev: &SaturationState) -> Result<(), Alg2Error> {
        if s_prev.n_phases != self.n_phases() || s_prev.n_cells() != self.weights.len() {
            return Err(Alg2Error::Invalid(format!(
                "expected {} phases on {} nodes, got {} on {}",
                self.n_phases(),
                self.weights.len(),
                s_prev.n_phases,
                s_prev.n_cells()
            )));
        }
        Ok(())
    }

    /// Constant-in-time curve at `s_prev` with zero momentum and zero dual fields.
    pub fn initial_state(&self, s_prev: &SaturationState) -> Alg2State {
        let ns = self.weights.len();
        let ne = self.mesh.n_elements();
        let time_node: Vec<usize> = self
            .mesh
            .elements
            .iter()
            .map(|el| {
                let k = el.axes.iter().position(|&a| a == 0).unwrap_or(0);
                el.nodes[k] % ns
            })
            .collect();
        let phases = (0..self.n_phases())
            .map(|i| PhaseFields {
                phi: vec![0.0; self.mesh.n_nodes()],
                a: vec![0.0; ne],
                b: vec![[0.0; 2]; ne],
                c: vec![0.0; ns],
                s: time_node.iter().map(|&j| s_prev.get(j, i)).collect(),
                m: vec![[0.0; 2]; ne],
                s1: (0..ns).map(|j| s_prev.get(j, i)).collect(),
            })
            .collect();
        Alg2State { phases, r: self.config.r }
    }

    /// Step 1: per phase, `r (S + M₁) φ = load(σ, q, s_prev)`.
    pub fn elliptic_step(&self, state: &mut Alg2State, s_prev: &SaturationState) {
        let r = state.r;
        for (i, f) in state.phases.iter_mut().enumerate() {
            let mut load = vec![0.0; self.mesh.n_nodes()];
            self.mesh.add_divergence_load(
                |e| [r * f.a[e] - f.s[e], r * f.b[e][0] - f.m[e][0], r * f.b[e][1] - f.m[e][1]],
                &mut load,
            );
            for (j, &w) in self.weights.iter().enumerate() {
                load[self.mesh.trace_t1[j]] += w * (f.s1[j] - r * f.c[j]);
                load[self.mesh.trace_t0[j]] -= w * s_prev.get(j, i);
            }
            self.laplacian.solve_in_place(&mut load);
            for v in &mut load {
                *v /= r;
            }
            f.phi = load;
        }
    }

    /// Step 2: parabola projections per element and the terminal prox per trace
    /// node. Returns `‖q^{k+1} − q^k‖²`.
    pub fn prox_step(&self, state: &mut Alg2State, tau: f64) -> Result<f64, Alg2Error> {
        let r = state.r;
        let mut dq2 = 0.0;
        for (i, f) in state.phases.iter_mut().enumerate() {
            let alpha = self.cone(i);
            for (e, el) in self.mesh.elements.iter().enumerate() {
                let g = self.mesh.gradient(e, &f.phi);
                let (na, nb) =
                    project_parabola(g[0] + f.s[e] / r, [g[1] + f.m[e][0] / r, g[2] + f.m[e][1] / r], alpha)?;
                let d = (na - f.a[e]).powi(2) + (nb[0] - f.b[e][0]).powi(2) + (nb[1] - f.b[e][1]).powi(2);
                dq2 += el.measure * d;
                f.a[e] = na;
                f.b[e] = nb;
            }
        }

        let n = self.n_phases();
        let mut z = [0.0; MAX_PHASES];
        let mut prox = [0.0; MAX_PHASES];
        for (j, &w) in self.weights.iter().enumerate() {
            let node = self.mesh.trace_t1[j];
            for (i, f) in state.phases.iter().enumerate() {
                z[i] = f.s1[j] - r * f.phi[node];
            }
            self.model.prox_energy(&z[..n], &self.potentials[j * n..(j + 1) * n], r * tau, &mut prox[..n])?;
            for (i, f) in state.phases.iter_mut().enumerate() {
                let c = (z[i] - prox[i]) / r;
                dq2 += w * (c - f.c[j]).powi(2);
                f.c[j] = c;
            }
        }
        Ok(dq2)
    }

    /// Step 3: `σ += r (Λφ − q)`. Returns `‖Λφ − q‖²`.
    pub fn multiplier_update(&self, state: &mut Alg2State) -> f64 {
        let r = state.r;
        let mut res2 = 0.0;
        for f in state.phases.iter_mut() {
            for (e, el) in self.mesh.elements.iter().enumerate() {
                let g = self.mesh.gradient(e, &f.phi);
                let ra = g[0] - f.a[e];
                let rb = [g[1] - f.b[e][0], g[2] - f.b[e][1]];
                f.s[e] += r * ra;
                f.m[e][0] += r * rb[0];
                f.m[e][1] += r * rb[1];
                res2 += el.measure * (ra * ra + rb[0] * rb[0] + rb[1] * rb[1]);
            }
            for (j, &w) in self.weights.iter().enumerate() {
                let rc = -f.phi[self.mesh.trace_t1[j]] - f.c[j];
                f.s1[j] += r * rc;
                res2 += w * rc * rc;
            }
        }
        res2
    }

    /// Steps 2 and 3 fused, with `Λφ` replaced by `ω Λφ + (1 − ω) q^k`.
    /// Returns `(‖Λφ − q‖², ‖q^{k+1} − q^k‖²)`; `ω = 1` reproduces
    /// [`Alg2Solver::prox_step`] followed by [`Alg2Solver::multiplier_update`].
    pub fn relaxed_update(&self, state: &mut Alg2State, tau: f64, omega: f64) -> Result<(f64, f64), Alg2Error> {
        let r = state.r;
        let (mut res2, mut dq2) = (0.0, 0.0);
        for (i, f) in state.phases.iter_mut().enumerate() {
            let alpha = self.cone(i);
            for (e, el) in self.mesh.elements.iter().enumerate() {
                let g = self.mesh.gradient(e, &f.phi);
                let old = [f.a[e], f.b[e][0], f.b[e][1]];
                let h = [0, 1, 2].map(|k| omega * g[k] + (1.0 - omega) * old[k]);
                let (na, nb) = project_parabola(h[0] + f.s[e] / r, [h[1] + f.m[e][0] / r, h[2] + f.m[e][1] / r], alpha)?;
                let new = [na, nb[0], nb[1]];
                f.s[e] += r * (h[0] - na);
                f.m[e][0] += r * (h[1] - nb[0]);
                f.m[e][1] += r * (h[2] - nb[1]);
                res2 += el.measure * (0..3).map(|k| (g[k] - new[k]).powi(2)).sum::<f64>();
                dq2 += el.measure * (0..3).map(|k| (new[k] - old[k]).powi(2)).sum::<f64>();
                f.a[e] = na;
                f.b[e] = nb;
            }
        }

        let n = self.n_phases();
        let mut z = [0.0; MAX_PHASES];
        let mut h = [0.0; MAX_PHASES];
        let mut prox = [0.0; MAX_PHASES];
        for (j, &w) in self.weights.iter().enumerate() {
            let node = self.mesh.trace_t1[j];
            for (i, f) in state.phases.iter().enumerate() {
                h[i] = -omega * f.phi[node] + (1.0 - omega) * f.c[j];
                z[i] = f.s1[j] + r * h[i];
            }
            self.model.prox_energy(&z[..n], &self.potentials[j * n..(j + 1) * n], r * tau, &mut prox[..n])?;
            for (i, f) in state.phases.iter_mut().enumerate() {
                let c = (z[i] - prox[i]) / r;
                dq2 += w * (c - f.c[j]).powi(2);
                res2 += w * (f.phi[node] + c).powi(2);
                f.s1[j] += r * (h[i] - c);
                f.c[j] = c;
            }
        }
        Ok((res2, dq2))
    }

    fn pack(&self, state: &Alg2State) -> (Vec<f64>, Vec<f64>) {
        let mut q = Vec::new();
        let mut sigma = Vec::new();
        for f in &state.phases {
            for e in 0..f.a.len() {
                q.extend_from_slice(&[f.a[e], f.b[e][0], f.b[e][1]]);
                sigma.extend_from_slice(&[f.s[e], f.m[e][0], f.m[e][1]]);
            }
            q.extend_from_slice(&f.c);
            sigma.extend_from_slice(&f.s1);
        }
        (q, sigma)
    }

    fn unpack(&self, state: &mut Alg2State, q: &[f64], sigma: &[f64]) {
        let mut k = 0;
        for f in &mut state.phases {
            for e in 0..f.a.len() {
                f.a[e] = q[k];
                f.b[e] = [q[k + 1], q[k + 2]];
                f.s[e] = sigma[k];
                f.m[e] = [sigma[k + 1], sigma[k + 2]];
                k += 3;
            }
            for j in 0..f.c.len() {
                f.c[j] = q[k];
                f.s1[j] = sigma[k];
                k += 1;
            }
        }
    }

    fn pack_weights(&self) -> Vec<f64> {
        let mut w = Vec::new();
        for _ in 0..self.n_phases() {
            for el in &self.mesh.elements {
                w.extend_from_slice(&[el.measure; 3]);
            }
            w.extend_from_slice(&self.weights);
        }
        w
    }

    pub fn sigma_norm(&self, state: &Alg2State) -> f64 {
        let mut acc = 0.0;
        for f in &state.phases {
            for (e, el) in self.mesh.elements.iter().enumerate() {
                acc += el.measure * (f.s[e] * f.s[e] + f.m[e][0] * f.m[e][0] + f.m[e][1] * f.m[e][1]);
            }
            acc += self.weights.iter().zip(&f.s1).map(|(w, s)| w * s * s).sum::<f64>();
        }
        acc.sqrt()
    }

    /// Weak residual of `∂_t s + ∇·m = 0` against every nodal hat function, with
    /// `s_prev` at `t = 0` and `s̃₁` at `t = 1`; Euclidean norm per phase.
    pub fn continuity_residual(&self, state: &Alg2State, s_prev: &SaturationState) -> Vec<f64> {
        state
            .phases
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut res = vec![0.0; self.mesh.n_nodes()];
                self.mesh.add_divergence_load(|e| [f.s[e], f.m[e][0], f.m[e][1]], &mut res);
                for (j, &w) in self.weights.iter().enumerate() {
                    res[self.mesh.trace_t0[j]] += w * s_prev.get(j, i);
                    res[self.mesh.trace_t1[j]] -= w * f.s1[j];
                }
                res.iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .collect()
    }

    /// Phase pressures read from the terminal potential: `p_i = −φ_i(1)/τ − Ψ_i`.
    pub fn recovered_pressures(&self, state: &Alg2State, tau: f64) -> Vec<Vec<f64>> {
        let n = self.n_phases();
        state
            .phases
            .iter()
            .enumerate()
            .map(|(i, f)| {
                self.mesh
                    .trace_t1
                    .iter()
                    .enumerate()
                    .map(|(j, &node)| -f.phi[node] / tau - self.potentials[j * n + i])
                    .collect()
            })
            .collect()
    }

    fn step_info(&self, state: &Alg2State) -> (f64, f64) {
        let mut viol = f64::NEG_INFINITY;
        let mut min_s = f64::INFINITY;
        for (i, f) in state.phases.iter().enumerate() {
            let alpha = self.cone(i);
            for e in 0..f.a.len() {
                let v = f.a[e] + (f.b[e][0] * f.b[e][0] + f.b[e][1] * f.b[e][1]) / alpha;
                viol = viol.max(v * self.config.time_length);
                min_s = min_s.min(f.s[e]);
            }
        }
        (viol, min_s)
    }

    /// Runs Steps 1–3 until the residuals and the mass drift are below tolerance.
    pub fn run_jko_step(
        &self,
        s_prev: &SaturationState,
        tau: f64,
        warm: Option<Alg2State>,
    ) -> Result<JkoStep, Alg2Error> {
        self.check_prev(s_prev)?;
        if !(tau >= 0.0) {
            return Err(Alg2Error::Invalid(format!("time step {tau} must be nonnegative")));
        }
        let mut state = match warm {
            Some(w) if w.phases.len() == self.n_phases() && w.phases[0].phi.len() == self.mesh.n_nodes() => w,
            _ => self.initial_state(s_prev),
        };
        let quad = self.quadrature();
        let total: f64 = self.weights.iter().sum();
        let masses: Vec<f64> = (0..self.n_phases()).map(|i| s_prev.mass(i, &quad)).collect();

        let mut history = Vec::new();
        let (mut primal, mut dual) = (f64::INFINITY, f64::INFINITY);
        let mut converged = false;
        let mut iterations = 0;
        let accelerate = self.config.accelerate;
        let pw = if accelerate { self.pack_weights() } else { Vec::new() };
        let wdist = |x: &[f64], y: &[f64]| pw.iter().zip(x.iter().zip(y)).map(|(w, (a, b))| w * (a - b) * (a - b)).sum::<f64>();
        let (mut q_prev, mut sigma_prev) = if accelerate { self.pack(&state) } else { (Vec::new(), Vec::new()) };
        let mut momentum: f64 = 1.0;
        let mut combined_prev = f64::INFINITY;
        while iterations < self.config.max_iter {
            iterations += 1;
            self.elliptic_step(&mut state, s_prev);
            let (q_hat, sigma_hat) = if accelerate { self.pack(&state) } else { (Vec::new(), Vec::new()) };
            let (res2, dq2) = self.relaxed_update(&mut state, tau, self.config.relaxation)?;
            primal = res2.sqrt();
            dual = state.r * dq2.sqrt();
            let mut q_now = Vec::new();
            let mut sigma_now = Vec::new();
            if accelerate {
                (q_now, sigma_now) = self.pack(&state);
                dual = state.r * wdist(&q_now, &q_prev).sqrt();
            }
            history.push((primal, dual));
            let threshold = self.config.tol * (1.0 + self.sigma_norm(&state));
            if primal.max(dual) <= threshold {
                let mass_ok = state.phases.iter().zip(&masses).all(|(f, &m0)| {
                    let m1: f64 = self.weights.iter().zip(&f.s1).map(|(w, s)| w * s).sum();
                    (m1 - m0).abs() <= self.config.mass_tol * m0 + 1e-12 * total
                });
                if mass_ok {
                    converged = true;
                    break;
                }
            }
            if accelerate {
                let r = state.r;
                let combined = wdist(&sigma_now, &sigma_hat) / r + r * wdist(&q_now, &q_hat);
                let (q_next, sigma_next) = if combined < 0.999 * combined_prev {
                    let next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
                    let beta = (momentum - 1.0) / next;
                    momentum = next;
                    combined_prev = combined;
                    let ext = |now: &[f64], prev: &[f64]| now.iter().zip(prev).map(|(a, b)| a + beta * (a - b)).collect::<Vec<_>>();
                    (ext(&q_now, &q_prev), ext(&sigma_now, &sigma_prev))
                } else {
                    momentum = 1.0;
                    combined_prev = combined;
                    (q_now.clone(), sigma_now.clone())
                };
                self.unpack(&mut state, &q_next, &sigma_next);
                q_prev = q_now;
                sigma_prev = sigma_now;
            }
            if let Some(mu) = self.config.balance {
                if iterations % 10 == 0 {
                    if primal > mu * dual && state.r < 1e6 {
                        state.r *= 2.0;
                    } else if dual > mu * primal && state.r > 1e-6 {
                        state.r *= 0.5;
                    }
                }
            }
        }
        log::debug!("ALG2 step: {iterations} iterations, primal {primal:.3e}, dual {dual:.3e}");
        if !converged {
            if self.config.accept_unconverged {
                log::warn!("ALG2 step accepted without convergence: primal {primal:.3e}, dual {dual:.3e}");
            } else {
                return Err(Alg2Error::NonConvergence { iterations, primal, dual, history });
            }
        }

        let n = self.n_phases();
        let ns = self.weights.len();
        let mut s_next = SaturationState::new(n, ns);
        for (i, f) in state.phases.iter().enumerate() {
            for j in 0..ns {
                s_next.set(j, i, f.s1[j]);
            }
        }
        let mut action = action_value(&self.mesh, &state, &self.phases);
        let l = self.config.time_length;
        action.total *= l;
        for a in &mut action.per_phase {
            *a *= l;
        }
        Ok(JkoStep { s_next, state, action, iterations, primal, dual, converged, history })
    }

    fn record(&self, t: f64, tau: f64, state: &SaturationState) -> Result<Record, Alg2Error> {
        Ok(Record::from_state(t, tau, state, &self.quadrature(), &self.model, &self.phases)?)
    }

    /// `n_steps` JKO steps of size `tau`, warm-starting each from the previous one.
    /// `observer` sees every state, starting with `s0` at step 0.
    pub fn run_trajectory(
        &self,
        s0: &SaturationState,
        tau: f64,
        n_steps: usize,
        mut observer: impl FnMut(usize, f64, &SaturationState),
    ) -> Result<Alg2Trajectory, Interrupted<Alg2Trajectory, Alg2Error>> {
        let mut traj = Alg2Trajectory {
            final_state: s0.clone(),
            series: DiagnosticsSeries::default(),
            steps: Vec::new(),
        };
        if let Err(error) = self.check_prev(s0) {
            return Err(Interrupted { error, partial: traj });
        }
        match self.record(0.0, tau, s0) {
            Ok(rec) => traj.series.push(rec),
            Err(error) => return Err(Interrupted { error, partial: traj }),
        }
        observer(0, 0.0, s0);
        let mut warm = None;
        for n in 1..=n_steps {
            let step = match self.run_jko_step(&traj.final_state, tau, warm.take()) {
                Ok(s) => s,
                Err(error) => return Err(Interrupted { error, partial: traj }),
            };
            let t = n as f64 * tau;
            let (max_cone_violation, min_curve_saturation) = self.step_info(&step.state);
            traj.steps.push(Alg2StepInfo {
                iterations: step.iterations,
                primal: step.primal,
                dual: step.dual,
                action: step.action.total,
                converged: step.converged,
                max_cone_violation,
                min_curve_saturation,
            });
            let mut rec = match self.record(t, tau, &step.s_next) {
                Ok(r) => r,
                Err(error) => return Err(Interrupted { error, partial: traj }),
            };
            rec.action = Some(step.action.total);
            rec.iterations = Some(step.iterations);
            traj.series.push(rec);
            observer(n, t, &step.s_next);
            traj.final_state = step.s_next;
            warm = Some(step.state);
        }
        Ok(traj)
    }
}

/// Cell averages of the P1 interpolant of a nodal state, negatives clamped to 0.
pub fn to_cell_averages(grid: &SpatialGrid, nodal: &SaturationState) -> SaturationState {
    let n = nodal.n_phases;
    let mut out = SaturationState::new(n, grid.n_cells());
    for i in 0..n {
        let avg = grid.cell_averages(&nodal.phase(i).iter().map(|v| v.max(0.0)).collect::<Vec<_>>());
        for (k, v) in avg.into_iter().enumerate() {
            out.set(k, i, v);
        }
    }
    out
}

/// Samples a datum given by its interior saturations at every grid node.
pub fn sample_nodal(grid: &SpatialGrid, n_phases: usize, f: impl Fn([f64; 2]) -> Vec<f64>) -> SaturationState {
    SaturationState::from_interior(n_phases, grid.n_nodes(), |j| f(grid.node_point(j)))
}
