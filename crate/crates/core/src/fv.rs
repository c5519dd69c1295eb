//! Implicit upstream-mobility finite volumes.
//!
//! Unknowns per cell are `(s_1, ..., s_N, p_0)` with `s_0 = 1 − Σ s_i` and
//! `p_i = p_0 + π_i(s_i)`. Each cell carries `N` phase balances and one
//! pressure equation (the balance summed over all phases). The pressure
//! equation is bordered by a scalar `λ` and the system closed by the gauge
//! `Σ_K p_{0,K} m_K = 0`; `λ` vanishes at every solution.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{ColMut, Mat};
use thiserror::Error;

use crate::diagnostics::{DiagnosticsSeries, Record};
use crate::mesh::FvMesh;
use crate::physics::{CapillaryModel, PhaseSet, PhysicsError, SaturationState};
use crate::Interrupted;

#[derive(Debug, Error)]
pub enum FvError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error("time step fell below {tau_min:e} at t = {t}")]
    TauUnderflow { t: f64, tau_min: f64, state: SaturationState },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FvConfig {
    pub newton_tol: f64,
    pub max_newton: usize,
    pub max_halvings: usize,
    pub tau_min: f64,
    /// Accepted steps in a row before the step is doubled back.
    pub regrow_after: usize,
}

impl Default for FvConfig {
    fn default() -> Self {
        Self { newton_tol: 1e-10, max_newton: 50, max_halvings: 10, tau_min: 1e-8, regrow_after: 2 }
    }
}

/// `a_σ (κ/μ_i) (p_K + Ψ_K − p_L − Ψ_L)`.
pub fn phase_velocity(p_k: f64, p_l: f64, psi_k: f64, psi_l: f64, a_sigma: f64, mu: f64, kappa: f64) -> f64 {
    a_sigma * (kappa / mu) * (p_k + psi_k - p_l - psi_l)
}

/// Positive part of the upstream value; `v = 0` takes the `K` side.
pub fn upwind_saturation(s_k: f64, s_l: f64, v: f64) -> f64 {
    if v >= 0.0 {
        s_k.max(0.0)
    } else {
        s_l.max(0.0)
    }
}

/// Newton unknowns: `(s_1..s_N, p_0)` per cell followed by the border `λ`.
#[derive(Clone, Debug, PartialEq)]
pub struct FvUnknowns {
    pub n_phases: usize,
    pub x: Vec<f64>,
}

impl FvUnknowns {
    pub fn from_state(state: &SaturationState, p0: &[f64]) -> Self {
        let n = state.n_phases;
        let mut x = Vec::with_capacity(state.n_cells() * n + 1);
        for k in 0..state.n_cells() {
            x.extend_from_slice(&state.cell(k)[1..]);
            x.push(p0[k]);
        }
        x.push(0.0);
        Self { n_phases: n, x }
    }

    pub fn n_cells(&self) -> usize {
        (self.x.len() - 1) / self.n_phases
    }

    /// Saturation of phase `i` (including the derived reference phase).
    #[inline]
    pub fn s(&self, k: usize, i: usize) -> f64 {
        let n = self.n_phases;
        if i == 0 {
            1.0 - self.x[k * n..k * n + n - 1].iter().sum::<f64>()
        } else {
            self.x[k * n + i - 1]
        }
    }

    #[inline]
    pub fn p0(&self, k: usize) -> f64 {
        self.x[k * self.n_phases + self.n_phases - 1]
    }

    pub fn lambda(&self) -> f64 {
        *self.x.last().unwrap()
    }

    pub fn pressures(&self) -> Vec<f64> {
        (0..self.n_cells()).map(|k| self.p0(k)).collect()
    }

    pub fn state(&self) -> SaturationState {
        let n = self.n_phases;
        let mut st = SaturationState::new(n, self.n_cells());
        for k in 0..self.n_cells() {
            for i in 0..n {
                st.set(k, i, self.s(k, i));
            }
        }
        st
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewtonOutcome {
    pub u: FvUnknowns,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FvStepInfo {
    pub t: f64,
    pub tau: f64,
    pub newton_iterations: usize,
    pub rejected_before: usize,
    pub dissipation: f64,
    pub capillary_dirichlet: f64,
    /// `min_σ Σ_i s_{i,σ}`.
    pub min_edge_total_saturation: f64,
    pub gauge: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug)]
pub struct FvTrajectory {
    pub final_state: SaturationState,
    pub final_pressure: Vec<f64>,
    pub series: DiagnosticsSeries,
    pub steps: Vec<FvStepInfo>,
    pub rejected_steps: usize,
}

pub struct FvProblem {
    pub mesh: FvMesh,
    pub model: CapillaryModel,
    pub phases: PhaseSet,
    pub config: FvConfig,
    /// `Ψ_i(x_K)` at `K * n_phases + i`.
    potentials: Vec<f64>,
}

impl FvProblem {
    pub fn new(mesh: FvMesh, model: CapillaryModel, phases: PhaseSet, config: FvConfig) -> Result<Self, FvError> {
        model.validate()?;
        if model.n_phases() != phases.n_phases() {
            return Err(FvError::Invalid(format!(
                "capillary model has {} phases, phase table has {}",
                model.n_phases(),
                phases.n_phases()
            )));
        }
        let n = phases.n_phases();
        let mut potentials = vec![0.0; mesh.n_cells() * n];
        for (k, c) in mesh.cells.iter().enumerate() {
            for i in 0..n {
                potentials[k * n + i] = phases.potential(i, c.center);
            }
        }
        Ok(Self { mesh, model, phases, config, potentials })
    }

    pub fn n_phases(&self) -> usize {
        self.phases.n_phases()
    }

    pub fn n_unknowns(&self) -> usize {
        self.mesh.n_cells() * self.n_phases() + 1
    }

    #[inline]
    fn pressure(&self, u: &FvUnknowns, k: usize, i: usize) -> f64 {
        if i == 0 {
            u.p0(k)
        } else {
            u.p0(k) + self.model.phase_pressure_clamped(i, u.s(k, i))
        }
    }

    fn check(&self, u: &FvUnknowns, s_old: &SaturationState, tau: f64) -> Result<(), FvError> {
        let nc = self.mesh.n_cells();
        if u.n_phases != self.n_phases() || u.x.len() != self.n_unknowns() {
            return Err(FvError::Invalid(format!("unknown vector has length {}", u.x.len())));
        }
        if s_old.n_phases != self.n_phases() || s_old.n_cells() != nc {
            return Err(FvError::Invalid("previous state does not match the mesh".into()));
        }
        if !(tau > 0.0) {
            return Err(FvError::Invalid(format!("time step {tau} must be positive")));
        }
        Ok(())
    }

    fn assemble(
        &self,
        u: &FvUnknowns,
        s_old: &SaturationState,
        tau: f64,
        mut jac: Option<&mut Vec<Triplet<usize, usize, f64>>>,
    ) -> Vec<f64> {
        let n = self.n_phases();
        let nc = self.mesh.n_cells();
        let row_p = |k: usize| k * n + n - 1;
        let var_s = |k: usize, i: usize| k * n + i - 1;
        let var_p = row_p;
        let mut res = vec![0.0; self.n_unknowns()];

        for (k, cell) in self.mesh.cells.iter().enumerate() {
            let w = cell.measure / tau;
            for i in 0..n {
                let acc = (u.s(k, i) - s_old.get(k, i)) * w;
                if i > 0 {
                    res[var_s(k, i)] += acc;
                }
                res[row_p(k)] += acc;
            }
            res[row_p(k)] += u.lambda() * cell.measure;
            if let Some(j) = jac.as_deref_mut() {
                for i in 1..n {
                    j.push(Triplet::new(var_s(k, i), var_s(k, i), w));
                }
                // phase 0 accumulation cancels the others in the pressure row
                j.push(Triplet::new(row_p(k), nc * n, cell.measure));
            }
        }

        for edge in &self.mesh.inner_edges {
            let (k, l) = edge.cells;
            for i in 0..n {
                let mob = self.phases.mobility(i);
                let t = edge.transmissivity * mob;
                let pk = self.pressure(u, k, i) + self.potentials[k * n + i];
                let pl = self.pressure(u, l, i) + self.potentials[l * n + i];
                let v = t * (pk - pl);
                let (sk, sl) = (u.s(k, i), u.s(l, i));
                let up_k = v >= 0.0;
                let s_sig = if up_k { sk.max(0.0) } else { sl.max(0.0) };
                let f = s_sig * v;
                let rows: [Option<usize>; 2] = [(i > 0).then(|| var_s(k, i)), Some(row_p(k))];
                let rows_l: [Option<usize>; 2] = [(i > 0).then(|| var_s(l, i)), Some(row_p(l))];
                for r in rows.iter().flatten() {
                    res[*r] += f;
                }
                for r in rows_l.iter().flatten() {
                    res[*r] -= f;
                }

                let Some(j) = jac.as_deref_mut() else { continue };
                // ∂f = v ∂s_σ + s_σ ∂v
                let mut df: Vec<(usize, f64)> = Vec::with_capacity(2 * n + 2);
                df.push((var_p(k), s_sig * t));
                df.push((var_p(l), -s_sig * t));
                if i > 0 {
                    df.push((var_s(k, i), s_sig * t * self.model.phase_pressure_derivative(i, sk)));
                    df.push((var_s(l, i), -s_sig * t * self.model.phase_pressure_derivative(i, sl)));
                }
                let (up, s_up) = if up_k { (k, sk) } else { (l, sl) };
                if s_up > 0.0 {
                    if i > 0 {
                        df.push((var_s(up, i), v));
                    } else {
                        for m in 1..n {
                            df.push((var_s(up, m), -v));
                        }
                    }
                }
                for &(col, val) in &df {
                    for r in rows.iter().flatten() {
                        j.push(Triplet::new(*r, col, val));
                    }
                    for r in rows_l.iter().flatten() {
                        j.push(Triplet::new(*r, col, -val));
                    }
                }
            }
        }

        let gauge_row = nc * n;
        for (k, cell) in self.mesh.cells.iter().enumerate() {
            res[gauge_row] += u.p0(k) * cell.measure;
            if let Some(j) = jac.as_deref_mut() {
                j.push(Triplet::new(gauge_row, var_p(k), cell.measure));
            }
        }
        res
    }

    /// Residual of the implicit step from `s_old` over `tau`.
    pub fn assemble_residual(&self, u: &FvUnknowns, s_old: &SaturationState, tau: f64) -> Result<Vec<f64>, FvError> {
        self.check(u, s_old, tau)?;
        Ok(self.assemble(u, s_old, tau, None))
    }

    /// Analytic Jacobian of [`FvProblem::assemble_residual`] (upwind branch frozen).
    pub fn assemble_jacobian(
        &self,
        u: &FvUnknowns,
        s_old: &SaturationState,
        tau: f64,
    ) -> Result<SparseColMat<usize, f64>, FvError> {
        self.check(u, s_old, tau)?;
        let mut trip = Vec::new();
        self.assemble(u, s_old, tau, Some(&mut trip));
        let n = self.n_unknowns();
        SparseColMat::try_new_from_triplets(n, n, &trip).map_err(|e| FvError::Invalid(format!("{e:?}")))
    }

    fn tolerance(&self, tau: f64) -> f64 {
        let scale = self.mesh.cells.iter().map(|c| c.measure).fold(0.0, f64::max) / tau;
        self.config.newton_tol * (1.0 + scale)
    }

    /// Damped Newton from `u` for one implicit step.
    pub fn newton_step_solve(&self, u: &FvUnknowns, s_old: &SaturationState, tau: f64) -> Result<NewtonOutcome, FvError> {
        self.check(u, s_old, tau)?;
        let tol = self.tolerance(tau);
        let norm_inf = |r: &[f64]| r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let norm_2 = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();

        let mut u = u.clone();
        let mut res = self.assemble(&u, s_old, tau, None);
        let mut iterations = 0;
        loop {
            let r_inf = norm_inf(&res);
            if r_inf <= tol {
                return Ok(NewtonOutcome { u, converged: true, iterations, residual: r_inf });
            }
            if iterations >= self.config.max_newton || !r_inf.is_finite() {
                return Ok(NewtonOutcome { u, converged: false, iterations, residual: r_inf });
            }
            iterations += 1;
            let mut trip = Vec::new();
            self.assemble(&u, s_old, tau, Some(&mut trip));
            let nu = self.n_unknowns();
            let Ok(jac) = SparseColMat::<usize, f64>::try_new_from_triplets(nu, nu, &trip) else {
                return Ok(NewtonOutcome { u, converged: false, iterations, residual: r_inf });
            };
            let Ok(lu) = jac.sp_lu() else {
                return Ok(NewtonOutcome { u, converged: false, iterations, residual: r_inf });
            };
            let mut delta: Vec<f64> = res.iter().map(|v| -v).collect();
            lu.solve_in_place(ColMut::from_slice_mut(&mut delta).as_mat_mut());
            if delta.iter().any(|v| !v.is_finite()) {
                return Ok(NewtonOutcome { u, converged: false, iterations, residual: r_inf });
            }

            let r0 = norm_2(&res);
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..=self.config.max_halvings {
                let mut trial = u.clone();
                for (x, d) in trial.x.iter_mut().zip(&delta) {
                    *x += step * d;
                }
                let r_trial = self.assemble(&trial, s_old, tau, None);
                if norm_2(&r_trial) <= (1.0 - 1e-4 * step) * r0 {
                    accepted = Some((trial, r_trial));
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some((trial, r_trial)) => {
                    u = trial;
                    res = r_trial;
                }
                None => return Ok(NewtonOutcome { u, converged: false, iterations, residual: r_inf }),
            }
        }
    }

    fn edge_terms(&self, u: &FvUnknowns) -> (f64, f64) {
        let n = self.n_phases();
        let mut dissipation = 0.0;
        let mut min_total = f64::INFINITY;
        for edge in &self.mesh.inner_edges {
            let (k, l) = edge.cells;
            let mut total = 0.0;
            for i in 0..n {
                let dp = self.pressure(u, k, i) + self.potentials[k * n + i] - self.pressure(u, l, i) - self.potentials[l * n + i];
                let v = edge.transmissivity * self.phases.mobility(i) * dp;
                let s_sig = upwind_saturation(u.s(k, i), u.s(l, i), v);
                dissipation += self.phases.mobility(i) * edge.transmissivity * s_sig * dp * dp;
                total += s_sig;
            }
            min_total = min_total.min(total);
        }
        (dissipation, min_total)
    }

    /// `Σ_i (κ/μ_i) Σ_σ a_σ s_{i,σ} (δ_σ(p_i + Ψ_i))²` at the given unknowns.
    pub fn dissipation(&self, u: &FvUnknowns) -> f64 {
        self.edge_terms(u).0
    }

    fn record(&self, t: f64, tau: f64, state: &SaturationState) -> Result<Record, FvError> {
        let mut r = Record::from_state(t, tau, state, &self.mesh, &self.model, &self.phases)?;
        r.capillary_dirichlet = Some(capillary_dirichlet_energy(state, &self.mesh, &self.model));
        Ok(r)
    }

    /// Advances `s0` to `t_end` with steps `τ ≤ tau_target`, landing exactly on
    /// every time in `stops`. `observer` sees every accepted state, starting
    /// with `s0`.
    pub fn run_fv_trajectory(
        &self,
        s0: &SaturationState,
        tau_target: f64,
        t_end: f64,
        stops: &[f64],
        mut observer: impl FnMut(usize, f64, &SaturationState),
    ) -> Result<FvTrajectory, Interrupted<FvTrajectory, FvError>> {
        let nc = self.mesh.n_cells();
        let mut traj = FvTrajectory {
            final_state: s0.clone(),
            final_pressure: vec![0.0; nc],
            series: DiagnosticsSeries::default(),
            steps: Vec::new(),
            rejected_steps: 0,
        };
        if s0.n_phases != self.n_phases() || s0.n_cells() != nc || !(tau_target > 0.0) || !(t_end >= 0.0) {
            let error = FvError::Invalid("initial state, time step or end time is inconsistent".into());
            return Err(Interrupted { error, partial: traj });
        }
        match self.record(0.0, tau_target, s0) {
            Ok(r) => traj.series.push(r),
            Err(error) => return Err(Interrupted { error, partial: traj }),
        }
        observer(0, 0.0, s0);

        let mut targets: Vec<f64> = stops.iter().copied().filter(|&s| s > 0.0 && s < t_end).collect();
        targets.push(t_end);
        targets.sort_by(f64::total_cmp);
        targets.dedup();

        let mut u = FvUnknowns::from_state(s0, &vec![0.0; nc]);
        let mut t = 0.0;
        let mut tau = tau_target;
        let mut streak = 0;
        let mut rejected = 0;
        let mut accepted = 0;
        for &target in &targets {
            while target - t > 1e-12 * target.abs().max(1.0) {
                let remaining = target - t;
                let step = if remaining <= tau * (1.0 + 1e-6) { remaining } else { tau };
                let s_old = traj.final_state.clone();
                let outcome = match self.newton_step_solve(&u, &s_old, step) {
                    Ok(o) => o,
                    Err(error) => return Err(Interrupted { error, partial: traj }),
                };
                if !outcome.converged {
                    log::info!("Newton failed at t = {t}, τ = {step:e} (residual {:.3e}); halving", outcome.residual);
                    rejected += 1;
                    traj.rejected_steps += 1;
                    streak = 0;
                    tau = 0.5 * step;
                    if tau < self.config.tau_min {
                        let error = FvError::TauUnderflow { t, tau_min: self.config.tau_min, state: s_old };
                        return Err(Interrupted { error, partial: traj });
                    }
                    continue;
                }
                u = outcome.u;
                t = if (target - (t + step)).abs() <= 1e-12 * target.abs().max(1.0) { target } else { t + step };
                accepted += 1;
                let state = u.state();
                let (dissipation, min_edge_total_saturation) = self.edge_terms(&u);
                let gauge: f64 = self.mesh.cells.iter().enumerate().map(|(k, c)| u.p0(k) * c.measure).sum();
                let mut rec = match self.record(t, step, &state) {
                    Ok(r) => r,
                    Err(error) => return Err(Interrupted { error, partial: traj }),
                };
                rec.dissipation = Some(dissipation);
                rec.iterations = Some(outcome.iterations);
                let capillary_dirichlet = rec.capillary_dirichlet.unwrap_or(0.0);
                traj.series.push(rec);
                traj.steps.push(FvStepInfo {
                    t,
                    tau: step,
                    newton_iterations: outcome.iterations,
                    rejected_before: rejected,
                    dissipation,
                    capillary_dirichlet,
                    min_edge_total_saturation,
                    gauge,
                    lambda: u.lambda(),
                });
                rejected = 0;
                observer(accepted, t, &state);
                traj.final_state = state;
                traj.final_pressure = u.pressures();

                streak += 1;
                if streak >= self.config.regrow_after && tau < tau_target {
                    tau = (2.0 * tau).min(tau_target);
                    streak = 0;
                }
            }
        }
        Ok(traj)
    }
}

/// `Σ_i Σ_σ a_σ (π_i(s_K) − π_i(s_L))²` over phases `i ≥ 1`.
pub fn capillary_dirichlet_energy(state: &SaturationState, mesh: &FvMesh, model: &CapillaryModel) -> f64 {
    let mut total = 0.0;
    for edge in &mesh.inner_edges {
        let (k, l) = edge.cells;
        for i in 1..state.n_phases {
            let d = model.phase_pressure_clamped(i, state.get(k, i)) - model.phase_pressure_clamped(i, state.get(l, i));
            total += edge.transmissivity * d * d;
        }
    }
    total
}

/// Dense copy of a sparse matrix; for tests and small diagnostics.
pub fn to_dense(m: &SparseColMat<usize, f64>) -> Mat<f64> {
    m.to_dense()
}
