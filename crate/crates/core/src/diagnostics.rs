//! Audits, time series and checks shared by both solvers.

use std::io::Write;

use thiserror::Error;

use crate::mesh::Quadrature;
use crate::physics::{total_energy, total_entropy, CapillaryModel, PhaseSet, PhysicsError, SaturationState};

const STEADY_MASS_TOL: f64 = 1e-15;
const TSD_REL: f64 = 1e-6;
const TSD_ABS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One recorded time of a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub t: f64,
    pub tau: f64,
    pub energy: f64,
    pub masses: Vec<f64>,
    pub entropy: f64,
    pub min_saturation: f64,
    pub simplex_violation: f64,
    pub dissipation: Option<f64>,
    pub capillary_dirichlet: Option<f64>,
    pub action: Option<f64>,
    pub iterations: Option<usize>,
}

impl Record {
    pub fn from_state<Q: Quadrature + ?Sized>(
        t: f64,
        tau: f64,
        state: &SaturationState,
        quad: &Q,
        model: &CapillaryModel,
        phases: &PhaseSet,
    ) -> Result<Self, PhysicsError> {
        let audit = audit_state(state, quad);
        Ok(Self {
            t,
            tau,
            energy: total_energy(state, quad, model, phases)?,
            masses: audit.masses,
            entropy: total_entropy(state, quad, phases).unwrap_or(f64::NAN),
            min_saturation: audit.min_saturation,
            simplex_violation: audit.max_simplex_violation,
            dissipation: None,
            capillary_dirichlet: None,
            action: None,
            iterations: None,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiagnosticsSeries {
    pub records: Vec<Record>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.14e}")).unwrap_or_default()
}

impl DiagnosticsSeries {
    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn energies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.energy).collect()
    }

    pub fn is_time_increasing(&self) -> bool {
        self.records.windows(2).all(|w| w[1].t > w[0].t)
    }

    /// Largest relative deviation of any phase mass from its first recorded value.
    pub fn max_mass_drift(&self) -> f64 {
        let Some(first) = self.records.first() else { return 0.0 };
        self.records
            .iter()
            .flat_map(|r| {
                r.masses.iter().zip(&first.masses).map(|(m, m0)| {
                    let d = (m - m0).abs();
                    if *m0 > 0.0 {
                        d / m0
                    } else {
                        d
                    }
                })
            })
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let n = self.records.first().map_or(0, |r| r.masses.len());
        let mut header = String::from(
            "t,tau,iterations,energy,entropy,min_saturation,simplex_violation,dissipation,capillary_dirichlet,action",
        );
        for i in 0..n {
            header.push_str(&format!(",mass_{i}"));
        }
        writeln!(out, "{header}")?;
        for r in &self.records {
            let mut line = format!(
                "{:.14e},{:.14e},{},{:.14e},{:.14e},{:.14e},{:.14e},{},{},{}",
                r.t,
                r.tau,
                r.iterations.map(|k| k.to_string()).unwrap_or_default(),
                r.energy,
                r.entropy,
                r.min_saturation,
                r.simplex_violation,
                opt(r.dissipation),
                opt(r.capillary_dirichlet),
                opt(r.action)
            );
            for m in &r.masses {
                line.push_str(&format!(",{m:.14e}"));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Audit {
    pub masses: Vec<f64>,
    pub min_saturation: f64,
    pub max_simplex_violation: f64,
}

pub fn audit_state<Q: Quadrature + ?Sized>(state: &SaturationState, quad: &Q) -> Audit {
    Audit {
        masses: (0..state.n_phases).map(|i| state.mass(i, quad)).collect(),
        min_saturation: state.min_saturation(),
        max_simplex_violation: state.simplex_violation(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteadyState2Phase {
    pub s1: Vec<f64>,
    pub gamma: f64,
}

impl SteadyState2Phase {
    pub fn to_state(&self) -> SaturationState {
        SaturationState::from_interior(2, self.s1.len(), |k| vec![self.s1[k]])
    }
}

fn steady_profile<Q: Quadrature + ?Sized>(
    quad: &Q,
    model: &CapillaryModel,
    phases: &PhaseSet,
    gamma: f64,
) -> Result<Vec<f64>, PhysicsError> {
    (0..quad.len())
        .map(|k| {
            let x = quad.point(k);
            model.inverse_pressure(gamma + phases.potential(0, x) - phases.potential(1, x))
        })
        .collect()
}

/// Two-phase equilibrium `s_1 = clamp(π_1⁻¹((ρ_1 − ρ_0) g·x + γ), 0, 1)` with `γ`
/// chosen so that the `s_1` volume equals `mass`.
pub fn steady_state_two_phase<Q: Quadrature + ?Sized>(
    quad: &Q,
    model: &CapillaryModel,
    phases: &PhaseSet,
    mass: f64,
) -> Result<SteadyState2Phase, DiagnosticsError> {
    if model.n_phases() != 2 || phases.n_phases() != 2 {
        return Err(DiagnosticsError::InvalidArgument("the steady state needs a two-phase model".into()));
    }
    let omega = quad.total_weight();
    if !(0.0..=omega).contains(&mass) {
        return Err(DiagnosticsError::InvalidArgument(format!("mass {mass} outside [0, {omega}]")));
    }
    let shift: Vec<f64> = (0..quad.len())
        .map(|k| phases.potential(0, quad.point(k)) - phases.potential(1, quad.point(k)))
        .collect();
    let max_shift = shift.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_shift = shift.iter().copied().fold(f64::INFINITY, f64::min);
    let p0 = model.phase_pressure_clamped(1, 0.0);
    if mass == 0.0 {
        return Ok(SteadyState2Phase { s1: vec![0.0; quad.len()], gamma: p0 - max_shift });
    }
    if mass == omega {
        let gamma = match model.phase_pressure(1, 1.0) {
            Ok(p1) => p1 - min_shift,
            Err(_) => f64::INFINITY,
        };
        return Ok(SteadyState2Phase { s1: vec![1.0; quad.len()], gamma });
    }

    let m = |g: f64| -> Result<f64, PhysicsError> {
        Ok(steady_profile(quad, model, phases, g)?.iter().enumerate().map(|(k, s)| s * quad.weight(k)).sum())
    };
    let mut lo = p0 - max_shift;
    let mut step = 1.0;
    let mut hi = lo + step;
    while m(hi)? < mass {
        lo = hi;
        step *= 2.0;
        hi += step;
        if !hi.is_finite() {
            return Err(DiagnosticsError::InvalidArgument("could not bracket the multiplier".into()));
        }
    }
    let target = STEADY_MASS_TOL * omega;
    let mut gamma = 0.5 * (lo + hi);
    for _ in 0..2000 {
        gamma = 0.5 * (lo + hi);
        let v = m(gamma)?;
        if (v - mass).abs() <= target || gamma <= lo || gamma >= hi {
            break;
        }
        if v < mass {
            lo = gamma;
        } else {
            hi = gamma;
        }
    }
    Ok(SteadyState2Phase { s1: steady_profile(quad, model, phases, gamma)?, gamma })
}

/// Largest residual of the equilibrium relation over cells not at a bound.
pub fn steady_state_residual<Q: Quadrature + ?Sized>(
    steady: &SteadyState2Phase,
    quad: &Q,
    model: &CapillaryModel,
    phases: &PhaseSet,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, &s) in steady.s1.iter().enumerate() {
        if s.abs() <= 1e-12 || (s - 1.0).abs() <= 1e-12 {
            continue;
        }
        let x = quad.point(k);
        let target = phases.potential(0, x) - phases.potential(1, x) + steady.gamma;
        let pi = model.phase_pressure_clamped(1, s);
        worst = worst.max((pi - target).abs());
    }
    worst
}

/// `E(s(t)) − E(s^∞)` for each recorded time.
pub fn relative_energy_series(series: &DiagnosticsSeries, steady_energy: f64) -> Vec<f64> {
    series.records.iter().map(|r| r.energy - steady_energy).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

/// Least-squares fit of `log y` against `t` over the second half of the series.
/// Nonpositive values are skipped.
pub fn fit_exponential_tail(times: &[f64], values: &[f64]) -> Option<TailFit> {
    let n = times.len().min(values.len());
    let start = n / 2;
    let pts: Vec<(f64, f64)> = (start..n).filter(|&k| values[k] > 0.0).map(|k| (times[k], values[k].ln())).collect();
    if pts.len() < 3 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(TailFit { slope, intercept, r2, points: pts.len() })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TsdCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub pass: bool,
}

/// `Σ_n 2·action_n / τ ≤ 2(E(s⁰) − inf E)`, with `inf E` the run's minimum
/// unless a lower value is supplied.
pub fn total_square_distance_check(actions: &[f64], energies: &[f64], tau: f64, inf_energy: Option<f64>) -> TsdCheck {
    let lhs: f64 = actions.iter().map(|a| 2.0 * a / tau).sum();
    let e0 = energies.first().copied().unwrap_or(0.0);
    let run_min = energies.iter().copied().fold(e0, f64::min);
    let inf = inf_energy.map_or(run_min, |v| v.min(run_min));
    let rhs = 2.0 * (e0 - inf);
    let bound = rhs * (1.0 + TSD_REL) + TSD_ABS;
    TsdCheck { lhs, rhs, margin: bound - lhs, pass: lhs <= bound }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldComparison {
    pub l1: Vec<f64>,
    pub linf: Vec<f64>,
    pub difference: SaturationState,
}

/// `a − b` with per-phase `L¹` and `L∞` norms.
pub fn compare_fields<Q: Quadrature + ?Sized>(
    a: &SaturationState,
    b: &SaturationState,
    quad: &Q,
) -> Result<FieldComparison, DiagnosticsError> {
    if a.n_phases != b.n_phases || a.n_cells() != b.n_cells() || a.n_cells() != quad.len() {
        return Err(DiagnosticsError::Shape(format!(
            "{}×{} vs {}×{} on {} cells",
            a.n_cells(),
            a.n_phases,
            b.n_cells(),
            b.n_phases,
            quad.len()
        )));
    }
    let values: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
    let difference = SaturationState { n_phases: a.n_phases, values };
    let l1 = (0..a.n_phases)
        .map(|i| (0..quad.len()).map(|k| difference.get(k, i).abs() * quad.weight(k)).sum())
        .collect();
    let linf = (0..a.n_phases)
        .map(|i| (0..quad.len()).map(|k| difference.get(k, i).abs()).fold(0.0, f64::max))
        .collect();
    Ok(FieldComparison { l1, linf, difference })
}

/// One line of a pass/fail report.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_cartesian_fv_mesh, BoxDomain, FvMesh};
    use crate::physics::Phase;
    use proptest::prelude::*;

    fn unit_mesh(n: usize) -> FvMesh {
        build_cartesian_fv_mesh(n, n, &BoxDomain::unit_square()).unwrap()
    }

    fn decay_phases(g: [f64; 2]) -> PhaseSet {
        PhaseSet::new(
            vec![Phase { viscosity: 1.0, density: 1.0 }, Phase { viscosity: 10.0, density: 0.87 }],
            1.0,
            g,
        )
        .unwrap()
    }

    #[test]
    fn audit_examples() {
        let mesh = unit_mesh(2);
        let st = SaturationState::from_interior(2, 4, |_| vec![0.5]);
        let a = audit_state(&st, &mesh);
        assert_eq!(a.masses, vec![0.5, 0.5]);
        assert_eq!(a.min_saturation, 0.5);
        assert_eq!(a.max_simplex_violation, 0.0);

        let mut st2 = st.clone();
        st2.set(3, 0, 0.6);
        st2.set(3, 1, 0.6);
        assert!((audit_state(&st2, &mesh).max_simplex_violation - 0.2).abs() < 1e-15);

        let pure = SaturationState::from_interior(2, 4, |_| vec![0.0]);
        assert_eq!(audit_state(&pure, &mesh).min_saturation, 0.0);
    }

    #[test]
    fn steady_state_without_gravity_is_uniform() {
        let mesh = unit_mesh(5);
        let model = CapillaryModel::LinearTwoPhase { alpha: 0.5 };
        let ss = steady_state_two_phase(&mesh, &model, &decay_phases([0.0, 0.0]), 0.3).unwrap();
        for s in &ss.s1 {
            assert!((s - 0.3).abs() < 1e-11);
        }
    }

    #[test]
    fn steady_state_full_domain() {
        let mesh = unit_mesh(4);
        for model in [CapillaryModel::LinearTwoPhase { alpha: 0.5 }, CapillaryModel::BrooksCorey { alpha: 1.0 }] {
            let ss = steady_state_two_phase(&mesh, &model, &decay_phases([0.0, -1.0]), 1.0).unwrap();
            assert!(ss.s1.iter().all(|&s| s == 1.0));
        }
        let model = CapillaryModel::LinearTwoPhase { alpha: 0.5 };
        assert!(steady_state_two_phase(&mesh, &model, &decay_phases([0.0, -1.0]), 1.5).is_err());
    }

    #[test]
    fn steady_state_stratifies_with_gravity() {
        let mesh = build_cartesian_fv_mesh(20, 20, &BoxDomain::rectangle([-1.0, -1.0], [1.0, 1.0])).unwrap();
        let model = CapillaryModel::LinearTwoPhase { alpha: 0.5 };
        let phases = decay_phases([0.0, -1.0]);
        let mass: f64 = mesh
            .cells
            .iter()
            .map(|c| (-4.0 * (c.center[0].powi(2) + c.center[1].powi(2))).exp() * c.measure)
            .sum();
        let ss = steady_state_two_phase(&mesh, &model, &phases, mass).unwrap();
        let got: f64 = ss.s1.iter().zip(&mesh.cells).map(|(s, c)| s * c.measure).sum();
        assert!((got - mass).abs() <= 1e-12 * 4.0);
        assert!(steady_state_residual(&ss, &mesh, &model, &phases) <= 1e-10);
        // lighter phase 1 accumulates at the top
        assert!(ss.s1[20 * 19] >= ss.s1[0]);
        assert!(ss.s1[20 * 19] > 0.0);
    }

    #[test]
    fn relative_energy_of_steady_trajectory_is_zero() {
        let mesh = unit_mesh(6);
        let model = CapillaryModel::LinearTwoPhase { alpha: 0.5 };
        let phases = decay_phases([0.0, -1.0]);
        let ss = steady_state_two_phase(&mesh, &model, &phases, 0.4).unwrap();
        let st = ss.to_state();
        let e = total_energy(&st, &mesh, &model, &phases).unwrap();
        let mut series = DiagnosticsSeries::default();
        for k in 0..3 {
            series.push(Record::from_state(k as f64, 1.0, &st, &mesh, &model, &phases).unwrap());
        }
        assert!(relative_energy_series(&series, e).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn steady_state_minimizes_energy_at_fixed_mass() {
        let mesh = unit_mesh(6);
        let model = CapillaryModel::BrooksCorey { alpha: 0.3 };
        let phases = decay_phases([0.0, -2.0]);
        let ss = steady_state_two_phase(&mesh, &model, &phases, 0.4).unwrap();
        let e_inf = total_energy(&ss.to_state(), &mesh, &model, &phases).unwrap();
        let uniform = SaturationState::from_interior(2, 36, |_| vec![0.4]);
        let e_u = total_energy(&uniform, &mesh, &model, &phases).unwrap();
        assert!(e_inf <= e_u);
    }

    #[test]
    fn exponential_fit_recovers_rate() {
        let t: Vec<f64> = (0..40).map(|k| 0.25 * k as f64).collect();
        let y: Vec<f64> = t.iter().map(|t| 3.0 * (-0.7 * t).exp()).collect();
        let fit = fit_exponential_tail(&t, &y).unwrap();
        assert!((fit.slope + 0.7).abs() < 1e-12);
        assert!(fit.r2 > 0.999_999);
        assert_eq!(fit.points, 20);
        assert!(fit_exponential_tail(&t[..3], &y[..3]).is_none());
    }

    #[test]
    fn tsd_examples() {
        assert!(total_square_distance_check(&[], &[1.0], 0.1, None).pass);
        let c = total_square_distance_check(&[0.0, 0.0], &[1.0, 1.0, 1.0], 0.1, None);
        assert!(c.pass && c.lhs == 0.0 && c.rhs == 0.0);
        let c = total_square_distance_check(&[0.1], &[1.0, 0.5], 0.1, None);
        assert_eq!(c.lhs, 2.0);
        assert!(!c.pass);
    }

    #[test]
    fn compare_examples() {
        let mesh = unit_mesh(3);
        let a = SaturationState::from_interior(2, 9, |k| vec![0.1 * k as f64]);
        let cmp = compare_fields(&a, &a, &mesh).unwrap();
        assert!(cmp.l1.iter().all(|&v| v == 0.0) && cmp.difference.values.iter().all(|&v| v == 0.0));
        let mut b = a.clone();
        b.values.iter_mut().for_each(|v| *v += 0.25);
        let cmp = compare_fields(&b, &a, &mesh).unwrap();
        assert!(cmp.l1.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(compare_fields(&a, &SaturationState::new(2, 4), &mesh).is_err());
    }

    #[test]
    fn csv_has_mass_columns() {
        let mesh = unit_mesh(2);
        let model = CapillaryModel::LinearTwoPhase { alpha: 0.5 };
        let phases = decay_phases([0.0, 0.0]);
        let st = SaturationState::from_interior(2, 4, |_| vec![0.5]);
        let mut series = DiagnosticsSeries::default();
        series.push(Record::from_state(0.0, 0.1, &st, &mesh, &model, &phases).unwrap());
        let mut buf = Vec::new();
        series.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().ends_with("mass_0,mass_1"));
        assert_eq!(lines.next().unwrap().split(',').count(), 12);
    }

    proptest! {
        #[test]
        fn steady_mass_map_is_monotone(g1 in -3.0f64..3.0, g2 in -3.0f64..3.0) {
            let mesh = unit_mesh(5);
            let phases = decay_phases([0.3, -1.0]);
            for model in [CapillaryModel::LinearTwoPhase { alpha: 0.5 }, CapillaryModel::BrooksCorey { alpha: 1.0 }] {
                let m = |g: f64| -> f64 {
                    steady_profile(&mesh, &model, &phases, g).unwrap().iter().zip(&mesh.cells).map(|(s, c)| s * c.measure).sum()
                };
                let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
                prop_assert!(m(lo) <= m(hi));
            }
        }

        #[test]
        fn l1_triangle_inequality(vals in proptest::collection::vec(0.0f64..1.0, 27)) {
            let mesh = unit_mesh(3);
            let mk = |off: usize| SaturationState::from_interior(2, 9, |k| vec![vals[off + k]]);
            let (a, b, c) = (mk(0), mk(9), mk(18));
            let ab = compare_fields(&a, &b, &mesh).unwrap().l1;
            let bc = compare_fields(&b, &c, &mesh).unwrap().l1;
            let ac = compare_fields(&a, &c, &mesh).unwrap().l1;
            for i in 0..2 {
                prop_assert!(ac[i] <= ab[i] + bc[i] + 1e-12);
            }
        }

        #[test]
        fn audit_masses_match_reverse_summation(vals in proptest::collection::vec(0.0f64..1.0, 16)) {
            let mesh = unit_mesh(4);
            let st = SaturationState::from_interior(2, 16, |k| vec![vals[k]]);
            let audit = audit_state(&st, &mesh);
            for i in 0..2 {
                let rev: f64 = (0..16).rev().map(|k| st.get(k, i) * mesh.cells[k].measure).sum();
                prop_assert!((audit.masses[i] - rev).abs() <= 1e-13 * rev.abs().max(1e-300));
            }
        }
    }
}
