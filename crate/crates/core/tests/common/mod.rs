#![allow(dead_code)]

use pfl::alg2::SpaceTimeLaplacian;
use pfl::fv::{to_dense, FvConfig, FvProblem, FvUnknowns};
use pfl::mesh::{build_cartesian_fv_mesh, build_space_time_mesh, BoxDomain, SpatialGrid};
use pfl::physics::{CapillaryModel, Phase, PhaseSet, SaturationState};
use rand::Rng;

/// Minimizes `F(b) = (|b|²/α + a)² + |b − β|²` over `b ∈ R²` by golden section
/// along the ray through `β` followed by Newton in both variables. The minimizer
/// gives the distance-minimizing point `(−|b|²/α, b)` of the parabola boundary.
pub fn projection_oracle(a: f64, beta: [f64; 2], alpha: f64) -> (f64, [f64; 2]) {
    let nb = (beta[0] * beta[0] + beta[1] * beta[1]).sqrt();
    let dir = if nb > 0.0 { [beta[0] / nb, beta[1] / nb] } else { [1.0, 0.0] };
    let f = |t: f64| (t * t / alpha + a).powi(2) + (t - nb).powi(2);
    let (mut lo, mut hi) = (0.0, nb.max(1e-300));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..200 {
        let x1 = hi - phi * (hi - lo);
        let x2 = lo + phi * (hi - lo);
        if f(x1) < f(x2) {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    let t = 0.5 * (lo + hi);
    let mut b = [t * dir[0], t * dir[1]];
    for _ in 0..50 {
        let q = (b[0] * b[0] + b[1] * b[1]) / alpha + a;
        let g = [4.0 * q * b[0] / alpha + 2.0 * (b[0] - beta[0]), 4.0 * q * b[1] / alpha + 2.0 * (b[1] - beta[1])];
        let d = 4.0 * q / alpha + 2.0;
        let h = [
            [8.0 * b[0] * b[0] / (alpha * alpha) + d, 8.0 * b[0] * b[1] / (alpha * alpha)],
            [8.0 * b[0] * b[1] / (alpha * alpha), 8.0 * b[1] * b[1] / (alpha * alpha) + d],
        ];
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        if det <= 0.0 {
            break;
        }
        let step = [(h[1][1] * g[0] - h[0][1] * g[1]) / det, (h[0][0] * g[1] - h[1][0] * g[0]) / det];
        b = [b[0] - step[0], b[1] - step[1]];
        if step[0].abs() + step[1].abs() < 1e-16 * (1.0 + b[0].abs() + b[1].abs()) {
            break;
        }
    }
    (-(b[0] * b[0] + b[1] * b[1]) / alpha, b)
}

/// Feasibility, normality and oracle errors of one projection.
pub struct ProjectionErrors {
    pub feasibility: f64,
    pub normality: f64,
    pub oracle: f64,
}

pub fn projection_errors(a: f64, b: [f64; 2], alpha: f64) -> ProjectionErrors {
    let (ap, bp) = pfl::alg2::project_parabola(a, b, alpha).unwrap();
    let feasibility = (ap + (bp[0] * bp[0] + bp[1] * bp[1]) / alpha).max(0.0);
    if a + (b[0] * b[0] + b[1] * b[1]) / alpha <= 0.0 {
        let moved = (ap - a).abs() + (bp[0] - b[0]).abs() + (bp[1] - b[1]).abs();
        return ProjectionErrors { feasibility, normality: moved, oracle: moved };
    }
    let n = [1.0, 2.0 * bp[0] / alpha, 2.0 * bp[1] / alpha];
    let d = [a - ap, b[0] - bp[0], b[1] - bp[1]];
    let cross = [n[1] * d[2] - n[2] * d[1], n[2] * d[0] - n[0] * d[2], n[0] * d[1] - n[1] * d[0]];
    let cn = (cross[0].powi(2) + cross[1].powi(2) + cross[2].powi(2)).sqrt();
    let scale = 1.0 + d.iter().map(|x| x.abs()).sum::<f64>();
    let normality = (cn / scale).max(if d[0] < 0.0 { -d[0] } else { 0.0 });
    let (oa, ob) = projection_oracle(a, b, alpha);
    let oracle = ((oa - ap).abs() / (1.0 + oa.abs()))
        .max(((ob[0] - bp[0]).abs() + (ob[1] - bp[1]).abs()) / (1.0 + ob[0].abs() + ob[1].abs()));
    ProjectionErrors { feasibility, normality, oracle }
}

/// Bisection on the scalar Brooks–Corey equation `2c − β + τα(1 − c)^{−1/2} = 0`.
pub fn brooks_corey_oracle(c_bar: [f64; 2], psi: [f64; 2], tau: f64, alpha: f64) -> f64 {
    let beta = c_bar[1] - tau * psi[1] - c_bar[0] + tau * psi[0] + 1.0;
    let h = |c: f64| 2.0 * c - beta + tau * alpha / (1.0 - c).sqrt();
    let (mut lo, mut hi) = (-1e6, 1.0 - 1e-14);
    if h(hi) <= 0.0 {
        return hi;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if h(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).max(0.0)
}

/// Three-phase prox by grid search over `Δ*` and a pattern search with the
/// edge directions of the triangle.
pub fn three_phase_prox_oracle(c_bar: [f64; 3], psi: [f64; 3], tau: f64, model: &CapillaryModel) -> [f64; 3] {
    let obj = |u: f64, v: f64| {
        let c = [1.0 - u - v, u, v];
        let quad: f64 = (0..3).map(|i| 0.5 * (c[i] - c_bar[i]).powi(2)).sum();
        let lin: f64 = (0..3).map(|i| c[i] * psi[i]).sum();
        quad + tau * (lin + model.potential(&[u, v]))
    };
    let feasible = |u: f64, v: f64| u >= 0.0 && v >= 0.0 && u + v <= 1.0;
    let n = 200;
    let (mut bu, mut bv, mut bf) = (0.0, 0.0, f64::INFINITY);
    for i in 0..=n {
        for j in 0..=(n - i) {
            let (u, v) = (i as f64 / n as f64, j as f64 / n as f64);
            let f = obj(u, v);
            if f < bf {
                (bu, bv, bf) = (u, v, f);
            }
        }
    }
    let dirs = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0), (1.0, -1.0), (-1.0, 1.0)];
    let mut step = 1.0 / n as f64;
    while step > 1e-13 {
        let mut moved = false;
        for (du, dv) in dirs {
            let (u, v) = (bu + step * du, bv + step * dv);
            if feasible(u, v) {
                let f = obj(u, v);
                if f < bf {
                    (bu, bv, bf) = (u, v, f);
                    moved = true;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    [1.0 - bu - bv, bu, bv]
}

/// L² error (lumped nodal quadrature) of the space-time elliptic solve for the
/// manufactured solution `φ* = t² + x²` on `[0, 1]²`, with `n` intervals in
/// both directions.
pub fn elliptic_error(n: usize) -> f64 {
    let grid = SpatialGrid::new(BoxDomain::interval(0.0, 1.0), n, 1).unwrap();
    let mesh = build_space_time_mesh(&grid, n).unwrap();
    let lap = SpaceTimeLaplacian::new(&mesh).unwrap();
    let exact = |p: &[f64; 3]| p[0] * p[0] + p[1] * p[1];
    let mut lumped = vec![0.0; mesh.n_nodes()];
    for el in &mesh.elements {
        for k in 0..mesh.dim() + 1 {
            lumped[el.nodes[k]] += el.measure / (mesh.dim() + 1) as f64;
        }
    }
    // −Δφ* = −4, ∂_x φ* = 2 on x = 1, zero flux on x = 0 and t = 0,
    // and ∂_t φ* + φ* = 3 + x² on t = 1.
    let mut rhs: Vec<f64> = lumped.iter().map(|w| -4.0 * w).collect();
    let ht = mesh.spacing[0];
    for (k, p) in mesh.nodes.iter().enumerate() {
        if (p[1] - 1.0).abs() < 1e-12 {
            let edge = if p[0] < 1e-12 || p[0] > 1.0 - 1e-12 { 0.5 * ht } else { ht };
            rhs[k] += 2.0 * edge;
        }
    }
    let w1 = grid.lumped_weights();
    for (j, &node) in mesh.trace_t1.iter().enumerate() {
        let x = mesh.nodes[node][1];
        rhs[node] += (3.0 + x * x) * w1[j];
    }
    let phi = lap.solve(&rhs);
    let err: f64 = mesh.nodes.iter().enumerate().map(|(k, p)| lumped[k] * (phi[k] - exact(p)).powi(2)).sum();
    err.sqrt()
}

pub fn fv_problem(model: CapillaryModel, n: usize) -> FvProblem {
    let mesh = build_cartesian_fv_mesh(n, n, &BoxDomain::unit_square()).unwrap();
    let mut table = vec![Phase { viscosity: 1.0, density: 1.0 }, Phase { viscosity: 10.0, density: 0.87 }];
    if model.n_phases() == 3 {
        table = vec![
            Phase { viscosity: 1.0, density: 1.0 },
            Phase { viscosity: 50.0, density: 0.87 },
            Phase { viscosity: 0.1, density: 0.1 },
        ];
    }
    let phases = PhaseSet::new(table, 1.0, [0.0, -1.0]).unwrap();
    FvProblem::new(mesh, model, phases, FvConfig::default()).unwrap()
}

/// Random interior saturations away from the simplex boundary, random pressures
/// and a random border multiplier.
pub fn random_unknowns<R: Rng>(rng: &mut R, n_phases: usize, n_cells: usize) -> (FvUnknowns, SaturationState) {
    let mut draw = || -> Vec<f64> {
        loop {
            let s: Vec<f64> = (1..n_phases).map(|_| rng.gen_range(0.05..0.85)).collect();
            if s.iter().sum::<f64>() <= 0.9 {
                return s;
            }
        }
    };
    let new = SaturationState::from_interior(n_phases, n_cells, |_| draw());
    let old = SaturationState::from_interior(n_phases, n_cells, |_| draw());
    let p0: Vec<f64> = (0..n_cells).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut u = FvUnknowns::from_state(&new, &p0);
    *u.x.last_mut().unwrap() = rng.gen_range(-0.5..0.5);
    (u, old)
}

/// Largest column-wise relative difference between the analytic Jacobian and
/// central finite differences of the residual.
pub fn jacobian_fd_error(problem: &FvProblem, u: &FvUnknowns, s_old: &SaturationState, tau: f64) -> f64 {
    let jac = to_dense(&problem.assemble_jacobian(u, s_old, tau).unwrap());
    let n = u.x.len();
    let mut worst: f64 = 0.0;
    for col in 0..n {
        let h = 1e-6 * (1.0 + u.x[col].abs());
        let mut up = u.clone();
        up.x[col] += h;
        let mut dn = u.clone();
        dn.x[col] -= h;
        let rp = problem.assemble_residual(&up, s_old, tau).unwrap();
        let rm = problem.assemble_residual(&dn, s_old, tau).unwrap();
        let mut diff: f64 = 0.0;
        let mut size: f64 = 0.0;
        for row in 0..n {
            let fd = (rp[row] - rm[row]) / (2.0 * h);
            diff = diff.max((fd - jac[(row, col)]).abs());
            size = size.max(jac[(row, col)].abs());
        }
        worst = worst.max(diff / (1.0 + size));
    }
    worst
}
