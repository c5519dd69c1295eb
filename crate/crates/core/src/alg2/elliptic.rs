//! Space-time Laplacian with a Robin term on `{t = 1}`.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Llt;
use faer::sparse::{SparseColMat, Triplet};
use faer::{ColMut, Side};

use super::Alg2Error;
use crate::mesh::SpaceTimeMesh;

/// Factorization of `S + M₁`, where `S` is the P1 stiffness matrix of the
/// space-time mesh and `M₁` the lumped mass of the `t = 1` trace.
pub struct SpaceTimeLaplacian {
    n: usize,
    llt: Llt<usize, f64>,
}

impl SpaceTimeLaplacian {
    pub fn new(mesh: &SpaceTimeMesh) -> Result<Self, Alg2Error> {
        let n = mesh.n_nodes();
        let dim = mesh.dim();
        let mut trip = Vec::with_capacity(mesh.n_elements() * dim * 4 + mesh.trace_t1.len());
        for el in &mesh.elements {
            for k in 0..dim {
                let h = mesh.spacing[el.axes[k]];
                let w = el.measure / (h * h);
                let (i, j) = (el.nodes[k], el.nodes[k + 1]);
                trip.push(Triplet::new(i, i, w));
                trip.push(Triplet::new(j, j, w));
                trip.push(Triplet::new(i, j, -w));
                trip.push(Triplet::new(j, i, -w));
            }
        }
        let weights = mesh.grid.lumped_weights();
        for (j, &node) in mesh.trace_t1.iter().enumerate() {
            trip.push(Triplet::new(node, node, weights[j]));
        }
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
            .map_err(|e| Alg2Error::Linear(format!("{e:?}")))?;
        let llt = mat.sp_cholesky(Side::Lower).map_err(|e| Alg2Error::Linear(format!("{e:?}")))?;
        Ok(Self { n, llt })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Overwrites `rhs` with the solution of `(S + M₁) φ = rhs`.
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        debug_assert_eq!(rhs.len(), self.n);
        self.llt.solve_in_place(ColMut::from_slice_mut(rhs).as_mat_mut());
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}
