//! Two-solver simulator for multiphase flow in porous media.
//!
//! * [`alg2`]: minimizing-movement (JKO) steps solved by an augmented-Lagrangian
//!   splitting of the Benamou–Brenier space-time problem.
//! * [`fv`]: implicit upstream-mobility finite volumes with Newton's method.
//!
//! Both produce [`physics::SaturationState`] trajectories checked by [`diagnostics`].

pub mod mesh;
pub mod physics;
pub mod alg2;
pub mod cli;
pub mod diagnostics;
pub mod fv;

/// A run that stopped early: the error and everything computed before it.
#[derive(Debug)]
pub struct Interrupted<T, E> {
    pub error: E,
    pub partial: T,
}

impl<T: std::fmt::Debug, E: std::error::Error + 'static> std::fmt::Display for Interrupted<T, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Display::fmt(&self.error, f)
    }
}
