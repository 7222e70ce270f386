pub mod bellman;
pub mod checks;
pub mod dense;
pub mod grid;
pub mod impulse;
pub mod matrix;
pub mod mdp;
pub mod problems;
pub mod report;
pub mod schemes;
pub mod solvers;
