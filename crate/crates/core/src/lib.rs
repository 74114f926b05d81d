pub mod canonical;
pub mod cli;
pub mod dictionary;
pub mod montecarlo;
pub mod mpregion;
pub mod netcase;
pub mod solver;
pub mod stats;
