//! Two-dimensional mixture-flow solver: shallow-water mass and momentum,
//! sediment-concentration transport, and bed evolution through erosion and
//! deposition, integrated with an adaptive-step TVD-MacCormack scheme.

pub mod material;
mod sim;

pub use material::{
    derive_material, equilibrium_concentration, erosion_deposition_rate, friction_factor,
    friction_slope, DerivedMaterial, MaterialParams,
};
pub use sim::{
    run, run_with, CaseResult, CellSample, MassLedger, RunOptions, Simulation, SourceForcing,
};
