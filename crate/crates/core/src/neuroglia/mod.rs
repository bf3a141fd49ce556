//! Neuron-astrocyte network simulator: LIF neurons, synaptic facilitation,
//! and short- and long-term astrocyte processes on a 1-D synapse grid.

mod geometry;
mod params;
mod sim;

pub use geometry::{build_geometry, coupling_tensor, CouplingTensor, SynapseGeometry};
pub use params::{DriveSpec, Nonlinearity, SimParams};
pub use sim::{run_stp_cycles, run_stp_cycles_with, step, steps_per_cycle, RecordOptions, SimState, SimTrace};
