//! Shared fixtures for the benchmarks.

use wnsf::model::systems::second_order_bj;
use wnsf::{simulate, DataSet, LoopConfig, LoopKind, RationalFilter, SpectrumModel};

/// Closed-loop setup of the second-order benchmark with unit feedback.
pub fn closed_loop(n_samples: usize, seed: u64) -> LoopConfig {
    LoopConfig::new(second_order_bj(), RationalFilter::gain(1.0), LoopKind::Closed, n_samples, seed)
}

pub fn closed_loop_data(n_samples: usize) -> DataSet {
    simulate(&closed_loop(n_samples, 1)).expect("stable loop")
}

pub fn closed_loop_spectrum() -> SpectrumModel {
    SpectrumModel::from_loop(&closed_loop(1, 0)).expect("valid spectrum")
}
