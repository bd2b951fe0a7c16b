//! Simulated time: one local gradient per node costs 1, one multiplication
//! by the gossip operator costs `τ · degree`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub tau: f64,
    /// Products with the base matrix per communication (Chebyshev degree).
    pub degree: usize,
}

impl CostModel {
    pub fn new(tau: f64, degree: usize) -> CostModel {
        CostModel { tau, degree: degree.max(1) }
    }

    /// Recomputed from counters, never accumulated, so rows are exact.
    #[inline]
    pub fn sim_time(&self, n_grads: u64, n_comms: u64) -> f64 {
        n_grads as f64 + n_comms as f64 * self.tau * self.degree as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chebyshev_multiplies_comm_cost() {
        let c = CostModel::new(50.0, 3);
        assert_eq!(c.sim_time(10, 2), 10.0 + 300.0);
        assert_eq!(CostModel::new(1.0, 0).degree, 1);
    }
}
