//! Trainable parameter groups.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, NodeId};
use crate::tensor::Tensor;

/// A module whose tensors the optimizer may update.
pub trait Parameterized {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    fn param_names(&self) -> Vec<String>;

    /// Puts every tensor on the tape, as trainable leaves or as constants.
    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.params()
            .into_iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn param_checksum(&self) -> u64 {
        self.params().iter().fold(0u64, |h, t| t.checksum(h))
    }

    fn param_norm(&self) -> f64 {
        libm::sqrt(self.params().iter().map(|t| t.sq_norm()).sum::<f64>())
    }
}
