//! Collections of small classifiers trained to rely on distinct predictive
//! signals by adversarially minimizing a contrastive estimate of the
//! conditional total correlation of their representations, together with the
//! coloured-MNIST generators and rapid-adaptation protocols used to measure it.

pub mod diffengine;
pub mod data;
pub mod rng;
pub mod nets;
pub mod tcest;
pub mod eval;
pub mod train;
