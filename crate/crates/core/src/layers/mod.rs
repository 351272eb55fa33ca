//! Seeded, Bayesian and point-estimate linear/conv layers.

mod germinate;
mod layer;
mod seed;

pub use germinate::{
    germinate, sample_weights, sigma_from_rho, Germinator, LayerMode, Noise, RHO_FLOOR, RHO_INIT,
};
pub use layer::{param_count, Conv2d, LayerBias, LayerOutput, LayerWeights, Linear, ParamMode};
pub use seed::{init_seed, make_seed_spec, KernelSeed, SeedKind, SeedSpec};
