//! Conditional generator/discriminator stack, adversarial training with
//! random field-of-view cutoffs, shell x plane generator dispatch,
//! model-bundle serialization, and the end-to-end imputation pipeline.

pub mod bundle;
pub mod nn;
pub mod train;

pub use bundle::{impute_study, load_bundle, predict_plane, save_bundle, ModelBundle};
pub use nn::{
    build_discriminator, build_generator, DiscriminatorConfig, GeneratorConfig, Net, Tensor,
};
pub use train::{
    combined_generator_objective, gan_loss, generator_key, l1_loss, train, Adam, TrainConfig,
    TrainLogRow, TrainSample,
};
