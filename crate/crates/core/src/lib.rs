pub mod augment;
pub mod checkpoint;
pub mod datamodel;
pub mod discbank;
pub mod error;
pub mod fusion;
pub mod layers;
pub mod metrics;
pub mod objectives;
pub mod seeds;
pub mod segnet;
pub mod trainer;

pub use error::{Error, Result};

pub type SegNet32 = segnet::SegNet<f32>;
pub type SegNet64 = segnet::SegNet<f64>;
pub type Discriminator32 = discbank::Discriminator<f32>;
pub type Discriminator64 = discbank::Discriminator<f64>;
pub type DiscriminatorBank32 = discbank::DiscriminatorBank<f32>;
pub type DiscriminatorBank64 = discbank::DiscriminatorBank<f64>;
pub type DomainProbMap32 = objectives::DomainProbMap<f32>;
pub type DomainProbMap64 = objectives::DomainProbMap<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
