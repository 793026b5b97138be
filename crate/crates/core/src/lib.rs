pub mod graph;
pub mod tensor;
pub mod datagen;
pub mod model;
pub mod rng;
pub mod style;
pub mod selection;
pub mod losses;
pub mod trainer;
pub mod analysis;
