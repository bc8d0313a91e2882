pub mod cli;
pub mod dynamics;
pub mod fields;
pub mod geometry;
pub mod kernel;
pub mod lp;
pub mod norms;
pub mod quad;
pub mod trilinear;
