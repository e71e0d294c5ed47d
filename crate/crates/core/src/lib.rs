pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod fields;
pub mod inpaint;
pub mod losses;
pub mod renderer;
pub mod trainer;
pub mod trajectory;
pub mod warp;

pub use error::{Error, Result};
