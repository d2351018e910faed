pub mod attention;
pub mod context;
pub mod error;
pub mod loss_metrics;
pub mod pipeline;
pub mod registry;
pub mod schedule;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
