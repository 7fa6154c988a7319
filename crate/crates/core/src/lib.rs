pub mod error;
pub mod event_data;
pub mod exec;
pub mod forest;
pub mod gee;
pub mod history;
pub mod pipeline;
pub mod pseudo_obs;
pub mod seed;
pub mod simulate;

pub use error::{Error, Result};
