pub mod autodiff;
pub mod error;
pub mod harmonics;
pub mod net;
pub mod prescribers;
pub mod sphere;

pub use error::{Error, Result};
