//! Event-based 4D scene reconstruction at desk scale.
//!
//! The pipeline: simulate multi-view event streams from analytic toy scenes
//! ([`sim`]), index them for fast decayed accumulation queries ([`accum`]),
//! deblur/synthesize frames from events ([`edi`]), train a time-conditioned
//! volumetric radiance field from events plus sparse RGB ([`field`],
//! [`training`]), render novel views across cross-faded segments
//! ([`multiseg`]) and evaluate the results ([`analysis`]).

pub mod accum;
pub mod analysis;
pub mod edi;
pub mod error;
pub mod events;
pub mod field;
pub mod io;
pub mod multiseg;
pub mod sim;
pub mod training;

pub use error::{Error, Result};
