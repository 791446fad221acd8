//! Cooperative multi-point positioning (COMPOP) simulator.
//!
//! A target vehicle (TV) broadcasts signature tones and a stepped-frequency
//! continuous wave (SFCW) from every antenna on its body. A sensing vehicle
//! (SV) receives them over a line-of-sight path or over specular reflections
//! off nearby vehicles and reconstructs the antenna cloud:
//!
//! ```text
//!  scene ──► channel ──► sync (PDoA) ──► imaging (FT) ──► peaks
//!                              │                            │
//!                              └──────► combining ◄─────────┘
//!                                           │
//!                                        analysis
//! ```
//!
//! Every stage is a plain function over value types so that Monte Carlo
//! drivers ([`pipeline`]) can run trials in parallel with bit-identical
//! results.

pub mod analysis;
pub mod channel;
pub mod combining;
pub mod config;
mod error;
pub mod geometry;
pub mod imaging;
pub mod pipeline;
pub mod sync;
pub mod waveform;

pub use error::{Error, Result};
pub use geometry::{Point3, PointCloud, ReflectionSurface, SPEED_OF_LIGHT};
pub use num_complex::Complex64;
