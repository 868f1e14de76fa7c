//! Deterministic haptic simulation engine for endoscopic sinus surgery
//! training.
//!
//! The crate is organised around the 1 kHz haptic tick in [`haptics`]: tool
//! poses come in through an [`haptics::InputSource`], the [`scene`] turns them
//! into penetration and contacts, the [`tissue`] model produces a
//! rate-dependent force with a one-way fracture latch, [`control`] shapes the
//! device command, and [`session`] tracks the task protocol. Every tick yields
//! a [`log::SessionRecord`]; [`metrics`] and [`replay`] consume those records.

pub mod config;
pub mod control;
pub mod haptics;
pub mod log;
pub mod metrics;
pub mod replay;
pub mod scene;
pub mod session;
pub mod tissue;

pub use config::EngineConfig;
pub use haptics::{run_loop, Engine, LoopConfig, LoopOptions, Pipeline};
pub use log::{SessionLog, SessionRecord};
pub use scene::{SceneConfig, Vec3};
pub use session::{TaskKind, TaskSpec};
pub use tissue::{FractureState, TissueParams};
