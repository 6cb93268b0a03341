//! Baseline reclamation schemes: hazard pointers, epoch based reclamation
//! (with and without explicit regions) and quiescent state reclamation.

pub mod epoch;
pub mod hp;
pub mod qsr;
mod registry;

pub use epoch::{Epoch, Er, Ner};
pub use hp::HazardPointers as Hp;
pub use qsr::Qsr;
