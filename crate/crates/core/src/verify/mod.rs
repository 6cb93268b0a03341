//! Oracles and stress machinery for checking the schemes.

#[cfg(feature = "interleave")]
pub mod interleave;
pub mod oracle;
pub mod stress;
