//! Sparse-feedback posterior matching over the binary symmetric channel.
//!
//! The crate models a variable-length feedback code in which the encoder sends blocks of
//! several symbols between feedback packets. Messages are tracked through a grouped
//! posterior whose size stays polynomial in the message length.

pub mod bounds;
pub mod codec;
pub mod lookahead;
pub mod model;
pub mod montecarlo;
pub mod partition;
pub mod posterior;
pub mod verify;
