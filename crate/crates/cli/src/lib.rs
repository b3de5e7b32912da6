//! Library half of the `privscore` binary: the offline benchmark and the
//! blocking HTTP client, exposed so tests and other tools can drive them
//! in-process.

pub mod bench;
pub mod client;
