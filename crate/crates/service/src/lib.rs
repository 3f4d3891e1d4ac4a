//! Remote attack surface: a decision-only HTTP detection endpoint backed by
//! the synthetic detector, and a client that measures round-trip times.
//!
//! `POST /detect` takes either an 8-bit RGB PNG or a raw little-endian
//! float32 tensor (`NMSR` magic, then height, width and channel count as
//! `u32`). The response is `{"detections":[{"box":[x0,y0,x1,y1],"class":k}],
//! "id":"..."}`; scores are never sent.

pub mod client;
pub mod server;
pub mod wire;

pub use client::{ClientError, Endpoint, RemoteDetector, RttAggregate, RttSample};
pub use server::{serve, ServiceConfig, ServiceHandle};
pub use wire::{DetectResponse, ErrorBody, PayloadFormat};

/// Environment variable that overrides the default bind address.
pub const BIND_ENV: &str = "NMSLEAK_BIND";

/// Bind address used when neither a flag nor [`BIND_ENV`] is given.
pub const DEFAULT_BIND: &str = "127.0.0.1:8732";

/// Flag value, else the environment override, else [`DEFAULT_BIND`].
pub fn resolve_bind(flag: Option<&str>) -> String {
    flag.map(str::to_owned)
        .or_else(|| std::env::var(BIND_ENV).ok().filter(|v| !v.is_empty()))
        .unwrap_or_else(|| DEFAULT_BIND.to_owned())
}
