//! Round-trip-timing client and a remote [`DetectorHandle`].

use std::io::Read;
use std::time::{Duration, Instant};

use nmsleak_core::clock::ClockMode;
use nmsleak_core::measurement::{DetectorHandle, Observed};
use nmsleak_core::stats;
use nmsleak_core::Raster;
use serde::{Deserialize, Serialize};

use crate::wire::{self, DetectResponse, ErrorBody, PayloadFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    ConnectionRefused,
    Timeout,
    Other,
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport error ({kind:?}): {message}")]
    Transport { kind: TransportKind, message: String },
    #[error("HTTP {status}: {}", body.as_ref().map_or("", |b| b.error.as_str()))]
    Http { status: u16, body: Option<ErrorBody> },
    #[error("bad response: {0}")]
    Decode(String),
    #[error("invalid request: {0}")]
    Request(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttSample {
    pub request_id: String,
    /// Seconds from just before the request is written to just after the
    /// response body has been read.
    pub rtt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttAggregate {
    pub samples: Vec<RttSample>,
    pub median: f64,
}

/// A detection endpoint reached over HTTP.
#[derive(Debug, Clone)]
pub struct Endpoint {
    url: String,
    agent: ureq::Agent,
    format: PayloadFormat,
    next_id: u64,
}

impl Endpoint {
    /// `base` is e.g. `http://127.0.0.1:8732`; `/detect` is appended.
    pub fn new(base: &str, format: PayloadFormat, timeout: Duration) -> Self {
        Self {
            url: format!("{}/detect", base.trim_end_matches('/')),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            format,
            next_id: 0,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Sends `img` `repeats` times and returns the last response with the
    /// median round-trip time.
    pub fn timed_query(&mut self, img: &Raster, repeats: usize) -> Result<(DetectResponse, RttAggregate), ClientError> {
        if repeats == 0 {
            return Err(ClientError::Request("repeats must be at least 1".into()));
        }
        let body = self
            .format
            .encode(img)
            .map_err(|e| ClientError::Request(e.to_string()))?;
        let (h, w) = (img.height().to_string(), img.width().to_string());
        let mut samples = Vec::with_capacity(repeats);
        let mut last = None;
        for _ in 0..repeats {
            let id = self.next_id.to_string();
            self.next_id += 1;
            let request = self
                .agent
                .post(&self.url)
                .set("Content-Type", self.format.content_type())
                .set(wire::REQUEST_ID_HEADER, &id)
                .set(wire::HEIGHT_HEADER, &h)
                .set(wire::WIDTH_HEADER, &w);
            let start = Instant::now();
            let outcome = request.send_bytes(&body);
            let (status, text) = match outcome {
                Ok(resp) => (resp.status(), read_body(resp)?),
                Err(ureq::Error::Status(status, resp)) => (status, read_body(resp)?),
                Err(ureq::Error::Transport(t)) => return Err(transport(t)),
            };
            let rtt = start.elapsed().as_secs_f64();
            if status != 200 {
                return Err(ClientError::Http {
                    status,
                    body: serde_json::from_str(&text).ok(),
                });
            }
            let resp: DetectResponse = serde_json::from_str(&text).map_err(|e| ClientError::Decode(e.to_string()))?;
            if resp.id != id {
                return Err(ClientError::Decode(format!(
                    "response id {:?} does not echo {id:?}",
                    resp.id
                )));
            }
            samples.push(RttSample { request_id: id, rtt });
            last = Some(resp);
        }
        let rtts: Vec<f64> = samples.iter().map(|s| s.rtt).collect();
        let median = stats::median(&rtts).map_err(|e| ClientError::Decode(e.to_string()))?;
        Ok((last.expect("repeats >= 1"), RttAggregate { samples, median }))
    }
}

fn read_body(resp: ureq::Response) -> Result<String, ClientError> {
    let mut text = String::new();
    resp.into_reader()
        .read_to_string(&mut text)
        .map_err(|e| ClientError::Transport {
            kind: io_kind(&e),
            message: e.to_string(),
        })?;
    Ok(text)
}

fn io_kind(e: &std::io::Error) -> TransportKind {
    match e.kind() {
        std::io::ErrorKind::ConnectionRefused => TransportKind::ConnectionRefused,
        std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => TransportKind::Timeout,
        _ => TransportKind::Other,
    }
}

fn transport(t: ureq::Transport) -> ClientError {
    let message = t.to_string();
    let kind = match t.kind() {
        ureq::ErrorKind::ConnectionFailed => TransportKind::ConnectionRefused,
        ureq::ErrorKind::Io => {
            let io = std::error::Error::source(&t).and_then(|s| s.downcast_ref::<std::io::Error>());
            io.map_or(TransportKind::Other, io_kind)
        }
        _ => TransportKind::Other,
    };
    ClientError::Transport { kind, message }
}

/// [`DetectorHandle`] whose time is the median round-trip time.
#[derive(Debug, Clone)]
pub struct RemoteDetector {
    endpoint: Endpoint,
    repeats: usize,
    last: Option<RttAggregate>,
}

impl RemoteDetector {
    pub fn new(endpoint: Endpoint, repeats: usize) -> Self {
        Self {
            endpoint,
            repeats,
            last: None,
        }
    }

    pub fn last_rtt(&self) -> Option<&RttAggregate> {
        self.last.as_ref()
    }
}

impl DetectorHandle for RemoteDetector {
    fn query(&mut self, img: &Raster) -> nmsleak_core::Result<Observed> {
        let (resp, agg) = self
            .endpoint
            .timed_query(img, self.repeats)
            .map_err(|e| nmsleak_core::Error::Query(e.to_string()))?;
        let total_time = agg.median;
        self.last = Some(agg);
        Ok(Observed {
            detections: resp.detections,
            total_time,
        })
    }

    fn mode(&self) -> ClockMode {
        ClockMode::RemoteRtt
    }
}
