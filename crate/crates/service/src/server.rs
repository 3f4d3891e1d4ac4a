//! The detection endpoint.

use std::io::Read;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use nmsleak_core::clock::{self, Clock, ClockMode, ClockSpec, PhaseNoise};
use nmsleak_core::detector::{DecisionBox, SyntheticDetector};
use nmsleak_core::noise::NoiseSpec;
use nmsleak_core::seed;
use serde::{Deserialize, Serialize};
use tiny_http::{Header, Method, Request, Response, Server};

use crate::wire::{self, DetectResponse, Rejection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub bind: String,
    /// Server-side clock. In modeled mode the response is held until the
    /// modeled end-to-end time has elapsed since the request arrived; in
    /// wall-clock mode it is sent as soon as detection finishes.
    pub clock: ClockSpec,
    /// Extra delay added to every response.
    pub jitter: NoiseSpec,
    pub jitter_seed: u64,
    /// Requests processed concurrently. 1 keeps the timing channel clean.
    pub workers: usize,
    pub max_body_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: crate::DEFAULT_BIND.into(),
            clock: ClockSpec::noiseless(),
            jitter: NoiseSpec::None,
            jitter_seed: 0,
            workers: 1,
            max_body_bytes: 64 << 20,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {reason}")]
    Bind { addr: String, reason: String },
    #[error(transparent)]
    Config(#[from] nmsleak_core::Error),
}

/// A running server. Dropping it stops the workers.
pub struct ServiceHandle {
    server: Arc<Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the workers exit.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(self) {}
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

pub fn serve(detector: SyntheticDetector, config: ServiceConfig) -> Result<ServiceHandle, ServeError> {
    config.clock.validate()?;
    config.jitter.validate()?;
    if config.clock.mode == ClockMode::RemoteRtt {
        return Err(nmsleak_core::Error::InvalidParameter {
            name: "clock.mode",
            reason: "the server measures locally; use modeled or wall_clock".into(),
        }
        .into());
    }
    if config.workers == 0 {
        return Err(nmsleak_core::Error::InvalidParameter {
            name: "workers",
            reason: "must be at least 1".into(),
        }
        .into());
    }
    let server = Server::http(&config.bind).map_err(|e| ServeError::Bind {
        addr: config.bind.clone(),
        reason: e.to_string(),
    })?;
    let addr = server.server_addr().to_ip().ok_or_else(|| ServeError::Bind {
        addr: config.bind.clone(),
        reason: "not an IP listener".into(),
    })?;
    let server = Arc::new(server);
    let detector = Arc::new(detector);
    let next_id = Arc::new(AtomicU64::new(0));
    let workers = (0..config.workers)
        .map(|i| {
            let mut worker = Worker {
                detector: Arc::clone(&detector),
                clock: Clock::new(ClockSpec {
                    rng_seed: seed::indexed(config.clock.rng_seed, "service.clock", i as u64),
                    ..config.clock
                })?,
                jitter_clock: Clock::new(ClockSpec::modeled(
                    PhaseNoise::default(),
                    seed::indexed(config.jitter_seed, "service.jitter", i as u64),
                ))?,
                jitter: config.jitter,
                max_body: config.max_body_bytes,
                next_id: Arc::clone(&next_id),
            };
            let server = Arc::clone(&server);
            Ok(std::thread::spawn(move || {
                while let Ok(req) = server.recv() {
                    worker.handle(req);
                }
            }))
        })
        .collect::<Result<Vec<_>, nmsleak_core::Error>>()?;
    Ok(ServiceHandle { server, addr, workers })
}

struct Worker {
    detector: Arc<SyntheticDetector>,
    clock: Clock,
    jitter_clock: Clock,
    jitter: NoiseSpec,
    max_body: usize,
    next_id: Arc<AtomicU64>,
}

fn header<'a>(req: &'a Request, name: &str) -> Option<&'a str> {
    req.headers()
        .iter()
        .find(|h| h.field.as_str().as_str().eq_ignore_ascii_case(name))
        .map(|h| h.value.as_str())
}

fn json_response(status: u16, body: String) -> Response<std::io::Cursor<Vec<u8>>> {
    Response::from_string(body)
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").expect("static header"))
}

impl Worker {
    fn handle(&mut self, mut req: Request) {
        let arrival = Instant::now();
        let id = header(&req, wire::REQUEST_ID_HEADER)
            .map(str::to_owned)
            .unwrap_or_else(|| self.next_id.fetch_add(1, Ordering::Relaxed).to_string());
        let (status, body) = match self.process(&mut req, arrival, &id) {
            Ok(resp) => (200, serde_json::to_string(&resp).expect("response serializes")),
            Err(r) => (r.status, serde_json::to_string(&r.body).expect("error serializes")),
        };
        let _ = req.respond(json_response(status, body));
    }

    fn process(&mut self, req: &mut Request, arrival: Instant, id: &str) -> Result<DetectResponse, Rejection> {
        if req.url().split('?').next() != Some("/detect") {
            return Err(Rejection::new(404, "not_found", format!("no route for {}", req.url())));
        }
        if *req.method() != Method::Post {
            return Err(Rejection::new(405, "method_not_allowed", "use POST"));
        }
        let declared = self.declared_dims(req)?;
        let mut body = Vec::with_capacity(req.body_length().unwrap_or(0).min(self.max_body));
        req.as_reader()
            .take(self.max_body as u64 + 1)
            .read_to_end(&mut body)
            .map_err(|e| Rejection::new(400, "malformed_payload", e.to_string()))?;
        if body.len() > self.max_body {
            return Err(Rejection::new(
                413,
                "payload_too_large",
                format!("limit is {} bytes", self.max_body),
            ));
        }
        let img = wire::decode_payload(&body, declared)?;
        let (kept, obs) = self
            .detector
            .detect(&img, &mut self.clock)
            .map_err(|e| Rejection::new(500, "detector_failure", e.to_string()))?;
        let jitter = self.jitter_clock.sample(&self.jitter).max(0.0);
        match self.clock.mode() {
            ClockMode::Modeled => {
                let hold = Duration::from_secs_f64((obs.total_time + jitter).max(0.0));
                clock::wait_until(arrival + hold);
            }
            _ => clock::busy_wait(jitter),
        }
        Ok(DetectResponse {
            detections: kept.iter().map(DecisionBox::from).collect(),
            id: id.to_owned(),
        })
    }

    fn declared_dims(&self, req: &Request) -> Result<Option<(usize, usize)>, Rejection> {
        let parse = |name: &str| {
            header(req, name)
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Rejection::new(400, "bad_header", format!("{name}: {v:?} is not an integer")))
                })
                .transpose()
        };
        match (parse(wire::HEIGHT_HEADER)?, parse(wire::WIDTH_HEADER)?) {
            (Some(h), Some(w)) => Ok(Some((h, w))),
            (None, None) => Ok(None),
            _ => Err(Rejection::new(
                400,
                "bad_header",
                "declare both height and width or neither",
            )),
        }
    }
}
