//! A local HTTP server speaking the provider protocol with scripted replies.
//!
//! Each request is served on its own thread so tests can observe how many
//! requests a client keeps in flight.

use std::collections::VecDeque;
use std::io;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use tiny_http::{Header, Response, Server};

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedReply {
    pub status: u16,
    pub body: String,
    pub delay: Duration,
}

impl ScriptedReply {
    pub fn json(value: serde_json::Value) -> Self {
        ScriptedReply { status: 200, body: value.to_string(), delay: Duration::ZERO }
    }

    pub fn status(status: u16) -> Self {
        ScriptedReply { status, body: String::new(), delay: Duration::ZERO }
    }

    pub fn raw(body: &str) -> Self {
        ScriptedReply { status: 200, body: body.to_string(), delay: Duration::ZERO }
    }

    pub fn delayed(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

/// A request as the server received it.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub path: String,
    pub body: String,
    pub authorization: Option<String>,
}

type Handler = dyn Fn(&RecordedRequest) -> ScriptedReply + Send + Sync;

#[derive(Default)]
struct Stats {
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    requests: Mutex<Vec<RecordedRequest>>,
}

pub struct StubServer {
    url: String,
    stop: Arc<AtomicBool>,
    stats: Arc<Stats>,
    accept: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Starts on an ephemeral localhost port; every request goes to `handler`.
    pub fn start(handler: impl Fn(&RecordedRequest) -> ScriptedReply + Send + Sync + 'static) -> io::Result<Self> {
        let server = Server::http("127.0.0.1:0").map_err(io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("server not bound to an ip address"))?;
        let stop = Arc::new(AtomicBool::new(false));
        let stats = Arc::new(Stats::default());
        let handler: Arc<Handler> = Arc::new(handler);
        let accept = {
            let (stop, stats) = (stop.clone(), stats.clone());
            thread::spawn(move || {
                let mut workers = Vec::new();
                while !stop.load(Ordering::SeqCst) {
                    let Ok(Some(mut request)) = server.recv_timeout(Duration::from_millis(20)) else {
                        continue;
                    };
                    let (stats, handler) = (stats.clone(), handler.clone());
                    workers.push(thread::spawn(move || {
                        let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                        stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
                        let mut body = String::new();
                        let _ = request.as_reader().read_to_string(&mut body);
                        let authorization = request
                            .headers()
                            .iter()
                            .find(|h| h.field.equiv("Authorization"))
                            .map(|h| h.value.to_string());
                        let recorded = RecordedRequest { path: request.url().to_string(), body, authorization };
                        stats.requests.lock().expect("stats lock").push(recorded.clone());
                        let reply = handler(&recorded);
                        thread::sleep(reply.delay);
                        let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
                        let response =
                            Response::from_string(reply.body).with_status_code(reply.status).with_header(header);
                        stats.in_flight.fetch_sub(1, Ordering::SeqCst);
                        let _ = request.respond(response);
                    }));
                    workers.retain(|w: &JoinHandle<()>| !w.is_finished());
                }
                for w in workers {
                    let _ = w.join();
                }
            })
        };
        Ok(StubServer { url: format!("http://{addr}"), stop, stats, accept: Some(accept) })
    }

    /// Serves `replies` in order, then `fallback` for every later request.
    pub fn scripted(replies: Vec<ScriptedReply>, fallback: ScriptedReply) -> io::Result<Self> {
        let queue = Mutex::new(VecDeque::from(replies));
        Self::start(move |_| queue.lock().expect("queue lock").pop_front().unwrap_or_else(|| fallback.clone()))
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn request_count(&self) -> usize {
        self.stats.requests.lock().expect("stats lock").len()
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.stats.requests.lock().expect("stats lock").clone()
    }

    /// Highest number of requests observed in flight at once.
    pub fn max_concurrency(&self) -> usize {
        self.stats.max_in_flight.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(handle) = self.accept.take() {
            let _ = handle.join();
        }
    }
}
