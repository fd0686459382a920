//! In-process stand-in for the guidance service, for tests and offline demos.
//!
//! The server speaks the same HTTP protocol as the real service. Two scorers
//! are available: [`Scorer::Stub`] returns zero loss and gradient, and
//! [`Scorer::LinearCosine`] embeds images with a fixed pseudo-random linear
//! map, so its loss is a true negative cosine similarity with an exact
//! gradient.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};
use tiny_http::{Header, Method, Response, Server};

use super::remote::EMBEDDING_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scorer {
    Stub,
    LinearCosine { seed: u64 },
}

/// Misbehaviour to inject into upcoming responses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    Status(u16),
    NanLoss,
    Malformed,
}

struct Shared {
    scorer: Scorer,
    faults: Mutex<VecDeque<Fault>>,
    requests: AtomicUsize,
}

pub struct FixtureServer {
    server: Arc<Server>,
    shared: Arc<Shared>,
    endpoint: String,
    worker: Option<JoinHandle<()>>,
}

impl FixtureServer {
    /// Binds an ephemeral localhost port and serves until dropped.
    pub fn start(scorer: Scorer) -> std::io::Result<Self> {
        let server = Server::http("127.0.0.1:0").map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("fixture bound a non-IP socket"))?;
        let server = Arc::new(server);
        let shared = Arc::new(Shared {
            scorer,
            faults: Mutex::new(VecDeque::new()),
            requests: AtomicUsize::new(0),
        });
        let worker = {
            let server = Arc::clone(&server);
            let shared = Arc::clone(&shared);
            std::thread::spawn(move || {
                for request in server.incoming_requests() {
                    handle(&shared, request);
                }
            })
        };
        Ok(Self {
            server,
            shared,
            endpoint: format!("http://{addr}"),
            worker: Some(worker),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Requests received so far, including failed ones.
    pub fn requests(&self) -> usize {
        self.shared.requests.load(Ordering::SeqCst)
    }

    /// The next `count` requests get `fault` instead of a normal answer.
    pub fn inject(&self, fault: Fault, count: usize) {
        let mut q = self.shared.faults.lock().unwrap();
        q.extend(std::iter::repeat(fault).take(count));
    }
}

impl Drop for FixtureServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn json_response(status: u16, body: String) -> Response<std::io::Cursor<Vec<u8>>> {
    Response::from_string(body)
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").unwrap())
}

fn handle(shared: &Shared, mut request: tiny_http::Request) {
    shared.requests.fetch_add(1, Ordering::SeqCst);
    let mut body = String::new();
    let _ = request.as_reader().read_to_string(&mut body);
    let fault = shared.faults.lock().unwrap().pop_front();
    let (status, text) = match fault {
        Some(Fault::Status(code)) => (code, json!({ "error": "injected failure" }).to_string()),
        Some(Fault::Malformed) => (200, "{\"loss\": ".to_string()),
        Some(Fault::NanLoss) => (200, "{\"loss\": NaN, \"grad_b64\": \"\"}".to_string()),
        None => route(shared.scorer, request.method(), request.url(), &body),
    };
    let _ = request.respond(json_response(status, text));
}

fn error(status: u16, msg: &str) -> (u16, String) {
    (status, json!({ "error": msg }).to_string())
}

fn decode_image(v: &Value) -> Result<(usize, usize, Vec<f64>), String> {
    let w = v["width"].as_u64().ok_or("missing width")? as usize;
    let h = v["height"].as_u64().ok_or("missing height")? as usize;
    let b64 = v["image_b64"].as_str().ok_or("missing image_b64")?;
    let bytes = B64.decode(b64).map_err(|e| e.to_string())?;
    if bytes.len() != w * h * 12 {
        return Err(format!("image_b64 holds {} bytes, expected {}", bytes.len(), w * h * 12));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((w, h, data))
}

fn route(scorer: Scorer, method: &Method, url: &str, body: &str) -> (u16, String) {
    if *method == Method::Get && url == "/v1/health" {
        return (200, json!({ "status": "ok" }).to_string());
    }
    if *method != Method::Post {
        return error(404, "not found");
    }
    let v: Value = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(e) => return error(400, &format!("bad JSON: {e}")),
    };
    match url {
        "/v1/guidance" => {
            let prompt = match v["prompt"].as_str() {
                Some(p) if !p.trim().is_empty() => p,
                _ => return error(400, "prompt must be a non-empty string"),
            };
            let (_, _, x) = match decode_image(&v) {
                Ok(img) => img,
                Err(e) => return error(400, &e),
            };
            let (loss, grad) = match scorer {
                Scorer::Stub => (0.0, vec![0.0; x.len()]),
                Scorer::LinearCosine { seed } => linear_cosine_score(seed, &x, prompt),
            };
            let bytes: Vec<u8> = grad.iter().flat_map(|&g| (g as f32).to_le_bytes()).collect();
            (200, json!({ "loss": loss, "grad_b64": B64.encode(bytes) }).to_string())
        }
        "/v1/embed_text" => match v["prompt"].as_str() {
            Some(p) => (200, json!({ "embedding": text_embedding(p) }).to_string()),
            None => error(400, "missing prompt"),
        },
        "/v1/embed_image" => match decode_image(&v) {
            Ok((_, _, x)) => {
                let seed = match scorer {
                    Scorer::Stub => 0,
                    Scorer::LinearCosine { seed } => seed,
                };
                let (e, _) = image_embedding(seed, &x);
                (200, json!({ "embedding": e }).to_string())
            }
            Err(e) => error(400, &e),
        },
        _ => error(404, "not found"),
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit(bits: u64) -> f64 {
    (bits >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn encoder_weight(seed: u64, row: usize, col: usize) -> f64 {
    unit(splitmix(splitmix(seed ^ ((row as u64) << 32)) ^ col as u64))
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v;
    }
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Unit-norm pseudo-random text embedding keyed by the prompt bytes.
pub fn text_embedding(prompt: &str) -> Vec<f64> {
    let key = prompt
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    normalized((0..EMBEDDING_DIM).map(|i| unit(splitmix(key ^ i as u64))).collect())
}

/// `(A·x / ‖A·x‖, A·x)` for the seeded encoder matrix `A`.
fn image_embedding(seed: u64, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let u: Vec<f64> = (0..EMBEDDING_DIM)
        .map(|i| x.iter().enumerate().map(|(j, v)| encoder_weight(seed, i, j) * v).sum())
        .collect();
    (normalized(u.clone()), u)
}

/// Loss `−cos(A·x, t(prompt))` and its exact gradient in `x`.
pub fn linear_cosine_score(seed: u64, x: &[f64], prompt: &str) -> (f64, Vec<f64>) {
    let t = text_embedding(prompt);
    let (e, u) = image_embedding(seed, x);
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let cos: f64 = e.iter().zip(&t).map(|(a, b)| a * b).sum();
    // dL/du = −(t − cos·e)/‖u‖
    let du: Vec<f64> = t.iter().zip(&e).map(|(ti, ei)| -(ti - cos * ei) / norm).collect();
    let grad = (0..x.len())
        .map(|j| du.iter().enumerate().map(|(i, d)| d * encoder_weight(seed, i, j)).sum())
        .collect();
    (-cos, grad)
}
