//! In-process registry server speaking the `/bots` protocol, with request
//! counters and fault switches for tests and offline demos.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::json;
use tiny_http::{Header, Response, Server};

use super::sha256_hex;
use crate::config::{BotType, Race};

#[derive(Debug, Clone)]
pub struct FakeBot {
    pub name: String,
    pub race: Race,
    pub bot_type: BotType,
    pub bytes: Vec<u8>,
}

impl FakeBot {
    pub fn new(name: &str, race: Race, bot_type: BotType, bytes: &[u8]) -> Self {
        FakeBot {
            name: name.into(),
            race,
            bot_type,
            bytes: bytes.to_vec(),
        }
    }
}

#[derive(Default)]
struct State {
    bots: Vec<FakeBot>,
    corrupted: HashMap<String, bool>,
    listing_override: Option<String>,
}

pub struct FakeRegistry {
    server: Arc<Server>,
    port: u16,
    state: Arc<Mutex<State>>,
    total_hits: Arc<AtomicUsize>,
    binary_hits: Arc<AtomicUsize>,
    worker: Option<JoinHandle<()>>,
}

impl FakeRegistry {
    /// Binds an ephemeral localhost port and serves until dropped.
    pub fn start(bots: Vec<FakeBot>) -> Self {
        let server = Arc::new(Server::http("127.0.0.1:0").expect("bind fake registry"));
        let port = server.server_addr().to_ip().expect("tcp listener").port();
        let state = Arc::new(Mutex::new(State {
            bots,
            ..State::default()
        }));
        let total_hits = Arc::new(AtomicUsize::new(0));
        let binary_hits = Arc::new(AtomicUsize::new(0));
        let worker = {
            let server = server.clone();
            let state = state.clone();
            let total_hits = total_hits.clone();
            let binary_hits = binary_hits.clone();
            std::thread::spawn(move || {
                for request in server.incoming_requests() {
                    total_hits.fetch_add(1, Ordering::SeqCst);
                    let url = request.url().to_string();
                    let response = {
                        let st = state.lock().unwrap();
                        respond(&st, port, &url, &binary_hits)
                    };
                    let _ = request.respond(response);
                }
            })
        };
        FakeRegistry {
            server,
            port,
            state,
            total_hits,
            binary_hits,
            worker: Some(worker),
        }
    }

    pub fn url(&self) -> String {
        format!("http://127.0.0.1:{}", self.port)
    }

    /// Requests of any kind served so far.
    pub fn hits(&self) -> usize {
        self.total_hits.load(Ordering::SeqCst)
    }

    /// Binary downloads served so far.
    pub fn binary_hits(&self) -> usize {
        self.binary_hits.load(Ordering::SeqCst)
    }

    /// Serve flipped bytes for `name` while keeping the advertised digest.
    pub fn corrupt(&self, name: &str, on: bool) {
        self.state.lock().unwrap().corrupted.insert(name.to_string(), on);
    }

    /// Replace the `/bots` body verbatim.
    pub fn set_listing_override(&self, body: Option<String>) {
        self.state.lock().unwrap().listing_override = body;
    }

    pub fn add_bot(&self, bot: FakeBot) {
        let mut st = self.state.lock().unwrap();
        st.bots.retain(|b| b.name != bot.name);
        st.bots.push(bot);
    }
}

impl Drop for FakeRegistry {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn json_header() -> Header {
    Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).unwrap()
}

fn respond(st: &State, port: u16, url: &str, binary_hits: &AtomicUsize) -> Response<std::io::Cursor<Vec<u8>>> {
    if url == "/bots" {
        let body = match &st.listing_override {
            Some(b) => b.clone(),
            None => {
                let list: Vec<_> = st
                    .bots
                    .iter()
                    .map(|b| {
                        json!({
                            "name": b.name,
                            "race": b.race.as_str(),
                            "botType": b.bot_type.extension(),
                            "binaryUrl": format!("http://127.0.0.1:{port}/bin/{}", encode(&b.name)),
                            "sha256": sha256_hex(&b.bytes),
                        })
                    })
                    .collect();
                serde_json::to_string(&list).unwrap()
            }
        };
        return Response::from_string(body).with_header(json_header());
    }
    if let Some(name) = url.strip_prefix("/bin/") {
        let name = decode(name);
        if let Some(bot) = st.bots.iter().find(|b| b.name == name) {
            binary_hits.fetch_add(1, Ordering::SeqCst);
            let mut bytes = bot.bytes.clone();
            if st.corrupted.get(&name).copied().unwrap_or(false) {
                bytes.iter_mut().for_each(|b| *b ^= 0xff);
                bytes.push(0);
            }
            let len = bytes.len();
            return Response::from_data(bytes).with_chunked_threshold(len + 1);
        }
    }
    Response::from_string("not found").with_status_code(404)
}

fn encode(name: &str) -> String {
    url::form_urlencoded::byte_serialize(name.as_bytes())
        .collect::<String>()
        .replace('+', "%20")
}

fn decode(s: &str) -> String {
    url::form_urlencoded::parse(format!("x={s}").as_bytes())
        .next()
        .map(|(_, v)| v.into_owned())
        .unwrap_or_default()
}
