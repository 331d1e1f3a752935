//! In-process stand-in for a Docker daemon's HTTP API, enough for
//! [`DockerRuntime`](super::DockerRuntime) to run against. Every request is
//! recorded for inspection.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;

use serde_json::{json, Value};
use tiny_http::{Header, Method, Response, Server};

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub method: String,
    /// Path and query, including the API version prefix.
    pub url: String,
    pub body: Option<Value>,
}

#[derive(Debug, Clone)]
struct StubContainer {
    id: String,
    name: String,
    labels: BTreeMap<String, String>,
    status: &'static str,
    exit_code: i64,
}

#[derive(Debug, Default)]
struct StubState {
    requests: Vec<RecordedRequest>,
    containers: Vec<StubContainer>,
    networks: BTreeMap<String, String>,
    images: Vec<String>,
    next_id: u64,
}

pub struct StubDaemon {
    server: Arc<Server>,
    state: Arc<Mutex<StubState>>,
    worker: Option<JoinHandle<()>>,
    addr: String,
}

fn lock(state: &Mutex<StubState>) -> MutexGuard<'_, StubState> {
    state.lock().unwrap_or_else(|e| e.into_inner())
}

fn reply(status: u16, body: Value) -> Response<std::io::Cursor<Vec<u8>>> {
    let bytes = if body.is_null() { Vec::new() } else { body.to_string().into_bytes() };
    Response::from_data(bytes)
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").expect("static header"))
}

fn not_found(what: &str) -> (u16, Value) {
    (404, json!({ "message": format!("No such {what}") }))
}

impl StubDaemon {
    /// Listens on an ephemeral localhost port. `images` are the images the
    /// daemon pretends to have.
    pub fn start(images: &[&str]) -> Self {
        let server = Arc::new(Server::http("127.0.0.1:0").expect("bind stub daemon"));
        let addr = server.server_addr().to_ip().expect("tcp listener").to_string();
        let state = Arc::new(Mutex::new(StubState {
            images: images.iter().map(|s| s.to_string()).collect(),
            ..StubState::default()
        }));
        let worker = {
            let server = Arc::clone(&server);
            let state = Arc::clone(&state);
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let mut raw = Vec::new();
                    let _ = req.as_reader().read_to_end(&mut raw);
                    let body = serde_json::from_slice::<Value>(&raw).ok();
                    let method = req.method().to_string();
                    let url = req.url().to_string();
                    let (status, out) = handle(&state, req.method(), &url, body.as_ref());
                    lock(&state).requests.push(RecordedRequest { method, url, body });
                    let _ = req.respond(reply(status, out));
                }
            })
        };
        StubDaemon {
            server,
            state,
            worker: Some(worker),
            addr,
        }
    }

    /// `tcp://127.0.0.1:<port>`
    pub fn endpoint(&self) -> String {
        format!("tcp://{}", self.addr)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        lock(&self.state).requests.clone()
    }

    /// Marks a container as exited with `code`, as if its process ended.
    pub fn exit(&self, name: &str, code: i64) {
        let mut st = lock(&self.state);
        if let Some(c) = st.containers.iter_mut().find(|c| c.name == name) {
            c.status = "exited";
            c.exit_code = code;
        }
    }

    pub fn container_names(&self) -> Vec<String> {
        lock(&self.state).containers.iter().map(|c| c.name.clone()).collect()
    }

    pub fn network_names(&self) -> Vec<String> {
        lock(&self.state).networks.keys().cloned().collect()
    }
}

impl Drop for StubDaemon {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn split_url(url: &str) -> (Vec<String>, BTreeMap<String, String>) {
    let (path, query) = url.split_once('?').unwrap_or((url, ""));
    let path = path.strip_prefix(super::API_PREFIX).unwrap_or(path);
    let segs = path
        .split('/')
        .filter(|s| !s.is_empty())
        .map(|s| url::form_urlencoded::parse(s.as_bytes()).map(|(k, _)| k.into_owned()).collect::<String>())
        .collect();
    let query = url::form_urlencoded::parse(query.as_bytes()).into_owned().collect();
    (segs, query)
}

fn label_filter(query: &BTreeMap<String, String>) -> Vec<String> {
    query
        .get("filters")
        .and_then(|f| serde_json::from_str::<Value>(f).ok())
        .and_then(|v| v.get("label").cloned())
        .and_then(|v| serde_json::from_value::<Vec<String>>(v).ok())
        .unwrap_or_default()
}

fn handle(state: &Mutex<StubState>, method: &Method, url: &str, body: Option<&Value>) -> (u16, Value) {
    let (segs, query) = split_url(url);
    let segs: Vec<&str> = segs.iter().map(String::as_str).collect();
    let mut st = lock(state);
    match (method, segs.as_slice()) {
        (Method::Get, ["networks", name]) => match st.networks.get(*name) {
            Some(id) => (200, json!({ "Id": id, "Name": name })),
            None => not_found("network"),
        },
        (Method::Get, ["networks"]) => {
            let list: Vec<Value> = st.networks.iter().map(|(n, id)| json!({ "Name": n, "Id": id })).collect();
            (200, Value::Array(list))
        }
        (Method::Post, ["networks", "create"]) => {
            let Some(name) = body.and_then(|b| b.get("Name")).and_then(Value::as_str) else {
                return (400, json!({ "message": "missing Name" }));
            };
            if st.networks.contains_key(name) {
                return (409, json!({ "message": "network exists" }));
            }
            st.next_id += 1;
            let id = format!("net{:06}", st.next_id);
            st.networks.insert(name.to_string(), id.clone());
            (201, json!({ "Id": id }))
        }
        (Method::Delete, ["networks", name]) => match st.networks.remove(*name) {
            Some(_) => (204, Value::Null),
            None => not_found("network"),
        },
        (Method::Post, ["containers", "create"]) => {
            let name = query.get("name").cloned().unwrap_or_default();
            let image = body.and_then(|b| b.get("Image")).and_then(Value::as_str).unwrap_or_default();
            if !st.images.iter().any(|i| i == image) {
                return (404, json!({ "message": format!("No such image: {image}") }));
            }
            if st.containers.iter().any(|c| c.name == name) {
                return (409, json!({ "message": format!("Conflict. The container name \"/{name}\" is already in use") }));
            }
            let labels = body
                .and_then(|b| b.get("Labels").cloned())
                .and_then(|l| serde_json::from_value(l).ok())
                .unwrap_or_default();
            st.next_id += 1;
            let id = format!("{:064x}", st.next_id);
            st.containers.push(StubContainer {
                id: id.clone(),
                name,
                labels,
                status: "created",
                exit_code: 0,
            });
            (201, json!({ "Id": id, "Warnings": [] }))
        }
        (Method::Get, ["containers", "json"]) => {
            let wanted = label_filter(&query);
            let list: Vec<Value> = st
                .containers
                .iter()
                .filter(|c| {
                    wanted.iter().all(|w| match w.split_once('=') {
                        Some((k, v)) => c.labels.get(k).is_some_and(|l| l == v),
                        None => c.labels.contains_key(w),
                    })
                })
                .map(|c| json!({ "Id": c.id, "Names": [format!("/{}", c.name)], "Labels": c.labels, "State": c.status }))
                .collect();
            (200, Value::Array(list))
        }
        (_, ["containers", id, rest @ ..]) => {
            let Some(idx) = st.containers.iter().position(|c| c.id == *id || c.name == *id) else {
                return not_found("container");
            };
            let c = &mut st.containers[idx];
            match (method, rest) {
                (Method::Post, ["start"]) => match c.status {
                    "running" => (304, Value::Null),
                    _ => {
                        c.status = "running";
                        (204, Value::Null)
                    }
                },
                (Method::Post, ["stop"]) => match c.status {
                    "running" => {
                        c.status = "exited";
                        c.exit_code = 137;
                        (204, Value::Null)
                    }
                    _ => (304, Value::Null),
                },
                (Method::Get, ["json"]) => (
                    200,
                    json!({
                        "Id": c.id,
                        "Name": format!("/{}", c.name),
                        "State": {
                            "Status": c.status,
                            "ExitCode": c.exit_code,
                            "StartedAt": "2024-01-01T00:00:00Z",
                        }
                    }),
                ),
                (Method::Delete, []) => {
                    if c.status == "running" && query.get("force").map(String::as_str) != Some("true") {
                        return (409, json!({ "message": "cannot remove a running container" }));
                    }
                    st.containers.remove(idx);
                    (204, Value::Null)
                }
                _ => (404, json!({ "message": "page not found" })),
            }
        }
        _ => (404, json!({ "message": "page not found" })),
    }
}
