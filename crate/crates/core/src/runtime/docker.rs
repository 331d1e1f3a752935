//! Docker Engine API client (`/v1.41`).

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

pub mod stub;

use super::http::{self, Endpoint};
use super::{Clock, ContainerConfig, ContainerHandle, ContainerRuntime, ContainerStatus, RuntimeError, SystemClock, Timestamp};

pub const API_PREFIX: &str = "/v1.41";
pub const DOCKER_HOST_ENV: &str = "ARENA_DOCKER_HOST";
pub const DEFAULT_DOCKER_HOST: &str = "unix:///var/run/docker.sock";

#[derive(Debug, Clone)]
pub struct DockerRuntime {
    endpoint: Endpoint,
    timeout: Duration,
}

#[derive(Deserialize)]
struct ErrorBody {
    message: String,
}

fn message(body: &[u8]) -> String {
    serde_json::from_slice::<ErrorBody>(body)
        .map(|e| e.message)
        .unwrap_or_else(|_| String::from_utf8_lossy(body).trim().to_string())
}

fn api_error(status: u16, body: &[u8]) -> RuntimeError {
    RuntimeError::Api {
        status,
        message: message(body),
    }
}

fn encode(s: &str) -> String {
    url::form_urlencoded::byte_serialize(s.as_bytes()).collect()
}

/// JSON body for `POST /containers/create`.
pub fn create_body(cfg: &ContainerConfig) -> Value {
    let binds: Vec<String> = cfg.mounts.iter().map(|m| m.bind_spec()).collect();
    let mut ports = serde_json::Map::new();
    for (ctr, host) in &cfg.port_bindings {
        let entry = ports
            .entry(format!("{ctr}/tcp"))
            .or_insert_with(|| Value::Array(Vec::new()));
        if let Value::Array(list) = entry {
            list.push(json!({ "HostPort": host.to_string() }));
        }
    }
    json!({
        "Image": cfg.image.to_string(),
        "Env": cfg.env,
        "Labels": cfg.labels,
        "HostConfig": {
            "Binds": binds,
            "NanoCpus": cfg.cpus.nanos(),
            "Memory": cfg.memory_bytes(),
            "NetworkMode": cfg.network,
            "PortBindings": ports,
        }
    })
}

fn parse_started_at(s: &str) -> Timestamp {
    chrono::DateTime::parse_from_rfc3339(s)
        .ok()
        .and_then(|t| u64::try_from(t.timestamp_millis()).ok())
        .map(Timestamp)
        .unwrap_or_default()
}

/// Maps a `GET /containers/<id>/json` body to a status.
pub fn parse_inspect(body: &[u8]) -> Result<ContainerStatus, RuntimeError> {
    #[derive(Deserialize)]
    #[serde(rename_all = "PascalCase")]
    struct State {
        status: String,
        #[serde(default)]
        exit_code: i64,
        #[serde(default)]
        started_at: String,
    }
    #[derive(Deserialize)]
    #[serde(rename_all = "PascalCase")]
    struct Inspect {
        state: State,
    }
    let info: Inspect = serde_json::from_slice(body).map_err(|e| RuntimeError::Api {
        status: 200,
        message: format!("unexpected inspect body: {e}"),
    })?;
    Ok(match info.state.status.as_str() {
        "created" => ContainerStatus::Created,
        "running" | "paused" | "restarting" => ContainerStatus::Running {
            since: parse_started_at(&info.state.started_at),
        },
        _ => ContainerStatus::Exited {
            code: info.state.exit_code,
        },
    })
}

impl DockerRuntime {
    pub fn new(endpoint: &str) -> Result<Self, RuntimeError> {
        Ok(DockerRuntime {
            endpoint: Endpoint::parse(endpoint).map_err(RuntimeError::Unavailable)?,
            timeout: Duration::from_secs(60),
        })
    }

    /// Uses `ARENA_DOCKER_HOST`, falling back to the local daemon socket.
    pub fn from_env() -> Result<Self, RuntimeError> {
        let host = std::env::var(DOCKER_HOST_ENV).unwrap_or_else(|_| DEFAULT_DOCKER_HOST.to_string());
        Self::new(&host)
    }

    fn call(&self, method: &str, path: &str, body: Option<&Value>) -> Result<http::Response, RuntimeError> {
        let bytes = body.map(|b| serde_json::to_vec(b).expect("json value serializes"));
        let full = format!("{API_PREFIX}{path}");
        log::trace!("docker {method} {full}");
        http::request(&self.endpoint, method, &full, bytes.as_deref(), self.timeout)
            .map_err(|e| RuntimeError::Unavailable(format!("{method} {full}: {e}")))
    }

    fn network_id(&self, name: &str) -> Result<Option<String>, RuntimeError> {
        let resp = self.call("GET", &format!("/networks/{}", encode(name)), None)?;
        match resp.status {
            200 => {
                let v: Value = serde_json::from_slice(&resp.body).map_err(|e| api_error(200, e.to_string().as_bytes()))?;
                Ok(v.get("Id").and_then(Value::as_str).map(str::to_string))
            }
            404 => Ok(None),
            s => Err(api_error(s, &resp.body)),
        }
    }
}

impl ContainerRuntime for DockerRuntime {
    fn ensure_network(&self, name: &str) -> Result<String, RuntimeError> {
        if let Some(id) = self.network_id(name)? {
            return Ok(id);
        }
        let body = json!({ "Name": name, "Driver": "bridge" });
        let resp = self.call("POST", "/networks/create", Some(&body))?;
        match resp.status {
            200 | 201 => {
                let v: Value = serde_json::from_slice(&resp.body).unwrap_or(Value::Null);
                v.get("Id")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| api_error(resp.status, b"network create returned no Id"))
            }
            409 => self
                .network_id(name)?
                .ok_or_else(|| api_error(409, &resp.body)),
            s => Err(api_error(s, &resp.body)),
        }
    }

    fn remove_network(&self, name: &str) -> Result<(), RuntimeError> {
        let resp = self.call("DELETE", &format!("/networks/{}", encode(name)), None)?;
        match resp.status {
            200 | 204 | 404 => Ok(()),
            s => Err(api_error(s, &resp.body)),
        }
    }

    fn list_networks(&self, prefix: &str) -> Result<Vec<String>, RuntimeError> {
        let filters = json!({ "name": [prefix] }).to_string();
        let resp = self.call("GET", &format!("/networks?filters={}", encode(&filters)), None)?;
        if resp.status != 200 {
            return Err(api_error(resp.status, &resp.body));
        }
        let list: Vec<Value> = serde_json::from_slice(&resp.body).map_err(|e| api_error(200, e.to_string().as_bytes()))?;
        let mut names: Vec<String> = list
            .iter()
            .filter_map(|n| n.get("Name").and_then(Value::as_str))
            .filter(|n| n.starts_with(prefix))
            .map(str::to_string)
            .collect();
        names.sort();
        Ok(names)
    }

    fn create(&self, cfg: &ContainerConfig) -> Result<ContainerHandle, RuntimeError> {
        cfg.validate()?;
        let body = create_body(cfg);
        let resp = self.call("POST", &format!("/containers/create?name={}", encode(&cfg.name)), Some(&body))?;
        match resp.status {
            200 | 201 => {
                let v: Value = serde_json::from_slice(&resp.body).unwrap_or(Value::Null);
                let id = v
                    .get("Id")
                    .and_then(Value::as_str)
                    .ok_or_else(|| api_error(resp.status, b"create returned no Id"))?;
                Ok(ContainerHandle {
                    id: id.to_string(),
                    name: cfg.name.clone(),
                })
            }
            404 => Err(RuntimeError::ImageMissing(format!("{}: {}", cfg.image, message(&resp.body)))),
            409 => Err(RuntimeError::NameConflict(cfg.name.clone())),
            s => Err(api_error(s, &resp.body)),
        }
    }

    fn start(&self, h: &ContainerHandle) -> Result<(), RuntimeError> {
        let resp = self.call("POST", &format!("/containers/{}/start", h.id), None)?;
        match resp.status {
            204 | 200 => Ok(()),
            304 => Err(RuntimeError::AlreadyRunning(h.name.clone())),
            404 => Err(RuntimeError::NotFound(h.name.clone())),
            s => Err(api_error(s, &resp.body)),
        }
    }

    fn stop(&self, h: &ContainerHandle, grace_s: u64) -> Result<(), RuntimeError> {
        let resp = self.call("POST", &format!("/containers/{}/stop?t={grace_s}", h.id), None)?;
        match resp.status {
            204 | 200 | 304 => Ok(()),
            404 => Err(RuntimeError::NotFound(h.name.clone())),
            s => Err(api_error(s, &resp.body)),
        }
    }

    fn remove(&self, h: &ContainerHandle) -> Result<(), RuntimeError> {
        let resp = self.call("DELETE", &format!("/containers/{}?force=false", h.id), None)?;
        match resp.status {
            204 | 200 => Ok(()),
            404 => Err(RuntimeError::NotFound(h.name.clone())),
            409 => Err(RuntimeError::StillRunning(h.name.clone())),
            s => Err(api_error(s, &resp.body)),
        }
    }

    fn inspect(&self, h: &ContainerHandle) -> Result<ContainerStatus, RuntimeError> {
        let resp = self.call("GET", &format!("/containers/{}/json", h.id), None)?;
        match resp.status {
            200 => parse_inspect(&resp.body),
            404 => Ok(ContainerStatus::NotFound),
            s => Err(api_error(s, &resp.body)),
        }
    }

    fn list_by_label(&self, key: &str, value: Option<&str>) -> Result<Vec<ContainerHandle>, RuntimeError> {
        let selector = match value {
            Some(v) => format!("{key}={v}"),
            None => key.to_string(),
        };
        let filters = json!({ "label": [selector] }).to_string();
        let resp = self.call("GET", &format!("/containers/json?all=true&filters={}", encode(&filters)), None)?;
        if resp.status != 200 {
            return Err(api_error(resp.status, &resp.body));
        }
        #[derive(Deserialize)]
        #[serde(rename_all = "PascalCase")]
        struct Summary {
            id: String,
            #[serde(default)]
            names: Vec<String>,
            #[serde(default)]
            labels: BTreeMap<String, String>,
        }
        let list: Vec<Summary> =
            serde_json::from_slice(&resp.body).map_err(|e| api_error(200, e.to_string().as_bytes()))?;
        Ok(list
            .into_iter()
            .filter(|s| match value {
                Some(v) => s.labels.get(key).is_none_or(|l| l == v),
                None => true,
            })
            .map(|s| ContainerHandle {
                name: s
                    .names
                    .first()
                    .map(|n| n.trim_start_matches('/').to_string())
                    .unwrap_or_else(|| s.id.clone()),
                id: s.id,
            })
            .collect())
    }

    fn clock(&self) -> Arc<dyn Clock> {
        Arc::new(SystemClock)
    }
}
