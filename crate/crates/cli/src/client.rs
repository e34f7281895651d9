//! Blocking HTTP client for the `/v1` API and the on-disk session file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use reqwest::blocking::{multipart, Client, RequestBuilder, Response};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use careledger_core::crypto::KeyPair;
use careledger_core::node::now_ms;
use careledger_service::keyfile;

use crate::CliError;

/// Saved next to the keyfile after `login`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedSession {
    pub server: String,
    pub user_id: String,
    pub session_token: String,
    pub expires_at_ms: u64,
}

pub fn session_path(keyfile: &Path) -> PathBuf {
    let mut p = keyfile.as_os_str().to_owned();
    p.push(".session");
    PathBuf::from(p)
}

/// Writes `bytes` to `path`, replacing it, readable by the owner only.
pub fn write_private(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut opts = fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub struct Api {
    http: Client,
    base: String,
    token: Option<String>,
}

impl Api {
    pub fn new(server: &str) -> Result<Api, CliError> {
        let http = Client::builder().timeout(std::time::Duration::from_secs(300)).build().map_err(|e| CliError::Http(e.to_string()))?;
        Ok(Api { http, base: server.trim_end_matches('/').to_string(), token: None })
    }

    /// Uses the session saved by `login` for `keyfile`.
    pub fn authed(server: &str, keyfile: &Path) -> Result<Api, CliError> {
        let path = session_path(keyfile);
        let text = fs::read_to_string(&path).map_err(|_| CliError::NotLoggedIn(keyfile.display().to_string()))?;
        let s: SavedSession = serde_json::from_str(&text).map_err(|_| CliError::NotLoggedIn(keyfile.display().to_string()))?;
        if s.expires_at_ms <= now_ms() {
            return Err(CliError::NotLoggedIn(keyfile.display().to_string()));
        }
        let mut api = Api::new(server)?;
        api.token = Some(s.session_token);
        Ok(api)
    }

    fn url(&self, path: &str) -> String {
        format!("{}/v1{path}", self.base)
    }

    fn send(&self, req: RequestBuilder) -> Result<Response, CliError> {
        let req = match &self.token {
            Some(t) => req.bearer_auth(t),
            None => req,
        };
        let resp = req.send().map_err(|e| CliError::Http(e.to_string()))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let text = resp.text().unwrap_or_default();
        let body = serde_json::from_str(&text).unwrap_or_else(|_| json!({"error": "http", "message": text}));
        Err(CliError::Api { status, body })
    }

    fn json_of(resp: Response) -> Result<Value, CliError> {
        resp.json().map_err(|e| CliError::Http(e.to_string()))
    }

    pub fn get(&self, path: &str) -> Result<Value, CliError> {
        Api::json_of(self.send(self.http.get(self.url(path)))?)
    }

    pub fn get_bytes(&self, path: &str) -> Result<Vec<u8>, CliError> {
        let resp = self.send(self.http.get(self.url(path)))?;
        resp.bytes().map(|b| b.to_vec()).map_err(|e| CliError::Http(e.to_string()))
    }

    pub fn post(&self, path: &str, body: Option<Value>) -> Result<Value, CliError> {
        let req = self.http.post(self.url(path));
        let req = match body {
            Some(b) => req.json(&b),
            None => req,
        };
        let resp = self.send(req)?;
        if resp.status() == reqwest::StatusCode::NO_CONTENT {
            return Ok(Value::Null);
        }
        Api::json_of(resp)
    }

    pub fn post_bytes(&self, path: &str, bytes: Vec<u8>) -> Result<Value, CliError> {
        Api::json_of(self.send(self.http.post(self.url(path)).header("content-type", "text/plain").body(bytes))?)
    }

    pub fn upload(&self, kind: &str, owner: Option<&str>, bytes: Vec<u8>) -> Result<Value, CliError> {
        let mut form = multipart::Form::new().text("kind", kind.to_string());
        if let Some(o) = owner {
            form = form.text("owner", o.to_string());
        }
        form = form.part("bytes", multipart::Part::bytes(bytes));
        Api::json_of(self.send(self.http.post(self.url("/files")).multipart(form))?)
    }

    /// Challenge–response login with the keys in `keyfile`; saves the session.
    pub fn login(&self, keyfile_path: &Path) -> Result<SavedSession, CliError> {
        let keys: KeyPair = keyfile::read(keyfile_path).map_err(|e| CliError::Io(e.to_string()))?;
        let challenge = self.post("/login/challenge", Some(json!({"user_id": keys.user_id})))?;
        let nonce = challenge["nonce"].as_str().ok_or_else(|| CliError::Http("challenge without nonce".into()))?.to_string();
        let nonce_bytes = hex::decode(&nonce).map_err(|_| CliError::Http("malformed nonce".into()))?;
        let signature = keys.sign(&nonce_bytes);
        let info = self.post("/login/respond", Some(json!({"user_id": keys.user_id, "nonce": nonce, "signature": signature, "keys": keys})))?;
        let saved = SavedSession {
            server: self.base.clone(),
            user_id: keys.user_id.clone(),
            session_token: info["session_token"].as_str().unwrap_or_default().to_string(),
            expires_at_ms: info["expires_at_ms"].as_u64().unwrap_or(0),
        };
        let text = serde_json::to_vec(&saved).map_err(|e| CliError::Io(e.to_string()))?;
        write_private(&session_path(keyfile_path), &text)?;
        Ok(saved)
    }
}
