use std::fs;
use std::path::Path;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use careledger_core::careflow::motion::{MotionCapture, MotionSample};
use careledger_core::crypto::KeyPair;
use careledger_core::ledger::TxPayload;
use careledger_core::{canonical, Role};
use careledger_service::{boot, keyfile, router, AppState, NodeConfig, ServiceError};

struct Harness {
    dir: tempfile::TempDir,
    state: AppState,
    app: Router,
    admin: KeyPair,
    admin_token: String,
}

struct Reply {
    status: StatusCode,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }
}

fn config(dir: &Path) -> NodeConfig {
    NodeConfig { data_dir: dir.to_path_buf(), ..NodeConfig::default() }
}

async fn call(app: &Router, method: Method, uri: &str, token: Option<&str>, content_type: Option<&str>, body: Vec<u8>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    if let Some(ct) = content_type {
        req = req.header("content-type", ct);
    }
    let resp = app.clone().oneshot(req.body(Body::from(body)).unwrap()).await.unwrap();
    let status = resp.status();
    let body = to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    Reply { status, body }
}

async fn login_on(app: &Router, keys: &KeyPair) -> String {
    let c = call(app, Method::POST, "/v1/login/challenge", None, Some("application/json"), json!({"user_id": keys.user_id}).to_string().into_bytes()).await;
    assert_eq!(c.status, StatusCode::OK);
    let nonce = c.json()["nonce"].as_str().unwrap().to_string();
    let sig = keys.sign(&hex_decode(&nonce));
    let body = json!({"user_id": keys.user_id, "nonce": nonce, "signature": sig, "keys": keys});
    let r = call(app, Method::POST, "/v1/login/respond", None, Some("application/json"), body.to_string().into_bytes()).await;
    assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.body));
    r.json()["session_token"].as_str().unwrap().to_string()
}

fn hex_decode(s: &str) -> Vec<u8> {
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
}

fn multipart(kind: &str, owner: Option<&str>, bytes: &[u8]) -> (String, Vec<u8>) {
    let boundary = "careledger-test-boundary";
    let mut body = Vec::new();
    let mut field = |name: &str, value: &[u8]| {
        body.extend_from_slice(format!("--{boundary}\r\nContent-Disposition: form-data; name=\"{name}\"\r\n\r\n").as_bytes());
        body.extend_from_slice(value);
        body.extend_from_slice(b"\r\n");
    };
    field("kind", kind.as_bytes());
    if let Some(o) = owner {
        field("owner", o.as_bytes());
    }
    field("bytes", bytes);
    body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}

fn tremor(device: &str, patient: &str, amplitude: f64) -> Vec<u8> {
    MotionCapture {
        device_id: device.into(),
        patient_id: patient.into(),
        joint_names: vec!["wrist".into()],
        samples: (0..100)
            .map(|i| {
                let t = i as f64 / 50.0;
                MotionSample { t_s: t, angles_deg: vec![15.0 + amplitude * (2.0 * std::f64::consts::PI * 5.0 * t).sin()] }
            })
            .collect(),
        sample_rate_hz: 50.0,
    }
    .to_canonical()
    .unwrap()
}

impl Harness {
    async fn new() -> Harness {
        Harness::with(|_| {}).await
    }

    async fn with(tweak: impl FnOnce(&mut NodeConfig)) -> Harness {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        tweak(&mut cfg);
        let booted = boot(cfg.clone()).unwrap();
        let admin = keyfile::read(&booted.admin_keyfile.unwrap()).unwrap();
        let app = router(booted.state.clone());
        let admin_token = login_on(&app, &admin).await;
        Harness { dir, state: booted.state, app, admin, admin_token }
    }

    async fn call(&self, method: Method, uri: &str, token: Option<&str>, body: Option<Value>) -> Reply {
        let (ct, bytes) = match body {
            Some(v) => (Some("application/json"), v.to_string().into_bytes()),
            None => (None, Vec::new()),
        };
        call(&self.app, method, uri, token, ct, bytes).await
    }

    async fn login(&self, keys: &KeyPair) -> String {
        login_on(&self.app, keys).await
    }

    async fn enroll(&self, id: &str, role: Role, bound: Option<&str>) -> (KeyPair, String) {
        let r = self.call(Method::POST, "/v1/register", None, Some(json!({"user_id": id, "role": role, "bound_patient": bound}))).await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&r.body));
        let r = self.call(Method::POST, &format!("/v1/pending/{id}/approve"), Some(&self.admin_token), None).await;
        assert_eq!(r.status, StatusCode::OK);
        let keys: KeyPair = serde_json::from_slice(&r.body).unwrap();
        let token = self.login(&keys).await;
        (keys, token)
    }

    async fn upload(&self, token: &str, kind: &str, owner: Option<&str>, bytes: &[u8]) -> Reply {
        let (ct, body) = multipart(kind, owner, bytes);
        call(&self.app, Method::POST, "/v1/files", Some(token), Some(&ct), body).await
    }

    /// Payload names of the newest block.
    fn last_block(&self) -> Vec<&'static str> {
        let blocks = self.state.flow().node().blocks();
        blocks.last().unwrap().transactions.iter().map(|t| t.payload.name()).collect()
    }
}

#[tokio::test]
async fn first_start_mints_genesis_and_admin_keyfile() {
    let h = Harness::new().await;
    assert_eq!(h.state.flow().node().height(), 0);
    let key_path = h.dir.path().join("admin.key");
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        assert_eq!(fs::metadata(&key_path).unwrap().permissions().mode() & 0o777, 0o600);
    }
    assert!(canonical::is_canonical(&fs::read_to_string(&key_path).unwrap()));
    let r = h.call(Method::GET, "/v1/chain/verify", None, None).await;
    assert_eq!(r.json(), json!({"valid": true, "first_bad_height": null, "height": 0, "reason": null}));
    assert!(canonical::is_canonical(std::str::from_utf8(&r.body).unwrap()));
    assert_eq!(h.admin.user_id, "admin");
}

#[tokio::test]
async fn login_rules() {
    let h = Harness::new().await;
    let (alice, _) = h.enroll("alice", Role::Patient, None).await;
    let (bob, _) = h.enroll("bob", Role::Patient, None).await;

    // Bob's key signing Alice's nonce.
    let c = h.call(Method::POST, "/v1/login/challenge", None, Some(json!({"user_id": "alice"}))).await.json();
    let nonce = c["nonce"].as_str().unwrap();
    let forged = json!({"user_id": "alice", "nonce": nonce, "signature": bob.sign(&hex_decode(nonce)), "keys": alice});
    let r = h.call(Method::POST, "/v1/login/respond", None, Some(forged)).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);

    // A nonce answers once.
    let c = h.call(Method::POST, "/v1/login/challenge", None, Some(json!({"user_id": "alice"}))).await.json();
    let nonce = c["nonce"].as_str().unwrap();
    let good = json!({"user_id": "alice", "nonce": nonce, "signature": alice.sign(&hex_decode(nonce)), "keys": alice});
    assert_eq!(h.call(Method::POST, "/v1/login/respond", None, Some(good.clone())).await.status, StatusCode::OK);
    let again = h.call(Method::POST, "/v1/login/respond", None, Some(good)).await;
    assert_eq!(again.status, StatusCode::UNAUTHORIZED);
    assert_eq!(again.json()["message"], "login nonce was already used");

    h.call(Method::POST, "/v1/register", None, Some(json!({"user_id": "late", "role": "patient"}))).await;
    let r = h.call(Method::POST, "/v1/login/challenge", None, Some(json!({"user_id": "late"}))).await;
    assert_eq!((r.status, r.json()["message"].clone()), (StatusCode::UNAUTHORIZED, json!("User is not authenticated")));

    assert_eq!(h.call(Method::GET, "/v1/physicians", None, None).await.status, StatusCode::UNAUTHORIZED);
    assert_eq!(h.call(Method::GET, "/v1/physicians", Some("deadbeef"), None).await.status, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn sessions_expire() {
    let h = Harness::with(|c| c.session_ttl_ms = 200).await;
    let (_, token) = h.enroll("alice", Role::Patient, None).await;
    assert_eq!(h.call(Method::GET, "/v1/physicians", Some(&token), None).await.status, StatusCode::OK);
    tokio::time::sleep(std::time::Duration::from_millis(300)).await;
    assert_eq!(h.call(Method::GET, "/v1/physicians", Some(&token), None).await.status, StatusCode::UNAUTHORIZED);
}

#[tokio::test]
async fn registration_endpoints() {
    let h = Harness::new().await;
    let (_, pat_token) = h.enroll("pat", Role::Patient, None).await;
    h.call(Method::POST, "/v1/register", None, Some(json!({"user_id": "doc", "role": "physician", "display_name": "Dr Doc"}))).await;
    let dup = h.call(Method::POST, "/v1/register", None, Some(json!({"user_id": "pat", "role": "patient"}))).await;
    assert_eq!(dup.status, StatusCode::CONFLICT);
    assert_eq!(dup.json()["message"], "user pat is already registered");

    let list = h.call(Method::GET, "/v1/pending", Some(&h.admin_token), None).await.json();
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["user_id"], "doc");
    assert_eq!(h.call(Method::GET, "/v1/pending", Some(&pat_token), None).await.status, StatusCode::FORBIDDEN);
    assert_eq!(h.call(Method::POST, "/v1/pending/doc/approve", Some(&pat_token), None).await.status, StatusCode::FORBIDDEN);
    assert_eq!(h.call(Method::POST, "/v1/pending/nobody/approve", Some(&h.admin_token), None).await.status, StatusCode::NOT_FOUND);

    let r = h.call(Method::POST, "/v1/pending/doc/approve", Some(&h.admin_token), None).await;
    assert_eq!(r.status, StatusCode::OK);
    let keys: KeyPair = serde_json::from_slice(&r.body).unwrap();
    assert!(keys.is_consistent());
    let docs = h.call(Method::GET, "/v1/physicians", Some(&pat_token), None).await.json();
    assert_eq!(docs, json!([{"display_name": "Dr Doc", "user_id": "doc"}]));
}

#[tokio::test]
async fn file_and_care_workflow() {
    let h = Harness::new().await;
    let (pat, pat_t) = h.enroll("pat", Role::Patient, None).await;
    let (doc, doc_t) = h.enroll("doc", Role::Physician, None).await;
    let (_, nurse_t) = h.enroll("nurse", Role::Nurse, None).await;
    let (_, dev_t) = h.enroll("dev", Role::IotDevice, Some("pat")).await;
    let mut bodies: Vec<Vec<u8>> = Vec::new();

    let r = h.upload(&pat_t, "medical_history", None, b"history: tremor since 2019").await;
    assert_eq!(r.status, StatusCode::CREATED);
    assert_eq!(h.last_block(), ["store_file_hash"]);
    let hist = r.json()["content_hash"].as_str().unwrap().to_string();
    let file_uri = format!("/v1/files/{hist}");

    let r = h.call(Method::GET, &file_uri, Some(&pat_t), None).await;
    assert_eq!((r.status, r.body.as_slice()), (StatusCode::OK, &b"history: tremor since 2019"[..]));

    let denied = h.call(Method::GET, &file_uri, Some(&doc_t), None).await;
    assert_eq!(denied.status, StatusCode::FORBIDDEN);
    assert_eq!(denied.json()["reason"]["code"], "no_care_relationship");
    assert_eq!(h.upload(&nurse_t, "medical_history", Some("pat"), b"x").await.status, StatusCode::FORBIDDEN);

    let r = h.call(Method::POST, &format!("{file_uri}/share"), Some(&pat_t), Some(json!({"grantee": "doc"}))).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(h.last_block(), ["grant_access"]);
    bodies.push(r.body);
    assert_eq!(h.call(Method::GET, &file_uri, Some(&doc_t), None).await.body, b"history: tremor since 2019");
    let integ = h.call(Method::GET, &format!("{file_uri}/integrity"), Some(&doc_t), None).await.json();
    assert_eq!((integ["store_level"].clone(), integ["end_to_end"].clone(), integ["message"].clone()), (json!(true), json!(true), json!("Integrity completed")));

    // Device ingestion and decision support.
    let bad_motion = call(&h.app, Method::POST, "/v1/motion", Some(&dev_t), Some("text/plain"), b"not motion".to_vec()).await;
    assert_eq!(bad_motion.status, StatusCode::UNPROCESSABLE_ENTITY);
    let m1 = call(&h.app, Method::POST, "/v1/motion", Some(&dev_t), Some("text/plain"), tremor("dev", "pat", 3.0)).await;
    assert_eq!(m1.status, StatusCode::CREATED);
    assert_eq!(h.last_block(), ["store_file_hash"]);
    let m1 = m1.json()["content_hash"].clone();
    let t1 = h.call(Method::POST, "/v1/dose-requests", Some(&pat_t), Some(json!({"motion_file": m1}))).await;
    assert_eq!(t1.status, StatusCode::CREATED);
    assert_eq!(h.last_block(), ["store_file_hash", "submit_dose_request"]);
    let t1 = t1.json();
    assert_eq!((t1["status"].clone(), t1["suggestion"]["auto"].clone()), (json!("pending_physician"), json!(false)));
    let req1 = t1["request_id"].as_str().unwrap().to_string();

    let inbox = h.call(Method::GET, "/v1/dose-requests?patient=pat", Some(&doc_t), None).await.json();
    assert_eq!(inbox.as_array().unwrap().len(), 1);
    let view = h.call(Method::GET, &format!("/v1/dose-requests/{req1}"), Some(&doc_t), None).await.json();
    assert_eq!(view["document"]["type"], "decision_support");
    assert_eq!(h.call(Method::GET, "/v1/dose-requests?patient=pat", Some(&dev_t), None).await.status, StatusCode::FORBIDDEN);

    let conf = h.call(Method::POST, &format!("/v1/dose-requests/{req1}/prescribe"), Some(&doc_t), Some(json!({"dose_mg": 100, "decision": "confirmed"}))).await;
    assert_eq!(conf.status, StatusCode::CONFLICT);
    let rx = h.call(Method::POST, &format!("/v1/dose-requests/{req1}/prescribe"), Some(&doc_t), Some(json!({"dose_mg": 100, "decision": "overridden"}))).await;
    assert_eq!(rx.status, StatusCode::CREATED);
    assert_eq!(h.last_block(), ["store_file_hash", "record_prescription"]);
    assert_eq!(rx.json()["status"], "physician_overridden");
    let again = h.call(Method::POST, &format!("/v1/dose-requests/{req1}/prescribe"), Some(&doc_t), Some(json!({"dose_mg": 90, "decision": "overridden"}))).await;
    assert_eq!(again.status, StatusCode::CONFLICT);

    // The same capture again encrypts to a fresh address.
    let m2 = call(&h.app, Method::POST, "/v1/motion", Some(&dev_t), Some("text/plain"), tremor("dev", "pat", 3.0)).await.json()["content_hash"].clone();
    assert_ne!(m2, m1);
    let t2 = h.call(Method::POST, "/v1/dose-requests", Some(&pat_t), Some(json!({"motion_file": m2}))).await.json();
    assert_eq!((t2["status"].clone(), t2["suggestion"]["dose_mg"].clone(), t2["suggestion"]["auto"].clone()), (json!("auto_approved"), json!(100), json!(true)));
    assert_eq!(h.last_block(), ["store_file_hash", "submit_dose_request", "store_file_hash", "record_prescription"]);

    // Emergency with a cap.
    let e = h.call(Method::POST, "/v1/emergency", Some(&pat_t), None).await;
    assert_eq!(e.status, StatusCode::CREATED);
    assert_eq!(h.last_block(), ["store_file_hash", "emergency_dose_request"]);
    let e = e.json();
    assert_eq!(e["cap_mg"], 100);
    let eid = e["request_id"].as_str().unwrap().to_string();
    let queue = h.call(Method::GET, "/v1/dose-requests", Some(&nurse_t), None).await.json();
    assert_eq!(queue.as_array().unwrap().len(), 1);
    assert_eq!(h.call(Method::POST, &format!("/v1/emergency/{eid}/decide"), Some(&doc_t), Some(json!({"approve": true, "dose_mg": 50}))).await.status, StatusCode::FORBIDDEN);
    let over = h.call(Method::POST, &format!("/v1/emergency/{eid}/decide"), Some(&nurse_t), Some(json!({"approve": true, "dose_mg": 150}))).await;
    assert_eq!(over.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(over.json()["message"], "dose 150 mg exceeds the cap of 100 mg");
    let d = h.call(Method::POST, &format!("/v1/emergency/{eid}/decide"), Some(&nurse_t), Some(json!({"approve": true, "dose_mg": 80}))).await;
    assert_eq!(d.status, StatusCode::OK);
    assert_eq!(h.last_block(), ["emergency_decision"]);

    // Revoke.
    let r = h.call(Method::POST, &format!("{file_uri}/revoke"), Some(&pat_t), Some(json!({"grantee": "doc"}))).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(h.last_block(), ["revoke_access"]);
    assert_eq!(h.call(Method::GET, &file_uri, Some(&doc_t), None).await.status, StatusCode::FORBIDDEN);

    // Only the approval response ever carried private keys.
    for b in &bodies {
        let text = String::from_utf8_lossy(b);
        for k in [&pat, &doc] {
            assert!(!text.contains(&k.sign_private.to_hex()) && !text.contains(&k.enc_private.to_hex()));
        }
    }
    let log = fs::read_to_string(h.state.flow().node().chain_path()).unwrap();
    assert!(!log.contains(&pat.sign_private.to_hex()));
}

#[tokio::test]
async fn emergency_without_cap_is_routed() {
    let h = Harness::new().await;
    let (_, pat_t) = h.enroll("pat", Role::Patient, None).await;
    let r = h.call(Method::POST, "/v1/emergency", Some(&pat_t), None).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let v = r.json();
    assert_eq!((v["status"].clone(), v["cap_mg"].clone()), (json!("pending_physician"), json!(null)));
}

#[tokio::test]
async fn bad_paths_and_bodies() {
    let h = Harness::new().await;
    let (_, t) = h.enroll("pat", Role::Patient, None).await;
    assert_eq!(h.call(Method::GET, "/v1/files/XYZ", Some(&t), None).await.status, StatusCode::BAD_REQUEST);
    let unknown = "00".repeat(32);
    let r = h.call(Method::GET, &format!("/v1/files/{unknown}"), Some(&t), None).await;
    assert_eq!((r.status, r.json()["reason"]["code"].clone()), (StatusCode::FORBIDDEN, json!("unknown_file")));
    let r = call(&h.app, Method::POST, "/v1/register", None, Some("application/json"), b"{".to_vec()).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(h.upload(&t, "x-ray", None, b"x").await.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn restart_replays_and_copies_agree() {
    let h = Harness::new().await;
    let (pat, pat_t) = h.enroll("pat", Role::Patient, None).await;
    let (doc, _) = h.enroll("doc", Role::Physician, None).await;
    let f = h.upload(&pat_t, "medical_history", None, b"notes").await.json()["content_hash"].as_str().unwrap().to_string();
    h.call(Method::POST, &format!("/v1/files/{f}/share"), Some(&pat_t), Some(json!({"grantee": "doc"}))).await;
    h.call(Method::POST, "/v1/emergency", Some(&pat_t), None).await;
    let before = canonical::to_string(&*h.state.flow().state()).unwrap();

    // A copy of the data directory is a second node over the same chain.
    let copy = tempfile::tempdir().unwrap();
    for entry in walk(h.dir.path()) {
        let dest = copy.path().join(entry.strip_prefix(h.dir.path()).unwrap());
        fs::create_dir_all(dest.parent().unwrap()).unwrap();
        fs::copy(&entry, &dest).unwrap();
    }
    let dir = h.dir;
    drop(h.app);
    drop(h.state);

    let a = boot(config(dir.path())).unwrap();
    let b = boot(config(copy.path())).unwrap();
    assert!(a.admin_keyfile.is_none() && b.admin_keyfile.is_none());
    assert_eq!(canonical::to_string(&*a.state.flow().state()).unwrap(), before);
    let (app_a, app_b) = (router(a.state), router(b.state));
    let reads = ["/v1/physicians".to_string(), "/v1/dose-requests?patient=pat".into(), format!("/v1/files/{f}"), format!("/v1/files/{f}/integrity")];
    for who in [&pat, &doc] {
        let (ta, tb) = (login_on(&app_a, who).await, login_on(&app_b, who).await);
        for uri in &reads {
            let ra = call(&app_a, Method::GET, uri, Some(&ta), None, vec![]).await;
            let rb = call(&app_b, Method::GET, uri, Some(&tb), None, vec![]).await;
            assert_eq!((ra.status, &ra.body), (rb.status, &rb.body), "{uri} as {}", who.user_id);
        }
    }
    let ra = call(&app_a, Method::GET, "/v1/chain/verify", None, None, vec![]).await;
    let rb = call(&app_b, Method::GET, "/v1/chain/verify", None, None, vec![]).await;
    assert_eq!(ra.body, rb.body);
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[tokio::test]
async fn tampered_chain_refuses_to_start() {
    let h = Harness::new().await;
    h.enroll("pat", Role::Patient, None).await;
    let path = h.state.flow().node().chain_path();
    let dir = h.dir;
    drop(h.app);
    drop(h.state);
    let mut bytes = fs::read(&path).unwrap();
    // Second line is block 1; corrupt a byte inside it.
    let start = bytes.iter().position(|&b| b == b'\n').unwrap() + 10;
    bytes[start] ^= 0x20;
    fs::write(&path, &bytes).unwrap();
    match boot(config(dir.path())) {
        Err(ServiceError::CorruptChain { first_bad_height, .. }) => assert_eq!(first_bad_height, 1),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("started on a corrupt chain"),
    }
}

#[tokio::test]
async fn shutdown_flushes_pending_transactions() {
    let dir = tempfile::tempdir().unwrap();
    let booted = boot(NodeConfig { seal_interval_ms: 60_000, ..config(dir.path()) }).unwrap();
    let node = booted.state.flow().node().clone();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(careledger_service::serve(listener, booted.state, async move {
        let _ = stopped.await;
    }));
    let tx = careledger_core::ledger::Transaction::registration_request(careledger_core::node::now_ms(), "late", Role::Patient, "Late", None);
    node.submit(tx).unwrap();
    assert_eq!(node.pending_len(), 1);
    stop.send(()).unwrap();
    server.await.unwrap().unwrap();
    assert_eq!(node.pending_len(), 0);
    let reopened = careledger_core::Node::open(dir.path());
    drop(node);
    let reopened = reopened.unwrap();
    assert_eq!(reopened.height(), 1);
    assert!(matches!(reopened.blocks()[1].transactions[0].payload, TxPayload::RequestRegistration { .. }));
}
