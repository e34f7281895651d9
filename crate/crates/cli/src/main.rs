//! `careledger`: client for a careledger node, offline chain tools, the
//! node itself (`serve`) and a motion-device simulator.

mod client;
mod simulate;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use careledger_core::castore::FsckProblem;
use careledger_core::node::{BLOB_DIR, CHAIN_FILE};
use careledger_core::{canonical, BlobStore};
use careledger_service::{keyfile, NodeConfig, Overrides, ServiceError};

use client::Api;
use simulate::Tremor;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}", .body["message"].as_str().unwrap_or("request failed"))]
    Api { status: u16, body: Value },
    #[error("http: {0}")]
    Http(String),
    #[error("not logged in with {0}; run `careledger login` first")]
    NotLoggedIn(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Usage(String),
    /// A check ran and found a problem; the report was already printed.
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

#[derive(Parser)]
#[command(name = "careledger", version, about = "Remote care records on a hash-chained ledger")]
struct Cli {
    /// Node URL.
    #[arg(long, global = true, env = "CARELEDGER_SERVER", default_value = "http://127.0.0.1:8420")]
    server: String,
    /// Your keyfile. Sessions are saved next to it.
    #[arg(long, global = true, env = "CARELEDGER_KEYFILE", default_value = "careledger.key")]
    keyfile: PathBuf,
    /// Print canonical JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ask to be registered; an admin must approve.
    Register {
        #[arg(long)]
        user_id: String,
        /// patient, physician, nurse, iot_device or admin.
        #[arg(long)]
        role: String,
        #[arg(long)]
        display_name: Option<String>,
        /// Patient a device reports for.
        #[arg(long)]
        bound_patient: Option<String>,
    },
    /// List pending registrations (admin).
    Pending,
    /// Approve a registration and write the new user's keyfile (admin).
    Approve {
        user_id: String,
        /// Where to write the delivered keys. Defaults to `<user_id>.key`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Log in with the keyfile.
    Login,
    Logout,
    /// List registered physicians.
    Physicians,
    /// Encrypt and upload a file.
    Upload {
        path: PathBuf,
        /// medical_history, motion_capture, prescription or dose_request.
        #[arg(long)]
        kind: String,
        /// Owning patient; defaults to yourself.
        #[arg(long)]
        owner: Option<String>,
    },
    /// Download and decrypt a file.
    Fetch {
        hash: String,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Share {
        hash: String,
        #[arg(long)]
        grantee: String,
    },
    Revoke {
        hash: String,
        #[arg(long)]
        grantee: String,
    },
    /// Run both integrity checks on a file.
    Integrity { hash: String },
    /// List dose requests visible to you.
    DoseRequests {
        #[arg(long)]
        patient: Option<String>,
    },
    /// Show one dose request with its decrypted document.
    DoseRequest { id: String },
    /// Ask for a dose based on an uploaded motion capture (patient).
    RequestDose {
        #[arg(long)]
        motion_file: String,
    },
    /// Answer a dose request (physician).
    Prescribe {
        request_id: String,
        #[arg(long)]
        dose_mg: u64,
        /// `confirmed` or `overridden`.
        #[arg(long)]
        decision: String,
    },
    #[command(subcommand)]
    Emergency(EmergencyCmd),
    #[command(subcommand)]
    Chain(ChainCmd),
    /// Re-hash every blob in a data directory.
    Fsck {
        #[arg(long, default_value = "careledger-data")]
        data_dir: PathBuf,
    },
    /// Run a node.
    Serve(ServeArgs),
    /// Synthesize a tremor capture and post it as a device.
    SimulateDevice(SimulateArgs),
}

#[derive(Subcommand)]
enum EmergencyCmd {
    /// Open an emergency dose request (patient).
    Request,
    /// Approve up to the cap, or deny (nurse).
    Decide {
        request_id: String,
        #[arg(long, conflicts_with = "deny")]
        approve: bool,
        #[arg(long)]
        deny: bool,
        #[arg(long, default_value_t = 0)]
        dose_mg: u64,
    },
}

#[derive(Subcommand)]
enum ChainCmd {
    /// Verify chain.log. Exits 1 and prints first_bad_height when invalid.
    Verify {
        #[arg(long, default_value = "careledger-data")]
        data_dir: PathBuf,
        /// Ask the node instead of reading the file.
        #[arg(long)]
        remote: bool,
    },
}

#[derive(Args)]
struct ServeArgs {
    /// Config file; `CARELEDGER_CONFIG` is used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    patient: String,
    #[arg(long, value_delimiter = ',', default_value = "wrist,elbow")]
    joints: Vec<String>,
    #[arg(long, default_value_t = 50.0)]
    rate: f64,
    #[arg(long, default_value_t = 10.0)]
    seconds: f64,
    #[arg(long, default_value_t = 5.0)]
    tremor_hz: f64,
    #[arg(long, default_value_t = 3.0)]
    amplitude_deg: f64,
    /// Standard deviation of added Gaussian noise.
    #[arg(long, default_value_t = 0.2)]
    noise_deg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Device id; defaults to the keyfile's user.
    #[arg(long)]
    device_id: Option<String>,
    /// Write the capture here instead of posting it.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json_mode = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Check(_)) => ExitCode::FAILURE,
        Err(e) => {
            if json_mode {
                let body = match &e {
                    CliError::Api { body, .. } => body.clone(),
                    other => json!({"error": "cli", "message": other.to_string()}),
                };
                println!("{}", canonical::to_string(&body).unwrap_or_default());
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::FAILURE
        }
    }
}

struct Out {
    json: bool,
}

impl Out {
    fn value<T: Serialize>(&self, v: &T) -> Result<(), CliError> {
        let text = if self.json {
            canonical::to_string(v).map_err(|e| CliError::Io(e.to_string()))?
        } else {
            serde_json::to_string_pretty(v).map_err(|e| CliError::Io(e.to_string()))?
        };
        println!("{text}");
        Ok(())
    }

    /// `human` in text mode, the value in JSON mode.
    fn either<T: Serialize>(&self, v: &T, human: impl FnOnce() -> String) -> Result<(), CliError> {
        if self.json {
            self.value(v)
        } else {
            println!("{}", human());
            Ok(())
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let out = Out { json: cli.json };
    let authed = || Api::authed(&cli.server, &cli.keyfile);
    match cli.command {
        Command::Register { user_id, role, display_name, bound_patient } => {
            let api = Api::new(&cli.server)?;
            let v = api.post("/register", Some(json!({"user_id": user_id, "role": role, "display_name": display_name, "bound_patient": bound_patient})))?;
            out.either(&v, || format!("registration for {user_id} is pending approval"))
        }
        Command::Pending => out.value(&authed()?.get("/pending")?),
        Command::Approve { user_id, out: path } => {
            let path = path.unwrap_or_else(|| PathBuf::from(format!("{user_id}.key")));
            if path.exists() {
                return Err(CliError::Usage(format!("{} already exists", path.display())));
            }
            let keys = authed()?.post(&format!("/pending/{user_id}/approve"), None)?;
            let keys = serde_json::from_value(keys).map_err(|e| CliError::Http(e.to_string()))?;
            keyfile::write(&path, &keys).map_err(|e| CliError::Io(e.to_string()))?;
            let v = json!({"user_id": user_id, "keyfile": path.display().to_string()});
            out.either(&v, || format!("approved {user_id}; keys written to {}", path.display()))
        }
        Command::Login => {
            let s = Api::new(&cli.server)?.login(&cli.keyfile)?;
            let v = json!({"user_id": s.user_id, "expires_at_ms": s.expires_at_ms});
            out.either(&v, || format!("logged in as {}", s.user_id))
        }
        Command::Logout => {
            authed()?.post("/logout", None)?;
            let _ = fs::remove_file(client::session_path(&cli.keyfile));
            out.either(&json!({"logged_out": true}), || "logged out".into())
        }
        Command::Physicians => out.value(&authed()?.get("/physicians")?),
        Command::Upload { path, kind, owner } => {
            let v = authed()?.upload(&kind, owner.as_deref(), read_file(&path)?)?;
            out.either(&v, || v["content_hash"].as_str().unwrap_or_default().to_string())
        }
        Command::Fetch { hash, out: path } => {
            let bytes = authed()?.get_bytes(&format!("/files/{hash}"))?;
            match path {
                Some(p) => {
                    fs::write(&p, &bytes).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                    let v = json!({"content_hash": hash, "bytes": bytes.len(), "path": p.display().to_string()});
                    out.either(&v, || format!("wrote {} bytes to {}", bytes.len(), p.display()))
                }
                None => std::io::stdout().write_all(&bytes).map_err(|e| CliError::Io(e.to_string())),
            }
        }
        Command::Share { hash, grantee } => out.value(&authed()?.post(&format!("/files/{hash}/share"), Some(json!({"grantee": grantee})))?),
        Command::Revoke { hash, grantee } => out.value(&authed()?.post(&format!("/files/{hash}/revoke"), Some(json!({"grantee": grantee})))?),
        Command::Integrity { hash } => {
            let v = authed()?.get(&format!("/files/{hash}/integrity"))?;
            out.either(&v, || v["message"].as_str().unwrap_or_default().to_string())?;
            if v["complete"] == json!(true) {
                Ok(())
            } else {
                Err(CliError::Check("integrity check failed".into()))
            }
        }
        Command::DoseRequests { patient } => {
            let path = match patient {
                Some(p) => format!("/dose-requests?patient={p}"),
                None => "/dose-requests".into(),
            };
            out.value(&authed()?.get(&path)?)
        }
        Command::DoseRequest { id } => out.value(&authed()?.get(&format!("/dose-requests/{id}"))?),
        Command::RequestDose { motion_file } => out.value(&authed()?.post("/dose-requests", Some(json!({"motion_file": motion_file})))?),
        Command::Prescribe { request_id, dose_mg, decision } => {
            out.value(&authed()?.post(&format!("/dose-requests/{request_id}/prescribe"), Some(json!({"dose_mg": dose_mg, "decision": decision})))?)
        }
        Command::Emergency(EmergencyCmd::Request) => out.value(&authed()?.post("/emergency", None)?),
        Command::Emergency(EmergencyCmd::Decide { request_id, approve, deny, dose_mg }) => {
            if approve == deny {
                return Err(CliError::Usage("pass exactly one of --approve or --deny".into()));
            }
            out.value(&authed()?.post(&format!("/emergency/{request_id}/decide"), Some(json!({"approve": approve, "dose_mg": dose_mg})))?)
        }
        Command::Chain(ChainCmd::Verify { data_dir, remote }) => {
            let report = if remote {
                serde_json::from_value(Api::new(&cli.server)?.get("/chain/verify")?).map_err(|e| CliError::Http(e.to_string()))?
            } else {
                let path = data_dir.join(CHAIN_FILE);
                careledger_core::ledger::verify_log_bytes(&read_file(&path)?)
            };
            out.either(&report, || match report.first_bad_height {
                None => format!("chain valid; height {}", report.height),
                Some(h) => format!("chain INVALID\nfirst_bad_height={h}\nreason: {}", report.reason.clone().unwrap_or_default()),
            })?;
            if report.valid {
                Ok(())
            } else {
                Err(CliError::Check("chain invalid".into()))
            }
        }
        Command::Fsck { data_dir } => fsck(&out, &data_dir),
        Command::Serve(args) => serve(args),
        Command::SimulateDevice(args) => simulate_device(&out, &cli.server, &cli.keyfile, args),
    }
}

fn fsck(out: &Out, data_dir: &Path) -> Result<(), CliError> {
    let store = BlobStore::open(data_dir.join(BLOB_DIR)).map_err(|e| CliError::Io(e.to_string()))?;
    let report = store.fsck().map_err(|e| CliError::Io(e.to_string()))?;
    let problems: Vec<Value> = report
        .problems
        .iter()
        .map(|p| match p {
            FsckProblem::Mismatch { address, actual } => json!({"kind": "mismatch", "address": address, "actual": actual}),
            FsckProblem::Stray(path) => json!({"kind": "stray", "path": path.display().to_string()}),
        })
        .collect();
    let v = json!({"checked": report.checked, "clean": report.is_clean(), "problems": problems});
    out.either(&v, || {
        let mut s = format!("checked {} blobs, {} problems", report.checked, report.problems.len());
        for p in &problems {
            s.push_str(&format!("\n  {p}"));
        }
        s
    })?;
    if report.is_clean() {
        Ok(())
    } else {
        Err(CliError::Check("fsck found problems".into()))
    }
}

fn serve(args: ServeArgs) -> Result<(), CliError> {
    let overrides = Overrides { data_dir: args.data_dir, listen: args.listen, tau: args.tau };
    let config = NodeConfig::load(args.config.as_deref(), &overrides).map_err(|e| CliError::Usage(e.to_string()))?;
    let listen = config.listen.clone();
    let booted = careledger_service::boot(config)?;
    if let Some(p) = &booted.admin_keyfile {
        eprintln!("genesis block written; admin keys at {}", p.display());
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&listen).await.map_err(|e| CliError::Io(format!("bind {listen}: {e}")))?;
        eprintln!("listening on {}", listener.local_addr().map(|a| a.to_string()).unwrap_or(listen));
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        careledger_service::serve(listener, booted.state, shutdown).await.map_err(CliError::from)
    })?;
    eprintln!("stopped; pending transactions sealed");
    Ok(())
}

fn simulate_device(out: &Out, server: &str, keyfile_path: &Path, a: SimulateArgs) -> Result<(), CliError> {
    let device_id = match a.device_id {
        Some(d) => d,
        None if a.out.is_some() => "simulated-device".into(),
        None => keyfile::read(keyfile_path).map_err(|e| CliError::Io(e.to_string()))?.user_id,
    };
    let params = Tremor {
        device_id,
        patient_id: a.patient,
        joints: a.joints,
        rate_hz: a.rate,
        seconds: a.seconds,
        tremor_hz: a.tremor_hz,
        amplitude_deg: a.amplitude_deg,
        noise_deg: a.noise_deg,
        seed: a.seed,
    };
    let mc = simulate::synthesize(&params).map_err(CliError::Usage)?;
    let bytes = mc.to_canonical().map_err(|e| CliError::Usage(e.to_string()))?;
    match a.out {
        Some(path) => {
            fs::write(&path, &bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            let v = json!({"samples": mc.samples.len(), "path": path.display().to_string()});
            out.either(&v, || format!("wrote {} samples to {}", mc.samples.len(), path.display()))
        }
        None => {
            let v = Api::authed(server, keyfile_path)?.post_bytes("/motion", bytes)?;
            out.either(&v, || v["content_hash"].as_str().unwrap_or_default().to_string())
        }
    }
}
