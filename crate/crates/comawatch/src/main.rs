use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use comawatch::harness::{parse_scenario, run_scenario, SimError};
use comawatch::http::{router, system_clock, AppState};
use comawatch::server::auth::Role;
use comawatch::server::escalation::AlertPolicy;
use comawatch::server::log;
use comawatch::server::registry::Registry;
use comawatch::server::{Server, ServerConfig};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

#[derive(Parser)]
#[command(name = "comawatch", version, about = "Bedside monitor simulator and monitoring server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario on the virtual clock and write its report and trace.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the seed in the scenario file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the dashboard API from a local data directory.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long)]
        data: PathBuf,
        /// `both` or `fallback_only`.
        #[arg(long, default_value = "both")]
        policy: String,
        /// Session lifetime, e.g. `8h` or `30m`.
        #[arg(long, default_value = "8h")]
        session_ttl: String,
    },
    /// Re-ingest a trace into a data directory.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Patient registry for the trace; defaults to `registry.json` next to it.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, seed, out } => run(&scenario, seed, &out),
        Command::Serve {
            port,
            bind,
            data,
            policy,
            session_ttl,
        } => serve(&bind, port, &data, &policy, &session_ttl),
        Command::Replay { trace, data, registry } => replay(&trace, &data, registry.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(scenario: &Path, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(scenario)
        .map_err(|e| fail(EXIT_FAILURE, format!("{}: {e}", scenario.display())))?;
    let mut cfg = parse_scenario(&text).map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", scenario.display())))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let outcome = run_scenario(&cfg).map_err(|e| match e {
        SimError::Config(c) => fail(EXIT_CONFIG, format!("{}: {c}", scenario.display())),
        SimError::Invariant(_) => fail(EXIT_INVARIANT, e.to_string()),
        other => fail(EXIT_FAILURE, other.to_string()),
    })?;
    outcome
        .write_artifacts(out)
        .map_err(|e| fail(EXIT_FAILURE, format!("{}: {e}", out.display())))?;
    print!("{}", outcome.report.render_text());
    Ok(())
}

fn serve(bind: &str, port: u16, data: &Path, policy: &str, session_ttl: &str) -> Result<(), Failure> {
    let policy = AlertPolicy::parse(policy)
        .ok_or_else(|| fail(EXIT_CONFIG, format!("unknown alert policy `{policy}`")))?;
    let ttl = comawatch::harness::config::parse_duration(session_ttl)
        .filter(|&t| t > 0)
        .ok_or_else(|| fail(EXIT_CONFIG, format!("invalid session ttl `{session_ttl}`")))?;
    let config = ServerConfig {
        policy,
        session_ttl_ms: ttl,
        ..ServerConfig::default()
    };
    let (mut server, report) =
        Server::open(config, data).map_err(|e| fail(EXIT_FAILURE, format!("{}: {e}", data.display())))?;
    ::log::info!(
        "recovered {} log entries ({} torn bytes dropped)",
        report.entries,
        report.torn_bytes
    );
    bootstrap_admin(&mut server)?;

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| fail(EXIT_FAILURE, e.to_string()))?;
    let state = AppState::new(server, system_clock());
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((bind, port))
            .await
            .map_err(|e| fail(EXIT_FAILURE, format!("bind {bind}:{port}: {e}")))?;
        ::log::info!("listening on http://{bind}:{port}");
        axum::serve(listener, router(state.clone()))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| fail(EXIT_FAILURE, e.to_string()))?;
        state
            .server()
            .sync()
            .map_err(|e| fail(EXIT_FAILURE, e.to_string()))
    })
}

/// Creates the first admin from `COMAWATCH_ADMIN_USER` and
/// `COMAWATCH_ADMIN_PASSWORD` when the registry has no users.
fn bootstrap_admin(server: &mut Server) -> Result<(), Failure> {
    if !server.registry().users.is_empty() {
        return Ok(());
    }
    let user = std::env::var("COMAWATCH_ADMIN_USER").ok();
    let password = std::env::var("COMAWATCH_ADMIN_PASSWORD").ok();
    match (user, password) {
        (Some(user), Some(password)) if !password.is_empty() => {
            server
                .add_user(&user, &password, Role::Admin)
                .map_err(|e| fail(EXIT_FAILURE, format!("creating admin: {e}")))?;
            ::log::info!("created admin account `{user}`");
        }
        _ => ::log::warn!(
            "no user accounts; set COMAWATCH_ADMIN_USER and COMAWATCH_ADMIN_PASSWORD to create one"
        ),
    }
    Ok(())
}

fn replay(trace: &Path, data: &Path, registry: Option<&Path>) -> Result<(), Failure> {
    let bytes = std::fs::read(trace).map_err(|e| fail(EXIT_FAILURE, format!("{}: {e}", trace.display())))?;
    let recovered = log::decode(&bytes).map_err(|e| fail(EXIT_FAILURE, format!("{}: {e}", trace.display())))?;
    let registry_path = registry
        .map(Path::to_path_buf)
        .unwrap_or_else(|| trace.with_file_name("registry.json"));
    let source = Registry::load(&registry_path)
        .map_err(|e| fail(EXIT_FAILURE, format!("{}: {e}", registry_path.display())))?;

    let (mut server, _) = Server::open(ServerConfig::default(), data)
        .map_err(|e| fail(EXIT_FAILURE, format!("{}: {e}", data.display())))?;
    for patient in source.patients.into_values() {
        let known = server.registry().patients.get(&patient.patient_id) == Some(&patient);
        if !known {
            server
                .add_patient(patient)
                .map_err(|e| fail(EXIT_FAILURE, format!("registering patient: {e}")))?;
        }
    }
    let (mut applied, mut skipped) = (0u64, 0u64);
    for (index, entry) in recovered.entries.into_iter().enumerate() {
        match server.import(entry) {
            Ok(true) => applied += 1,
            Ok(false) => skipped += 1,
            Err(e) => return Err(fail(EXIT_FAILURE, format!("trace entry {index}: {e}"))),
        }
    }
    server.sync().map_err(|e| fail(EXIT_FAILURE, e.to_string()))?;
    println!("applied {applied} entries, skipped {skipped} already stored");
    if recovered.torn_bytes > 0 {
        println!("ignored {} bytes of torn tail", recovered.torn_bytes);
    }
    Ok(())
}
