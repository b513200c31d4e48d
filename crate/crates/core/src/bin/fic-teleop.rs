use clap::{Parser, Subcommand, ValueEnum};
use fic_teleop::analysis::{self, AnalysisError, COHERENCE_GATE};
use fic_teleop::experiment_log::{ExperimentLog, LogTable};
use fic_teleop::operator::{impulse_protocol, OperatorScript};
use fic_teleop::service::{serve, ServeOptions};
use fic_teleop::simulation::{
    condition_grid, replay, run, run_grid, ControllerKind, SimConfig, SimError, GRID_DELAYS,
    GRID_RATES,
};
use serde::Serialize;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 1;
const EXIT_ABORT: u8 = 2;
const EXIT_ANALYSIS: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

#[derive(Parser)]
#[command(
    name = "fic-teleop",
    version,
    about = "Bilateral teleoperation simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Controller {
    Fic,
    Ic,
}

impl From<Controller> for ControllerKind {
    fn from(c: Controller) -> Self {
        match c {
            Controller::Fic => ControllerKind::Fic,
            Controller::Ic => ControllerKind::Ic,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write its log.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "log.csv")]
        out: PathBuf,
        #[arg(long, value_enum)]
        controller: Option<Controller>,
        /// Also redraws the blows of an impulse scenario.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a configuration under every delay and sample-rate pair.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = GRID_DELAYS)]
        delays: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = GRID_RATES)]
        rates: Vec<f64>,
        #[arg(long, value_enum)]
        controller: Option<Controller>,
        #[arg(long, default_value = "grid")]
        out_dir: PathBuf,
    },
    /// Frequency response, energy ledger and task metrics of a log.
    Analyze {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "analysis")]
        out_dir: PathBuf,
        /// Welch segment length in log rows.
        #[arg(long, default_value_t = 1024)]
        window: usize,
    },
    /// Live session over WebSocket.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Interface to bind.
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Real-time factor of the simulation clock.
        #[arg(long, default_value_t = 1.0)]
        rtf: f64,
        /// Directory with the operator console bundle.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value = "session.csv")]
        log: PathBuf,
        /// Session length limit (s).
        #[arg(long, default_value_t = 3600.0)]
        duration: f64,
    },
    /// Re-run a log's configuration and compare bytes.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
}

enum Failure {
    Config(String),
    Abort(String),
    Analysis(String),
    Mismatch,
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Abort { .. } => Failure::Abort(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        Failure::Analysis(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Config(format!("{}: {e}", path.display()))
}

fn load_config(path: &Path) -> Result<SimConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(SimConfig::from_json(&text)?)
}

fn write_log(log: &ExperimentLog, path: &Path) -> Result<(), Failure> {
    log.write_to(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

/// Runs a configuration; an aborted run still leaves its partial log.
fn run_to(cfg: &SimConfig, out: &Path) -> Result<ExperimentLog, Failure> {
    match run(cfg) {
        Ok(log) => {
            write_log(&log, out)?;
            Ok(log)
        }
        Err(SimError::Abort { t, reason, partial }) => {
            write_log(&partial, out)?;
            Err(Failure::Abort(format!(
                "aborted at t = {t} s: {reason} (partial log in {})",
                out.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize)]
struct Summary {
    log: PathBuf,
    metrics: analysis::TaskMetrics,
    passive: bool,
    max_violation: f64,
    injected: f64,
    extracted: f64,
}

fn summarize(log: &LogTable, path: &Path) -> Result<Summary, Failure> {
    let metrics = analysis::task_metrics(log)?;
    let ledger = analysis::energy_audit(log)?;
    Ok(Summary {
        log: path.to_path_buf(),
        metrics,
        passive: ledger.is_passive(1e-9),
        max_violation: ledger.max_violation(),
        injected: ledger.injected.last().copied().unwrap_or(0.0),
        extracted: ledger.extracted.last().copied().unwrap_or(0.0),
    })
}

/// Writes a line to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn print_json<T: Serialize>(v: &T) {
    emit(&serde_json::to_string_pretty(v).expect("summary serializes"));
}

fn table_of(log: &ExperimentLog) -> Result<LogTable, Failure> {
    log.table().map_err(|e| Failure::Analysis(e.to_string()))
}

fn write_csv<const N: usize>(
    path: &Path,
    header: [&str; N],
    rows: impl Iterator<Item = [f64; N]>,
) -> Result<(), Failure> {
    let fail = |e: csv::Error| Failure::Analysis(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(fail)?;
    }
    w.flush().map_err(|e| Failure::Analysis(e.to_string()))
}

#[derive(Serialize)]
struct AxisResponse {
    axis: usize,
    cutoff_hz: Option<f64>,
    bins: usize,
}

fn analyze(path: &Path, out_dir: &Path, window: usize) -> Result<(), Failure> {
    let table = LogTable::from_path(path).map_err(|e| Failure::Analysis(e.to_string()))?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let summary = summarize(&table, path)?;

    let ledger = analysis::energy_audit(&table)?;
    let n = ledger.t.len();
    write_csv(
        &out_dir.join("energy.csv"),
        ["t", "injected", "extracted", "stored"],
        (0..n).map(|i| {
            [
                ledger.t[i],
                ledger.injected[i],
                ledger.extracted[i],
                ledger.stored[i],
            ]
        }),
    )?;

    let mut responses = Vec::new();
    for axis in 0..2 {
        let frf = match analysis::log_frf(&table, axis, window) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("no frequency response for axis {axis}: {e}");
                continue;
            }
        };
        let db = frf.magnitude_db();
        let phase = frf.unwrapped_phase();
        write_csv(
            &out_dir.join(format!("frf_axis{axis}.csv")),
            ["freq_hz", "magnitude_db", "phase_rad", "coherence"],
            (0..frf.freqs.len()).map(|i| [frf.freqs[i], db[i], phase[i], frf.coherence[i]]),
        )?;
        let lo = frf.freqs.first().copied().unwrap_or(0.0);
        let cutoff = analysis::cutoff_frequency(&frf, (lo, 4.0 * lo)).ok();
        responses.push(AxisResponse {
            axis,
            cutoff_hz: cutoff,
            bins: frf
                .freqs
                .iter()
                .zip(&frf.coherence)
                .filter(|(_, c)| **c >= COHERENCE_GATE)
                .count(),
        });
    }

    let report = serde_json::json!({ "summary": summary, "frequency_response": responses });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(out_dir.join("summary.json"), &text).map_err(io_err(out_dir))?;
    emit(&text);
    Ok(())
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            config,
            out,
            controller,
            seed,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(c) = controller {
                cfg.controller = c.into();
            }
            if let Some(s) = seed {
                cfg.seed = s;
                if matches!(cfg.scenario, OperatorScript::Impulses { .. }) {
                    cfg.scenario = impulse_protocol(s);
                }
            }
            let log = run_to(&cfg, &out)?;
            print_json(&summarize(&table_of(&log)?, &out)?);
            Ok(())
        }
        Command::Grid {
            config,
            delays,
            rates,
            controller,
            out_dir,
        } => {
            let mut base = load_config(&config)?;
            if let Some(c) = controller {
                base.controller = c.into();
            }
            std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
            let configs = condition_grid(&base, &delays, &rates);
            let mut rows = Vec::new();
            let mut worst = None;
            for (cfg, result) in configs.iter().zip(run_grid(&configs)) {
                let (delay, rate) = (cfg.channels.f_fb.delay, cfg.channels.f_fb.sample_rate);
                let path = out_dir.join(format!("delay{delay}_rate{rate}.csv"));
                let entry = match result {
                    Ok(log) => {
                        write_log(&log, &path)?;
                        serde_json::to_value(summarize(&table_of(&log)?, &path)?)
                            .expect("summary serializes")
                    }
                    Err(SimError::Abort { t, reason, partial }) => {
                        write_log(&partial, &path)?;
                        worst = Some(Failure::Abort(format!(
                            "delay {delay} s, rate {rate} Hz: {reason}"
                        )));
                        serde_json::json!({ "log": path, "aborted_at": t, "reason": reason })
                    }
                    Err(e) => return Err(e.into()),
                };
                rows.push(
                    serde_json::json!({ "delay": delay, "sample_rate": rate, "result": entry }),
                );
            }
            let text = serde_json::to_string_pretty(&rows).expect("grid serializes");
            std::fs::write(out_dir.join("summary.json"), &text).map_err(io_err(&out_dir))?;
            emit(&text);
            worst.map_or(Ok(()), Err)
        }
        Command::Analyze {
            log,
            out_dir,
            window,
        } => analyze(&log, &out_dir, window),
        Command::Serve {
            config,
            port,
            host,
            rtf,
            static_dir,
            log,
            duration,
        } => {
            let mut cfg = match config {
                Some(p) => load_config(&p)?,
                None => SimConfig::nominal(),
            };
            cfg.duration = duration;
            let runtime =
                tokio::runtime::Runtime::new().map_err(|e| Failure::Config(e.to_string()))?;
            let opts = ServeOptions {
                addr: SocketAddr::new(host, port),
                config: cfg,
                rtf,
                static_dir,
                log_path: Some(log.clone()),
            };
            let shutdown = {
                let _guard = runtime.enter();
                shutdown_signal().map_err(|e| Failure::Config(e.to_string()))?
            };
            match runtime.block_on(serve(opts, shutdown)) {
                Ok(_) => {
                    eprintln!("session log written to {}", log.display());
                    Ok(())
                }
                Err(fic_teleop::service::ServiceError::Sim(e)) => Err(e.into()),
                Err(e) => Err(Failure::Config(e.to_string())),
            }
        }
        Command::Replay { log } => {
            let bytes = std::fs::read(&log).map_err(io_err(&log))?;
            if replay(&bytes)? {
                emit("identical");
                Ok(())
            } else {
                Err(Failure::Mismatch)
            }
        }
    }
}

/// Resolves on SIGINT or SIGTERM. Handlers are installed before returning.
#[cfg(unix)]
fn shutdown_signal() -> std::io::Result<impl std::future::Future<Output = ()> + Send + 'static> {
    use tokio::signal::unix::{signal, SignalKind};
    let mut int = signal(SignalKind::interrupt())?;
    let mut term = signal(SignalKind::terminate())?;
    Ok(async move {
        tokio::select! {
            _ = int.recv() => {}
            _ = term.recv() => {}
        }
    })
}

#[cfg(not(unix))]
fn shutdown_signal() -> std::io::Result<impl std::future::Future<Output = ()> + Send + 'static> {
    Ok(async {
        let _ = tokio::signal::ctrl_c().await;
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Config(m) => (EXIT_CONFIG, m),
                Failure::Abort(m) => (EXIT_ABORT, m),
                Failure::Analysis(m) => (EXIT_ANALYSIS, m),
                Failure::Mismatch => (
                    EXIT_MISMATCH,
                    "replay differs from the recorded log".to_string(),
                ),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
