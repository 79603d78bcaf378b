use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use castorette::config::{parse_duration, Config};
use castorette::http;
use castorette::ingest::{ingest_csv, IngestOptions};
use castorette_core::api::{
    ApiError, CompareQuery, CompareResponse, ModelListQuery, ModelListResponse, ModelResponse, QueuesResponse,
};
use castorette_core::bus::queues;
use castorette_core::context::ContextRef;
use castorette_core::platform::{Platform, PlatformConfig};
use castorette_core::scheduler::Clock;
use castorette_core::synthetic::{self, FixtureConfig};
use castorette_core::time::{format_timestamp, parse_timestamp, Timestamp};
use castorette_core::timeseries::{LayerKind, Producer};
use clap::{Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(name = "castorette", version, about = "Contextual time series and forecasting model platform")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Data directory (overrides the configuration file).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP API (and run the scheduler).
    Serve {
        /// Listening port; 0 picks a free one.
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Worker pool size.
        #[arg(long)]
        workers: Option<usize>,
        /// Interval between polls of the now-queues, e.g. `60s`.
        #[arg(long)]
        poll: Option<String>,
        /// Interval between schedule updates, e.g. `5m`.
        #[arg(long)]
        update: Option<String>,
        /// Serve requests without running scheduled jobs.
        #[arg(long)]
        no_scheduler: bool,
    },
    /// Ingest a `ts,entity,signal,value` CSV file (`-` reads stdin).
    Ingest {
        /// CSV file, or `-` for stdin.
        csv: PathBuf,
        /// Reject rows of unknown entities or signals.
        #[arg(long)]
        strict: bool,
        /// Type of entities created by the upload.
        #[arg(long, default_value = "default")]
        entity_type: String,
        /// Type of signals created by the upload.
        #[arg(long, default_value = "default")]
        signal_type: String,
        /// Unit of signals created by the upload.
        #[arg(long, default_value = "")]
        unit: String,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Scheduler commands.
    #[command(subcommand)]
    Sched(SchedCommand),
    /// Model commands.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Forecast commands.
    #[command(subcommand)]
    Forecast(ForecastCommand),
    /// Write the synthetic demo data set as CSV.
    Fixture {
        #[arg(long, default_value_t = 90)]
        days: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// First hour, RFC 3339.
        #[arg(long, default_value = "2018-04-13T00:00:00Z")]
        start: String,
        #[arg(long, default_value = synthetic::ENTITY)]
        entity: String,
        /// Output file; stdout if omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SchedCommand {
    /// Run the scheduler until interrupted.
    Run {
        /// Interval between polls, e.g. `60s`.
        #[arg(long)]
        poll: Option<String>,
        /// Interval between schedule updates, e.g. `5m`.
        #[arg(long)]
        update: Option<String>,
        /// Worker pool size.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print the queue state as JSON.
    Queues,
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Store a model definition from a JSON file (`-` reads stdin).
    Put {
        /// Model JSON file, or `-` for stdin.
        json: PathBuf,
    },
    /// List models.
    List {
        /// Only models whose target is on this entity.
        #[arg(long)]
        entity: Option<String>,
        /// Only models whose target is this signal.
        #[arg(long)]
        signal: Option<String>,
        /// Include models on related entities.
        #[arg(long)]
        related: bool,
        /// Print the bus reply as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum ForecastCommand {
    /// Forecast next to observations for one context.
    Show {
        entity: String,
        signal: String,
        /// Start, RFC 3339; defaults to the first forecast point.
        #[arg(long)]
        from: Option<String>,
        /// End (exclusive), RFC 3339; defaults to after the last forecast point.
        #[arg(long)]
        to: Option<String>,
        /// `latest` or a version id.
        #[arg(long, default_value = "latest")]
        producer: String,
        /// Print the comparison as JSON.
        #[arg(long)]
        json: bool,
    },
}

type Fallible<T> = Result<T, Box<dyn std::error::Error>>;

fn open_platform(cfg: &Config, workers: usize) -> Fallible<Platform> {
    Ok(Platform::open(PlatformConfig {
        data_dir: Some(cfg.data_dir.clone()),
        sync: true,
        workers,
        clock: Arc::new(Clock::wall()),
        holidays: cfg.holiday_dates()?,
        ..PlatformConfig::default()
    })?)
}

fn read_input(path: &Path) -> Fallible<Vec<u8>> {
    if path == Path::new("-") {
        let mut buf = Vec::new();
        io::stdin().read_to_end(&mut buf)?;
        return Ok(buf);
    }
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn print_json<T: serde::Serialize>(v: &T) -> Fallible<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn api_error(e: ApiError) -> Box<dyn std::error::Error> {
    let mut text = e.to_string();
    for d in &e.diagnostics {
        text.push_str(&format!("\n  {}: {}", d.step, d.message));
    }
    text.into()
}

fn opt(v: Option<impl ToString>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn shutdown_signal() -> impl std::future::Future<Output = ()> {
    async {
        #[cfg(unix)]
        {
            use tokio::signal::unix::{signal, SignalKind};
            let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = term.recv() => {}
            }
        }
        #[cfg(not(unix))]
        {
            let _ = tokio::signal::ctrl_c().await;
        }
    }
}

fn runtime() -> Fallible<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

/// Default window of `forecast show`: everything any forecast layer of the
/// context covers.
fn forecast_span(p: &Platform, entity: &str, signal: &str) -> Fallible<Option<(Timestamp, Timestamp)>> {
    let key = p.context.resolve_context(entity, signal)?;
    let mut span: Option<(Timestamp, Timestamp)> = None;
    for l in p.timeseries.layers(key).into_iter().filter(|l| l.kind == LayerKind::Forecast) {
        let pts = p.timeseries.layer_points(l.id);
        if let (Some(a), Some(b)) = (pts.first(), pts.last()) {
            span = Some(span.map_or((a.ts, b.ts + 1), |(f, t)| (f.min(a.ts), t.max(b.ts + 1))));
        }
    }
    Ok(span)
}

fn run(cli: Cli) -> Fallible<()> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(d) = cli.data_dir {
        cfg.data_dir = d;
    }
    match cli.command {
        Command::Serve {
            port,
            host,
            workers,
            poll,
            update,
            no_scheduler,
        } => {
            let poll = parse_duration(poll.as_deref().unwrap_or(&cfg.poll))?;
            let update = parse_duration(update.as_deref().unwrap_or(&cfg.update))?;
            let p = open_platform(&cfg, workers.unwrap_or(cfg.workers))?;
            let sched = (!no_scheduler).then(|| p.spawn_scheduler(poll, update));
            let addr: SocketAddr = format!("{host}:{}", port.unwrap_or(cfg.port)).parse()?;
            let rt = runtime()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                info!("listening on http://{}", listener.local_addr()?);
                http::serve(listener, http::router(p.bus.clone(), IngestOptions::default()), shutdown_signal()).await
            })?;
            if let Some(s) = sched {
                s.stop();
            }
        }
        Command::Ingest {
            csv,
            strict,
            entity_type,
            signal_type,
            unit,
            json,
        } => {
            let input = read_input(&csv)?;
            let p = open_platform(&cfg, 0)?;
            let opts = IngestOptions {
                strict,
                entity_type,
                signal_type,
                unit,
            };
            let report = ingest_csv(&p.bus, &input[..], &opts)?;
            if json {
                print_json(&report)?;
            } else {
                println!(
                    "rows {}  stored {}  contexts {}  errors {}",
                    report.rows,
                    report.stored,
                    report.contexts,
                    report.errors.len()
                );
                for e in &report.created_entities {
                    println!("created entity {e}");
                }
                for s in &report.created_signals {
                    println!("created signal {s}");
                }
                for e in &report.errors {
                    println!("line {}: {}: {}", e.line, e.error, e.detail);
                }
            }
        }
        Command::Sched(SchedCommand::Run { poll, update, workers }) => {
            let poll = parse_duration(poll.as_deref().unwrap_or(&cfg.poll))?;
            let update = parse_duration(update.as_deref().unwrap_or(&cfg.update))?;
            let workers = workers.unwrap_or(cfg.workers);
            let p = open_platform(&cfg, workers)?;
            info!("scheduler running with {workers} workers");
            let handle = p.spawn_scheduler(poll, update);
            runtime()?.block_on(shutdown_signal());
            handle.stop();
        }
        Command::Sched(SchedCommand::Queues) => {
            let p = open_platform(&cfg, cfg.workers)?;
            p.scheduler.init()?;
            let q: QueuesResponse = p.bus.call(queues::SCHED_QUEUES, &serde_json::json!({})).map_err(|e| api_error(ApiError::from_bus(e)))?;
            print_json(&q)?;
        }
        Command::Model(ModelCommand::Put { json }) => {
            let body: serde_json::Value = serde_json::from_slice(&read_input(&json)?)?;
            let p = open_platform(&cfg, 0)?;
            let m: ModelResponse = p.bus.call(queues::MODEL_PUT, &body).map_err(|e| api_error(ApiError::from_bus(e)))?;
            print_json(&m)?;
        }
        Command::Model(ModelCommand::List {
            entity,
            signal,
            related,
            json,
        }) => {
            let p = open_platform(&cfg, 0)?;
            let list: ModelListResponse = p
                .bus
                .call(
                    queues::MODEL_LIST,
                    &ModelListQuery {
                        entity,
                        signal,
                        include_related: related,
                    },
                )
                .map_err(|e| api_error(ApiError::from_bus(e)))?;
            if json {
                print_json(&list)?;
            } else {
                println!("{:>4}  {:<24} {:<28} {:>7} {:>7}", "id", "name", "target", "latest", "active");
                for m in list.models {
                    println!(
                        "{:>4}  {:<24} {:<28} {:>7} {:>7}",
                        m.id,
                        m.name,
                        format!("{}/{}", m.target.entity, m.target.signal),
                        opt(m.latest_version),
                        opt(m.active_version)
                    );
                }
            }
        }
        Command::Forecast(ForecastCommand::Show {
            entity,
            signal,
            from,
            to,
            producer,
            json,
        }) => {
            let p = open_platform(&cfg, 0)?;
            let producer: Producer = serde_json::from_value(serde_json::Value::String(producer))?;
            let span = match (from, to) {
                (Some(f), Some(t)) => Some((parse_timestamp(&f)?, parse_timestamp(&t)?)),
                (f, t) => forecast_span(&p, &entity, &signal)?.map(|(a, b)| {
                    (
                        f.and_then(|f| parse_timestamp(&f).ok()).unwrap_or(a),
                        t.and_then(|t| parse_timestamp(&t).ok()).unwrap_or(b),
                    )
                }),
            };
            let (from, to) = span.unwrap_or((0, 0));
            let cmp: CompareResponse = p
                .bus
                .call(
                    queues::TS_COMPARE,
                    &CompareQuery {
                        context: ContextRef::new(entity, signal),
                        from,
                        to,
                        producer,
                    },
                )
                .map_err(|e| api_error(ApiError::from_bus(e)))?;
            if json {
                print_json(&cmp)?;
            } else {
                let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
                println!(
                    "{:<20} {:>10} {:>10} {:>10} {:>10} {:>10} {:>8}",
                    "ts", "observed", "forecast", "sigma", "lower", "upper", "version"
                );
                for r in &cmp.rows {
                    println!(
                        "{:<20} {:>10} {:>10} {:>10} {:>10} {:>10} {:>8}",
                        format_timestamp(r.ts),
                        num(r.observed),
                        num(r.forecast),
                        num(r.sigma),
                        num(r.lower),
                        num(r.upper),
                        opt(r.producer)
                    );
                }
                println!("rmse {}  mae {}  n {}", num(cmp.rmse), num(cmp.mae), cmp.n);
            }
        }
        Command::Fixture {
            days,
            seed,
            start,
            entity,
            output,
        } => {
            let rows = synthetic::generate(&FixtureConfig {
                start: parse_timestamp(&start)?,
                days,
                seed,
                entity,
            });
            let csv = synthetic::to_csv(&rows);
            match output {
                Some(path) => File::create(&path)
                    .and_then(|mut f| f.write_all(csv.as_bytes()))
                    .map_err(|e| format!("{}: {e}", path.display()))?,
                None => io::stdout().lock().write_all(csv.as_bytes())?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
