use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use complai_client::{Client, ClientError};
use complai_core::api::SliceRequest;
use complai_core::drift::oot_drift;
use complai_core::fairness::{fairness_audit, FairnessMode, FairnessOptions};
use complai_core::scores::Component;
use complai_core::synth::write_loan_demo;
use complai_core::tabular::{Favorable, SliceQuery};
use complai_core::workbench::{
    gate, Policy, ScanConfig, ScanReport, Session, Verdict, WorkbenchError,
};
use complai_service::{AppState, DEFAULT_PORT};

const EXIT_GATE_FAIL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_PIPELINE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "complai",
    version,
    about = "Counterfactual audit of black-box tabular models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full audit and write the JSON report.
    Scan {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Gate the fresh report against this policy.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Check a report against minimum component scores.
    Gate {
        /// Report to check; defaults to the config's output path.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        policy: PathBuf,
    },
    /// Drift susceptibility between the training split and an out-of-time window.
    Drift {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Flip-test and disparate impact over protected attributes.
    Fairness {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset to audit (replaces the validation split).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Predict, explain and attribute one instance.
    Whatif {
        #[command(flatten)]
        target: Target,
        /// Instance as a JSON object `{feature: value}` or array.
        #[arg(long)]
        instance: String,
    },
    /// Performance on a slice of the evaluation data.
    Slice {
        #[command(flatten)]
        target: Target,
        /// Slice predicates as a JSON array, e.g. `[{"feature":"age","op":"ge","value":60}]`.
        #[arg(long, default_value = "[]")]
        query: String,
    },
    /// Fetch the report served by a running service.
    Report {
        #[arg(long)]
        server: String,
    },
    /// Serve the report, What-If and slice API.
    Serve {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Report to serve; scanned first when missing.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
    },
    /// Write a synthetic loan-approval workspace with a ready-to-run scan.json.
    Demo {
        #[arg(long, default_value = "complai_demo")]
        dir: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

/// Where What-If and slice requests go: a running service or a local session.
#[derive(Args)]
struct Target {
    /// Base URL of a running service.
    #[arg(long, conflicts_with = "config")]
    server: Option<String>,
    /// Scan config for a local session.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// `--config` plus per-field overrides.
#[derive(Args, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    oot: Option<PathBuf>,
    /// `builtin:logistic|linear|knn`, `exec:<command>` or an HTTP base URL.
    #[arg(long)]
    model: Option<String>,
    /// Comma-separated protected attributes.
    #[arg(long, value_delimiter = ',')]
    protected: Option<Vec<String>>,
    /// Favorable class, or `lo:hi` prediction range (either end may be empty).
    #[arg(long)]
    favorable: Option<String>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<FairnessMode>,
    #[arg(long)]
    intersectional: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<FairnessMode, String> {
    match s {
        "synthetic" => Ok(FairnessMode::Synthetic),
        "real" => Ok(FairnessMode::Real),
        _ => Err(format!("expected `synthetic` or `real`, got `{s}`")),
    }
}

/// Errors in how the command was invoked rather than in the pipeline.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ScanConfig> {
        let mut cfg = match &self.config {
            Some(path) => ScanConfig::load(path)?,
            None => {
                let need = |v: &Option<PathBuf>, flag: &str| {
                    v.clone()
                        .ok_or_else(|| usage(format!("either --config or --{flag} is required")))
                };
                let train = need(&self.train, "train")?;
                let validation = self.validation.clone().unwrap_or_else(|| train.clone());
                let model = self
                    .model
                    .as_deref()
                    .ok_or_else(|| usage("either --config or --model is required"))?;
                ScanConfig::new(
                    need(&self.schema, "schema")?,
                    train,
                    validation,
                    model.parse().map_err(|e| usage(format!("{e}")))?,
                )
            }
        };
        if self.config.is_some() {
            if let Some(p) = &self.schema {
                cfg.schema = p.clone();
            }
            if let Some(p) = &self.train {
                cfg.train = p.clone();
            }
            if let Some(p) = &self.validation {
                cfg.validation = p.clone();
            }
            if let Some(m) = &self.model {
                cfg.model = m.parse().map_err(|e| usage(format!("{e}")))?;
            }
        }
        if let Some(p) = &self.oot {
            cfg.oot = Some(p.clone());
        }
        if let Some(p) = &self.protected {
            cfg.protected = Some(p.clone());
        }
        if let Some(f) = &self.favorable {
            cfg.favorable = Some(
                f.parse::<Favorable>()
                    .map_err(|e| usage(format!("--favorable: {e}")))?,
            );
        }
        if let Some(m) = self.mode {
            cfg.fairness_mode = m;
        }
        if self.intersectional {
            cfg.intersectional = true;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    let written = serde_json::to_writer_pretty(&mut out, v)
        .map_err(std::io::Error::from)
        .and_then(|()| writeln!(out));
    match written {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn fmt_score(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |s| format!("{s:.2}"))
}

fn print_scorecard(report: &ScanReport) {
    let card = &report.scorecard;
    for c in Component::ALL {
        let name = serde_json::to_value(c)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        println!("{name:<15} {}", fmt_score(card.component(c)));
    }
    println!("{:<15} {}", "trust", fmt_score(card.trust));
    if !report.skipped.rows.is_empty() {
        println!("skipped rows    {}", report.skipped.rows.len());
    }
}

fn print_verdict(v: &Verdict) {
    if v.pass {
        println!("gate: PASS");
    } else {
        println!("gate: FAIL");
        for x in &v.violations {
            println!("  {:?} {:.2} < {:.2}", x.component, x.score, x.threshold);
        }
        if let Some(t) = &v.trust_violation {
            println!("  trust {:.2} < {:.2}", t.score, t.threshold);
        }
    }
    for c in &v.unscored {
        println!("  {c:?} not scored in this report");
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Scan { cfg, policy } => {
            let policy = policy.map(Policy::load).transpose()?;
            let cfg = cfg.resolve()?;
            let out = cfg.out.clone();
            let report = complai_core::workbench::scan(cfg)?;
            print_scorecard(&report);
            println!("report written to {}", out.display());
            if let Some(p) = policy {
                let verdict = gate(&report.scorecard, &p);
                print_verdict(&verdict);
                if !verdict.pass {
                    return Ok(ExitCode::from(EXIT_GATE_FAIL));
                }
            }
        }
        Command::Gate {
            report,
            config,
            policy,
        } => {
            let policy = Policy::load(&policy)?;
            let path = match (report, config) {
                (Some(r), _) => r,
                (None, Some(c)) => ScanConfig::load(&c)?.out,
                (None, None) => bail!(usage("gate needs --report or --config")),
            };
            let report = ScanReport::load(&path)?;
            let verdict = gate(&report.scorecard, &policy);
            print_verdict(&verdict);
            if !verdict.pass {
                return Ok(ExitCode::from(EXIT_GATE_FAIL));
            }
        }
        Command::Drift { cfg, threshold } => {
            let mut cfg = cfg.resolve()?;
            if cfg.oot.is_none() {
                bail!(usage(
                    "drift needs an out-of-time window (--oot or `oot` in the config)"
                ));
            }
            if let Some(t) = threshold {
                cfg.drift_threshold = t;
            }
            let threshold = cfg.drift_threshold;
            let workers = cfg.workers;
            let tolerance = cfg.tolerance;
            let session = Session::open(cfg)?;
            let oot = session.oot.as_ref().expect("oot configured");
            let report = oot_drift(
                &session.model,
                &session.cache,
                oot,
                Some(tolerance),
                &session.nice,
                threshold,
                workers,
            )
            .map_err(|source| WorkbenchError::Drift {
                stage: complai_core::workbench::Stage::Drift,
                source,
            })?;
            print_json(&report)?;
        }
        Command::Fairness { cfg, data } => {
            let mut cfg = cfg.resolve()?;
            if let Some(d) = data {
                cfg.validation = d;
            }
            let session = Session::open(cfg)?;
            let attributes = session.protected_attributes();
            if attributes.is_empty() {
                bail!(usage(
                    "no protected attributes: pass --protected or declare them in the schema"
                ));
            }
            let opts = FairnessOptions {
                attributes,
                favorable: session.config.favorable.clone(),
                mode: session.config.fairness_mode,
                intersectional: session.config.intersectional,
                aggregation: session.config.distance.aggregation,
            };
            let report = fairness_audit(
                &session.validation,
                &opts,
                &session.model,
                &session.nice,
                Some(session.config.tolerance),
                session.config.workers,
            )
            .map_err(|source| WorkbenchError::Fairness {
                stage: complai_core::workbench::Stage::Fairness,
                source,
            })?;
            print_json(&report)?;
        }
        Command::Whatif { target, instance } => {
            let value: serde_json::Value = serde_json::from_str(&instance)
                .map_err(|e| usage(format!("--instance is not JSON: {e}")))?;
            match (target.server, target.config) {
                (Some(server), _) => {
                    let client = Client::new(&server)?;
                    let r = runtime()?.block_on(client.whatif(&value))?;
                    print_json(&r)?;
                }
                (None, Some(config)) => {
                    let session = Session::open(ScanConfig::load(&config)?)?;
                    let x = session.parse_instance(&value)?;
                    print_json(&session.whatif(x)?)?;
                }
                (None, None) => bail!(usage("whatif needs --server or --config")),
            }
        }
        Command::Slice { target, query } => {
            let predicates = serde_json::from_str(&query)
                .map_err(|e| usage(format!("--query is not a predicate array: {e}")))?;
            let query = SliceQuery { predicates };
            match (target.server, target.config) {
                (Some(server), _) => {
                    let client = Client::new(&server)?;
                    let req = SliceRequest {
                        query,
                        metric_weights: None,
                    };
                    print_json(&runtime()?.block_on(client.slice(&req))?)?;
                }
                (None, Some(config)) => {
                    let session = Session::open(ScanConfig::load(&config)?)?;
                    print_json(&session.slice_report(&query, None)?)?;
                }
                (None, None) => bail!(usage("slice needs --server or --config")),
            }
        }
        Command::Report { server } => {
            let client = Client::new(&server)?;
            print_json(&runtime()?.block_on(client.report())?)?;
        }
        Command::Serve {
            cfg,
            report,
            host,
            port,
        } => {
            let cfg = cfg.resolve()?;
            cfg.validate()?;
            runtime()?.block_on(serve(cfg, report, &host, port))?;
        }
        Command::Demo { dir, seed } => {
            let files = write_loan_demo(&dir, seed)
                .with_context(|| format!("writing demo into {}", dir.display()))?;
            println!("demo workspace written to {}", dir.display());
            println!(
                "run: complai scan --config {}",
                display_path(&files.config_path)
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn display_path(p: &Path) -> String {
    p.display().to_string()
}

async fn serve(cfg: ScanConfig, report: Option<PathBuf>, host: &str, port: u16) -> Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port))
        .await
        .with_context(|| format!("binding {host}:{port}"))?;
    let addr = listener.local_addr()?;
    println!("listening on http://{addr}");
    let state = AppState::new();
    let loader = state.load_in_background(cfg, report);
    tokio::spawn(async move {
        match loader.await {
            Ok(Ok(())) => {}
            Ok(Err(e)) => {
                tracing::error!(error = %e, code = e.code(), "loading the session failed")
            }
            Err(e) => tracing::error!(error = %e, "loader task failed"),
        }
    });
    tokio::select! {
        r = complai_service::serve(listener, state) => r?,
        _ = tokio::signal::ctrl_c() => {}
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    if let Some(e) = err.downcast_ref::<WorkbenchError>() {
        return match e.code() {
            "InvalidConfig" | "MissingFile" | "MalformedPolicy" | "MalformedReport" => EXIT_USAGE,
            _ => EXIT_PIPELINE,
        };
    }
    if let Some(ClientError::BadUrl(_)) = err.downcast_ref::<ClientError>() {
        return EXIT_USAGE;
    }
    EXIT_PIPELINE
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("COMPLAI_LOG")
                .unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
