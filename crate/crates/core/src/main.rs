use std::fs;
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use log::info;

use vsoa::agent::NodeAgent;
use vsoa::crypto::Pki;
use vsoa::evidence::{evidence_list, evidence_verify, EvidenceQuery, EvidenceStore};
use vsoa::fixtures;
use vsoa::model::NodeProfile;
use vsoa::net::{self, AgentLoop, PlannedInjection, TcpLink};
use vsoa::server::{ComponentCatalog, SecurityServer, ServerConfig};
use vsoa::sim::{run_scenario_with_store, Scenario};
use vsoa::Digest;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(
    name = "vsoa",
    version,
    about = "Virtualized node security with components served on demand"
)]
struct Cli {
    /// Deployment seed. Keys are derived from it, so server and agents must agree.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the security server.
    Serve {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        evidence: PathBuf,
        #[arg(long, default_value_t = net::DEFAULT_TICK_MS)]
        tick_ms: u64,
    },
    /// Run a node agent against a server.
    Agent {
        #[arg(long)]
        server: String,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        stack: PathBuf,
        /// Used when the profile has no node_id line.
        #[arg(long, default_value = "n0")]
        node_id: String,
        /// Stop after this many ticks.
        #[arg(long)]
        ticks: Option<u64>,
        #[arg(long, default_value_t = net::DEFAULT_TICK_MS)]
        tick_ms: u64,
        /// AFTER:VM:RULE plants a built-in rule's pattern (or hex:BYTES) in a guest.
        #[arg(long)]
        inject: Vec<String>,
    },
    /// Run a scenario file in the deterministic simulator.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        trace_out: PathBuf,
        #[arg(long)]
        metrics_out: PathBuf,
        /// Persist evidence here instead of in memory.
        #[arg(long)]
        evidence: Option<PathBuf>,
    },
    /// Inspect an evidence store.
    Evidence {
        #[command(subcommand)]
        command: EvidenceCommand,
    },
    /// Write an example catalog, node stack and profile.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvidenceCommand {
    List {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        node: Option<String>,
        #[arg(long)]
        from_tick: Option<u64>,
        #[arg(long)]
        to_tick: Option<u64>,
    },
    Verify {
        #[arg(long)]
        store: PathBuf,
        hash: String,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
    Verify(String),
}

fn runtime<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{context}: {e}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::Verify(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Serve {
            listen,
            catalog,
            evidence,
            tick_ms,
        } => {
            let pki = Pki::from_seed(seed);
            let catalog = ComponentCatalog::load_dir(&catalog, &pki).map_err(runtime("catalog"))?;
            let store = EvidenceStore::open(&evidence).map_err(runtime("evidence store"))?;
            let server =
                SecurityServer::new(pki, catalog, store, ServerConfig::default()).map_err(runtime("server"))?;
            let listener = TcpListener::bind(&listen).map_err(runtime("listen"))?;
            let addr = listener.local_addr().map_err(runtime("listen"))?;
            println!("listening={addr}");
            info!("serving on {addr}");
            net::serve(listener, server, tick_ms).map_err(runtime("serve"))
        }
        Command::Agent {
            server,
            profile,
            stack,
            node_id,
            ticks,
            tick_ms,
            inject,
        } => {
            let pki = Pki::from_seed(seed);
            let text = fs::read_to_string(&profile).map_err(runtime("profile"))?;
            let profile = NodeProfile::parse(&node_id, &text).map_err(|e| Failure::Usage(e.to_string()))?;
            let stack = fixtures::load_stack(&stack, &profile.node_id, &pki).map_err(runtime("stack"))?;
            let injections = inject
                .iter()
                .map(|s| parse_injection(s))
                .collect::<Result<Vec<_>, _>>()?;
            let server_pk = pki.server().public_key().clone();
            let mut agent = NodeAgent::new(
                pki.node(&profile.node_id),
                pki.publisher_pk().clone(),
                server_pk,
                profile,
                stack,
            );
            let mut link = TcpLink::new(server.as_str(), Duration::from_secs(5)).map_err(runtime("server address"))?;
            let cfg = AgentLoop {
                tick_ms,
                ticks,
                injections,
            };
            net::run_agent(&mut agent, &mut link, &cfg).map_err(runtime("agent"))?;
            for r in agent.replacements() {
                println!("replaced={} new={} downtime={}", r.old_vm, r.new_vm, r.downtime());
            }
            for (vm, addr) in agent.stored_evidence() {
                println!("evidence={vm} hash={addr}");
            }
            Ok(())
        }
        Command::Simulate {
            scenario,
            trace_out,
            metrics_out,
            evidence,
        } => {
            let text = fs::read_to_string(&scenario).map_err(runtime("scenario"))?;
            let mut sc = Scenario::from_toml(&text).map_err(|e| Failure::Usage(e.to_string()))?;
            if let Some(s) = cli.seed {
                sc.seed = s;
            }
            let store = match &evidence {
                Some(dir) => EvidenceStore::open(dir).map_err(runtime("evidence store"))?,
                None => EvidenceStore::in_memory(),
            };
            let outcome = run_scenario_with_store(&sc, store).map_err(|e| match e {
                vsoa::sim::ScenarioError::Runtime(m) => Failure::Runtime(m),
                other => Failure::Usage(other.to_string()),
            })?;
            fs::write(&trace_out, outcome.trace_tsv()).map_err(runtime("trace"))?;
            fs::write(&metrics_out, outcome.metrics.to_kv()).map_err(runtime("metrics"))?;
            Ok(())
        }
        Command::Evidence { command } => match command {
            EvidenceCommand::List {
                store,
                node,
                from_tick,
                to_tick,
            } => {
                let query = EvidenceQuery {
                    node_id: node,
                    from_tick,
                    to_tick,
                };
                let rows = evidence_list(&store, &query).map_err(runtime("evidence list"))?;
                println!("node_id\tvm_id\ttick\thash");
                for row in rows {
                    println!("{}", row.to_tsv());
                }
                Ok(())
            }
            EvidenceCommand::Verify { store, hash } => {
                let address: Digest = hash
                    .parse()
                    .map_err(|_| Failure::Usage(format!("{hash:?} is not a sha-256 hex digest")))?;
                let report = evidence_verify(&store, &address).map_err(runtime("evidence verify"))?;
                print!("{}", report.to_kv());
                if report.passed() {
                    Ok(())
                } else {
                    Err(Failure::Verify(format!("bundle {address}")))
                }
            }
        },
        Command::Fixtures { out } => {
            let pki = Pki::from_seed(seed);
            fixtures::write_fixture_tree(&out, &pki).map_err(runtime("fixtures"))?;
            println!("catalog={}", out.join("catalog").display());
            println!("stack={}", out.join("stack").display());
            println!("profile={}", out.join("profile.txt").display());
            Ok(())
        }
    }
}

fn parse_injection(spec: &str) -> Result<PlannedInjection, Failure> {
    let bad = || {
        Failure::Usage(format!(
            "--inject {spec:?}: expected AFTER:VM:RULE or AFTER:VM:hex:BYTES"
        ))
    };
    let mut parts = spec.splitn(3, ':');
    let (Some(after), Some(vm), Some(what)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(bad());
    };
    let after = after.parse().map_err(|_| bad())?;
    let pattern = match what.strip_prefix("hex:") {
        Some(h) => hex::decode(h).map_err(|_| bad())?,
        None => fixtures::default_ruleset()
            .get(what)
            .map(|r| r.pattern.clone())
            .ok_or_else(bad)?,
    };
    Ok(PlannedInjection {
        after,
        vm_id: vm.to_string(),
        pattern,
    })
}
