use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nemo_sim::config::ScenarioConfig;
use nemo_sim::experiment::{self, write_csv};
use nemo_sim::proto::{Mode, Protocol};
use nemo_sim::world::CBR_FLOW;

#[derive(Parser)]
#[command(name = "nemo-sim", version, about = "Packet-level NEMO handover simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and print its CSV row.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        protocol: Option<Protocol>,
        #[arg(long)]
        mode: Option<Mode>,
        /// DMR speed in km/h.
        #[arg(long)]
        speed: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-event TSV: time_us, node, event, detail.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Per-packet hop list: seq, then node names.
        #[arg(long)]
        paths: Option<PathBuf>,
        /// Per-packet delay series: seq, created_s, delivered_s, delay_ms, bs.
        #[arg(long)]
        delays: Option<PathBuf>,
    },
    /// Run every protocol at each speed.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "15,30,45,60,75,90")]
        speeds: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        protocols: Vec<Protocol>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn output(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn load(path: &Option<PathBuf>) -> Result<ScenarioConfig, String> {
    match path {
        Some(p) => ScenarioConfig::load(p).map_err(|e| e.to_string()),
        None => Ok(ScenarioConfig::default()),
    }
}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nemo-sim: {e}");
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: Cli) -> Result<(), String> {
    match cli.cmd {
        Cmd::Run {
            config,
            protocol,
            mode,
            speed,
            seed,
            out,
            trace,
            paths,
            delays,
        } => {
            let mut cfg = load(&config)?;
            cfg.protocol = protocol.unwrap_or(cfg.protocol);
            cfg.mode = mode.unwrap_or(cfg.mode);
            cfg.dmr_speed_kmh = speed.unwrap_or(cfg.dmr_speed_kmh);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.validate().map_err(|e| e.to_string())?;
            let (run, rep) = experiment::run(&cfg, trace.is_some());
            if let (Some(p), Some(t)) = (&trace, &run.trace) {
                std::fs::write(p, t).map_err(|e| format!("{}: {e}", p.display()))?;
            }
            if let Some(p) = &paths {
                let mut w = output(&Some(p.clone())).map_err(|e| e.to_string())?;
                for (seq, path) in &rep.per_packet_path {
                    let names: Vec<&str> = path.iter().map(|n| run.topo.name(*n)).collect();
                    writeln!(w, "{seq}\t{}", names.join(" ")).map_err(|e| e.to_string())?;
                }
            }
            if let Some(p) = &delays {
                let mut w = output(&Some(p.clone())).map_err(|e| e.to_string())?;
                writeln!(w, "seq\tcreated_s\tdelivered_s\tdelay_ms\tbs").map_err(|e| e.to_string())?;
                for r in run.flow(CBR_FLOW) {
                    let (Some(at), Some(bs)) = (r.delivered_at, r.serving_bs(&run.topo)) else { continue };
                    writeln!(
                        w,
                        "{}\t{:.6}\t{:.6}\t{:.3}\t{}",
                        r.seq,
                        r.created_at.as_secs_f64(),
                        at.as_secs_f64(),
                        (at - r.created_at).as_millis_f64(),
                        run.topo.name(bs)
                    )
                    .map_err(|e| e.to_string())?;
                }
            }
            let w = output(&out).map_err(|e| e.to_string())?;
            write_csv(w, &[rep]).map_err(|e| e.to_string())
        }
        Cmd::Sweep {
            config,
            speeds,
            seeds,
            protocols,
            out,
            threads,
        } => {
            let cfg = load(&config)?;
            if speeds.is_empty() || speeds.iter().any(|s| !(*s > 0.0)) {
                return Err("--speeds needs positive values".into());
            }
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let protocols = if protocols.is_empty() {
                vec![Protocol::NemoBs, Protocol::DiffNemo, Protocol::DiffFhNemo]
            } else {
                protocols
            };
            let points = experiment::sweep_points(&cfg, &protocols, &speeds, &seeds);
            let reps = experiment::run_all(&points, threads.unwrap_or_else(experiment::default_threads));
            let w = output(&out).map_err(|e| e.to_string())?;
            write_csv(w, &reps).map_err(|e| e.to_string())
        }
    }
}
