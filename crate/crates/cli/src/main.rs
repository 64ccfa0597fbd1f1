use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kinetic_core::collision::maxwellian;
use kinetic_core::config::{parse_config, RunConfig};
use kinetic_core::report::{write_reports, Status};
use kinetic_core::suite::run_suite;
use kinetic_core::transport::{duhamel_evaluate, FnInflow};
use kinetic_core::{PhaseState, Tracer, Vec3};

#[derive(Parser)]
#[command(name = "kinetic", version, about = "Checks for kinetic transport with diffuse reflection in convex domains")]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for report.json, timings.json and CSV tables.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    tolerance_scale: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Backward and forward exit of one phase point.
    Trace(Point),
    /// Velocity-lemma sandwich along near-boundary trajectories.
    VelocityLemma,
    /// Collision conservation and moment identities.
    CollisionCheck,
    /// Diffuse-cycle gaps and the tail of the cycle count.
    Cycles,
    /// Singular-integral sweeps.
    KernelBounds,
    /// Evaluates a linear in-flow problem at one phase point.
    SolveInflow(Point),
    /// Picard iteration monitors.
    Picard,
    /// Self-consistent potential checks.
    Vpb,
    /// Runs the checks listed in the configuration (all by default).
    Suite {
        /// Comma-separated check names overriding the configuration.
        #[arg(long, value_delimiter = ',')]
        checks: Option<Vec<String>>,
    },
}

#[derive(clap::Args)]
struct Point {
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [0.0, 0.0, 0.0])]
    x: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [1.0, 0.0, 0.0])]
    v: Vec<f64>,
}

impl Point {
    fn state(&self) -> kinetic_core::Result<PhaseState> {
        if self.x.len() != 3 || self.v.len() != 3 {
            return Err(kinetic_core::Error::invalid("--x and --v take three comma-separated components"));
        }
        Ok(PhaseState::new(self.t, Vec3::from_column_slice(&self.x), Vec3::from_column_slice(&self.v)))
    }
}

fn load(cli: &Cli) -> kinetic_core::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.display().to_string();
    }
    if let Some(t) = cli.tolerance_scale {
        cfg.tolerance_scale = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_checks(mut cfg: RunConfig, checks: Vec<String>) -> kinetic_core::Result<u8> {
    cfg.checks = checks;
    let (report, timings) = run_suite(&cfg)?;
    for c in &report.checks {
        let status = match c.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skipped => "SKIP",
            Status::Error => "ERROR",
        };
        println!("{:<20} {status} ({:.1} s)", c.name, timings.checks.get(&c.name).copied().unwrap_or(0.0));
        for note in c.notes.iter().chain(&c.error) {
            println!("    {note}");
        }
    }
    let written = write_reports(PathBuf::from(&cfg.out).as_path(), &report, &timings)?;
    println!("wrote {} files to {}", written.len(), cfg.out);
    Ok(report.exit_code() as u8)
}

fn run(cli: Cli) -> kinetic_core::Result<u8> {
    let cfg = load(&cli)?;
    let one = |name: &str| vec![name.to_string()];
    match &cli.command {
        Command::Trace(p) => {
            let domain = cfg.domain.build()?;
            let field = cfg.field.build();
            let tracer = Tracer::new(&domain, field.as_ref()).with_options(cfg.solver.trace_options());
            let st = p.state()?;
            let out = serde_json::json!({
                "state": st,
                "backward": tracer.backward_exit(&st)?,
                "forward": tracer.forward_exit(&st)?,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(0)
        }
        Command::SolveInflow(p) => {
            let domain = cfg.domain.build()?;
            let field = cfg.field.build();
            let tracer = Tracer::new(&domain, field.as_ref()).with_options(cfg.solver.trace_options());
            let c = domain.center();
            let data = FnInflow::new(move |x, v| maxwellian(v) * (1.0 + (-4.0 * (x - c).norm_squared()).exp()))
                .with_boundary(|_, _, v| maxwellian(v));
            let value = duhamel_evaluate(&tracer, &data, &p.state()?)?;
            println!("{}", serde_json::to_string_pretty(&value)?);
            Ok(0)
        }
        Command::VelocityLemma => run_checks(cfg, one("velocity-lemma")),
        Command::CollisionCheck => run_checks(cfg, one("collision")),
        Command::Cycles => run_checks(cfg, one("cycles")),
        Command::KernelBounds => run_checks(cfg, one("singular-integrals")),
        Command::Picard => run_checks(cfg, one("picard")),
        Command::Vpb => run_checks(cfg, one("vpb")),
        Command::Suite { checks } => {
            let mut checks = checks.clone().unwrap_or_else(|| cfg.checks.clone());
            checks.retain(|c| !c.is_empty());
            run_checks(cfg, checks)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
