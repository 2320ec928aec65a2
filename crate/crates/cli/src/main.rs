use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fleet_core::env::{run_episode, ActionMode, EnvConfig};
use fleet_core::harness::{
    emit_outputs, run_scaling, run_seed, save_agent_checkpoint, RunReport, ScenarioConfig, Strategy,
};
use fleet_core::nn::PolicyNet;
use fleet_core::routes::{synthesize_routes, EpisodeConfig, Route, RouteLabel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "fleet", about = "Shared learning of powertrain control policies for vehicle fleets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fleet as described by a scenario config.
    Run(RunArgs),
    /// Route utilities.
    Routes {
        #[command(subcommand)]
        command: RoutesCommand,
    },
    /// Greedy evaluation of an actor checkpoint on one route.
    Eval(EvalArgs),
    /// Group-regression cost and traffic versus fleet size.
    Scaling(ScalingArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Start from the full-size hyperparameters instead of desk defaults.
    #[arg(long)]
    paper_scale: bool,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long)]
    fleet_size: Option<usize>,
}

#[derive(Subcommand)]
enum RoutesCommand {
    /// Generate synthetic routes from a seed route.
    Synth {
        /// Route file, or one of urban, suburban, highway.
        #[arg(long)]
        seed_route: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Route file, or one of urban, suburban, highway.
    #[arg(long)]
    route: String,
    #[arg(long, default_value_t = 16_000.0)]
    mass_kg: f64,
    /// Write the trajectory CSV here.
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

#[derive(Args)]
struct ScalingArgs {
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8])]
    sizes: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Base scenario config; defaults to a one-route desk run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    paper_scale: bool,
}

fn load_route(spec: &str) -> Result<Route> {
    match spec {
        "urban" | "suburban" | "highway" => Ok(Route::representative(spec.parse::<RouteLabel>()?)?),
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading route {path}"))?;
            Ok(Route::parse(&text, RouteLabel::Custom)?)
        }
    }
}

fn print_summary(reports: &[RunReport]) {
    for r in reports {
        if let Some(last) = r.reward_summary().last() {
            println!(
                "seed {}: {} fleet of {} after {} routes: reward/step mean {:.5} (range {:.5}..{:.5}), initial {:.5}",
                r.seed,
                r.strategy.as_str(),
                r.fleet_size,
                last.cycle,
                last.mean,
                last.min,
                last.max,
                r.initial.mean_reward
            );
        }
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = ScenarioConfig::load(&args.config, args.paper_scale)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = &args.strategy {
        cfg.strategy = s.parse::<Strategy>()?;
    }
    if let Some(c) = args.cycles {
        cfg.cycles = c;
    }
    if let Some(n) = args.fleet_size {
        cfg.fleet_size = n;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.used"), cfg.to_text())?;
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let outcome = run_seed(&cfg, seed, None).with_context(|| format!("seed {seed}"))?;
        let dir = args.out.join("checkpoints").join(format!("seed{seed}"));
        for agent in &outcome.agents {
            save_agent_checkpoint(agent, &dir)?;
        }
        if let Some(c) = &outcome.coordinator {
            std::fs::write(dir.join("group_actor.flnn"), c.group().policy.to_checkpoint())?;
        }
        reports.push(outcome.report);
    }
    emit_outputs(&reports, &args.out)?;
    print_summary(&reports);
    Ok(())
}

fn synth(seed_route: &str, n: usize, seed: u64, out: &Path) -> Result<()> {
    let route = load_route(seed_route)?;
    let set = synthesize_routes(&route, n, seed)?;
    std::fs::create_dir_all(out)?;
    for (i, r) in set.routes.iter().enumerate() {
        let path = out.join(format!("route_{i:03}.route"));
        std::fs::write(&path, r.to_text())?;
        println!(
            "{}: {:.0} s, mean {:.2} m/s, max {:.2} m/s",
            path.display(),
            r.duration_s(),
            r.mean_speed(),
            r.max_speed()
        );
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let bytes = std::fs::read(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let actor = PolicyNet::from_checkpoint(&bytes)?;
    let route = load_route(&args.route)?;
    let episode = EpisodeConfig::nominal(route, args.mass_kg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let result = run_episode(&actor, &EnvConfig::default(), &episode, ActionMode::Greedy, &mut rng)?;
    let m = &result.metrics;
    println!("reward/step      {:.6}", m.mean_reward);
    println!("mpg              {:.4}", m.mpg);
    println!("accel rmse m/s²  {:.4}", m.accel_rmse_m_s2);
    println!("shifts/km        {:.4}", m.shifts_per_km);
    println!("distance m       {:.1}", m.distance_m);
    println!("collided         {}", m.collided);
    if let Some(p) = args.trajectory {
        std::fs::write(p, fleet_core::env::trajectory_csv(&result.steps))?;
    }
    Ok(())
}

fn scaling(args: ScalingArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => ScenarioConfig::load(p, args.paper_scale)?,
        None => {
            let mut c = ScenarioConfig::parse("", args.paper_scale)?;
            c.name = "scaling".into();
            c.cycles = 1;
            c
        }
    };
    if args.sizes.len() < 2 {
        bail!("scaling needs at least two fleet sizes");
    }
    let (reports, table) = run_scaling(&cfg, &args.sizes)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("scaling.csv"), table.to_csv())?;
    emit_outputs(&reports, &args.out)?;
    print!("{}", table.to_csv());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::Routes {
            command: RoutesCommand::Synth { seed_route, n, seed, out },
        } => synth(&seed_route, n, seed, &out),
        Command::Eval(a) => eval(a),
        Command::Scaling(a) => scaling(a),
    }
}
