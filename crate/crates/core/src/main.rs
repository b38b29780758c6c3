use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gridloc::config::PipelineConfig;
use gridloc::evalgt::format_table;
use gridloc::gridmap::MapType;
use gridloc::mcl::FilterMode;
use gridloc::pipeline::Run;
use gridloc::Error;

#[derive(Parser)]
#[command(
    name = "gridloc",
    version,
    about = "Grid-map building, SLAM and localization on synthetic logs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value settings file; defaults apply to missing keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory holding all artifacts
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world plus mapping and test logs with their truth
    Simulate(Common),
    /// Synchronize and filter both logs into packages
    Preprocess(Common),
    /// Fit the odometry bias model on the mapping packages
    CalibrateOdom(Common),
    /// Build the reflectivity calibration table from the mapping poses
    CalibrateReflect(Common),
    /// Full SLAM over the mapping log
    Slam(Common),
    /// Build occupancy, reflectivity, semantic and color maps
    BuildMaps(Common),
    /// Localize the test log against one map
    Localize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        map_type: MapType,
        /// STABLE or DIVERSE; the configured mode when absent
        #[arg(long)]
        mode: Option<FilterMode>,
    },
    /// Ground truth of the test log from the occupancy and reflectivity traces
    GroundTruth(Common),
    /// Accuracy of one trace against the ground truth
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        map_type: MapType,
        #[arg(long)]
        mode: Option<FilterMode>,
        /// t,x,y,theta CSV to compare against instead of the built ground truth
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Write PGM/PPM images of the built maps
    Render(Common),
    /// Run every stage and localize with all map types in both modes
    Replicate(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 1,
        Error::Diverged(_) => 3,
        _ => 2,
    }
}

fn open(c: &Common) -> Result<Run, Error> {
    let config = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    Run::new(&c.out, config, c.seed)
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Simulate(c) => {
            open(&c)?.simulate()?;
            println!("wrote logs to {}", c.out.display());
        }
        Command::Preprocess(c) => print!("{}", open(&c)?.preprocess()?),
        Command::CalibrateOdom(c) => {
            let k = open(&c)?.calibrate_odom()?;
            println!(
                "v_mult={:.5} phi_mult={:.5} phi_add={:.5}",
                k.v_mult, k.phi_mult, k.phi_add
            );
        }
        Command::CalibrateReflect(c) => println!("{} table entries filled", open(&c)?.calibrate_reflect()?),
        Command::Slam(c) => {
            let s = open(&c)?.slam()?;
            println!(
                "{} packages, {} loop candidates, {} loop edges",
                s.packages, s.loop_candidates, s.loop_edges
            );
        }
        Command::BuildMaps(c) => open(&c)?.build_maps()?,
        Command::Localize { common, map_type, mode } => {
            let run = open(&common)?;
            let mode = mode.unwrap_or(run.config.mode);
            let trace = run.localize(map_type, mode)?;
            println!("{} estimates", trace.entries.len());
            if trace.diverged() {
                return Err(Error::Diverged(format!("{map_type} {mode}")));
            }
        }
        Command::GroundTruth(c) => println!("{} poses", open(&c)?.ground_truth()?.len()),
        Command::Evaluate {
            common,
            map_type,
            mode,
            truth,
        } => {
            let run = open(&common)?;
            let mode = mode.unwrap_or(run.config.mode);
            print!("{}", format_table(&[run.evaluate(map_type, mode, truth.as_deref())?]));
        }
        Command::Render(c) => {
            for p in open(&c)?.render()? {
                println!("{}", p.display());
            }
        }
        Command::Replicate(c) => print!("{}", format_table(&open(&c)?.replicate()?)),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
