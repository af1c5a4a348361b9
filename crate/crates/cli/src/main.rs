use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gcav::attack::AttackConfig;
use gcav::pipeline::{Pipeline, PipelineConfig, ReportOptions, StageFailure};

#[derive(Parser, Debug)]
#[command(
    name = "gcav",
    version,
    about = "Global concept activation vectors on a synthetic probe stack"
)]
struct Cli {
    /// JSON pipeline config; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact and report directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Skip stages already recorded in the manifest.
    #[arg(long, global = true)]
    resume: bool,
    /// Omit the timestamp from report file names.
    #[arg(long, global = true)]
    stable_names: bool,
    /// Do not write SVG charts.
    #[arg(long, global = true)]
    no_svg: bool,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "GCAV_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every stage in order.
    Run,
    /// Run a single training stage.
    Stage {
        #[arg(value_enum)]
        name: StageName,
    },
    /// Compute TCAV and TGCAV score grids.
    Score,
    /// Run the targeted activation-shift attack.
    Attack,
    /// Export the comparison report.
    Report {
        /// Comma-separated output formats.
        #[arg(long, value_delimiter = ',', default_values = ["csv", "json"])]
        format: Vec<Format>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StageName {
    Gen,
    Target,
    Cavs,
    Ae,
    Align,
    Fuse,
}

impl StageName {
    fn as_str(self) -> &'static str {
        match self {
            StageName::Gen => "gen",
            StageName::Target => "target",
            StageName::Cavs => "cavs",
            StageName::Ae => "ae",
            StageName::Align => "align",
            StageName::Fuse => "fuse",
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if matches!(cli.command, Command::Attack) && cfg.attack.is_none() {
        cfg.attack = Some(AttackConfig::default());
    }
    cfg.workers = cli.threads;
    Ok(cfg)
}

fn timestamp() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    secs.to_string()
}

fn timed(p: &mut Pipeline, stage: &str) -> Result<()> {
    let t0 = Instant::now();
    eprintln!("[{stage}] running");
    p.run_stage(stage)?;
    eprintln!("[{stage}] done in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

/// Config and I/O problems exit with 2; a failing stage exits with its code.
fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let fresh = matches!(cli.command, Command::Run) && !cli.resume;
    let mut p = Pipeline::open(cfg, &cli.out, !fresh)
        .with_context(|| format!("opening {}", cli.out.display()))?;
    p.report = ReportOptions {
        svg: !cli.no_svg,
        timestamp: (!cli.stable_names).then(timestamp),
        ..ReportOptions::default()
    };
    match &cli.command {
        Command::Run => {
            let t0 = Instant::now();
            let summary = p.run(cli.resume, |s| eprintln!("[{s}] running"))?;
            if !summary.skipped.is_empty() {
                eprintln!("skipped (resumed): {}", summary.skipped.join(", "));
            }
            eprintln!("pipeline finished in {:.1}s", t0.elapsed().as_secs_f64());
        }
        Command::Stage { name } => timed(&mut p, name.as_str())?,
        Command::Score => timed(&mut p, "score")?,
        Command::Attack => {
            timed(&mut p, "attack")?;
            eprintln!("run `gcav report` to include the attack rows in the report");
        }
        Command::Report { format } => {
            p.report.csv = format.contains(&Format::Csv);
            p.report.json = format.contains(&Format::Json);
            timed(&mut p, "report")?;
        }
    }
    for f in p.files() {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<StageFailure>()
                .map_or(2, StageFailure::exit_code);
            ExitCode::from(u8::try_from(code).unwrap_or(1))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_parse_globally() {
        let cli = Cli::try_parse_from([
            "gcav",
            "report",
            "--format",
            "csv,json",
            "--stable-names",
            "--seed",
            "3",
        ])
        .unwrap();
        assert!(cli.stable_names);
        assert_eq!(cli.seed, Some(3));
        match cli.command {
            Command::Report { format } => assert_eq!(format, vec![Format::Csv, Format::Json]),
            other => panic!("parsed {other:?}"),
        }
        assert!(Cli::try_parse_from(["gcav", "stage", "score"]).is_err());
    }

    #[test]
    fn unknown_config_keys_fail_before_any_stage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"sead": 1}"#).unwrap();
        let cli = Cli::try_parse_from(["gcav", "--config", path.to_str().unwrap(), "run"]).unwrap();
        assert!(load_config(&cli).is_err());
    }
}
