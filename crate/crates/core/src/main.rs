use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dsc_core::config::{SemanticStrategy, TrainConfig};
use dsc_core::error::{DscError, Result};
use dsc_core::experiment::{self, ProbeKind};
use dsc_core::probe::{emit_heatmap, FrozenEncoder};
use dsc_core::synthdata::export::export_dataset;
use dsc_core::trainer::make_splits;

#[derive(Parser)]
#[command(name = "dsc", version, about = "Dense contrastive pre-training on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key=value` config file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; may be repeated and is applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Concurrent runs for ablate and sweep.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl Common {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::from_file(p)?,
            None => TrainConfig::default(),
        };
        for a in &self.set {
            c.apply_assignment(a)?;
        }
        if let Some(s) = self.seed {
            c.seed_all(s);
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain one encoder into a fresh run directory.
    Pretrain(Common),
    /// Probe a checkpoint and append the report to its run directory.
    Probe {
        checkpoint: PathBuf,
        #[arg(long, default_value = "pixel")]
        kind: ProbeKind,
    },
    /// Compare semantic strategies over shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "none,km,pm")]
        strategies: Vec<SemanticStrategy>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Sweep the cluster count of the km or pm strategy.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long = "k", value_delimiter = ',', default_value = "2,4,8,16,32")]
        k_values: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Similarity heatmap of one held-out image around an anchor cell.
    Heatmap {
        checkpoint: PathBuf,
        /// Index into the held-out split.
        #[arg(long, default_value_t = 0)]
        image: usize,
        /// Anchor cell as ROW,COL.
        #[arg(long, value_parser = parse_anchor, default_value = "0,0")]
        anchor: (usize, usize),
    },
    /// Write the pretraining images and masks as PNG files.
    Generate(Common),
}

fn parse_anchor(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected ROW,COL")?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((num(r)?, num(c)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| DscError::Io {
            path: dir.to_path_buf(),
            step: 0,
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| DscError::Io {
        path: path.to_path_buf(),
        step: 0,
        source: e,
    })
}

fn hash12(c: &TrainConfig) -> String {
    c.hash()[..12].to_string()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Pretrain(common) => {
            let c = common.resolve()?;
            let run = experiment::pretrain(&c, &common.out)?;
            println!("{}", run.run_dir.display());
        }
        Command::Probe { checkpoint, kind } => {
            let report = experiment::probe_checkpoint(&checkpoint, kind)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Ablate { common, strategies, seeds } => {
            let c = common.resolve()?;
            let rows = experiment::ablate(&c, &strategies, &seeds, &common.out, common.jobs)?;
            let table = experiment::ablation_table(&rows);
            write_text(&common.out.join(format!("ablation_{}.csv", hash12(&c))), &table)?;
            print!("{table}");
        }
        Command::Sweep { common, k_values, seeds } => {
            let c = common.resolve()?;
            let rows = experiment::sweep_k(&c, &k_values, &seeds, &common.out, common.jobs)?;
            let csv = experiment::sweep_csv(&rows);
            write_text(&common.out.join(format!("sweep_{}.csv", hash12(&c))), &csv)?;
            print!("{csv}");
        }
        Command::Heatmap { checkpoint, image, anchor } => {
            let frozen = FrozenEncoder::load(&checkpoint, None)?;
            let (_, eval) = make_splits(&frozen.config)?;
            let sample = eval.get(image).ok_or_else(|| {
                DscError::Input(format!("image {image} outside the held-out split of {}", eval.len()))
            })?;
            let dir = checkpoint.parent().unwrap_or(Path::new(".")).join("heatmaps");
            let stem = format!("img{image}_r{}_c{}", anchor.0, anchor.1);
            let h = emit_heatmap(&frozen, &sample.image, anchor, &dir, &stem)?;
            println!("{}\n{}", h.text_path.display(), h.image_path.display());
        }
        Command::Generate(common) => {
            let c = common.resolve()?;
            let (train, _) = make_splits(&c)?;
            let dir = common.out.join(format!("data_{}", hash12(&c)));
            println!("{}", export_dataset(&train, &dir)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
