use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use vidprop_bench::checks::{gradient_checks, normalization_check, oracle_checks, Check};
use vidprop_bench::config::ExperimentConfig;
use vidprop_bench::data::generate_sequence;
use vidprop_bench::experiment::{metrics_csv, resolve_output_dir, run_ablation, run_experiment, evaluate, Dataset, Suite};
use vidprop_bench::features::{encode_pgm, write_task_images};
use vidprop_core::checkpoint;
use vidprop_core::flops::{model_report, CountingMode};
use vidprop_core::network::{build_schedule_routed, ScheduleMode, SlowFastNet};

#[derive(Parser)]
#[command(name = "vidprop", version, about = "Slow/fast video network with local attention propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Run every finite-difference gradient check.
    Gradcheck,
    /// Compare the attention kernel against its reference implementations.
    OracleTest {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a per-layer cost report for a configuration.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Frames to schedule (defaults to K).
        #[arg(long)]
        frames: Option<usize>,
        /// Count a multiply-accumulate as two FLOPs.
        #[arg(long)]
        mac_as_2: bool,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Write one synthetic sequence as PPM frames and PGM label and depth maps.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one configuration.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on the configuration's evaluation sequences.
    Eval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Where to write metrics.csv (defaults to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every variant of an ablation suite.
    Ablate {
        config: PathBuf,
        #[arg(long, default_value = "loss")]
        suite: Suite,
    },
    /// Write per-task feature images for one frame of a synthetic sequence.
    DumpFeatures {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        sequence_seed: u64,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn report(checks: &[Check]) -> bool {
    for c in checks {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        println!("{status} {:<48} max error {:.3e} (tolerance {:.0e})", c.name, c.value, c.tolerance);
    }
    checks.iter().all(Check::passed)
}

fn load_net(cfg: &ExperimentConfig, ckpt: &Path) -> Result<SlowFastNet> {
    let mut net = SlowFastNet::new(cfg.network(), 0)?;
    checkpoint::load_into(ckpt, &mut net.store).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(net)
}

fn ppm(frame: &vidprop_core::Tensor, h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = frame.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + p] * 255.0).round() as u8);
        }
    }
    out
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gradcheck => Ok(report(&gradient_checks())),
        Command::OracleTest { cases, seed } => {
            let mut checks = vec![normalization_check(cases, seed)];
            checks.extend(oracle_checks(cases, seed.wrapping_add(1)));
            Ok(report(&checks))
        }
        Command::Flops { config, frames, mac_as_2, format } => {
            let cfg = load_config(config.as_deref())?;
            let n = frames.unwrap_or(cfg.k);
            let schedule = build_schedule_routed(n, cfg.k, ScheduleMode::Periodic, cfg.routing)?;
            let mode = if mac_as_2 { CountingMode::MacAs2 } else { CountingMode::MacAs1 };
            let r = model_report(&cfg.network(), (cfg.height, cfg.width), &schedule, mode)?;
            match format {
                Format::Text => print!("{}", r.to_text()),
                Format::Csv => print!("{}", r.to_csv()),
            }
            Ok(true)
        }
        Command::Generate { config, seed, out } => {
            let cfg = load_config(config.as_deref())?;
            let s = generate_sequence(&cfg.data_params(), seed)?;
            std::fs::create_dir_all(&out)?;
            let (h, w) = (s.height, s.width);
            let scale = (255 / cfg.num_objects.max(1)) as u8;
            for t in 0..s.len() {
                std::fs::write(out.join(format!("frame{t:03}.ppm")), ppm(&s.frames[t], h, w))?;
                let labels: Vec<u8> = s.seg_labels[t].iter().map(|&l| l as u8 * scale).collect();
                std::fs::write(out.join(format!("labels{t:03}.pgm")), encode_pgm(&labels, h, w))?;
                let depth = vidprop_bench::features::normalize(&s.depth_maps[t]);
                std::fs::write(out.join(format!("depth{t:03}.pgm")), encode_pgm(&depth, h, w))?;
            }
            println!("wrote {} frames to {}", s.len(), out.display());
            Ok(true)
        }
        Command::Train { config } => {
            let (dir, r) = run_experiment(&config)?;
            print!("{}", metrics_csv(&r.metrics));
            println!("results in {}", dir.display());
            Ok(true)
        }
        Command::Eval { config, checkpoint, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let net = load_net(&cfg, &checkpoint)?;
            let data = Dataset::generate(&cfg)?;
            let csv = metrics_csv(&evaluate(&net, &data.eval, cfg.k)?);
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
            Ok(true)
        }
        Command::Ablate { config, suite } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = resolve_output_dir(&cfg.output_dir);
            std::fs::create_dir_all(&dir)?;
            run_ablation(&cfg, suite, &dir)?;
            print!("{}", std::fs::read_to_string(dir.join("ablation.csv"))?);
            Ok(true)
        }
        Command::DumpFeatures { config, checkpoint, sequence_seed, frame, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let net = load_net(&cfg, &checkpoint)?;
            let s = generate_sequence(&cfg.data_params(), sequence_seed)?;
            if frame >= s.len() {
                bail!("frame {frame} out of range for a {}-frame sequence", s.len());
            }
            let frames: Vec<_> = (0..=frame).map(|t| s.frame_batch(t)).collect();
            let schedule = build_schedule_routed(frames.len(), cfg.k, ScheduleMode::Periodic, cfg.routing)?;
            let feats = net.task_features(&frames, &schedule)?;
            let maps: Vec<_> = feats
                .iter()
                .zip(&cfg.network().tasks)
                .map(|(t, kind)| (kind.name().to_string(), t.shape().to_vec(), t.data().to_vec()))
                .collect();
            for p in write_task_images(&out, &maps)? {
                println!("{}", p.display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
