//! Train, evaluate and write results for one configuration, plus ablation
//! suites built from config overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidprop_core::checkpoint;
use vidprop_core::network::{eval_offset_averaged, Branch, OffsetMetrics, Propagation, SlowFastNet};
use vidprop_core::training::{LossBreakdown, TrainClip, TrainLog, Trainer};
use vidprop_core::Tensor;

use crate::config::{propagation_name, ExperimentConfig};
use crate::data::{generate_sequence, stack_frame, SyntheticSequence};
use crate::metrics::{argmax_channels, Confusion, DepthAccumulator};
use crate::plot::{line_plot, Series};

/// Overrides the root that relative `output_dir` values are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "VIDPROP_OUTPUT_ROOT";

pub const METRICS_HEADER: &str = "offset,miou,pixel_acc,depth_abs,depth_rel,gflops_per_frame";
pub const SUMMARY_HEADER: &str = "miou_nonkey,miou_mean,pixel_acc,depth_abs,depth_rel,gflops_per_frame,l1_init,l1_final";
pub const ABLATION_HEADER: &str =
    "variant,propagation,window,k,alpha,beta,miou_nonkey,miou_mean,pixel_acc,depth_abs,depth_rel,gflops_per_frame,l1_init,l1_final";

pub fn resolve_output_dir(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// Seed for the `index`-th item of stream `stream`, decorrelated from the
/// experiment seed by a splitmix64 round.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Dataset {
    pub train: Vec<SyntheticSequence>,
    pub eval: Vec<SyntheticSequence>,
}

impl Dataset {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let p = cfg.data_params();
        let gen = |stream, n: usize| -> Result<Vec<SyntheticSequence>> {
            (0..n).map(|i| Ok(generate_sequence(&p, derive_seed(cfg.seed, stream, i as u64))?)).collect()
        };
        Ok(Self { train: gen(1, cfg.train_sequences)?, eval: gen(2, cfg.eval_sequences)? })
    }
}

/// Mean `|slow - fast|` encoder features over the first (key) frame of
/// each sequence.
pub fn mimic_distance(net: &SlowFastNet, seqs: &[SyntheticSequence]) -> Result<f64> {
    let mut total = 0.0;
    for s in seqs {
        let f = s.frame_batch(0);
        let slow = net.encode(&f, Branch::Slow)?;
        let fast = net.encode(&f, Branch::Fast)?;
        total += slow.data().iter().zip(fast.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / slow.numel() as f64;
    }
    Ok(total / seqs.len() as f64)
}

/// Offset-averaged evaluation on the last frame of every sequence.
/// Metric vector: mIoU, pixel accuracy, depth abs error, depth rel error.
pub fn evaluate(net: &SlowFastNet, seqs: &[SyntheticSequence], k: usize) -> Result<OffsetMetrics> {
    let clips: Vec<Vec<Tensor>> = seqs.iter().map(|s| (0..s.len()).map(|t| s.frame_batch(t)).collect()).collect();
    let classes = net.config.tasks[0].out_channels();
    let m = eval_offset_averaged(net, &clips, k, |preds| {
        let mut conf = Confusion::new(classes);
        let mut depth = DepthAccumulator::default();
        for (s, p) in seqs.iter().zip(preds) {
            let last = s.len() - 1;
            let labels = argmax_channels(p[0].data(), classes);
            conf.add(&labels, &s.seg_labels[last]).map_err(|e| vidprop_core::Error::Shape(e.to_string()))?;
            depth
                .add(p[1].data(), &s.depth_maps[last], &vec![true; s.height * s.width])
                .map_err(|e| vidprop_core::Error::Shape(e.to_string()))?;
        }
        let err = |e: crate::metrics::MetricError| vidprop_core::Error::Numerical(e.to_string());
        let (abs, rel) = depth.finish().map_err(err)?;
        Ok(vec![conf.miou().map_err(err)?, conf.pixel_accuracy().map_err(err)?, abs, rel])
    })?;
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub metrics: OffsetMetrics,
    /// Mean segmentation mIoU over offsets `1..K`; `None` when `K = 1`.
    pub miou_nonkey: Option<f64>,
    pub l1_init: f64,
    pub l1_final: f64,
    pub log: Vec<(usize, LossBreakdown)>,
    pub trainer: Trainer,
}

fn sample_clip(cfg: &ExperimentConfig, data: &Dataset, rng: &mut ChaCha8Rng) -> TrainClip {
    let picks: Vec<&SyntheticSequence> = sample(rng, data.train.len(), cfg.batch_size).iter().map(|i| &data.train[i]).collect();
    let start = rng.gen_range(0..=cfg.frames_per_sequence - cfg.clip_frames);
    let (frames, targets) = (start..start + cfg.clip_frames).map(|t| stack_frame(&picks, t)).unzip();
    TrainClip { frames, targets }
}

/// Trains and evaluates without touching the filesystem.
pub fn train_and_evaluate(cfg: &ExperimentConfig, mut on_log: impl FnMut(usize, &LossBreakdown)) -> Result<RunResult> {
    cfg.validate()?;
    let data = Dataset::generate(cfg)?;
    let net = SlowFastNet::new(cfg.network(), derive_seed(cfg.seed, 3, 0))?;
    let mut trainer = Trainer::new(net, cfg.disc_hidden, cfg.loss(), cfg.adam(), cfg.k, derive_seed(cfg.seed, 4, 0))?;
    trainer.disc_opt.config = cfg.disc_adam();
    let l1_init = mimic_distance(&trainer.net, &data.eval)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 5, 0));
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let clip = sample_clip(cfg, &data, &mut rng);
        let b = trainer.step(&clip).with_context(|| format!("training step {step}"))?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            on_log(step, &b);
            log.push((step, b));
        }
    }
    let l1_final = mimic_distance(&trainer.net, &data.eval)?;
    let metrics = evaluate(&trainer.net, &data.eval, cfg.k)?;
    let miou_nonkey = (cfg.k > 1).then(|| metrics.per_offset[1..].iter().map(|m| m[0]).sum::<f64>() / (cfg.k - 1) as f64);
    Ok(RunResult { metrics, miou_nonkey, l1_init, l1_final, log, trainer })
}

pub fn metrics_csv(m: &OffsetMetrics) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    let row = |s: &mut String, label: String, v: &[f64], g: f64| {
        writeln!(s, "{label},{:.6},{:.6},{:.6},{:.6},{:.6}", v[0], v[1], v[2], v[3] * 100.0, g).unwrap();
    };
    for (d, (v, g)) in m.per_offset.iter().zip(&m.gflops_per_offset).enumerate() {
        row(&mut s, d.to_string(), v, *g);
    }
    row(&mut s, "mean".into(), &m.mean, m.mean_gflops);
    s
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

fn summary_fields(r: &RunResult) -> String {
    let m = &r.metrics.mean;
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        opt(r.miou_nonkey),
        m[0],
        m[1],
        m[2],
        m[3] * 100.0,
        r.metrics.mean_gflops,
        r.l1_init,
        r.l1_final
    )
}

/// Trains, evaluates and writes `metrics.csv`, `summary.csv`,
/// `train_log.csv`, `loss_curve.svg`, `metric_vs_offset.svg`,
/// `model.ckpt` and `config.txt` into `out_dir`.
pub fn run_experiment_in(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunResult> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    std::fs::write(out_dir.join("config.txt"), cfg.to_text())?;
    let log_file = std::fs::File::create(out_dir.join("train_log.csv"))?;
    let mut log = TrainLog::new(std::io::BufWriter::new(log_file), &["seg".to_string(), "depth".to_string()])?;
    let start = Instant::now();
    let mut log_err = None;
    let result = train_and_evaluate(cfg, |step, b| {
        if let Err(e) = log.record(step, b, start.elapsed().as_millis()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        bail!("writing train_log.csv: {e}");
    }
    drop(log);

    std::fs::write(out_dir.join("metrics.csv"), metrics_csv(&result.metrics))?;
    std::fs::write(out_dir.join("summary.csv"), format!("{SUMMARY_HEADER}\n{}\n", summary_fields(&result)))?;
    checkpoint::save(&out_dir.join("model.ckpt"), &[&result.trainer.net.store, &result.trainer.disc.store])?;

    let losses = Series { label: "total", points: result.log.iter().map(|(s, b)| (*s as f64, b.total)).collect() };
    let l1 = Series { label: "l1", points: result.log.iter().map(|(s, b)| (*s as f64, b.l1)).collect() };
    std::fs::write(out_dir.join("loss_curve.svg"), line_plot("training loss", "step", "loss", &[losses, l1]))?;
    let by_offset = |j: usize| result.metrics.per_offset.iter().enumerate().map(|(d, m)| (d as f64, m[j])).collect();
    std::fs::write(
        out_dir.join("metric_vs_offset.svg"),
        line_plot(
            "accuracy vs keyframe offset",
            "offset",
            "metric",
            &[Series { label: "mIoU", points: by_offset(0) }, Series { label: "pixel acc", points: by_offset(1) }],
        ),
    )?;
    Ok(result)
}

/// [`run_experiment_in`] with the configured output directory.
pub fn run_experiment(config_path: &Path) -> Result<(PathBuf, RunResult)> {
    let cfg = ExperimentConfig::load(config_path)?;
    let dir = resolve_output_dir(&cfg.output_dir);
    let r = run_experiment_in(&cfg, &dir)?;
    Ok((dir, r))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    /// No propagation, then local attention with no mimicking, L1, L1 + adversarial.
    Loss,
    /// Windows 3, 5, 7 and global attention.
    Window,
    /// K in 1, 3, 5.
    Keyframe,
}

impl std::str::FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "loss" => Ok(Suite::Loss),
            "window" => Ok(Suite::Window),
            "k" => Ok(Suite::Keyframe),
            o => Err(format!("unknown suite `{o}` (loss, window, k)")),
        }
    }
}

/// Named config variants of `base` for `suite`.
pub fn variants(base: &ExperimentConfig, suite: Suite) -> Vec<(String, ExperimentConfig)> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match suite {
        Suite::Loss => vec![
            ("no_propagation".into(), with(&|c| {
                c.propagation = Propagation::None;
                c.alpha = 0.0;
                c.beta = 0.0;
            })),
            ("ila".into(), with(&|c| {
                c.propagation = Propagation::Local;
                c.alpha = 0.0;
                c.beta = 0.0;
            })),
            ("ila_l1".into(), with(&|c| {
                c.propagation = Propagation::Local;
                c.beta = 0.0;
            })),
            ("ila_l1_adv".into(), with(&|c| c.propagation = Propagation::Local)),
        ],
        Suite::Window => {
            let mut v: Vec<(String, ExperimentConfig)> = [3usize, 5, 7]
                .iter()
                .map(|&l| {
                    (format!("window{l}"), with(&|c| {
                        c.propagation = Propagation::Local;
                        c.window = l;
                    }))
                })
                .collect();
            v.push(("global".into(), with(&|c| c.propagation = Propagation::Global)));
            v
        }
        Suite::Keyframe => [1usize, 3, 5].iter().map(|&k| (format!("k{k}"), with(&|c| c.k = k))).collect(),
    }
}

pub fn ablation_row(name: &str, cfg: &ExperimentConfig, r: &RunResult) -> String {
    format!(
        "{name},{},{},{},{:?},{:?},{}",
        propagation_name(cfg.propagation),
        cfg.window,
        cfg.k,
        cfg.alpha,
        cfg.beta,
        summary_fields(r)
    )
}

/// Runs every variant into `out_dir/<variant>` and writes `ablation.csv`.
pub fn run_ablation(base: &ExperimentConfig, suite: Suite, out_dir: &Path) -> Result<Vec<(String, RunResult)>> {
    let mut csv = format!("{ABLATION_HEADER}\n");
    let mut out = Vec::new();
    for (name, cfg) in variants(base, suite) {
        let r = run_experiment_in(&cfg, &out_dir.join(&name)).with_context(|| format!("variant {name}"))?;
        csv.push_str(&ablation_row(&name, &cfg, &r));
        csv.push('\n');
        out.push((name, r));
    }
    std::fs::write(out_dir.join("ablation.csv"), csv)?;
    Ok(out)
}
