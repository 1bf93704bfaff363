use std::process::Command;

use vidprop_bench::config::ExperimentConfig;
use vidprop_bench::experiment::{
    run_ablation, run_experiment_in, variants, Suite, ABLATION_HEADER, METRICS_HEADER, SUMMARY_HEADER,
};
use vidprop_bench::features::MID_GRAY;

fn tiny(dir: &std::path::Path) -> ExperimentConfig {
    let text = format!(
        "output_dir = {}\nheight = 32\nwidth = 32\nnum_objects = 2\nframes_per_sequence = 3\n\
         train_sequences = 2\neval_sequences = 2\nsteps = 2\nclip_frames = 3\nk = 3\nlog_every = 1\n\
         slow_stages = 4/2, 6/1, 4/2\nfast_stages = 2/2, 4/2\nse_reduction = 2\ndecoder_widths = 4, 4\ndisc_hidden = 2\n",
        dir.display()
    );
    ExperimentConfig::parse(&text).unwrap()
}

fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    (header, lines.map(|l| l.split(',').map(String::from).collect()).collect())
}

#[test]
fn run_writes_documented_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let r = run_experiment_in(&cfg, tmp.path()).unwrap();
    for f in ["metrics.csv", "summary.csv", "train_log.csv", "loss_curve.svg", "metric_vs_offset.svg", "model.ckpt", "config.txt"] {
        assert!(tmp.path().join(f).is_file(), "{f} missing");
    }

    let (header, rows) = parse_csv(&std::fs::read_to_string(tmp.path().join("metrics.csv")).unwrap());
    assert_eq!(header.join(","), METRICS_HEADER);
    assert_eq!(rows.len(), cfg.k + 1);
    for (d, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), header.len());
        assert_eq!(row[0], if d < cfg.k { d.to_string() } else { "mean".into() });
        let v: Vec<f64> = row[1..].iter().map(|x| x.parse().unwrap()).collect();
        assert!((0.0..=1.0).contains(&v[0]) && (0.0..=1.0).contains(&v[1]));
        assert!(v[2] >= 0.0 && v[3] >= 0.0 && v[4] > 0.0);
    }
    // relative depth error is reported as a percentage
    let rel: f64 = rows[cfg.k][4].parse().unwrap();
    assert!((rel - r.metrics.mean[3] * 100.0).abs() < 1e-5);

    let (header, rows) = parse_csv(&std::fs::read_to_string(tmp.path().join("summary.csv")).unwrap());
    assert_eq!(header.join(","), SUMMARY_HEADER);
    assert_eq!(rows.len(), 1);

    let (header, rows) = parse_csv(&std::fs::read_to_string(tmp.path().join("train_log.csv")).unwrap());
    assert_eq!(header.join(","), "step,loss_seg,loss_depth,l1,adversarial,d_accuracy,total,wall_ms");
    assert_eq!(rows.len(), cfg.steps);

    let saved = ExperimentConfig::load(&tmp.path().join("config.txt")).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn identical_runs_give_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment_in(&tiny(a.path()), a.path()).unwrap();
    run_experiment_in(&tiny(b.path()), b.path()).unwrap();
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn slow_only_path_with_k_one() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.k = 1;
    let r = run_experiment_in(&cfg, tmp.path()).unwrap();
    assert_eq!(r.metrics.per_offset.len(), 1);
    assert_eq!(r.miou_nonkey, None);
}

#[test]
fn loss_suite_emits_comparable_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let names: Vec<String> = variants(&cfg, Suite::Loss).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["no_propagation", "ila", "ila_l1", "ila_l1_adv"]);
    run_ablation(&cfg, Suite::Loss, tmp.path()).unwrap();
    let (header, rows) = parse_csv(&std::fs::read_to_string(tmp.path().join("ablation.csv")).unwrap());
    assert_eq!(header.join(","), ABLATION_HEADER);
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.len() == header.len()));
    let flags: Vec<(&str, &str, &str)> = rows.iter().map(|r| (r[1].as_str(), r[4].as_str(), r[5].as_str())).collect();
    assert_eq!(flags, [("none", "0.0", "0.0"), ("local", "0.0", "0.0"), ("local", "1.0", "0.0"), ("local", "1.0", "1.0")]);
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vidprop"))
}

#[test]
fn cli_dump_features_writes_one_image_per_task() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let cfg_path = tmp.path().join("tiny.txt");
    std::fs::write(&cfg_path, cfg.to_text()).unwrap();
    run_experiment_in(&cfg, tmp.path()).unwrap();
    let dump = |out: &str| {
        let status = cli()
            .args(["dump-features", cfg_path.to_str().unwrap(), "--checkpoint"])
            .arg(tmp.path().join("model.ckpt"))
            .args(["--frame", "2", "--out"])
            .arg(tmp.path().join(out))
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        let mut files: Vec<_> = std::fs::read_dir(tmp.path().join(out)).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files
    };
    let a = dump("a");
    let b = dump("b");
    assert_eq!(a.len(), 2);
    for (x, y) in a.iter().zip(&b) {
        let bytes = std::fs::read(x).unwrap();
        assert_eq!(bytes, std::fs::read(y).unwrap());
        let pixels = &bytes[bytes.len() - 8 * 8..];
        // min-max normalized unless the map is constant
        let full = pixels.contains(&0) && pixels.contains(&255);
        assert!(full || pixels.iter().all(|&p| p == MID_GRAY));
    }

    let bad = cli()
        .args(["dump-features", cfg_path.to_str().unwrap(), "--checkpoint"])
        .arg(tmp.path().join("model.ckpt"))
        .args(["--frame", "9", "--out"])
        .arg(tmp.path().join("c"))
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn cli_checks_and_reports() {
    let out = cli().args(["oracle-test", "--cases", "8"]).output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).matches("PASS").count(), 3);

    let out = cli().args(["flops", "--format", "csv"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("layer,macs,flops,params"));
    assert!(text.contains("published, not computed"));

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.txt");
    std::fs::write(&bad, "nonsense = 1\n").unwrap();
    let out = cli().arg("train").arg(&bad).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn cli_eval_reproduces_training_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path());
    let cfg_path = tmp.path().join("tiny.txt");
    std::fs::write(&cfg_path, cfg.to_text()).unwrap();
    run_experiment_in(&cfg, tmp.path()).unwrap();
    let out = cli()
        .args(["eval", cfg_path.to_str().unwrap(), "--checkpoint"])
        .arg(tmp.path().join("model.ckpt"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(out.stdout, std::fs::read(tmp.path().join("metrics.csv")).unwrap());
}
