use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn dfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfm"))
        .args(args)
        .output()
        .expect("spawn dfm")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut all = args.to_vec();
    all.extend(["--out", out]);
    dfm(&all)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// `metric,value` CSV as pairs.
fn metrics(dir: &Path) -> Vec<(String, String)> {
    read(dir, "metrics.csv")
        .lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn metric(dir: &Path, name: &str) -> String {
    metrics(dir)
        .into_iter()
        .find(|(k, _)| k == name)
        .unwrap_or_else(|| panic!("no metric {name}"))
        .1
}

fn losses(dir: &Path) -> Vec<f64> {
    read(dir, "loss.csv")
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn verify_passes_and_writes_five_reports() {
    let tmp = TempDir::new().unwrap();
    let o = run_in(tmp.path(), &["verify", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for stem in [
        "rate_condition",
        "continuity_conditional",
        "continuity_marginal",
        "closed_vs_generic",
        "boundary",
    ] {
        let csv = read(tmp.path(), &format!("{stem}.csv"));
        assert!(
            csv.starts_with("check,max_residual,tolerance,pass\n"),
            "{stem}"
        );
        assert!(
            csv.lines().skip(1).all(|l| l.ends_with(",true")),
            "{stem}: {csv}"
        );
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("[PASS] rate_condition"));
    assert!(tmp.path().join("resolved.cfg").exists());
}

#[test]
fn corrupted_rates_fail_verification() {
    let tmp = TempDir::new().unwrap();
    let o = run_in(tmp.path(), &["verify", "--corrupt", "rate"]);
    assert_eq!(code(&o), 1);
    assert!(
        stderr(&o).contains("rate_condition at row"),
        "{}",
        stderr(&o)
    );
    assert!(read(tmp.path(), "rate_condition.csv").contains(",false"));
}

#[test]
fn unknown_config_key_is_rejected_before_any_output() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "sampler.steps = 8\nsampler.stepz = 9\n").unwrap();
    let out = tmp.path().join("out");
    let o = dfm(&[
        "verify",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    assert!(!out.exists());
    assert_eq!(code(&dfm(&["sample", "--steps", "zero"])), 2);
    assert_eq!(code(&dfm(&["sample", "--frobnicate"])), 2);
}

#[test]
fn flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# small run\nsampler.steps = 8\nsampler.chains = 5\n").unwrap();
    let o = run_in(
        tmp.path(),
        &[
            "sample",
            "--oracle",
            "--config",
            cfg.to_str().unwrap(),
            "--steps",
            "3",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resolved = read(tmp.path(), "resolved.cfg");
    assert!(resolved.contains("sampler.steps = 3\n"));
    assert!(resolved.contains("sampler.chains = 5\n"));
    assert!(resolved.contains("model.oracle = true\n"));
}

#[test]
fn point_task_is_memorized() {
    let tmp = TempDir::new().unwrap();
    let o = run_in(
        tmp.path(),
        &[
            "train",
            "--task",
            "point",
            "--train-steps",
            "1000",
            "--seed",
            "5",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let curve = losses(tmp.path());
    assert_eq!(curve.len(), 1000);
    let bound = 0.01 * 3.0 * 8f64.ln();
    assert!(
        *curve.last().unwrap() < bound,
        "final loss {} vs {bound}",
        curve.last().unwrap()
    );
    assert!(read(tmp.path(), "model.ckpt").starts_with("dfm-ckpt v1\n"));
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for dir in [&a, &b] {
        let o = run_in(
            dir.path(),
            &[
                "train",
                "--task",
                "two_mode",
                "--train-steps",
                "50",
                "--seed",
                "9",
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(read(a.path(), "loss.csv"), read(b.path(), "loss.csv"));
    assert_eq!(read(a.path(), "model.ckpt"), read(b.path(), "model.ckpt"));
}

#[test]
fn divergent_training_keeps_the_last_finite_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let o = run_in(
        tmp.path(),
        &[
            "train",
            "--task",
            "point",
            "--train-steps",
            "200",
            "--set",
            "train.learning_rate=1e300",
        ],
    );
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
    let ckpt = read(tmp.path(), "model.ckpt");
    let params: Vec<f64> = ckpt.lines().skip(11).map(|l| l.parse().unwrap()).collect();
    assert!(!params.is_empty() && params.iter().all(|p| p.is_finite()));
    assert!(losses(tmp.path()).iter().all(|l| l.is_finite()));
}

#[test]
fn trained_checkpoint_drives_sampling() {
    let tmp = TempDir::new().unwrap();
    let o = run_in(
        tmp.path(),
        &["train", "--task", "point", "--train-steps", "300"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = tmp.path().join("model.ckpt");
    let out = tmp.path().join("s");
    let o = dfm(&[
        "sample",
        "--task",
        "point",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--chains",
        "50",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(metric(&out, "chains"), "50");
    let tv: f64 = metric(&out, "tv").parse().unwrap();
    assert!(tv < 0.5, "tv {tv}");

    let o = dfm(&[
        "sample",
        "--task",
        "two_mode",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        code(&o),
        0,
        "a point checkpoint fits two_mode's shape: {}",
        stderr(&o)
    );
    let o = dfm(&[
        "sample",
        "--task",
        "char_text",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "shape mismatch is a usage error");
}

#[test]
fn sampling_needs_a_model() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&run_in(tmp.path(), &["sample"])), 2);
    assert_eq!(
        code(&run_in(
            tmp.path(),
            &["sample", "--checkpoint", "/nonexistent/model.ckpt"]
        )),
        2
    );
}

#[test]
fn oracle_sampling_recovers_two_mode() {
    let tmp = TempDir::new().unwrap();
    let o = run_in(
        tmp.path(),
        &[
            "sample", "--oracle", "--task", "two_mode", "--chains", "4000", "--steps", "64",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tv: f64 = metric(tmp.path(), "tv").parse().unwrap();
    assert!(tv <= 0.03, "tv {tv}");
    let csv = read(tmp.path(), "samples.csv");
    assert_eq!(csv.lines().count(), 4001);
    assert!(csv.starts_with("chain,condition,tokens,log_q\n"));
}

#[test]
fn single_step_sampling_is_valid() {
    let tmp = TempDir::new().unwrap();
    let o = run_in(
        tmp.path(),
        &["sample", "--oracle", "--steps", "1", "--chains", "20"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read(tmp.path(), "samples.csv").lines().count(), 21);
    let o = run_in(
        tmp.path(),
        &[
            "sample", "--oracle", "--steps", "1", "--chains", "20", "--path", "mixture",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn trace_dir_gets_one_file_per_chain() {
    let tmp = TempDir::new().unwrap();
    let traces = tmp.path().join("traces");
    let o = run_in(
        tmp.path(),
        &[
            "sample",
            "--oracle",
            "--chains",
            "7",
            "--steps",
            "5",
            "--trace-dir",
            traces.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut names: Vec<String> = std::fs::read_dir(&traces)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let expected: Vec<String> = (0..7).map(|i| format!("chain_{i}.csv")).collect();
    assert_eq!(names, expected);
    let trace = std::fs::read_to_string(traces.join("chain_3.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 6, "header plus N + 1 snapshots");
}

#[test]
fn text_and_grid_outputs_are_rendered() {
    let tmp = TempDir::new().unwrap();
    let o = run_in(
        tmp.path(),
        &[
            "sample",
            "--oracle",
            "--task",
            "char_text",
            "--chains",
            "30",
            "--steps",
            "32",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = read(tmp.path(), "samples.txt");
    assert_eq!(text.lines().count(), 30);
    assert!(
        text.lines()
            .all(|l| l.chars().all(|c| "abcdef".contains(c))),
        "{text}"
    );
    assert_eq!(metric(tmp.path(), "eos_missing"), "0");

    let o = run_in(
        tmp.path(),
        &[
            "sample",
            "--oracle",
            "--task",
            "grid_pattern",
            "--grid-side",
            "2",
            "--chains",
            "3",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let grids = read(tmp.path(), "samples.txt");
    assert_eq!(grids.matches("# chain").count(), 3);
    let o = run_in(
        tmp.path(),
        &[
            "sample",
            "--oracle",
            "--task",
            "grid_pattern",
            "--chains",
            "3",
        ],
    );
    assert_eq!(code(&o), 2, "16x16 grid has no exact denoiser");
}

#[test]
fn rerunning_from_the_resolved_config_reproduces_outputs() {
    let a = TempDir::new().unwrap();
    let o = run_in(
        a.path(),
        &[
            "sample",
            "--oracle",
            "--task",
            "copy_condition",
            "--chains",
            "130",
            "--seed",
            "77",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let b = TempDir::new().unwrap();
    let resolved = a.path().join("resolved.cfg");
    let o = dfm(&[
        "sample",
        "--config",
        resolved.to_str().unwrap(),
        "--out",
        b.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["samples.csv", "samples.txt", "metrics.csv"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
}

#[test]
fn bench_sweeps_six_step_counts() {
    let tmp = TempDir::new().unwrap();
    let o = run_in(
        tmp.path(),
        &[
            "bench",
            "--oracle",
            "--task",
            "two_mode",
            "--set",
            "bench.chains=3000",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = read(tmp.path(), "bench.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("steps,tv,seconds,chains_per_second"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(
        rows.iter().map(|r| r[0] as usize).collect::<Vec<_>>(),
        vec![4, 8, 16, 32, 64, 128]
    );
    assert!(rows.iter().all(|r| r[3] > 0.0 && r[1] >= 0.0));
}

#[test]
fn bestof_usage_errors() {
    let tmp = TempDir::new().unwrap();
    let o = run_in(
        tmp.path(),
        &["bestof", "--oracle", "--best-of", "4", "--keep", "5"],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("exceeds"), "{}", stderr(&o));
    let o = run_in(
        tmp.path(),
        &[
            "bestof", "--oracle", "--task", "two_mode", "--scorer", "match",
        ],
    );
    assert_eq!(code(&o), 2);
    let o = run_in(tmp.path(), &["bestof", "--oracle", "--scorer", "judge"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bestof_selection_is_at_least_the_single_sample_mean() {
    let tmp = TempDir::new().unwrap();
    let o = run_in(
        tmp.path(),
        &[
            "bestof",
            "--oracle",
            "--task",
            "two_mode",
            "--best-of",
            "8",
            "--reps",
            "100",
            "--steps",
            "4",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sel: f64 = metric(tmp.path(), "mean_selected").parse().unwrap();
    let single: f64 = metric(tmp.path(), "mean_single").parse().unwrap();
    assert!(sel >= single - 1e-12 * single.abs(), "{sel} vs {single}");
    assert_eq!(read(tmp.path(), "bestof.csv").lines().count(), 101);

    let o = run_in(
        tmp.path(),
        &[
            "bestof",
            "--oracle",
            "--task",
            "copy_condition",
            "--scorer",
            "match",
            "--best-of",
            "4",
            "--keep",
            "2",
            "--reps",
            "64",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sel: f64 = metric(tmp.path(), "mean_selected").parse().unwrap();
    assert!((0.0..=1.0).contains(&sel));
    assert_eq!(read(tmp.path(), "bestof.csv").lines().count(), 1 + 128);
}

#[test]
fn best_of_one_matches_plain_sampling() {
    let s = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let common = [
        "--oracle",
        "--task",
        "copy_condition",
        "--steps",
        "6",
        "--seed",
        "11",
    ];
    let mut sample_args = vec!["sample", "--chains", "150"];
    sample_args.extend(common);
    let mut bestof_args = vec!["bestof", "--best-of", "1", "--reps", "150"];
    bestof_args.extend(common);
    assert_eq!(code(&run_in(s.path(), &sample_args)), 0);
    assert_eq!(code(&run_in(b.path(), &bestof_args)), 0);
    let mean_log_q = metric(s.path(), "mean_log_q");
    assert_eq!(metric(b.path(), "mean_selected"), mean_log_q);
    assert_eq!(metric(b.path(), "mean_single"), mean_log_q);
    let sampled: Vec<String> = read(s.path(), "samples.csv")
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().to_string())
        .collect();
    let selected: Vec<String> = read(b.path(), "bestof.csv")
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(5).unwrap().to_string())
        .collect();
    assert_eq!(sampled, selected);
}

#[test]
fn custom_embeddings_replace_the_geometry() {
    let tmp = TempDir::new().unwrap();
    let emb = tmp.path().join("line.emb");
    let mut text = String::from("dfm-emb v1 8 2\n");
    for i in 0..8 {
        text.push_str(&format!("{} {}\n", i as f64, 1.0));
    }
    std::fs::write(&emb, &text).unwrap();
    let o = run_in(
        tmp.path(),
        &[
            "sample",
            "--oracle",
            "--embeddings",
            emb.to_str().unwrap(),
            "--chains",
            "10",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run_in(
        tmp.path(),
        &[
            "sample",
            "--oracle",
            "--task",
            "copy_condition",
            "--embeddings",
            emb.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 2, "K mismatch");
}
