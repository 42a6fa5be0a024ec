use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volterra_train::data::{encode_record, IMAGE_BYTES};

fn evc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evc")).args(args).output().expect("running evc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn csv_rows(text: &str) -> (Vec<&str>, Vec<Vec<&str>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').collect();
    (header, lines.map(|l| l.split(',').collect()).collect())
}

#[test]
fn verify_passes_and_reports_totals() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("verify.csv");
    let out = evc(&["verify", "--out", csv.to_str().unwrap()]);
    let text = stdout(&out);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.contains("suites run: 13, cases: "), "{text}");
    assert!(text.contains("max gradient error: "));
    assert!(text.ends_with("verify: OK\n"));
    let csv = std::fs::read_to_string(csv).unwrap();
    let (header, rows) = csv_rows(&csv);
    assert_eq!(header.join(","), "suite,module,cases,failures,max_error,tolerance,status");
    assert_eq!(rows.len(), 13);
    assert!(rows.iter().all(|r| r[6] == "pass"));
}

#[test]
fn corrupted_gather_table_fails_verify() {
    let out = evc(&["verify", "--cases", "2", "--inject-fault", "pcm"]);
    let text = stdout(&out);
    assert_eq!(out.status.code(), Some(1), "{text}");
    assert!(text.contains("FAIL pcm-reconstruction [index-gen] n=4 r=3 order 3: observed"), "{text}");
    assert!(text.contains("rebuilds [0, 0, 1], expected [0, 0, 0]"), "{text}");
    assert!(text.ends_with("verify: FAILED\n"));
}

#[test]
fn gen_indices_examples() {
    let out = evc(&["gen-indices", "--n", "3", "--order", "2"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["fpm"][1]["rows"], serde_json::json!([[0, 0], [1, 1], [2, 2], [0, 1], [1, 2], [0, 2]]));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("idx.json");
    let out = evc(&["gen-indices", "--n", "9", "--order", "3", "--out", path.to_str().unwrap()]);
    assert!(out.status.success() && out.stdout.is_empty());
    let first = std::fs::read(&path).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(v["fpm"][2]["rows"].as_array().unwrap().len(), 165);
    assert_eq!(v["pcms"][1]["variants"].as_array().unwrap().len(), 3);
    evc(&["gen-indices", "--n", "9", "--order", "3", "--out", path.to_str().unwrap()]);
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn exit_codes() {
    let out = evc(&["gen-indices", "--n", "500", "--order", "5"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("resource limit"));

    assert_eq!(evc(&["gen-indices", "--n", "3", "--order", "0"]).status.code(), Some(2));
    assert_eq!(evc(&["bench-speed", "--repetitions", "2"]).status.code(), Some(2));
    assert_eq!(evc(&["bench-space", "--warmup", "0"]).status.code(), Some(2));
    assert_eq!(evc(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(evc(&["--threads", "0", "verify"]).status.code(), Some(2));

    let out = evc(&["gen-indices", "--n", "3", "--order", "2", "--out", "/nonexistent-dir/idx.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("/nonexistent-dir/idx.json"));
}

#[test]
fn help_documents_every_schema() {
    let text = stdout(&evc(&["--help"]));
    for header in [
        volterra_cli::verify::CSV_HEADER,
        volterra_cli::bench::SPEED_CSV_HEADER,
        volterra_train::LOG_HEADER,
    ] {
        assert!(text.contains(header), "{header}");
    }
    assert!(text.contains("order,n,kernel,channels,evc_terms,tvc_terms,evc_terms_total,tvc_terms_total,"));
    for cmd in ["verify", "bench-speed", "bench-space", "gen-indices", "train-demo"] {
        assert!(text.contains(cmd));
    }
}

#[test]
fn bench_space_trend() {
    let out = evc(&["bench-space", "--orders", "1,2,3,4", "--kernels", "5x5,3x3", "--channels", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let (header, rows) = csv_rows(&text);
    assert_eq!(header.join(","), volterra_cli::bench::SPACE_CSV_HEADER);
    assert_eq!(rows.len(), 8);
    for kernel in rows.chunks(4) {
        let ratios: Vec<f64> = kernel.iter().map(|r| r[12].parse().unwrap()).collect();
        assert_eq!(ratios[0], 1.0);
        assert!(ratios.windows(2).all(|w| w[1] < w[0]), "{ratios:?}");
    }
    assert_eq!((rows[2][4], rows[2][5]), ("2925", "15625"));
}

#[test]
fn bench_speed_schema_and_skips() {
    let out = evc(&["bench-speed", "--orders", "1,2", "--kernels", "3x3", "--channels", "2", "--batch", "2", "--out-channels", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let (header, rows) = csv_rows(&text);
    assert_eq!(header.join(","), volterra_cli::bench::SPEED_CSV_HEADER);
    assert_eq!(rows.len(), 8);
    for r in &rows {
        let want = match (r[0], r[2]) {
            ("evc", "1") | ("tvc", "1") => "9",
            ("evc", "2") => "54",
            ("tvc", "2") => "90",
            _ => unreachable!(),
        };
        assert_eq!(r[7], want);
        assert_eq!(r[9], "ok");
    }

    // 25^5 Kronecker terms per kernel over ten kernels is past the budget.
    let out = evc(&[
        "bench-speed", "--orders", "5", "--kernels", "5x5", "--channels", "1", "--batch", "1", "--out-channels", "10",
        "--repetitions", "3",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let (_, rows) = csv_rows(&text);
    assert!(rows.iter().filter(|r| r[0] == "tvc").all(|r| r[6].is_empty() && r[9] == "skipped"));
    assert!(rows.iter().filter(|r| r[0] == "evc").all(|r| r[9] == "ok"));
}

/// Writes a small CIFAR-format pair whose two classes differ in colour, and
/// a config pointing at it.
fn fixture(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (file, per_class) in [("train.bin", 30), ("test.bin", 10)] {
        let mut bytes = Vec::new();
        for i in 0..2 * per_class {
            let fine = [4u8, 30][i % 2];
            let mut px = [0u8; IMAGE_BYTES];
            for (p, v) in px.iter_mut().enumerate() {
                let base: i32 = if (fine == 4) == (p < 1024) { 170 } else { 80 };
                *v = (base + rng.gen_range(-60..=60)).clamp(0, 255) as u8;
            }
            bytes.extend(encode_record(0, fine, &px));
        }
        std::fs::write(dir.join(file), bytes).unwrap();
    }
    let cfg = dir.join("demo.cfg");
    std::fs::write(
        &cfg,
        format!(
            "seed = 5\nepochs = {epochs}\nbatch_size = 10\nclasses = 4, 30\ntrain_per_class = 30\ntest_per_class = 10\n\
             channels = 4\nhla_reduction = 2\ncheck_record_counts = false\ndata_dir = {}\n",
            dir.display()
        ),
    )
    .unwrap();
    cfg
}

fn without_wall_time(log: &str) -> Vec<String> {
    log.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn train_demo_runs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), 2);
    let cfg = cfg.to_str().unwrap();
    let a = evc(&["train-demo", "--config", cfg]);
    let b = evc(&["train-demo", "--config", cfg]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(stderr(&a).contains("final test accuracy"));
    let (a, b) = (stdout(&a), stdout(&b));
    assert!(a.starts_with("epoch,train_loss,train_acc,test_acc,wall_seconds\n0,"));
    assert_eq!(a.lines().count(), 4);
    assert_eq!(without_wall_time(&a), without_wall_time(&b));

    let log = dir.path().join("log.csv");
    let c = evc(&["--seed", "6", "train-demo", "--config", cfg, "--out", log.to_str().unwrap()]);
    assert!(c.status.success() && c.stdout.is_empty());
    let c = std::fs::read_to_string(log).unwrap();
    assert_eq!(c.lines().count(), 4);
    assert_ne!(without_wall_time(&a), without_wall_time(&c));
}

#[test]
fn train_demo_with_zero_epochs_logs_initial_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path(), 0);
    let out = evc(&["train-demo", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("0,"));
}

#[test]
fn train_demo_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("demo.cfg");
    std::fs::write(&cfg, format!("data_dir = {}\n", dir.path().join("absent").display())).unwrap();
    let out = evc(&["train-demo", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("train.bin (50000 records)"), "{}", stderr(&out));

    std::fs::write(&cfg, "epochs = 3\nlearning_rat = 0.1\n").unwrap();
    let out = evc(&["train-demo", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}
