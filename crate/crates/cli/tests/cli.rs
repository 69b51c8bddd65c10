use std::path::Path;
use std::process::{Command, Output};

fn encdec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_encdec"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr_line(o: &Output) -> String {
    let s = String::from_utf8_lossy(&o.stderr).to_string();
    let lines: Vec<&str> = s.lines().filter(|l| l.starts_with("error[")).collect();
    assert_eq!(lines.len(), 1, "{s}");
    lines[0].to_string()
}

fn losses(dir: &Path) -> Vec<(usize, f64, f64)> {
    let mut rd = csv::Reader::from_path(dir.join("metrics.csv")).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["step", "loss", "lr", "tokens_per_s"]);
    rd.records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[1].parse().unwrap(), r[2].parse().unwrap())
        })
        .collect()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

const SMALL: [&str; 14] = [
    "--set", "model.d_model=32",
    "--set", "model.n_heads=4",
    "--set", "model.n_kv_heads=2",
    "--set", "total_steps=6",
    "--set", "warmup_steps=2",
    "--set", "n_train=24",
    "--set", "train.batch_size=4",
];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.cfg");
    let o = encdec(&["finetune", "--config", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let line = stderr_line(&o);
    assert!(line.starts_with("error[config]:") && line.contains(missing.to_str().unwrap()), "{line}");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for bad in [["--set", "no_such_key=1"], ["--set", "batch_size=4"], ["--set", "alpha"]] {
        let o = encdec(&["finetune", bad[0], bad[1], "--out", out]);
        assert_eq!(o.status.code(), Some(2), "{bad:?}");
        assert!(stderr_line(&o).starts_with("error[usage]:"));
    }
    assert_eq!(encdec(&["unknown-command"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "model.colour = red\n").unwrap();
    assert_eq!(encdec(&["eval", "--config", cfg.to_str().unwrap(), "--out", out]).status.code(), Some(2));
}

#[test]
fn validation_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for bad in [["--set", "warmup_steps=900"], ["--set", "kd.alpha=1.5"], ["--set", "model.d_model=ten"], ["--set", "model.n_kv_heads=3"]] {
        let o = encdec(&["distill", bad[0], bad[1], "--out", out]);
        assert_eq!(o.status.code(), Some(3), "{bad:?}");
        assert!(stderr_line(&o).starts_with("error[config]:"));
    }
    let o = encdec(&["distill", "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr_line(&o).contains("teacher.checkpoint"));
    let o = encdec(&["distill", "--set", "teacher.checkpoint=/no/teacher.ckpt", "--out", out]);
    assert!(stderr_line(&o).contains("/no/teacher.ckpt"));
}

#[test]
fn distill_without_kd_term_equals_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let (teacher, ft, kd) = (p("teacher"), p("ft"), p("kd"));
    let o = encdec(&with(&SMALL, &["finetune", "--set", "model.kind=decoder_only", "--out", &teacher]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = encdec(&with(&SMALL, &["finetune", "--out", &ft]));
    assert!(o.status.success());
    let tck = format!("teacher.checkpoint={teacher}/model.ckpt");
    let o = encdec(&with(&SMALL, &["distill", "--set", "alpha=0", "--set", &tck, "--set", "max_gen_len=8", "--out", &kd]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (a, b) = (losses(Path::new(&ft)), losses(Path::new(&kd)));
    assert_eq!(a.len(), 6);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.0, x.2), (y.0, y.2));
        assert!((x.1 - y.1).abs() <= 1e-5, "{x:?} {y:?}");
    }
    let m = manifest(Path::new(&kd));
    assert_eq!(m["config"]["kd.alpha"], "0");
    assert_eq!(m["subcommand"], "distill");
    assert_eq!(m["status"], "ok");
}

#[test]
fn manifests_pin_configs_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "model.d_model = 32\nrun.seed = 5\n").unwrap();
    let (a, b, c) = (p("a"), p("b"), p("c"));
    let args = |out: &str| -> Vec<String> {
        ["pretrain", "--config", cfg.to_str().unwrap(), "--set", "total_steps=4", "--set", "warmup_steps=1", "--set", "n_docs=6", "--set", "doc_len=200", "--out", out]
            .iter()
            .map(|s| s.to_string())
            .collect()
    };
    for out in [&a, &b] {
        let v = args(out);
        let o = encdec(&v.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = encdec(&["pretrain", "--set", "model.d_model=32", "--set", "seed=5", "--set", "total_steps=4", "--set", "warmup_steps=1", "--set", "n_docs=6", "--set", "doc_len=200", "--out", &c]);
    assert!(o.status.success());
    let (ma, mb, mc) = (manifest(Path::new(&a)), manifest(Path::new(&b)), manifest(Path::new(&c)));
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    // the same values given by file or by override hash alike
    assert_eq!(ma["config_hash"], mc["config_hash"]);
    assert_eq!(ma["seed"], 5);
    assert_eq!(ma["config"]["train.total_steps"], "4");
    assert!(ma["versions"]["encdec-core"].is_string());
    assert_eq!(losses(Path::new(&a)), losses(Path::new(&b)));
    assert_eq!(losses(Path::new(&a)), losses(Path::new(&c)));
    for f in ["model.ckpt", "metrics.csv", "summary.json"] {
        assert!(Path::new(&a).join(f).is_file());
    }
    let o = encdec(&["pretrain", "--set", "seed=6", "--set", "model.d_model=32", "--set", "total_steps=4", "--set", "warmup_steps=1", "--out", &p("d")]);
    assert!(o.status.success());
    assert_ne!(manifest(Path::new(&p("d")))["config_hash"], ma["config_hash"]);
}

#[test]
fn eval_writes_grid_reports() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let m = p("m");
    assert!(encdec(&with(&SMALL, &["finetune", "--out", &m])).status.success());
    let ck = format!("eval.checkpoints=ft:{m}/model.ckpt,again:{m}/model.ckpt");
    let ev = p("eval");
    let o = encdec(&["eval", "--set", &ck, "--set", "eval.tasks=copy,reverse", "--set", "eval.seeds=1,2", "--set", "n_eval=4", "--set", "eval.metric=perplexity", "--out", &ev]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rd = csv::Reader::from_path(Path::new(&ev).join("eval.csv")).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["model", "task", "metric", "mean", "std", "n_seeds"]);
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(&rows[0][3], &rows[2][3]);
    assert!(rows.iter().all(|r| &r[2] == "perplexity" && &r[5] == "2"));
    assert!(Path::new(&ev).join("eval_raw.csv").is_file() && Path::new(&ev).join("eval.txt").is_file());
    let o = encdec(&["eval", "--set", "eval.checkpoints=nolabel", "--out", &ev]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn profile_sweep_shows_flatter_encoder_decoder_decode_cost() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = encdec(&["profile", "--out", out]);
    assert!(o.status.success());
    let mut rd = csv::Reader::from_path(dir.path().join("sweep.csv")).unwrap();
    let h = rd.headers().unwrap().clone();
    let col = |n: &str| h.iter().position(|c| c == n).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 7);
    let curve = |name: &str| rows.iter().map(|r| r[col(name)].parse::<f64>().unwrap()).collect::<Vec<_>>();
    let ed = curve("encdec_decode_flops_per_token");
    let dd = curve("deconly_decode_flops_per_token");
    let xs = curve("input_len");
    for i in 1..rows.len() {
        assert!(ed[i] > ed[i - 1] && dd[i] > dd[i - 1]);
        let slope = |c: &[f64]| (c[i] - c[i - 1]) / (xs[i] - xs[i - 1]);
        assert!(slope(&ed) < slope(&dd));
    }
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("reports.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 7);
    assert!(reports[0]["encoder_decoder"]["kv_bytes_peak"].is_u64());
}

#[test]
fn bench_reports_latency_and_throughput() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = encdec(&[
        "bench", "--set", "pair.d_model=32", "--set", "pair.n_heads=4", "--set", "pair.n_enc_layers=2",
        "--set", "pair.n_dec_layers=1", "--set", "deconly_layers=3", "--set", "bench.input_len=24",
        "--set", "bench.output_len=6", "--set", "trials=3", "--out", out,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
    assert!(v["encoder_decoder"]["first_token_ms"].as_f64().unwrap() > 0.0);
    assert!(v["decoder_only"]["tokens_per_s"].as_f64().unwrap() > 0.0);
    assert_eq!(v["trials"], 3);
}
