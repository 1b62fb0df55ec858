use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use adld::synthdata::MANIFEST_FILE;
use adld::training::METRICS_FILE;

fn adld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adld")).args(args).env("RUST_LOG", "warn").output().expect("spawn adld")
}

fn adld_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adld")).args(args).env("RUST_LOG", "warn").env(key, value).output().expect("spawn adld")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, domain: &str, count: usize, seed: u64) -> Output {
    let (count, seed) = (count.to_string(), seed.to_string());
    adld(&["gen-data", "--out", p(dir), "--domain", domain, "--count", &count, "--seed", &seed, "--size", "32"])
}

const TINY: &str = "[model]\nimage_size = 32\n[train]\nbatch_size = 2\nepochs = 2\niters_per_epoch = 2\nseed = 3\n";

#[test]
fn gen_data_writes_count_lines_deterministically() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let out = gen(&a, "target", 6, 5);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stdout["count"], 6);
    assert!(stdout["rates"]["AU12"].is_number());
    let manifest = fs::read_to_string(a.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.lines().count(), 6);

    // A single worker thread must reproduce the parallel output.
    let (n, s) = ("6", "5");
    let out = adld_env(&["gen-data", "--out", p(&b), "--domain", "target", "--count", n, "--seed", s, "--size", "32"], "ADLD_THREADS", "0");
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(b.join(MANIFEST_FILE)).unwrap(), manifest.as_bytes());
    for line in manifest.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let img = v["image"].as_str().unwrap();
        assert_eq!(fs::read(a.join(img)).unwrap(), fs::read(b.join(img)).unwrap());
    }
}

#[test]
fn bad_arguments_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = adld(&["gen-data", "--out", p(dir.path()), "--domain", "sideways", "--count", "2"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("sideways"), "{}", stderr(&out));
    let out = adld(&["gen-data", "--out", p(dir.path()), "--domain", "source", "--count", "2", "--size", "30"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let out = adld(&["train", "--out", p(dir.path()), "--mode", "adld_plus"]);
    assert_eq!(code(&out), 3);
    assert!(adld(&["--help"]).status.success());
}

#[test]
fn unreadable_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = adld(&["train", "--source", p(&missing), "--out", p(&dir.path().join("run")), "--mode", "bi_s"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn train_echoes_config_and_rejects_unknown_keys() {
    let root = tempfile::tempdir().unwrap();
    let (src, tgt, run) = (root.path().join("s"), root.path().join("t"), root.path().join("run"));
    assert_eq!(code(&gen(&src, "source", 6, 1)), 0);
    assert_eq!(code(&gen(&tgt, "target", 6, 1)), 0);
    let cfg = root.path().join("run.ini");
    fs::write(&cfg, TINY).unwrap();
    let out = adld(&["train", "--config", p(&cfg), "--source", p(&src), "--target", p(&tgt), "--out", p(&run), "--mode", "b_net"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let echoed = fs::read_to_string(run.join("config.ini")).unwrap();
    assert!(echoed.contains("mode = b_net") && echoed.contains("image_size = 32"), "{echoed}");
    assert!(echoed.contains(&format!("source = {}", src.display())));
    assert_eq!(fs::read_to_string(run.join(METRICS_FILE)).unwrap().lines().count(), 5);

    // The echoed file reproduces the run on its own.
    let again = root.path().join("again");
    let out = adld(&["train", "--config", p(&run.join("config.ini")), "--out", p(&again)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(run.join(METRICS_FILE)).unwrap(), fs::read(again.join(METRICS_FILE)).unwrap());

    fs::write(&cfg, format!("{TINY}learning_rate = 3\n")).unwrap();
    let out = adld(&["train", "--config", p(&cfg), "--source", p(&src), "--out", p(&run), "--mode", "bi_s"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
}

#[test]
fn source_only_mode_ignores_the_target_set() {
    let root = tempfile::tempdir().unwrap();
    let (src, tgt) = (root.path().join("s"), root.path().join("t"));
    assert_eq!(code(&gen(&src, "source", 4, 2)), 0);
    assert_eq!(code(&gen(&tgt, "target", 4, 2)), 0);
    let cfg = root.path().join("run.ini");
    fs::write(&cfg, TINY).unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let base = ["train", "--config", p(&cfg), "--source", p(&src), "--mode", "bi_s"];
    let out_a = adld(&[&base[..], &["--out", p(&a), "--target", p(&tgt)]].concat());
    let out_b = adld(&[&base[..], &["--out", p(&b)]].concat());
    assert_eq!((code(&out_a), code(&out_b)), (0, 0), "{}", stderr(&out_a));
    assert_eq!(fs::read(a.join(METRICS_FILE)).unwrap(), fs::read(b.join(METRICS_FILE)).unwrap());
}

#[test]
fn resume_after_lost_epoch_reproduces_the_log() {
    let root = tempfile::tempdir().unwrap();
    let (src, tgt) = (root.path().join("s"), root.path().join("t"));
    assert_eq!(code(&gen(&src, "source", 5, 4)), 0);
    assert_eq!(code(&gen(&tgt, "target", 5, 4)), 0);
    let cfg = root.path().join("run.ini");
    fs::write(&cfg, TINY).unwrap();
    let run = root.path().join("run");
    let args = ["train", "--config", p(&cfg), "--source", p(&src), "--target", p(&tgt), "--out", p(&run), "--mode", "adld"];
    assert_eq!(code(&adld(&args)), 0);
    let full = fs::read_to_string(run.join(METRICS_FILE)).unwrap();

    // Simulate a crash during epoch 2: its checkpoint is gone and the log
    // holds a partial extra row.
    fs::remove_dir_all(run.join("epoch_02")).unwrap();
    let partial: Vec<&str> = full.lines().take(4).collect();
    fs::write(run.join(METRICS_FILE), partial.join("\n") + "\n").unwrap();
    let out = adld(&[&args[..], &["--resume"]].concat());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(run.join(METRICS_FILE)).unwrap(), full);
}

#[test]
fn divergence_exits_4_naming_the_term() {
    let root = tempfile::tempdir().unwrap();
    let src = root.path().join("s");
    assert_eq!(code(&gen(&src, "source", 4, 3)), 0);
    let cfg = root.path().join("run.ini");
    fs::write(&cfg, format!("{TINY}lr_b = 1e30\n")).unwrap();
    let out = adld(&["train", "--config", p(&cfg), "--source", p(&src), "--out", p(&root.path().join("run")), "--mode", "bi_s"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite value in L_"), "{}", stderr(&out));
}

#[test]
fn eval_reports_overfit_source() {
    let root = tempfile::tempdir().unwrap();
    let (src, run) = (root.path().join("s"), root.path().join("run"));
    assert_eq!(code(&gen(&src, "source", 16, 1)), 0);
    let cfg = root.path().join("run.ini");
    fs::write(&cfg, "[model]\nimage_size = 32\n[train]\nbatch_size = 16\nepochs = 1\niters_per_epoch = 60\nmirror = false\nlr_b = 0.002\n")
        .unwrap();
    let out = adld(&["train", "--config", p(&cfg), "--source", p(&src), "--out", p(&run), "--mode", "bi_s"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let report = root.path().join("src.json");
    let out = adld(&["eval", "--checkpoint", p(&run), "--data", p(&src), "--domain", "source", "--out", p(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["avg_f1"].as_f64().unwrap() > 0.9, "{r}");
    assert_eq!(r["mode"], "bi_s");
    assert_eq!(r["samples"], 16);
}

#[test]
fn eval_feed_and_label_errors() {
    let root = tempfile::tempdir().unwrap();
    let (src, tgt) = (root.path().join("s"), root.path().join("t"));
    assert_eq!(code(&gen(&src, "source", 4, 8)), 0);
    assert_eq!(code(&gen(&tgt, "target", 4, 8)), 0);
    let cfg = root.path().join("run.ini");
    fs::write(&cfg, TINY).unwrap();
    let (latent, plain) = (root.path().join("adld"), root.path().join("bi_s"));
    for (run, mode) in [(&latent, "adld"), (&plain, "bi_s")] {
        let out = adld(&["train", "--config", p(&cfg), "--source", p(&src), "--target", p(&tgt), "--out", p(run), "--mode", mode]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }

    let report = root.path().join("r.json");
    let eval = |run: &Path, extra: &[&str]| {
        let base = ["eval", "--checkpoint", p(run), "--data", p(&tgt), "--domain", "target", "--out", p(&report)];
        adld(&[&base[..], extra].concat())
    };
    for (extra, feed) in [(&[][..], "latent"), (&["--feed", "raw"][..], "raw"), (&["--feed", "latent"][..], "latent")] {
        let out = eval(&latent, extra);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(r["feed"], feed);
    }
    assert_eq!(code(&eval(&plain, &["--feed", "latent"])), 3);

    // Strip the labels from the target manifest.
    let manifest = tgt.join(MANIFEST_FILE);
    let stripped: Vec<String> = fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["aus"] = serde_json::Value::Null;
            v.to_string()
        })
        .collect();
    fs::write(&manifest, stripped.join("\n") + "\n").unwrap();
    let out = eval(&latent, &[]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("no AU labels"), "{}", stderr(&out));
}

#[test]
fn gradcheck_selects_ops_and_fails_when_corrupted() {
    let out = adld(&["gradcheck", "--op", "l1_mean", "--seeds", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = stdout.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("l1_mean\t"));

    let out = adld(&["gradcheck", "--op", "tanh", "--seeds", "2", "--corrupt"]);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("tanh"));
    assert_eq!(code(&adld(&["gradcheck", "--op", "cosine"])), 3);
}

/// Minimal well-formedness: tags nest and close, attributes are quoted.
fn well_formed(xml: &str) -> bool {
    let mut stack: Vec<String> = Vec::new();
    let mut rest = xml;
    while let Some(start) = rest.find('<') {
        let Some(end) = rest[start..].find('>') else { return false };
        let tag = &rest[start + 1..start + end];
        rest = &rest[start + end + 1..];
        if !tag.matches('"').count().is_multiple_of(2) {
            return false;
        }
        if let Some(name) = tag.strip_prefix('/') {
            if stack.pop().as_deref() != Some(name.trim()) {
                return false;
            }
        } else if !tag.ends_with('/') {
            stack.push(tag.split_whitespace().next().unwrap_or("").to_string());
        }
    }
    stack.is_empty()
}

fn polylines(svg: &str) -> Vec<Vec<(f64, f64)>> {
    svg.lines()
        .filter(|l| l.starts_with("<polyline"))
        .map(|l| {
            let pts = l.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
            pts.split_whitespace()
                .map(|xy| {
                    let (x, y) = xy.split_once(',').unwrap();
                    (x.parse().unwrap(), y.parse().unwrap())
                })
                .collect()
        })
        .collect()
}

#[test]
fn plot_emits_one_polyline_per_series() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    let mut text = String::from("iter,epoch,L_a_src,L_r_s,total\n");
    for i in 1..=20 {
        text.push_str(&format!("{i},1,{},{},{}\n", 10.0 / i as f64, 1.0 + (i % 3) as f64, 5.0 - 0.1 * i as f64));
    }
    fs::write(&csv, text).unwrap();
    let svg = dir.path().join("m.svg");
    let out = adld(&["plot", "--metrics", p(&csv), "--out", p(&svg), "--series", "L_a_src,L_r_s,total"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let body = fs::read_to_string(&svg).unwrap();
    assert!(well_formed(&body), "{body}");
    let lines = polylines(&body);
    assert_eq!(lines.len(), 3);
    // Decreasing values draw downwards: SVG y grows monotonically.
    for series in [&lines[0], &lines[2]] {
        assert!(series.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 > w[0].1));
    }
    let out = adld(&["plot", "--metrics", p(&csv), "--out", p(&svg), "--series", "L_zz"]);
    assert_eq!(code(&out), 3);
}
