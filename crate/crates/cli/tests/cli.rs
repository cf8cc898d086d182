use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deturb_cli::config::{resolve_config, RunConfig};
use deturb_core::image::save_image;
use deturb_core::rng::SeededRng;
use deturb_core::synth::synthetic_scene;

fn deturb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deturb"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn clean_dir(root: &Path, n: usize, side: usize) -> PathBuf {
    let dir = root.join("clean");
    fs::create_dir_all(&dir).unwrap();
    let mut rng = SeededRng::new(42);
    for i in 0..n {
        let img = synthetic_scene(side, side, &mut rng).unwrap();
        save_image(&img, dir.join(format!("face{i}.png"))).unwrap();
    }
    dir
}

/// Every file under `dir`, relative path → bytes, sorted.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn defaults_and_precedence() {
    let cfg = resolve_config(None, &[]).unwrap();
    assert_eq!(cfg.usize("S"), 10);
    assert_eq!(cfg.float("lambda_p"), 0.002);
    assert_eq!(cfg.float("lr"), 2e-4);
    assert_eq!(cfg.usize("batch"), 10);

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    fs::write(&file, "# toy run\nS=4\nlambda_p = 0\n").unwrap();
    let from_file = resolve_config(Some(&file), &[]).unwrap();
    assert_eq!(from_file.usize("S"), 4);
    assert_eq!(from_file.float("lambda_p"), 0.0);
    let both = resolve_config(Some(&file), &[("S".into(), "6".into())]).unwrap();
    assert_eq!(both.usize("S"), 6);
    assert_eq!(both.float("lambda_p"), 0.0);

    fs::write(&file, "foo=1\n").unwrap();
    let err = resolve_config(Some(&file), &[]).unwrap_err();
    assert!(err.0.contains("\"foo\""), "{err}");
    assert_eq!(RunConfig::default(), resolve_config(None, &[]).unwrap());
}

#[test]
fn usage_errors_exit_1() {
    let o = deturb(&["synth", "--set", "foo=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("\"foo\""), "{}", stderr(&o));

    let o = deturb(&["synth", "--S", "many"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("\"S\""));

    assert_eq!(deturb(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(deturb(&["restore", "--iters", "5"]).status.code(), Some(1));
    assert_eq!(deturb(&["--help"]).status.code(), Some(0));
}

#[test]
fn eval_without_checkpoints_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let clean = clean_dir(dir.path(), 1, 16);
    let data = dir.path().join("data");
    assert!(deturb(&["synth", "--input", s(&clean), "--output", s(&data)]).status.success());
    let manifest = data.join("manifest.jsonl");
    let missing = dir.path().join("nowhere/prior.ckpt");
    let o = deturb(&[
        "eval",
        "--manifest",
        s(&manifest),
        "--atnet1-ckpt",
        s(&missing),
        "--atnet-ckpt",
        s(&missing),
        "--output",
        s(&dir.path().join("ev")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));

    let o = deturb(&["eval", "--manifest", s(&manifest), "--output", s(&dir.path().join("ev"))]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("atnet1_ckpt"), "{}", stderr(&o));
}

#[test]
fn synth_is_deterministic_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let clean = clean_dir(dir.path(), 3, 24);
    let before = snapshot(&clean);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for out in [&a, &b] {
        let o = deturb(&["synth", "--input", s(&clean), "--output", s(out), "--seed", "9", "--set", "pairs_per_image=2"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let strip = |v: Vec<(PathBuf, Vec<u8>)>| -> Vec<(PathBuf, Vec<u8>)> {
        v.into_iter().filter(|(p, _)| p != Path::new("config.txt")).collect()
    };
    let snap_a = strip(snapshot(&a));
    assert_eq!(snap_a.len(), 7);
    assert_eq!(snap_a, strip(snapshot(&b)));

    // The emitted config alone reproduces the run (output redirected).
    let cfg = a.join("config.txt");
    let o = deturb(&["synth", "--config", s(&cfg), "--output", s(&c)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(snap_a, strip(snapshot(&c)));
    assert_eq!(before, snapshot(&clean));

    let o = deturb(&["synth", "--input", s(&clean), "--output", s(&dir.path().join("d")), "--seed", "10"]);
    assert!(o.status.success());
    assert_ne!(fs::read(a.join("degraded/00000_face0_000.png")).unwrap(), fs::read(dir.path().join("d/degraded/00000_face0_000.png")).unwrap());
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let clean = clean_dir(root, 2, 32);
    let data = root.join("data");
    assert!(deturb(&["synth", "--input", s(&clean), "--output", s(&data)]).status.success());
    let manifest = data.join("manifest.jsonl");
    let fast = ["--batch", "2", "--set", "record_wall_time=false", "--set", "progress_every=0", "--set", "checkpoint_every=1"];

    let stage1 = root.join("stage1");
    let mut args = vec!["train-prior", "--manifest", s(&manifest), "--output", s(&stage1), "--iters", "2"];
    args.extend(fast);
    let o = deturb(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let prior = stage1.join("final.ckpt");
    assert!(stage1.join("ckpt_00000001.ckpt").exists());
    assert_eq!(fs::read_to_string(stage1.join("loss_log.jsonl")).unwrap().lines().count(), 2);

    // Resuming from iteration 1 lands on the same final checkpoint.
    let resumed = root.join("stage1b");
    let ck1 = stage1.join("ckpt_00000001.ckpt");
    let mut args = vec!["train-prior", "--manifest", s(&manifest), "--output", s(&resumed), "--iters", "2", "--set"];
    let resume = format!("resume={}", s(&ck1));
    args.push(&resume);
    args.extend(fast);
    assert!(deturb(&args).status.success());
    assert_eq!(fs::read(&prior).unwrap(), fs::read(resumed.join("final.ckpt")).unwrap());

    let stage2 = root.join("stage2");
    let mut args = vec![
        "train-restore", "--manifest", s(&manifest), "--atnet1-ckpt", s(&prior), "--output", s(&stage2), "--iters", "2", "--S", "2",
    ];
    args.extend(fast);
    let o = deturb(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let restoration = stage2.join("final.ckpt");

    let image = data.join("degraded/00000_face0_000.png");
    let est = root.join("est");
    let o = deturb(&["estimate", "--input", s(&image), "--atnet1-ckpt", s(&prior), "--S", "3", "--output", s(&est)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(est.join("00000_face0_000_prior.bin").exists());
    assert!(est.join("00000_face0_000_prior.png").exists());

    let rest = root.join("rest");
    let o = deturb(&[
        "restore", "--input", s(&image), "--atnet1-ckpt", s(&prior), "--atnet-ckpt", s(&restoration), "--S", "2", "--output", s(&rest),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pngs: Vec<_> = fs::read_dir(&rest)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    assert_eq!(pngs.len(), 1);
    assert!(rest.join(RESOLVED).exists());

    // Identification layout: <identity>/<image>.
    let gallery = root.join("gallery");
    let probes = root.join("probes");
    for (i, name) in ["alice", "bob"].iter().enumerate() {
        fs::create_dir_all(gallery.join(name)).unwrap();
        fs::create_dir_all(probes.join(name)).unwrap();
        fs::copy(clean.join(format!("face{i}.png")), gallery.join(name).join("g.png")).unwrap();
        fs::copy(data.join(format!("degraded/0000{i}_face{i}_000.png")), probes.join(name).join("p.png")).unwrap();
    }
    let eval_args = |out: &Path| {
        deturb(&[
            "eval", "--manifest", s(&manifest), "--atnet1-ckpt", s(&prior), "--atnet-ckpt", s(&restoration), "--S", "2",
            "--output", s(out), "--set", &format!("gallery={}", s(&gallery)), "--set", &format!("probes={}", s(&probes)),
        ])
    };
    let (e1, e2) = (root.join("eval1"), root.join("eval2"));
    let o = eval_args(&e1);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(eval_args(&e2).status.success());
    let r1 = fs::read_to_string(e1.join("report.json")).unwrap();
    assert_eq!(r1, fs::read_to_string(e2.join("report.json")).unwrap());
    let v: serde_json::Value = serde_json::from_str(&r1).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
    assert!(v["baseline"]["mean_psnr"].is_number());
    assert_eq!(v["identification"]["restored"].as_array().unwrap().len(), 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("mean"));
}

const RESOLVED: &str = deturb_cli::commands::RESOLVED_CONFIG_FILE;
