use std::path::Path;
use std::process::{Command, Output};

use rabc_seg::e2e::{hash_tree, verify_manifest};
use rabc_seg::io::{read_bundle, read_pgm, write_tnsr};
use rabc_seg::Tensor;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rabc-seg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = r#"{
        "phantom": {"n_images": 4, "size": [32, 32]},
        "rabc": {"hidden": 4},
        "adapt": {"steps": 3},
        "search": {"taus": [0.2, 0.4, 0.6], "sigmas": [0.0, 1.0]},
        "dilation": {"iterations": [0, 1]}
    }"#;
    let path = dir.join("config.json");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn gen_phantom_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&[
            "--config",
            p(&cfg),
            "gen-phantom",
            "--out",
            p(out),
            "--seed",
            "3",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ha = hash_tree(&a).unwrap();
    assert!(ha.keys().any(|k| k.starts_with("val/probs/")));
    assert_eq!(ha, hash_tree(&b).unwrap());

    let c = dir.path().join("c");
    run(&[
        "--config",
        p(&cfg),
        "gen-phantom",
        "--out",
        p(&c),
        "--seed",
        "4",
    ]);
    assert_ne!(ha, hash_tree(&c).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(
        code(&run(&[
            "--config",
            "/nonexistent/config.json",
            "dump-config"
        ])),
        2
    );

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"rabc": {"loss": {"kernel": 4}}}"#).unwrap();
    assert_eq!(code(&run(&["--config", p(&bad), "dump-config"])), 2);

    let missing = dir.path().join("missing.tnsr");
    let out = dir.path().join("masks");
    assert_eq!(
        code(&run(&[
            "infer",
            "--probs",
            p(&missing),
            "--point",
            "isic2017",
            "--out",
            p(&out)
        ])),
        3
    );

    let map = dir.path().join("map.tnsr");
    write_tnsr(&map, &Tensor::scalar_map(8, 8, 0.7)).unwrap();
    assert_eq!(
        code(&run(&[
            "infer",
            "--probs",
            p(&map),
            "--point",
            "nowhere",
            "--out",
            p(&out)
        ])),
        2
    );
    let o = run(&[
        "infer",
        "--probs",
        p(&map),
        "--point",
        "raw-p0",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_pgm(&out.join("map.pgm")).unwrap().count(), 64);

    // A failing gradient check is an invariant failure; this one passes.
    assert_eq!(code(&run(&["gradcheck", "--instances", "2"])), 0);
}

#[test]
fn dump_config_round_trips() {
    let o = run(&["dump-config"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = rabc_seg::config::Config::from_json(&text).unwrap();
    assert_eq!(cfg, rabc_seg::config::Config::default());
}

#[test]
fn loss_eval_single_pixel() {
    let dir = tempfile::tempdir().unwrap();
    let t = |name: &str, shape: Vec<usize>, v: f32| {
        let path = dir.path().join(name);
        write_tnsr(&path, &Tensor::new(shape, vec![v]).unwrap()).unwrap();
        path
    };
    let z = t("z.tnsr", vec![1, 1], 0.0);
    let labels = t("labels.tnsr", vec![1, 1, 1], 1.0);
    let sigmas = t("sigmas.tnsr", vec![1, 1, 1], 0.0);
    let o = run(&[
        "loss-eval",
        "--logits",
        p(&z),
        "--labels",
        p(&labels),
        "--sigmas",
        p(&sigmas),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let dul = v["terms"]["dul"].as_f64().unwrap();
    assert!((dul - std::f64::consts::LN_2).abs() < 1e-4, "{dul}");
    assert!(v["total"].as_f64().unwrap().is_finite());
}

#[test]
fn subcommands_chain_on_a_phantom() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    assert_eq!(
        code(&run(&[
            "--config",
            p(&cfg),
            "gen-phantom",
            "--out",
            p(&data)
        ])),
        0
    );

    let masks = dir.path().join("masks");
    let o = run(&[
        "infer",
        "--probs",
        p(&data.join("test/probs")),
        "--point",
        "isic2017",
        "--out",
        p(&masks),
        "--dump-stages",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let (report, table) = (
        dir.path().join("report.json"),
        dir.path().join("per_image.csv"),
    );
    let o = run(&[
        "metrics",
        "--pred",
        p(&masks),
        "--gt",
        p(&data.join("test/gt")),
        "--out",
        p(&report),
        "--csv",
        p(&table),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["n"], 2);

    let o = run(&[
        "bootstrap",
        "--a",
        p(&table),
        "--b",
        p(&table),
        "--metric",
        "jac",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let b: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(b.to_string().contains("\"p_value\":1.0"), "{b}");

    let search = dir.path().join("search");
    let o = run(&[
        "--config",
        p(&cfg),
        "opsearch",
        "--val",
        p(&data.join("val")),
        "--out",
        p(&search),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let board = std::fs::read_to_string(search.join("leaderboard.csv")).unwrap();
    assert_eq!(board.lines().count(), 1 + 3 * 2 * 3 * 2 * 2);

    let applied = dir.path().join("applied");
    let cues = std::fs::read_dir(data.join("val/cues"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let o = run(&[
        "--config",
        p(&cfg),
        "rabc-apply",
        "--cues",
        p(&cues),
        "--out",
        p(&applied),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bundle = read_bundle(&applied).unwrap();
    assert!(["z_hat", "delta", "alpha", "dtau", "s", "candidate"]
        .iter()
        .all(|k| bundle.contains_key(*k)));

    let adapted = dir.path().join("adapted");
    let o = run(&[
        "--config",
        p(&cfg),
        "rabc-adapt",
        "--out",
        p(&adapted),
        "--steps",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("45839"));
}

#[test]
fn e2e_is_reproducible_and_atomic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    run(&["--config", p(&cfg), "gen-phantom", "--out", p(&data)]);
    let (val, test) = (data.join("val"), data.join("test"));

    let runs: Vec<_> = ["r1", "r2"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = run(&[
                "--config",
                p(&cfg),
                "e2e",
                "--val",
                p(&val),
                "--test",
                p(&test),
                "--out",
                p(&out),
            ]);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
            out
        })
        .collect();
    let m1 = std::fs::read(runs[0].join("manifest.json")).unwrap();
    assert_eq!(m1, std::fs::read(runs[1].join("manifest.json")).unwrap());
    let manifest = verify_manifest(&runs[0]).unwrap();
    assert!(manifest.artifacts.contains_key("comparison.csv"));
    let comparison = std::fs::read_to_string(runs[0].join("comparison.csv")).unwrap();
    for arm in ["base", "dil", "rabc"] {
        assert!(
            comparison.lines().any(|l| l.starts_with(arm)),
            "{comparison}"
        );
    }

    // Tampering is detected.
    std::fs::write(runs[1].join("comparison.csv"), "tampered").unwrap();
    assert_eq!(verify_manifest(&runs[1]).unwrap_err().exit_code(), 4);

    // Overlapping splits are refused before anything runs.
    let out = dir.path().join("overlap");
    let o = run(&[
        "--config",
        p(&cfg),
        "e2e",
        "--val",
        p(&val),
        "--test",
        p(&val),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(empty.join("probs")).unwrap();
    std::fs::create_dir_all(empty.join("gt")).unwrap();
    let out = dir.path().join("no_test");
    let o = run(&[
        "--config",
        p(&cfg),
        "e2e",
        "--val",
        p(&val),
        "--test",
        p(&empty),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 3);
    assert!(!out.exists());
}

#[test]
fn workers_flag_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    run(&["--config", p(&cfg), "gen-phantom", "--out", p(&data)]);
    let hashes: Vec<_> = ["1", "3"]
        .iter()
        .map(|w| {
            let out = dir.path().join(format!("masks{w}"));
            let o = run(&[
                "--workers",
                w,
                "infer",
                "--probs",
                p(&data.join("val/probs")),
                "--point",
                "ph2",
                "--out",
                p(&out),
            ]);
            assert_eq!(code(&o), 0);
            hash_tree(&out).unwrap()
        })
        .collect();
    assert_eq!(hashes[0], hashes[1]);
}
