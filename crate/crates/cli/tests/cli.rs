use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const MICRO: &[&str] = &[
    "--set",
    "preset=micro",
    "--set",
    "iters=3",
    "--set",
    "stage2_iters=1",
    "--set",
    "batch=1",
];

fn medvt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medvt"))
        .current_dir(dir)
        .env_remove("MEDVT_CONFIG")
        .args(args)
        .output()
        .expect("spawn medvt")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = medvt(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_micro<'a>(args: &[&'a str]) -> Vec<&'a str> {
    MICRO.iter().copied().chain(args.iter().copied()).collect()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        medvt(dir.path(), &["--no-such-flag", "gradcheck"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        medvt(dir.path(), &["--set", "bogus=1", "gradcheck"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        medvt(dir.path(), &["--set", "d=7", "gradcheck"])
            .status
            .code(),
        Some(2)
    );
    fs::write(dir.path().join("bad.cfg"), "d 48\n").unwrap();
    assert_eq!(
        medvt(dir.path(), &["--config", "bad.cfg", "gradcheck"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        medvt(dir.path(), &["eval", "--data", "x"]).status.code(),
        Some(2)
    );
}

#[test]
fn config_file_and_environment_are_read() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.cfg"), "preset = micro\n").unwrap();
    ok(
        dir.path(),
        &[
            "--config", "m.cfg", "gen", "--out", "a", "--n", "1", "--frames", "2",
        ],
    );
    let out = Command::new(env!("CARGO_BIN_EXE_medvt"))
        .current_dir(dir.path())
        .env("MEDVT_CONFIG", "m.cfg")
        .args(["--json", "gen", "--out", "b", "--n", "1", "--frames", "2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["height"], 32);
    assert_eq!(tree(&dir.path().join("a")), tree(&dir.path().join("b")));
}

#[test]
fn gen_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(
            dir.path(),
            &with_micro(&[
                "--seed", "7", "gen", "--out", out, "--n", "12", "--frames", "3",
            ]),
        );
    }
    ok(
        dir.path(),
        &with_micro(&[
            "--seed", "8", "gen", "--out", "c", "--n", "12", "--frames", "3",
        ]),
    );
    let (a, b, c) = (
        tree(&dir.path().join("a")),
        tree(&dir.path().join("b")),
        tree(&dir.path().join("c")),
    );
    assert_eq!(a, b);
    assert_ne!(a, c);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["clips"].as_array().unwrap().len(), 12);
}

#[test]
fn train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &with_micro(&["gen", "--out", "data", "--n", "3", "--frames", "4"]),
    );
    ok(d, &with_micro(&["train", "--data", "data", "--out", "ck"]));
    for f in ["config.txt", "train_log.csv", "params/manifest.json"] {
        assert!(d.join("ck").join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(d.join("ck/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3 + 1);

    ok(
        d,
        &[
            "infer",
            "--checkpoint",
            "ck",
            "--data",
            "data",
            "--out",
            "p_default",
            "--dump-attention",
        ],
    );
    ok(
        d,
        &[
            "infer",
            "--checkpoint",
            "ck",
            "--data",
            "data",
            "--out",
            "p_one",
            "--scales",
            "1.0",
            "--dump-attention",
        ],
    );
    assert_eq!(tree(&d.join("p_default")), tree(&d.join("p_one")));
    assert!(d.join("p_one/masks/002_3.pgm").exists());
    assert!(d.join("p_one/attention/002.mvt1").exists());

    let from_pred = ok(d, &["--json", "eval", "--data", "data", "--pred", "p_one"]).stdout;
    let from_ckpt = ok(
        d,
        &["--json", "eval", "--data", "data", "--checkpoint", "ck"],
    )
    .stdout;
    assert_eq!(from_pred, from_ckpt);
    let report: serde_json::Value = serde_json::from_slice(&from_pred).unwrap();
    let j = report["J_mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&j));

    ok(
        d,
        &[
            "infer",
            "--checkpoint",
            "ck",
            "--data",
            "data",
            "--out",
            "p_multi",
            "--scales",
            "0.75,1.0",
        ],
    );
    assert_eq!(
        medvt(
            d,
            &[
                "infer",
                "--checkpoint",
                "ck",
                "--data",
                "data",
                "--out",
                "x",
                "--scales",
                "a"
            ]
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        medvt(d, &["eval", "--data", "data", "--pred", "nowhere"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn ablate_reports_four_plus_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let args = with_micro(&[
        "--json",
        "ablate",
        "--seeds",
        "0",
        "--n-train",
        "2",
        "--n-val",
        "1",
        "--frames",
        "4",
        "--out",
        "ablation.json",
    ]);
    let out = ok(dir.path(), &args);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = report["rows"].as_array().unwrap();
    let count = |table: &str| rows.iter().filter(|r| r["table"] == table).count();
    assert_eq!(rows.len(), 6);
    assert_eq!((count("scales"), count("propagation")), (4, 2));
    let saved: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("ablation.json")).unwrap()).unwrap();
    assert_eq!(saved, report);
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for e in fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        let cfg =
            medvt_core::model::Config::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        if p.file_stem().unwrap() == "actor_action" {
            assert_eq!(cfg.model.classes, 43);
        }
        seen += 1;
    }
    assert!(seen >= 2);
}
