use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn da4lg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_da4lg"))
        .args(args)
        .env("DA4LG_THREADS", "1")
        .output()
        .expect("spawn da4lg")
}

fn ok_json(args: &[&str]) -> Value {
    let out = da4lg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates a small dataset and trains a short run; returns (data, run).
fn fixture(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let spec = root.join("spec.toml");
    fs::write(
        &spec,
        "seed = 3\nn_objects = 8\nn_references = 32\nimage_size = 16\nviews = 2\nvisual_fraction = 0.5\n",
    )
    .unwrap();
    let config = root.join("train.toml");
    fs::write(&config, "epochs = 3\nbatch_size = 8\nseed = 1\n").unwrap();
    let data = root.join("data");
    let run = root.join("run");
    ok_json(&["gen-data", "--spec", s(&spec), "--out", s(&data), "--json"]);
    ok_json(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&config),
        "--out",
        s(&run),
        "--json",
    ]);
    (data, run)
}

#[test]
fn end_to_end_verbs() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = fixture(tmp.path());
    let ckpt = run.join("final");

    let ledger = ok_json(&["params", "--ckpt", s(&ckpt), "--json"]);
    let groups = ledger["groups"].as_array().unwrap();
    let adapters = groups.iter().find(|g| g["group"] == "domain_adapters").unwrap();
    assert_eq!(adapters["trainable"], 6144);
    let domain = groups.iter().find(|g| g["group"] == "domain_encoder").unwrap();
    assert_eq!(domain["trainable"], 0);

    let eval = [
        "eval",
        "--data",
        s(&data),
        "--ckpt",
        s(&ckpt),
        "--split",
        "test",
        "--json",
    ];
    let first = da4lg(&eval);
    let second = da4lg(&eval);
    assert!(first.status.success());
    assert_eq!(first.stdout, second.stdout);

    let merged = tmp.path().join("merged");
    ok_json(&["merge", "--ckpt", s(&ckpt), "--out", s(&merged), "--json"]);
    let a: Value = serde_json::from_slice(&first.stdout).unwrap();
    let b = ok_json(&[
        "eval",
        "--data",
        s(&data),
        "--ckpt",
        s(&merged),
        "--split",
        "test",
        "--json",
    ]);
    assert_eq!(a["all"], b["all"]);
    let merged_ledger = ok_json(&["params", "--ckpt", s(&merged), "--json"]);
    assert!(merged_ledger["groups"]
        .as_array()
        .unwrap()
        .iter()
        .all(|g| g["group"] != "domain_adapters" || g["total"] == 0));

    let single = ok_json(&[
        "eval",
        "--data",
        s(&data),
        "--ckpt",
        s(&ckpt),
        "--split",
        "test",
        "--views",
        "single:1",
        "--json",
    ]);
    assert_eq!(single["all"]["n"], a["all"]["n"]);

    let heat = tmp.path().join("heat");
    let attn = ok_json(&[
        "attn",
        "--ckpt",
        s(&ckpt),
        "--object",
        "obj0000",
        "--view",
        "1",
        "--zero-adapters",
        "--out",
        s(&heat),
        "--json",
    ]);
    assert_eq!(attn["files"].as_array().unwrap().len(), 4);
    assert_eq!(attn["grid_side"], 2);

    let cap = ok_json(&["caption-debug", "--ckpt", s(&ckpt), "--object", "obj0001", "--json"]);
    assert!(cap["caption"].is_string());
}

#[test]
fn seeded_generation_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"seed": 1, "n_objects": 4, "n_references": 12, "image_size": 16, "views": 2, "visual_fraction": 0.5}"#,
    )
    .unwrap();
    let mut manifests = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("d{k}"));
        ok_json(&[
            "gen-data",
            "--spec",
            s(&spec),
            "--out",
            s(&out),
            "--seed",
            "7",
            "--json",
        ]);
        let mut files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        manifests.push(
            files
                .iter()
                .filter(|p| p.is_file())
                .map(|p| fs::read(p).unwrap())
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(manifests[0], manifests[1]);
}

#[test]
fn sweep_over_a_small_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = tmp.path().join("grid.toml");
    fs::write(
        &grid,
        r#"
masks = [["LGR"], ["VLC"]]
policies = ["freezing"]

[synth]
seed = 2
n_objects = 6
n_references = 24
image_size = 16
views = 2
visual_fraction = 0.5

[train]
epochs = 1
batch_size = 8
"#,
    )
    .unwrap();
    let table = ok_json(&["sweep", "--grid", s(&grid), "--seeds", "2", "--json"]);
    let cells = table["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2);
    assert_eq!(cells[0]["runs"].as_array().unwrap().len(), 2);
    assert!(cells[1]["skipped"].as_str().unwrap().contains("LGR"));
}

#[test]
fn exit_codes() {
    assert_eq!(da4lg(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(da4lg(&["eval", "--bogus"]).status.code(), Some(1));
    assert_eq!(da4lg(&["--help"]).status.code(), Some(0));
    let out = da4lg(&["params", "--ckpt", "/nonexistent/ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/ckpt"));
}
