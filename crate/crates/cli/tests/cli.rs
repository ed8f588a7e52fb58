use std::fs;
use std::path::Path;
use std::process::Command;

use cama_cli::commands::{cmd_diagnose, cmd_gen, cmd_run, Mode, RunOptions, Which};
use cama_cli::{resolve_inputs, RunConfig};
use serde_json::Value;

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.task.n_shots = 3;
    c.task.image_tokens_per_icd = 10;
    c.decode.steps = 2;
    c
}

fn cama_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cama"))
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config();
    let a = cmd_gen(&c, 3, &dir.path().join("a")).unwrap();
    cmd_gen(&c, 3, &dir.path().join("b")).unwrap();
    assert_eq!(a.sequences.len(), 3);
    for s in &a.sequences {
        for f in ["manifest.json", "embeddings.bin", "tokens.bin"] {
            let x = dir.path().join("a").join(&s.name).join(f);
            let y = dir.path().join("b").join(&s.name).join(f);
            if x.exists() {
                assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
            }
        }
    }
    assert_eq!(
        fs::read(dir.path().join("a/corpus.json")).unwrap(),
        fs::read(dir.path().join("b/corpus.json")).unwrap()
    );
}

#[test]
fn every_mode_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config();
    cmd_gen(&c, 2, &dir.path().join("corpus")).unwrap();
    let inputs = resolve_inputs(&[dir.path().join("corpus")]).unwrap();
    assert_eq!(inputs.len(), 2);
    for mode in [Mode::Vanilla, Mode::Cama, Mode::Cd, Mode::Sofa] {
        let opts = RunOptions {
            mode,
            emit_traces: false,
            jobs: 2,
        };
        let paths = cmd_run(&c, &inputs, &dir.path().join("out"), &opts).unwrap();
        assert_eq!(paths.len(), 2);
        let v = read_json(&paths[0]);
        assert_eq!(v["mode"], mode.name());
        match mode {
            Mode::Cama => {
                let sizes = v["key_set_sizes"].as_array().unwrap();
                assert_eq!(sizes.len(), 4);
                assert!(sizes.iter().all(|s| s.as_u64() == Some(2)));
                assert!(!v["cama"]["plan"].as_array().unwrap().is_empty());
            }
            Mode::Cd => {
                assert_eq!(v["alpha"], 0.4);
                assert!(v["logits_orig"].is_array() && v["logits_distorted"].is_array());
            }
            _ => {}
        }
    }
}

#[test]
fn diagnose_tables() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config();
    cmd_gen(&c, 1, &dir.path().join("corpus")).unwrap();
    let inputs = resolve_inputs(&[dir.path().join("corpus")]).unwrap();
    let out = dir.path().join("diag");
    let summary = cmd_diagnose(&c, &inputs, &out, Which::Both, 1, true).unwrap();
    let s = &summary.sequences[0];
    let n_layers = c.model.n_layers;
    assert_eq!(s.contrib.len(), 3 * n_layers);
    for l in 1..=n_layers {
        assert_eq!(s.contrib.iter().filter(|r| r.layer == l).count(), 3);
    }
    for r in &s.contrib {
        assert!((0.0..=1.0).contains(&r.clean) && (0.0..=1.0).contains(&r.cama));
    }
    for r in &s.align {
        assert!((0.0..=1.0).contains(&r.clean) && (0.0..=1.0).contains(&r.cama));
    }
    let mut rdr = csv::Reader::from_path(out.join("contrib.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap().len(), 5);
    assert!(rdr.records().all(|r| r.unwrap().len() == 5));
    assert!(out.join("seq_00000/heat_cama_e1.pgm").is_file());
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let st = cama_bin()
        .args(["--out"])
        .arg(&out)
        .args(["gen", "--count", "0"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    assert!(!out.join("corpus.json").exists());

    let st = cama_bin().args(["bogus"]).status().unwrap();
    assert_eq!(st.code(), Some(1));

    let corpus = dir.path().join("c");
    let st = cama_bin()
        .arg("--out")
        .arg(&corpus)
        .args(["gen", "--count", "1"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let st = cama_bin()
        .arg("--out")
        .arg(&out)
        .args(["run", "--mode", "cama", "--alpha", "0.5"])
        .arg(&corpus)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(1));

    let st = cama_bin()
        .arg("--out")
        .arg(&out)
        .args(["run", "--mode", "vanilla"])
        .arg(dir.path().join("missing"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[cama]\nstage2_layers = [40]\n").unwrap();
    let st = cama_bin()
        .arg("--config")
        .arg(&bad)
        .args(["gen", "--count", "1"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(1));

    let st = cama_bin()
        .args(["gradcheck", "--threshold", "1e-30"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
    let st = cama_bin().args(["gradcheck"]).output().unwrap();
    assert_eq!(st.status.code(), Some(0));
    let report: Value = serde_json::from_slice(&st.stdout).unwrap();
    assert!(!report["per_layer"].as_array().unwrap().is_empty());
}

#[test]
fn diagnose_without_ground_truth_fails() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config();
    cmd_gen(&c, 1, &dir.path().join("corpus")).unwrap();
    let seq_dir = dir.path().join("corpus/seq_00000");
    let manifest = seq_dir.join("manifest.json");
    let mut m = read_json(&manifest);
    m.as_object_mut().unwrap().remove("ground_truth");
    fs::write(&manifest, serde_json::to_string(&m).unwrap()).unwrap();
    let inputs = resolve_inputs(&[seq_dir]).unwrap();
    let err = cmd_diagnose(&c, &inputs, &dir.path().join("d"), Which::Align, 1, false).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
