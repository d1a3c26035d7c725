//! Drives the compiled binary through the full pipeline over real files:
//! synth -> calibrate -> fit -> allocate -> predict-gain -> simulate, plus
//! the validate self-check and the documented error paths.

use std::path::Path;
use std::process::{Command, Output};

fn kvbits(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvbits"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // Synthesize sensitivities.
    let out = kvbits(
        &[
            "synth", "--layers", "6", "--heads", "8", "--sigma", "0.8", "--seed", "42", "--out",
            "sens.json",
        ],
        d,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(d.join("sens.json").exists());

    // Calibrate the Lloyd-Max simulator; default bits are 2..6.
    let out = kvbits(
        &[
            "calibrate",
            "--quantizer",
            "lloyd-max",
            "--rows",
            "1024",
            "--cols",
            "128",
            "--seed",
            "42",
            "--out",
            "mse.csv",
        ],
        d,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(d.join("mse.csv")).unwrap();
    assert!(csv.starts_with("quantizer,component,bits,mse"));
    assert_eq!(csv.lines().count(), 6, "header + default five bit rows");

    // Append value-side rows for the separate-mode flow.
    let out = kvbits(
        &[
            "calibrate",
            "--quantizer",
            "lloyd-max",
            "--component",
            "value",
            "--rows",
            "1024",
            "--cols",
            "128",
            "--seed",
            "43",
            "--append",
            "--out",
            "mse.csv",
        ],
        d,
    );
    assert!(out.status.success(), "{}", stderr(&out));

    // Fit both components.
    for (component, file) in [("key", "model_k.json"), ("value", "model_v.json")] {
        let out = kvbits(
            &[
                "fit",
                "--csv",
                "mse.csv",
                "--quantizer",
                "lloyd-max",
                "--component",
                component,
                "--out",
                file,
            ],
            d,
        );
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(stdout(&out).contains("alpha"));
    }

    // Separate-mode allocation.
    let out = kvbits(
        &[
            "allocate",
            "--sens",
            "sens.json",
            "--model-k",
            "model_k.json",
            "--model-v",
            "model_v.json",
            "--avg-bits",
            "4.0",
            "--b-min",
            "2",
            "--b-max",
            "8",
            "--out",
            "alloc.json",
        ],
        d,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let alloc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("alloc.json")).unwrap()).unwrap();
    assert_eq!(alloc["budget"], 384); // 4.0 * 2 * 48
    assert_eq!(alloc["bits_k"].as_array().unwrap().len(), 6);
    assert_eq!(alloc["config_echo"]["command"], "allocate");
    assert_eq!(alloc["model_refs"].as_array().unwrap().len(), 2);

    // Gain prediction prints AM >= GM.
    let out = kvbits(&["predict-gain", "--sens", "sens.json"], d);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("combined"));
    assert!(text.contains("AM/GM"));

    // Simulation at modest size; identical invocations are byte-identical.
    let simulate = || {
        let out = kvbits(
            &[
                "simulate",
                "--sens",
                "sens.json",
                "--alloc",
                "alloc.json",
                "--rows",
                "128",
                "--cols",
                "64",
                "--seed",
                "42",
                "--out",
                "report.json",
                "--per-head-csv",
                "per_head.csv",
            ],
            d,
        );
        assert!(out.status.success(), "{}", stderr(&out));
        std::fs::read(d.join("report.json")).unwrap()
    };
    let a = simulate();
    let b = simulate();
    assert_eq!(a, b, "simulate is not deterministic");

    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    let realized = report["realized_ratio"].as_f64().unwrap();
    let ju = report["j_uniform"].as_f64().unwrap();
    let ja = report["j_allocated"].as_f64().unwrap();
    assert!((realized - ju / ja).abs() < 1e-12);
    let per_head = std::fs::read_to_string(d.join("per_head.csv")).unwrap();
    assert!(per_head.starts_with("layer,head,side,bits,mse"));
    assert_eq!(per_head.lines().count(), 1 + 2 * 48);
}

#[test]
fn joint_mode_equal_weights_gives_uniform_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = kvbits(
        &[
            "synth", "--layers", "4", "--heads", "4", "--sigma", "0", "--seed", "1", "--out",
            "sens.json",
        ],
        d,
    );
    assert!(out.status.success());
    std::fs::write(
        d.join("model.json"),
        r#"{"quantizer":"lloyd-max","component":"key","alpha":1.36,"beta":3.48,"r2":0.999,"fit_bits":[2,3,4,5,6]}"#,
    )
    .unwrap();
    let out = kvbits(
        &[
            "allocate",
            "--sens",
            "sens.json",
            "--model",
            "model.json",
            "--avg-bits",
            "4",
            "--b-min",
            "2",
            "--b-max",
            "8",
            "--out",
            "alloc.json",
        ],
        d,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let alloc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("alloc.json")).unwrap()).unwrap();
    assert_eq!(alloc["mode"], "joint");
    for row in alloc["bits_k"].as_array().unwrap() {
        for b in row.as_array().unwrap() {
            assert_eq!(b.as_u64().unwrap(), 4);
        }
    }
    assert_eq!(alloc["bits_k"], alloc["bits_v"]);
}

#[test]
fn validate_prints_table_and_flags_reference_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let out = kvbits(&["validate"], dir.path());
    let text = stdout(&out);
    // The exact column reproduces the reference up to 4 bits; the 5- and
    // 6-bit reference entries disagree with the converged optimum, and the
    // reference fit/ratio columns follow those entries.
    for bits in 1..=4 {
        let row = text
            .lines()
            .find(|l| l.trim_start().starts_with(&format!("{bits} ")))
            .unwrap_or_else(|| panic!("row {bits} missing:\n{text}"));
        assert!(!row.contains("exact"), "row {bits} exact mismatch: {row}");
    }
    for bits in 5..=6 {
        let row = text
            .lines()
            .find(|l| l.trim_start().starts_with(&format!("{bits} ")))
            .unwrap();
        assert!(row.contains("exact"), "row {bits} should flag exact: {row}");
    }
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("error:"), "{err}");
    assert!(err.contains("bits 5"), "{err}");
    assert!(err.contains("bits 6"), "{err}");
}

#[test]
fn validate_single_bit_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = kvbits(&["validate", "--bits", "1"], dir.path());
    let text = stdout(&out);
    // The 1-bit exact value matches the reference; the fit columns follow
    // the full recomputed table and disagree, so the exit is nonzero.
    assert!(text.contains("3.633802e-1"), "{text}");
    let row = text
        .lines()
        .find(|l| l.trim_start().starts_with("1 "))
        .unwrap();
    assert!(!row.contains("exact"), "exact flagged: {row}");
    assert!(!out.status.success());
}

#[test]
fn unknown_quantizer_lists_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out = kvbits(
        &[
            "calibrate",
            "--quantizer",
            "bogus",
            "--out",
            "x.csv",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.starts_with("error:"), "{err}");
    for label in [
        "per-token-symmetric",
        "per-token-asymmetric",
        "per-channel-symmetric",
        "hadamard-per-token-symmetric",
        "lloyd-max",
    ] {
        assert!(err.contains(label), "missing {label} in: {err}");
    }
}

#[test]
fn fit_rejects_increasing_mse_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("bad.csv"),
        "quantizer,component,bits,mse\nq,key,2.0,0.1\nq,key,3.0,0.2\n",
    )
    .unwrap();
    let out = kvbits(
        &[
            "fit",
            "--csv",
            "bad.csv",
            "--quantizer",
            "q",
            "--out",
            "m.json",
        ],
        d,
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("calibration failure"), "{}", stderr(&out));
}

#[test]
fn allocate_rejects_infeasible_average() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    kvbits(
        &[
            "synth", "--layers", "2", "--heads", "2", "--sigma", "0.5", "--seed", "3", "--out",
            "sens.json",
        ],
        d,
    );
    std::fs::write(
        d.join("model.json"),
        r#"{"quantizer":"q","component":"key","alpha":1.5,"beta":3.5,"r2":1.0,"fit_bits":[]}"#,
    )
    .unwrap();
    let out = kvbits(
        &[
            "allocate",
            "--sens",
            "sens.json",
            "--model",
            "model.json",
            "--avg-bits",
            "1.5",
            "--b-min",
            "2",
            "--b-max",
            "8",
            "--out",
            "alloc.json",
        ],
        d,
    );
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("infeasible budget"), "{err}");
    assert!(err.contains("require 8 <= budget"), "{err}");
}

#[test]
fn sensitivity_error_names_offending_entry() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("sens.json"),
        r#"{"model":"m","num_layers":1,"num_kv_heads":2,
            "weights_k":[[1.0,0.0]],"weights_v":[[1.0,1.0]],"source_label":"s"}"#,
    )
    .unwrap();
    let out = kvbits(&["predict-gain", "--sens", "sens.json"], d);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("layer 0"), "{err}");
    assert!(err.contains("head 1"), "{err}");
}
