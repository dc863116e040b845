//! End-to-end exercise of the `m2m` binary: generate -> train -> eval ->
//! report -> ablate, plus the exit-code contract and the seed override.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn m2m(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_m2m"));
    cmd.args(args);
    cmd.env_remove("M2M_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn assert_code(out: &Output, want: i32, ctx: &str) {
    let code = out.status.code().unwrap_or(-1);
    assert_eq!(
        code,
        want,
        "{ctx}: expected exit {want}, got {code}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn workspace(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("m2m-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_tiny_config(path: &Path) {
    let cfg = serde_json::json!({
        "grid": {"height_px": 8, "width_px": 8, "range_lat_m": [-15.0, 15.0], "range_lon_m": [-30.0, 30.0]},
        "s": 2, "d": 8, "heads": 2, "enc_layers": 1,
        "m": 1, "k": 1, "n_i": 4, "n_p": 4, "n_s": 3, "g": 2,
        "steps": 2, "batch_size": 2, "log_every": 1,
        "train_scenes": 2, "eval_scenes": 2,
        "seed": 7
    });
    std::fs::write(path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn full_pipeline_round_trip() {
    let root = workspace("pipeline");
    let cfg = root.join("config.json");
    write_tiny_config(&cfg);
    let cfg_s = cfg.to_str().unwrap();

    // generate: deterministic dataset bytes.
    let data = root.join("data");
    let data_s = data.to_str().unwrap();
    let out = m2m(&["generate", "--config", cfg_s, "--out", data_s, "--n", "3"], &[]);
    assert_code(&out, 0, "generate");
    let ds_path = data.join("dataset.jsonl");
    let first = std::fs::read(&ds_path).unwrap();
    let out = m2m(&["generate", "--config", cfg_s, "--out", data_s, "--n", "3"], &[]);
    assert_code(&out, 0, "generate again");
    assert_eq!(first, std::fs::read(&ds_path).unwrap(), "regenerated dataset differs");

    // train: run artifacts appear.
    let run = root.join("run");
    let run_s = run.to_str().unwrap();
    let out = m2m(
        &["train", "--config", cfg_s, "--data", data_s, "--out", run_s],
        &[],
    );
    assert_code(&out, 0, "train");
    for f in ["config.json", "curve.json", "checkpoint.json"] {
        assert!(run.join(f).is_file(), "missing {f} after train");
    }

    // eval: metrics artifacts in the run dir, summary JSON on stdout.
    let out = m2m(&["eval", "--run", run_s, "--data", data_s], &[]);
    assert_code(&out, 0, "eval");
    for f in ["metrics.json", "pr.json", "samples.json"] {
        assert!(run.join(f).is_file(), "missing {f} after eval");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().next().expect("eval prints a summary");
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert!(v["map_chamfer"].as_f64().unwrap() >= 0.0);
    assert!(v["util"].as_f64().is_some());

    // report: one JSON plus >= 3 images, byte-identical on rerun.
    let rep = root.join("rep");
    let rep_s = rep.to_str().unwrap();
    let out = m2m(&["report", "--runs", run_s, "--out", rep_s], &[]);
    assert_code(&out, 0, "report");
    let table = rep.join("report.json");
    assert!(table.is_file());
    let pngs: Vec<_> = std::fs::read_dir(&rep)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
        .collect();
    assert!(pngs.len() >= 3, "expected >= 3 images, found {}", pngs.len());
    let table_bytes = std::fs::read(&table).unwrap();
    let parsed: serde_json::Value = serde_json::from_slice(&table_bytes).unwrap();
    assert_eq!(parsed["runs"][0]["id"], "run");
    assert!(parsed["runs"][0]["config"]["n_i"].as_u64().is_some());
    let out = m2m(&["report", "--runs", run_s, "--out", rep_s], &[]);
    assert_code(&out, 0, "report rerun");
    assert_eq!(
        table_bytes,
        std::fs::read(&table).unwrap(),
        "report.json changed across identical reruns"
    );

    std::fs::remove_dir_all(&root).unwrap();
}

#[test]
fn seed_env_var_overrides_config() {
    let root = workspace("seed");
    let cfg = root.join("config.json");
    write_tiny_config(&cfg);
    let data = root.join("data");
    let out = m2m(
        &[
            "generate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
            "--n",
            "2",
        ],
        &[("M2M_SEED", "123")],
    );
    assert_code(&out, 0, "generate with M2M_SEED");
    let written: serde_json::Value =
        serde_json::from_slice(&std::fs::read(data.join("config.json")).unwrap()).unwrap();
    assert_eq!(written["seed"], 123);

    let out = m2m(
        &[
            "generate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
            "--n",
            "2",
        ],
        &[("M2M_SEED", "not-a-number")],
    );
    assert_code(&out, 2, "bad M2M_SEED");
    std::fs::remove_dir_all(&root).unwrap();
}

#[test]
fn ablation_axis_writes_table_and_row_runs() {
    let root = workspace("ablate");
    let cfg = root.join("config.json");
    write_tiny_config(&cfg);
    let out_dir = root.join("abl");
    let out = m2m(
        &[
            "ablate",
            "--config",
            cfg.to_str().unwrap(),
            "--axis",
            "denoising",
            "--out",
            out_dir.to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 0, "ablate denoising");
    let table: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("ablation_denoising.json")).unwrap())
            .unwrap();
    assert_eq!(table["axis"], "denoising");
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["name"], "off");
    assert_eq!(rows[1]["name"], "on");
    for row in rows {
        assert!(row["report"]["map_chamfer"].as_f64().is_some());
        assert!(row["final_util"].is_number() || row["final_util"].is_null());
    }
    // Row run dirs are complete enough for `report` to consume.
    let row0 = out_dir.join("00_off");
    let row1 = out_dir.join("01_on");
    for d in [&row0, &row1] {
        for f in [
            "config.json",
            "curve.json",
            "checkpoint.json",
            "metrics.json",
            "pr.json",
            "samples.json",
        ] {
            assert!(d.join(f).is_file(), "missing {f} in {}", d.display());
        }
    }
    let rep = root.join("rep");
    let out = m2m(
        &[
            "report",
            "--runs",
            row0.to_str().unwrap(),
            row1.to_str().unwrap(),
            "--out",
            rep.to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 0, "report over ablation rows");
    let combined: serde_json::Value =
        serde_json::from_slice(&std::fs::read(rep.join("report.json")).unwrap()).unwrap();
    let ids: Vec<&str> = combined["runs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, ["00_off", "01_on"]);
    assert!(combined["comparison"]["map_chamfer"]["00_off"].is_number());
    assert!(combined["comparison"]["map_chamfer"]["01_on"].is_number());
    std::fs::remove_dir_all(&root).unwrap();
}

#[test]
fn exit_codes_distinguish_config_and_runtime_errors() {
    let root = workspace("codes");
    let cfg = root.join("config.json");
    write_tiny_config(&cfg);
    let cfg_s = cfg.to_str().unwrap();

    // Unknown config key -> 2.
    let bad = root.join("bad.json");
    std::fs::write(&bad, r#"{"n_queries": 8}"#).unwrap();
    let out = m2m(
        &["generate", "--config", bad.to_str().unwrap(), "--out", cfg_s, "--n", "1"],
        &[],
    );
    assert_code(&out, 2, "unknown config key");

    // Invalid config value -> 2.
    let invalid = root.join("invalid.json");
    std::fs::write(&invalid, r#"{"d": 62}"#).unwrap();
    let out = m2m(
        &[
            "generate",
            "--config",
            invalid.to_str().unwrap(),
            "--out",
            root.join("x").to_str().unwrap(),
            "--n",
            "1",
        ],
        &[],
    );
    assert_code(&out, 2, "invalid config value");

    // Missing dataset -> 2.
    let out = m2m(
        &[
            "train",
            "--config",
            cfg_s,
            "--data",
            root.join("nope").to_str().unwrap(),
            "--out",
            root.join("run").to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 2, "missing dataset");

    // Missing run dir for report -> 2.
    let out = m2m(
        &[
            "report",
            "--runs",
            root.join("ghost").to_str().unwrap(),
            "--out",
            root.join("rep").to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 2, "missing run dir");

    // Unknown ablation axis -> 2.
    let out = m2m(
        &[
            "ablate",
            "--config",
            cfg_s,
            "--axis",
            "bogus",
            "--out",
            root.join("a").to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 2, "unknown axis");

    // Run dir without a checkpoint -> 2 (missing artifact names the path).
    let half_run = root.join("half");
    std::fs::create_dir_all(&half_run).unwrap();
    std::fs::copy(&cfg, half_run.join("config.json")).unwrap();
    let data = root.join("data");
    let out = m2m(
        &["generate", "--config", cfg_s, "--out", data.to_str().unwrap(), "--n", "1"],
        &[],
    );
    assert_code(&out, 0, "generate for half-run eval");
    let out = m2m(
        &[
            "eval",
            "--run",
            half_run.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
        ],
        &[],
    );
    assert_code(&out, 2, "eval without checkpoint");
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("checkpoint.json"),
        "error should name the missing artifact"
    );

    std::fs::remove_dir_all(&root).unwrap();
}
