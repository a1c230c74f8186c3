// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::fs;
use std::process::Command;

use common::{run_cli, run_pipeline, s, small_config, snapshot};
use superact::archive::{read_archive, Split};
use superact::cli::{DetectionSummaryRow, DetectorSet, StrategyDetection};
use superact::concepts::read_concepts;
use superact::detection::{evaluate_detection, Strategy};
use superact::report::TIMESTAMP_PREFIX;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_superact"))
}

#[test]
fn pipeline_outputs_are_byte_identical_across_runs() {
    for format in ["csv", "json"] {
        let tmp = tempfile::tempdir().unwrap();
        let dirs = run_pipeline(tmp.path(), 5, format);
        let first = snapshot(tmp.path(), &dirs);
        assert!(first.len() > 20, "only {} files", first.len());
        for d in &dirs {
            fs::remove_dir_all(d).unwrap();
        }
        let again = run_pipeline(tmp.path(), 5, format);
        let second = snapshot(tmp.path(), &again);
        assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
        for (path, bytes) in &first {
            assert!(bytes == &second[path], "{} differs between runs", path.display());
        }
    }
}

#[test]
fn different_seeds_change_the_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, seed) in [(&a, "1"), (&b, "2")] {
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, serde_json::to_vec(&small_config(0)).unwrap()).unwrap();
        let out = dir.path().join("data");
        assert_eq!(run_cli(&["synth", "--config", s(&cfg), "--out", s(&out), "--seed", seed]), 0);
    }
    let rel = "data/layer-100/test/embeddings.bin";
    assert_ne!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
}

#[test]
fn synth_writes_three_splits_and_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    let mut c = small_config(3);
    c.layers.truncate(1);
    fs::write(&cfg, serde_json::to_vec(&c).unwrap()).unwrap();
    let out = tmp.path().join("d");
    assert_eq!(run_cli(&["synth", "--config", s(&cfg), "--out", s(&out)]), 0);
    for split in Split::ALL {
        let a = read_archive(out.join("layer-50").join(split.as_str())).unwrap();
        assert_eq!(a.split(), split);
    }
    let truth: serde_json::Value = serde_json::from_slice(&fs::read(out.join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["seed"], 3);
}

#[test]
fn detect_table_matches_in_process_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    run_pipeline(tmp.path(), 9, "csv");
    let root = tmp.path();
    let tests: Vec<_> = ["layer-50", "layer-100"]
        .iter()
        .map(|l| read_archive(root.join("data").join(l).join("test")).unwrap())
        .collect();
    let vectors = read_concepts(&root.join("concepts")).unwrap();
    let set: DetectorSet = serde_json::from_slice(&fs::read(root.join("calibrate/detectors.json")).unwrap()).unwrap();

    let mut rdr = csv::Reader::from_path(root.join("detect/detection.csv")).unwrap();
    let rows: Vec<DetectionSummaryRow> = rdr.deserialize().map(|r| r.unwrap()).collect();
    let order: Vec<Strategy> = rows.iter().map(|r| r.strategy).collect();
    assert_eq!(order, Strategy::ALL.to_vec());

    let stored: Vec<StrategyDetection> =
        serde_json::from_slice(&fs::read(root.join("detect/detection_result.json")).unwrap()).unwrap();
    for (row, stored) in rows.iter().zip(&stored) {
        let pairs: Vec<_> = set
            .detectors
            .iter()
            .filter(|d| d.strategy == row.strategy)
            .map(|d| {
                let v = vectors
                    .iter()
                    .find(|v| v.concept_id == d.concept_id && v.layer_tag == d.layer_tag)
                    .unwrap();
                (d.clone(), v.values.clone())
            })
            .collect();
        let expected = evaluate_detection(&tests, &pairs, 9).unwrap();
        assert_eq!(*row, DetectionSummaryRow::from_result(row.strategy, &expected));
        assert_eq!(stored.result, expected);
    }
}

#[test]
fn report_tables_carry_a_timestamp_unless_suppressed() {
    let tmp = tempfile::tempdir().unwrap();
    run_pipeline(tmp.path(), 2, "csv");
    let det = tmp.path().join("detect");
    let out = tmp.path().join("stamped");
    assert_eq!(run_cli(&["report", "--in", s(&det), "--out", s(&out)]), 0);
    let stamped = fs::read_to_string(out.join("table_detection.csv")).unwrap();
    let (first, rest) = stamped.split_once('\n').unwrap();
    assert!(first.starts_with(TIMESTAMP_PREFIX));
    let plain = tmp.path().join("plain");
    assert_eq!(run_cli(&["report", "--in", s(&det), "--out", s(&plain), "--no-timestamp"]), 0);
    assert_eq!(rest, fs::read_to_string(plain.join("table_detection.csv")).unwrap());
}

#[test]
fn exit_codes() {
    let o = bin().arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let o = bin().args(["detect", "--archive", "x", "--unknown-flag"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let o = bin().args(["calibrate", "--concepts", "c", "--out", "o"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "missing --archive is a usage error");

    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none");
    let o = bin().args(["validate", "--archive", s(&missing)]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));

    let o = bin().arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn validate_reports_invalid_archives() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, serde_json::to_vec(&small_config(1)).unwrap()).unwrap();
    let data = tmp.path().join("data");
    assert_eq!(run_cli(&["synth", "--config", s(&cfg), "--out", s(&data)]), 0);
    let good = data.join("layer-50/val");
    assert_eq!(run_cli(&["validate", "--archive", s(&good)]), 0);

    let labels = good.join("labels.bin");
    let mut bytes = fs::read(&labels).unwrap();
    bytes[0] = 7;
    fs::write(&labels, bytes).unwrap();
    let o = bin().args(["validate", "--archive", s(&good)]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("invalid"));
}

#[test]
fn calibrate_rejects_concepts_without_vectors() {
    let tmp = tempfile::tempdir().unwrap();
    run_pipeline(tmp.path(), 4, "csv");
    let val = tmp.path().join("data/layer-100/val");
    let empty = tmp.path().join("empty");
    superact::concepts::write_concepts(&empty, &[]).unwrap();
    let out = tmp.path().join("o");
    assert_eq!(
        run_cli(&["calibrate", "--archive", s(&val), "--concepts", s(&empty), "--out", s(&out)]),
        1
    );
    let good = tmp.path().join("concepts");
    assert_eq!(
        run_cli(&[
            "calibrate",
            "--archive",
            s(&val),
            "--concepts",
            s(&good),
            "--concept",
            "wolf",
            "--out",
            s(&out)
        ]),
        1
    );
}
