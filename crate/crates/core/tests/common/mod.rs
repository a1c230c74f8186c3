// SPDX-License-Identifier: MIT OR Apache-2.0

//! Helpers shared by integration test targets.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use superact::synth::{ConceptSpec, LayerSpec, SplitCounts, SyntheticConfig};

pub fn run_cli(args: &[&str]) -> i32 {
    superact::cli::run(std::iter::once("superact").chain(args.iter().copied()))
}

/// Small two-concept, two-layer dataset that every stage can run on quickly.
pub fn small_config(seed: u64) -> SyntheticConfig {
    let concept = |id: &str, direction_seed: u64, positive_rate: f64| ConceptSpec {
        id: id.into(),
        direction_seed,
        positive_rate,
        in_concept_rate: 0.25,
        tail_fraction: 0.2,
        tail_shift: 5.0,
        body_shift: 0.5,
        body_spread: 0.5,
        local_context: 2.0,
    };
    SyntheticConfig {
        model_id: "toy".into(),
        modality: superact::archive::Modality::Image,
        dim: 12,
        n_samples: SplitCounts {
            train: 40,
            val: 30,
            test: 30,
        },
        tokens_per_sample: [6, 10],
        noise_sigma: 1.0,
        concepts: vec![concept("dog", 1, 0.5), concept("cat", 2, 0.4)],
        layers: vec![
            LayerSpec {
                tag: "50%".into(),
                tail_scale: 0.5,
            },
            LayerSpec {
                tag: "100%".into(),
                tail_scale: 1.0,
            },
        ],
        seed,
    }
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Runs every stage of the pipeline under `root` and returns the stage
/// output directories.
pub fn run_pipeline(root: &Path, seed: u64, format: &str) -> Vec<PathBuf> {
    let cfg = root.join("config.json");
    fs::write(&cfg, serde_json::to_vec_pretty(&small_config(seed)).unwrap()).unwrap();
    let data = root.join("data");
    assert_eq!(run_cli(&["synth", "--config", s(&cfg), "--out", s(&data)]), 0);

    let layers = ["layer-50", "layer-100"];
    let arch = |split: &str| -> Vec<String> {
        layers
            .iter()
            .flat_map(|l| {
                [
                    "--archive".to_string(),
                    data.join(l).join(split).to_str().unwrap().to_string(),
                ]
            })
            .collect()
    };
    let seed_s = seed.to_string();
    let out = |name: &str| root.join(name);
    let common = |name: &str| -> Vec<String> {
        vec![
            "--out".into(),
            out(name).to_str().unwrap().into(),
            "--format".into(),
            format.into(),
            "--no-timestamp".into(),
            "--seed".into(),
            seed_s.clone(),
        ]
    };
    let call = |mut args: Vec<String>| {
        let refs: Vec<&str> = args.iter_mut().map(|a| a.as_str()).collect();
        assert_eq!(run_cli(&refs), 0, "stage failed: {refs:?}");
    };
    let concat = |parts: &[Vec<String>]| parts.concat();
    let all = concat(&[arch("train"), arch("val"), arch("test")]);
    let concepts = out("concepts");

    call(concat(&[
        vec!["train-concepts".into(), "--method".into(), "avg".into()],
        all.clone(),
        common("concepts"),
    ]));
    call(concat(&[
        vec![
            "train-concepts".into(),
            "--method".into(),
            "kmeans".into(),
            "--k".into(),
            "6".into(),
        ],
        all.clone(),
        common("kmeans"),
    ]));
    call(concat(&[
        vec![
            "calibrate".into(),
            "--concepts".into(),
            s(&concepts).into(),
            "--strategy".into(),
            "superact,max,mean,cls,last,rand,fixed_tail".into(),
        ],
        arch("val"),
        common("calibrate"),
    ]));
    let detectors = out("calibrate").join("detectors.json");
    call(concat(&[
        vec![
            "distributions".into(),
            "--concepts".into(),
            s(&concepts).into(),
            "--detectors".into(),
            s(&detectors).into(),
        ],
        arch("test"),
        common("distributions")[..5].to_vec(),
    ]));
    call(concat(&[
        vec![
            "detect".into(),
            "--concepts".into(),
            s(&concepts).into(),
            "--detectors".into(),
            s(&detectors).into(),
        ],
        arch("test"),
        common("detect"),
    ]));
    call(concat(&[
        vec![
            "attribute".into(),
            "--concepts".into(),
            s(&concepts).into(),
            "--detectors".into(),
            s(&detectors).into(),
        ],
        concat(&[arch("val"), arch("test")]),
        common("attribute"),
    ]));
    let mut rep: Vec<String> = vec![
        "report".into(),
        "--in".into(),
        s(&out("detect")).into(),
        "--in".into(),
        s(&out("attribute")).into(),
    ];
    rep.extend(common("report").into_iter().take(5));
    call(rep);
    let mut val: Vec<String> = vec!["validate".into()];
    val.extend(all);
    val.extend([
        "--normalize".into(),
        "--out".into(),
        s(&out("validate")).into(),
        "--no-timestamp".into(),
    ]);
    call(val);

    [
        "data",
        "concepts",
        "kmeans",
        "calibrate",
        "distributions",
        "detect",
        "attribute",
        "report",
        "validate",
    ]
    .iter()
    .map(|n| root.join(n))
    .collect()
}

/// Every file under `dirs`, keyed by path relative to `root`.
pub fn snapshot(root: &Path, dirs: &[PathBuf]) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    for d in dirs {
        walk(root, d, &mut out);
    }
    out
}
