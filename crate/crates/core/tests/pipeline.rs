//! End-to-end stage runs through the library entry points.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use healthshock::config::KeyValues;
use healthshock::pipeline::{self, RunOptions};
use healthshock::simulator::{simulate, DgpConfig, Truth};

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn small(seed: u64, input: &Path, out: &Path) -> RunOptions {
    let mut o = RunOptions::new(seed, input, out);
    o.config = KeyValues::parse("n_persons = 3000\n").unwrap();
    o
}

#[test]
fn stages_leave_inputs_alone_and_stamp_outputs() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    pipeline::simulate(&small(3, data.path(), data.path())).unwrap();
    let before = snapshot(data.path());

    let o = small(3, data.path(), out.path());
    pipeline::ingest(&o).unwrap();
    pipeline::match_stage(&o).unwrap();
    // later stages read pairs from the input directory
    fs::copy(out.path().join("pairs.csv"), data.path().join("pairs.csv")).unwrap();
    let with_pairs = snapshot(data.path());
    pipeline::stack(&o).unwrap();
    pipeline::estimate_stage(&o).unwrap();
    pipeline::diagnose(&o).unwrap();

    let after = snapshot(data.path());
    assert_eq!(with_pairs, after);
    for (name, bytes) in &before {
        assert_eq!(&after[name], bytes, "{name} changed");
    }

    for (name, bytes) in snapshot(out.path()) {
        let text = String::from_utf8(bytes).unwrap();
        if name.ends_with(".json") {
            let v: serde_json::Value = serde_json::from_str(&text).unwrap();
            assert_eq!(v["seed"], 3, "{name}");
        } else {
            let first = text.lines().next().unwrap_or("");
            assert!(first.starts_with("# healthshock") && first.contains("seed=3"), "{name}: {first}");
        }
    }
}

#[test]
fn shock_share_tracks_the_configured_hazards() {
    let mut c = DgpConfig {
        seed: 21,
        n_persons: 100_000,
        ..DgpConfig::default()
    };
    c.hazards = vec![0.004; c.hazards.len()];
    c.hazards[0] = 0.1;
    c.hazards[1] = 0.0;
    let total: f64 = c.hazards.iter().sum();
    let data = simulate(&c).unwrap();
    let shocks = data.registry.shocks();
    let share = shocks.len() as f64 / c.n_persons as f64;
    assert!((share / total - 1.0).abs() < 0.1, "share {share} vs {total}");
    let g1 = shocks.iter().filter(|s| s.disease_group.id() == 1).count() as f64 / c.n_persons as f64;
    assert!((g1 / 0.1 - 1.0).abs() < 0.1, "group 1 share {g1}");
    assert!(shocks.iter().all(|s| s.disease_group.id() != 2));
}

#[test]
fn truth_round_trips_through_disk() {
    let data = tempfile::tempdir().unwrap();
    pipeline::simulate(&small(9, data.path(), data.path())).unwrap();
    let t = Truth::load(&data.path().join("truth.json")).unwrap();
    assert_eq!(t.seed, 9);
    assert!(!t.parameters.is_empty());
    let again = tempfile::tempdir().unwrap();
    t.write(&again.path().join("truth.json")).unwrap();
    assert_eq!(
        Truth::load(&again.path().join("truth.json")).unwrap().parameters.len(),
        t.parameters.len()
    );
}
