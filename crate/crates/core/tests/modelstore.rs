use std::fs;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rads::detector::VmTrainingState;
use rads::modelstore::{ModelKey, ModelRecord, ModelStore};
use rads::occ::{occ_classify, occ_score, train_occ, OccConfig, OccModel};
use rads::timeseries::WindowBin;
use rads::wtsa::build_training_set_from_bins;
use rads::{Error, FeatureMode, Metric};

fn bins(seed: u64, n: usize) -> Vec<WindowBin> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n as i64)
        .map(|k| {
            let level = rng.random_range(10.0..40.0);
            let values = (0..12)
                .map(|_| level + rng.random_range(-3.0..3.0))
                .collect();
            WindowBin::new(k * 60, (k + 1) * 60, values)
        })
        .collect()
}

fn model(seed: u64, mode: FeatureMode) -> OccModel {
    let matrix = build_training_set_from_bins(&bins(seed, 20), mode).unwrap();
    train_occ(&matrix, &OccConfig::default(), seed).unwrap()
}

fn record(vm: &str, seed: u64) -> ModelRecord {
    let key = ModelKey::new(vm, Metric::CpuPercent, FeatureMode::AvgSd);
    let state = VmTrainingState::new(vm, Metric::CpuPercent, 30);
    ModelRecord::new(key, model(seed, FeatureMode::AvgSd), Some(state))
}

#[test]
fn round_trip_preserves_every_decision() {
    let dir = tempfile::tempdir().unwrap();
    let store = ModelStore::new(dir.path());
    let rec = record("vm-a", 3);
    store.save(&rec).unwrap();
    let loaded = store.load(&rec.key).unwrap();
    assert_eq!(loaded.model, rec.model);
    assert_eq!(loaded.state, rec.state);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let probe = [rng.random_range(-0.5..2.0), rng.random_range(-0.5..2.0)];
        assert_eq!(
            occ_classify(&rec.model, &probe).unwrap(),
            occ_classify(&loaded.model, &probe).unwrap()
        );
        assert_eq!(
            occ_score(&rec.model, &probe).unwrap().to_bits(),
            occ_score(&loaded.model, &probe).unwrap().to_bits()
        );
    }
}

#[test]
fn versions_increase_and_latest_wins() {
    let dir = tempfile::tempdir().unwrap();
    let store = ModelStore::new(dir.path());
    for (expected, seed) in [(1, 1), (2, 2), (3, 3)] {
        assert_eq!(store.save(&record("vm", seed)).unwrap(), expected);
    }
    let loaded = store.load(&record("vm", 0).key).unwrap();
    assert_eq!(loaded.model_version, 3);
    assert_eq!(loaded.model, record("vm", 3).model);
}

#[test]
fn vms_and_metrics_are_stored_separately() {
    let dir = tempfile::tempdir().unwrap();
    let store = ModelStore::new(dir.path());
    store.save(&record("a", 1)).unwrap();
    store.save(&record("b", 2)).unwrap();
    let mut net = record("a", 5);
    net.key.metric = Metric::NetKbps;
    assert_eq!(store.save(&net).unwrap(), 1);
    assert_eq!(
        store.load(&record("a", 0).key).unwrap().model,
        record("a", 1).model
    );
    assert_eq!(store.load(&net.key).unwrap().model, net.model);
}

#[test]
fn unknown_key_and_other_mode_are_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let store = ModelStore::new(dir.path());
    let missing = ModelKey::new("ghost", Metric::CpuPercent, FeatureMode::AvgSd);
    assert!(matches!(store.load(&missing), Err(Error::NotFound(_))));

    store.save(&record("vm", 1)).unwrap();
    let other_mode = ModelKey::new("vm", Metric::CpuPercent, FeatureMode::AverageOnly);
    assert!(matches!(store.load(&other_mode), Err(Error::NotFound(_))));
}

#[test]
fn truncated_and_tampered_files_fail_integrity() {
    let dir = tempfile::tempdir().unwrap();
    let store = ModelStore::new(dir.path());
    let rec = record("vm", 1);
    store.save(&rec).unwrap();
    let path = store.path_for("vm", Metric::CpuPercent).unwrap();
    let original = fs::read_to_string(&path).unwrap();

    fs::write(&path, &original[..original.len() / 2]).unwrap();
    assert!(matches!(store.load(&rec.key), Err(Error::Integrity { .. })));

    let tampered = original.replacen("\"threshold\": 0.5", "\"threshold\": 0.25", 1);
    assert_ne!(tampered, original);
    fs::write(&path, tampered).unwrap();
    assert!(matches!(store.load(&rec.key), Err(Error::Integrity { .. })));

    // a corrupt previous version blocks saving over it
    assert!(matches!(store.save(&rec), Err(Error::Integrity { .. })));
}

#[test]
fn saved_file_is_self_describing_json() {
    let dir = tempfile::tempdir().unwrap();
    let store = ModelStore::new(dir.path());
    store.save(&record("vm", 1)).unwrap();
    let path = store.path_for("vm", Metric::CpuPercent).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    for field in [
        "schema_version",
        "vm_id",
        "metric",
        "mode",
        "version",
        "bounds",
        "gaussian",
        "prior",
        "threshold",
        "seed",
        "checksum",
    ] {
        assert!(doc.get(field).is_some(), "missing {field}");
    }
    assert_eq!(doc["checksum"].as_str().unwrap().len(), 64);
    // no temporary files are left behind
    let leftovers: Vec<_> = fs::read_dir(dir.path().join("vm"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_saved_model_round_trips_decisions(
        seed in 0u64..10_000,
        mode in prop_oneof![Just(FeatureMode::AvgSd), Just(FeatureMode::AverageOnly), Just(FeatureMode::EntropyOnly)],
        probes in proptest::collection::vec((-1.0f64..3.0, -1.0f64..3.0), 20),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::new(dir.path());
        let key = ModelKey::new("vm", Metric::NetKbps, mode);
        let m = model(seed, mode);
        store.save(&ModelRecord::new(key.clone(), m.clone(), None)).unwrap();
        let loaded = store.load(&key).unwrap().model;
        for (a, b) in probes {
            let p: Vec<f64> = [a, b][..mode.dimension()].to_vec();
            prop_assert_eq!(occ_classify(&m, &p).unwrap(), occ_classify(&loaded, &p).unwrap());
        }
    }

    #[test]
    fn interleaved_saves_keep_latest_per_key(order in proptest::collection::vec(0usize..3, 1..12)) {
        let dir = tempfile::tempdir().unwrap();
        let store = ModelStore::new(dir.path());
        let vms = ["x", "y", "z"];
        let mut counts = [0u64; 3];
        let mut last = [0u64; 3];
        for (i, &v) in order.iter().enumerate() {
            counts[v] += 1;
            last[v] = i as u64;
            let version = store.save(&record(vms[v], i as u64)).unwrap();
            prop_assert_eq!(version, counts[v]);
        }
        for v in 0..3 {
            let key = ModelKey::new(vms[v], Metric::CpuPercent, FeatureMode::AvgSd);
            match store.load(&key) {
                Ok(r) => {
                    prop_assert_eq!(r.model_version, counts[v]);
                    prop_assert_eq!(r.model, record(vms[v], last[v]).model);
                }
                Err(Error::NotFound(_)) => prop_assert_eq!(counts[v], 0),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }
    }
}
