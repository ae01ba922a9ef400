use proptest::prelude::*;

use rads::simulator::{Attack, BaseLoad, LabeledSeries, Spike, WindowLabel};
use rads::timeseries::{partition_windows, WindowStats};
use rads::{generate, preset, Metric, Preset, Profile, ScenarioSpec};

const PROFILES: [Profile; 2] = [Profile::Cpu, Profile::Net];

fn labeled(p: Preset, profile: Profile, seed: u64) -> LabeledSeries {
    generate(&preset(p, profile, seed)).unwrap()
}

fn window_stats(series: &rads::RawSeries) -> Vec<(i64, WindowStats)> {
    partition_windows(series, 60)
        .unwrap()
        .iter()
        .map(|b| (b.start, b.stats().unwrap()))
        .collect()
}

fn training_maxima(ls: &LabeledSeries) -> (f64, f64) {
    window_stats(&ls.training_series())
        .iter()
        .fold((f64::MIN, f64::MIN), |(a, s), (_, w)| {
            (a.max(w.avg), s.max(w.sd))
        })
}

#[test]
fn same_seed_same_output() {
    for p in Preset::ALL {
        for profile in PROFILES {
            assert_eq!(
                labeled(p, profile, 11),
                labeled(p, profile, 11),
                "{}",
                p.as_str()
            );
        }
    }
    assert_ne!(
        labeled(Preset::SpikeTest, Profile::Cpu, 1).series,
        labeled(Preset::SpikeTest, Profile::Cpu, 2).series
    );
}

#[test]
fn attack_test_has_ten_anomaly_windows() {
    for profile in PROFILES {
        for seed in 1..=10 {
            let ls = labeled(Preset::AttackTest, profile, seed);
            assert_eq!(ls.truth.len(), 10);
            assert_eq!(ls.anomaly_windows(), 10);
        }
    }
}

#[test]
fn spike_test_is_all_normal() {
    for profile in PROFILES {
        let ls = labeled(Preset::SpikeTest, profile, 5);
        assert_eq!(ls.truth.len(), 30);
        assert_eq!(ls.anomaly_windows(), 0);
        assert_eq!(ls.training_series().len(), 120 * 12);
    }
}

#[test]
fn attack_and_spike_tests_share_their_training_prelude() {
    for profile in PROFILES {
        let a = labeled(Preset::AttackTest, profile, 4);
        let s = labeled(Preset::SpikeTest, profile, 4);
        assert_eq!(a.training_series(), s.training_series());
    }
}

#[test]
fn attack_windows_are_high_and_steady() {
    // attack windows sit above every training average with a deviation below
    // the largest training deviation
    for profile in PROFILES {
        for seed in 1..=10 {
            let ls = labeled(Preset::AttackTest, profile, seed);
            let (max_avg, max_sd) = training_maxima(&ls);
            let scored = window_stats(&ls.scored_series());
            // the first scored window holds the attack onset
            for (start, w) in &scored[1..] {
                assert!(w.avg > max_avg, "{profile:?} seed {seed} t={start}");
                assert!(
                    w.sd < max_sd,
                    "{profile:?} seed {seed} t={start}: {} >= {max_sd}",
                    w.sd
                );
            }
        }
    }
}

#[test]
fn spike_windows_exceed_both_training_maxima() {
    for profile in PROFILES {
        for seed in 1..=10 {
            let ls = labeled(Preset::SpikeTest, profile, seed);
            let (max_avg, max_sd) = training_maxima(&ls);
            let spike_starts: Vec<i64> = preset(Preset::SpikeTest, profile, seed)
                .spikes
                .iter()
                .map(|s| s.at - s.at.rem_euclid(60))
                .collect();
            assert_eq!(spike_starts.len(), 10);
            let stats = window_stats(&ls.scored_series());
            for start in spike_starts {
                let (_, w) = stats.iter().find(|(s, _)| *s == start).unwrap();
                assert!(
                    w.avg > max_avg && w.sd > max_sd,
                    "{profile:?} seed {seed} t={start}"
                );
            }
        }
    }
}

#[test]
fn figure5_timeline_layout() {
    let ls = labeled(Preset::Figure5Timeline, Profile::Cpu, 1);
    assert_eq!(ls.series.len(), 600);
    let anomalous: Vec<i64> = ls
        .truth
        .iter()
        .filter(|t| t.label == WindowLabel::Anomaly)
        .map(|t| t.window_end / 60)
        .collect();
    assert_eq!(anomalous, [49]);
}

#[test]
fn csv_and_truth_outputs() {
    let ls = labeled(Preset::AttackTest, Profile::Net, 2);
    let mut csv = Vec::new();
    ls.write_csv(&mut csv).unwrap();
    let records = rads::ingest::parse_canonical_csv(&csv).unwrap();
    assert_eq!(records.len(), ls.series.len());
    assert!(records.iter().all(|r| r.cpu_percent == 0.0));
    let mut truth = Vec::new();
    ls.write_truth(&mut truth).unwrap();
    let parsed = rads::eval::read_truth(std::str::from_utf8(&truth).unwrap(), 60).unwrap();
    assert_eq!(parsed, ls.truth);
}

fn custom(attacks: Vec<(i64, i64)>, spikes: Vec<i64>, seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        vm_id: "vm".into(),
        metric: Metric::CpuPercent,
        start_timestamp: 0,
        duration: 1800,
        sample_interval: 5,
        prelude: 0,
        window_len: 60,
        base: BaseLoad {
            mean: 20.0,
            noise: 1.0,
            periodic: None,
        },
        spikes: spikes
            .into_iter()
            .map(|at| Spike {
                at,
                duration: 5,
                magnitude: 60.0,
            })
            .collect(),
        attacks: attacks
            .into_iter()
            .map(|(start, end)| Attack {
                start,
                end,
                level: 95.0,
                jitter: 0.5,
            })
            .collect(),
        cap: Some(100.0),
        seed,
    }
}

#[test]
fn one_attack_labels_exactly_its_windows() {
    let ls = generate(&custom(vec![(600, 1200)], vec![], 1)).unwrap();
    let anomalous: Vec<i64> = ls
        .truth
        .iter()
        .filter(|t| t.label == WindowLabel::Anomaly)
        .map(|t| t.window_start / 60)
        .collect();
    assert_eq!(anomalous, (10..20).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn labels_follow_sample_overlap(
        start in 0i64..1700,
        len in 1i64..400,
        spikes in proptest::collection::vec(0i64..1795, 0..4),
        seed in any::<u64>(),
    ) {
        let end = (start + len).min(1800);
        let spec = custom(vec![(start, end)], spikes, seed);
        let ls = generate(&spec).unwrap();
        prop_assert_eq!(ls.truth.len(), 30);
        for w in &ls.truth {
            // a window is anomalous iff one of its sample instants lies in the attack
            let hit = (w.window_start..w.window_end)
                .step_by(5)
                .any(|t| t >= start && t < end);
            prop_assert_eq!(w.label == WindowLabel::Anomaly, hit, "window {}", w.window_start);
        }
        prop_assert_eq!(generate(&spec).unwrap(), ls);
    }
}
