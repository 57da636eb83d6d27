//! Two resistive loads whose signatures differ only slightly in `a1` are
//! confused under noise, while a well separated pair is not.

use std::f64::consts::FRAC_PI_2;

use xnilm::corpus::{random_schedule, submetered_recordings};
use xnilm::eval::{build_test_set, build_train_set};
use xnilm::gbdt::{train, GbdtConfig};
use xnilm::ingest::{synthesize, ApplianceArchetype, Direction, ScenarioSpec};
use xnilm::pipeline::PipelineConfig;

/// Fraction of twin events labeled as the other twin, plus the count.
fn confusion_rate(a1_second: f64, seed: u64) -> (f64, usize) {
    let twins = vec![
        ApplianceArchetype::steady("iron", vec![(1, 5.0, -FRAC_PI_2), (3, 0.3, 0.4)]),
        ApplianceArchetype::steady("lamp", vec![(1, a1_second, -FRAC_PI_2), (3, 0.3 * a1_second / 5.0, 0.4)]),
    ];
    // a large constant load raises the absolute noise floor of the meter
    let furnace = ApplianceArchetype::steady("furnace", vec![(1, 60.0, -FRAC_PI_2)]);
    let (mut schedule, last) = random_schedule(&twins, 120, 0.5, 0.6, 1.0, seed);
    schedule.insert(0, (0.1, "furnace".to_string(), Direction::On));
    let mut spec = ScenarioSpec::new(last + 1.0, seed);
    spec.archetypes = twins.clone();
    spec.archetypes.push(furnace);
    spec.schedule = schedule;
    spec.noise_snr_db = Some(30.0);

    let config = PipelineConfig::default();
    let recordings: Vec<_> = submetered_recordings(&spec, 4.0)
        .unwrap()
        .into_iter()
        .filter(|(label, _)| label != "furnace")
        .collect();
    let model = train(&build_train_set(&recordings, &config.fitps()).train_set(), &GbdtConfig::default()).unwrap();
    let (stream, annotations) = synthesize(&spec).unwrap();
    let test = build_test_set(&stream, &annotations, &config).unwrap();
    let twin_samples: Vec<_> = test.samples.iter().filter(|s| s.label != "furnace").collect();
    let wrong = twin_samples
        .iter()
        .filter(|s| {
            let c = model.predict_label(&s.extracted.features.0).unwrap();
            model.classes()[c] != s.label
        })
        .count();
    eprintln!("a1 {a1_second}: {wrong} of {} confused", twin_samples.len());
    (wrong as f64 / twin_samples.len() as f64, twin_samples.len())
}

#[test]
fn near_identical_resistive_loads_are_confused() {
    let (rate, n) = confusion_rate(5.05, 21);
    assert!(n >= 80, "only {n} twin events detected");
    assert!(rate > 0.10, "confusion rate {rate:.3} over {n} events");
}

#[test]
fn distinct_resistive_loads_are_not() {
    let (rate, n) = confusion_rate(7.0, 21);
    assert!(n >= 80, "only {n} events detected");
    assert!(rate < 0.05, "confusion rate {rate:.3} over {n} events");
}
