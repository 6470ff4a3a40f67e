//! Run-and-measure checks on the simulator and the four-step schedule.

mod common;

use std::sync::OnceLock;

use osdet::model::ObjectClass;
use osdet::pipeline::{evaluate, objectness_by_truth_kind};
use osdet::rejection::{RejectionConfig, Strategy};
use osdet::sim::{
    generate_scenario, run_four_step, FourStepTrainer, ImageRecord, Scenario, ScenarioConfig,
    TrainConfig, TrainOutcome, TrainingMode,
};
use osdet::Error;

fn scenario() -> &'static Scenario {
    static S: OnceLock<Scenario> = OnceLock::new();
    S.get_or_init(|| generate_scenario(&ScenarioConfig::default()).unwrap())
}

fn trained(mode: TrainingMode) -> &'static TrainOutcome {
    static UNKAD: OnceLock<TrainOutcome> = OnceLock::new();
    static STANDARD: OnceLock<TrainOutcome> = OnceLock::new();
    let cell = match mode {
        TrainingMode::Unkad => &UNKAD,
        TrainingMode::Standard => &STANDARD,
    };
    cell.get_or_init(|| {
        run_four_step(scenario(), &TrainConfig { mode, ..Default::default() }).unwrap()
    })
}

/// Region label by best-overlapping truth: `Some(Some(c))` known class c,
/// `Some(None)` unknown, `None` background (no truth at IoU >= 0.5).
fn region_labels(img: &ImageRecord) -> Vec<Option<Option<usize>>> {
    img.regions
        .iter()
        .map(|r| {
            let mut best: Option<(f64, Option<usize>)> = None;
            for t in &img.truths {
                let o = common::iou(common::rect(&r.bbox), common::rect(t.bbox()));
                if o >= 0.5 && best.is_none_or(|(b, _)| o > b) {
                    let class = match t.class() {
                        ObjectClass::Known(c) => Some(c),
                        ObjectClass::Unknown => None,
                    };
                    best = Some((o, class));
                }
            }
            best.map(|b| b.1)
        })
        .collect()
}

#[test]
fn nearest_centroid_separates_classes() {
    let s = scenario();
    let k = s.config.num_known_classes;
    let dim = s.config.feature_dim;
    // centroids for the known classes and for background (slot k)
    let mut sums = vec![vec![0.0; dim]; k + 1];
    let mut counts = vec![0usize; k + 1];
    for img in &s.train {
        for (r, label) in img.regions.iter().zip(region_labels(img)) {
            let slot = match label {
                Some(Some(c)) => c,
                Some(None) => continue,
                None => k,
            };
            counts[slot] += 1;
            sums[slot].iter_mut().zip(&r.features).for_each(|(a, b)| *a += b);
        }
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s.iter().map(|v| v / n as f64).collect())
        .collect();
    let (mut right, mut total) = (0usize, 0usize);
    for img in &s.test {
        for (r, label) in img.regions.iter().zip(region_labels(img)) {
            let want = match label {
                Some(Some(c)) => c,
                Some(None) => continue,
                None => k,
            };
            let dist = |c: &Vec<f64>| c.iter().zip(&r.features).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let got = (0..=k)
                .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                .unwrap();
            total += 1;
            right += usize::from(got == want);
        }
    }
    let acc = right as f64 / total as f64;
    assert!(acc >= 0.99, "nearest-centroid accuracy {acc}");
}

#[test]
fn trained_head_classifies_known_regions() {
    let s = scenario();
    for mode in [TrainingMode::Standard, TrainingMode::Unkad] {
        let det = &trained(mode).detector;
        let (mut right, mut total) = (0usize, 0usize);
        for img in &s.test {
            for (r, label) in img.regions.iter().zip(region_labels(img)) {
                if let Some(Some(c)) = label {
                    let logits = det.classifier_forward(&r.features).unwrap();
                    let arg = (0..logits.len()).max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a))).unwrap();
                    total += 1;
                    right += usize::from(arg == c);
                }
            }
        }
        let acc = right as f64 / total as f64;
        assert!(acc >= 0.95, "{mode}: known-region accuracy {acc}");
    }
}

#[test]
fn losses_finite_and_settle_at_the_end_of_each_step() {
    for mode in [TrainingMode::Standard, TrainingMode::Unkad] {
        let trace = &trained(mode).detector.trace;
        assert!(trace.iter().all(|e| e.loss.is_finite()));
        for step in 1..=4u8 {
            let losses: Vec<f64> = trace.iter().filter(|e| e.step == step).map(|e| e.loss).collect();
            assert!(losses.len() >= 10, "step {step} recorded {} points", losses.len());
            let window = &losses[losses.len() - 10..];
            for pair in window.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-12, "{mode} step {step}: {window:?}");
            }
        }
    }
}

#[test]
fn zero_learning_rate_leaves_the_detector_untouched() {
    let cfg = ScenarioConfig { num_images: 10, ..Default::default() };
    let s = generate_scenario(&cfg).unwrap();
    let train = TrainConfig {
        learning_rate: 0.0,
        iterations: [20, 20, 20, 20],
        ..Default::default()
    };
    let mut trainer = FourStepTrainer::new(&s.train, &s.label_space, cfg.feature_dim, train).unwrap();
    let before = trainer.detector().clone();
    trainer.step_one().unwrap();
    trainer.step_two().unwrap();
    trainer.step_three().unwrap();
    trainer.step_four().unwrap();
    let after = trainer.finish().detector;
    assert_eq!(after.objectness, before.objectness);
    assert_eq!(after.classifier, before.classifier);
}

#[test]
fn training_is_independent_of_thread_count() {
    let cfg = ScenarioConfig { num_images: 30, seed: 9, ..Default::default() };
    let train = TrainConfig { iterations: [200, 200, 50, 50], seed: 9, ..Default::default() };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let s = generate_scenario(&cfg).unwrap();
                let out = run_four_step(&s, &train).unwrap();
                (serde_json::to_string(&s.train).unwrap(), serde_json::to_string(&out.detector).unwrap())
            })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn hidden_unknowns_stay_hidden_in_training_annotations() {
    let s = scenario();
    let mut hidden = 0;
    for img in &s.train {
        assert!(img.annotated().iter().all(|t| !t.class().is_unknown()));
        hidden += img.truths.iter().filter(|t| t.class().is_unknown()).count();
    }
    assert!(hidden > 0);
}

#[test]
fn no_unknown_clusters_means_degenerate_unknown_metrics() {
    let cfg = ScenarioConfig { num_images: 20, num_unknown_clusters: 0, ..Default::default() };
    let s = generate_scenario(&cfg).unwrap();
    assert!(s.test.iter().flat_map(|i| &i.truths).all(|t| !t.class().is_unknown()));
    let train = TrainConfig { iterations: [300, 300, 100, 100], ..Default::default() };
    let out = run_four_step(&s, &train).unwrap();
    for strategy in [Strategy::None, Strategy::Direct, Strategy::Msp] {
        let r = evaluate(&out.detector, TrainingMode::Unkad, &s.test, &RejectionConfig::with_strategy(strategy), 0.5)
            .unwrap()
            .report;
        assert_eq!(r.counts.tp_o, 0);
        assert_eq!(r.counts.fn_o, 0);
        assert_eq!((r.u_recall, r.u_precision, r.u_f1), (0.0, 0.0, 0.0));
    }
}

#[test]
fn unkad_audit_obeys_the_pseudo_label_rule() {
    let audit = &trained(TrainingMode::Unkad).audit;
    assert_eq!(audit.len(), 2);
    for pass in audit {
        assert!(pass.total() > 0, "pass {} emitted nothing", pass.pass);
        for img in &pass.images {
            for l in &img.labels {
                assert!(l.objectness > pass.tau.value);
                assert!(l.max_gt_iou <= 0.3);
            }
        }
    }
}

#[test]
fn standard_mode_has_no_unknown_slot() {
    let out = trained(TrainingMode::Standard);
    assert!(out.audit.is_empty());
    assert!(!out.detector.label_space.has_unknown_class());
    assert_eq!(out.detector.classifier.bias.len(), scenario().config.num_known_classes + 1);
    let err = evaluate(&out.detector, TrainingMode::Standard, &scenario().test, &RejectionConfig::with_strategy(Strategy::Direct), 0.5);
    assert!(matches!(err, Err(Error::MissingUnknownSlot)));
}

#[test]
fn unkad_without_pseudo_labels_leaves_the_unknown_column_untrained() {
    // lambda large enough that nothing clears the threshold
    let cfg = ScenarioConfig { num_images: 20, ..Default::default() };
    let s = generate_scenario(&cfg).unwrap();
    let iterations = [300, 300, 100, 100];
    let unkad = run_four_step(&s, &TrainConfig { lambda: 1e6, iterations, ..Default::default() }).unwrap();
    let standard = run_four_step(
        &s,
        &TrainConfig { mode: TrainingMode::Standard, lambda: 1e6, iterations, ..Default::default() },
    )
    .unwrap();
    assert!(unkad.audit.iter().all(|p| p.total() == 0));
    let u = unkad.detector.label_space.unknown_id();
    let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a))).unwrap();
    // the u column never gets a positive target, so it never wins on known
    // objects, and the remaining columns decide like the standard head
    let (mut agree, mut total) = (0usize, 0usize);
    for img in &s.test {
        for (r, label) in img.regions.iter().zip(region_labels(img)) {
            let a = unkad.detector.classifier_forward(&r.features).unwrap();
            let b = standard.detector.classifier_forward(&r.features).unwrap();
            if let Some(Some(_)) = label {
                assert_ne!(argmax(&a), u);
            }
            total += 1;
            agree += usize::from(argmax(&a[..u]) == argmax(&b));
        }
    }
    assert!(agree as f64 >= 0.99 * total as f64, "{agree}/{total}");
    assert_eq!(unkad.detector.objectness, standard.detector.objectness);
}

#[test]
fn step_one_scores_hidden_unknowns_above_clutter() {
    let s = scenario();
    let mut trainer = FourStepTrainer::new(&s.train, &s.label_space, s.config.feature_dim, TrainConfig::default()).unwrap();
    trainer.step_one().unwrap();
    let det = trainer.detector();
    assert!(det.tau_obj.is_some());
    let (_, unknown) = objectness_by_truth_kind(det, &s.train, 0.5).unwrap();
    let mut clutter = Vec::new();
    for img in &s.train {
        for (r, label) in img.regions.iter().zip(region_labels(img)) {
            let touches = img.truths.iter().any(|t| common::iou(common::rect(&r.bbox), common::rect(t.bbox())) > 0.0);
            if label.is_none() && !touches {
                clutter.push(det.objectness_forward(&r.features).unwrap());
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(!unknown.is_empty() && !clutter.is_empty());
    assert!(mean(&unknown) > mean(&clutter), "{} vs {}", mean(&unknown), mean(&clutter));
}
