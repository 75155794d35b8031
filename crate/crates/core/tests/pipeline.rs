//! End-to-end use of the public API: synthesize, label, train, evaluate.

use rrp_core::data::{synth_scene, Sample, SceneConfig};
use rrp_core::evaluation::{constant_baseline, estimate_count, evaluate};
use rrp_core::labeling::{build_location_map, make_count_map, LabelConfig};
use rrp_core::model::{InitScheme, Model, ModelConfig};
use rrp_core::rram::RramConfig;
use rrp_core::training::{fit, LabelKind, TrainConfig};

fn samples(range: std::ops::Range<u64>) -> Vec<Sample> {
    let scene = SceneConfig {
        min_count: 3,
        max_count: 20,
        ..SceneConfig::default()
    };
    range
        .map(|i| {
            let (img, ann) = synth_scene(&scene, i).unwrap();
            Sample::new(img, ann).unwrap()
        })
        .collect()
}

fn small_model() -> Model {
    Model::new(
        ModelConfig {
            channels: vec![4, 8, 8],
            head_width: 8,
            backbone_init: InitScheme::He,
            ..ModelConfig::default()
        },
        Some(RramConfig {
            nodes: 2,
            dim: 4,
            gcn_layers: 1,
        }),
        LabelConfig::default(),
    )
    .unwrap()
}

#[test]
fn count_maps_of_synthetic_scenes_are_exact() {
    let label = LabelConfig::default();
    for s in samples(0..20) {
        let cm = make_count_map(
            &build_location_map(&s.annotation, label.stride()).unwrap(),
            &label,
        )
        .unwrap();
        assert_eq!(
            estimate_count(&cm.grid, cm.coverage),
            s.annotation.count() as f64
        );
    }
}

#[test]
fn short_training_run_is_reproducible() {
    let model = small_model();
    let train = samples(0..3);
    let test = samples(100..103);
    let cfg = TrainConfig {
        epochs: 2,
        seed: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let mut params = model.init_params(cfg.seed);
        let mut t = 0.0;
        let mut epochs = 0;
        let log = fit(
            &model,
            &cfg,
            &mut params,
            &train,
            &test,
            &mut || {
                t += 1.0;
                t
            },
            &mut |_, _| epochs += 1,
        )
        .unwrap();
        assert_eq!(epochs, 2);
        (log, params)
    };
    let (log_a, params_a) = run();
    let (log_b, params_b) = run();
    assert_eq!(params_a, params_b);
    assert_eq!(log_a.len(), 2);
    for (a, b) in log_a.iter().zip(&log_b) {
        assert_eq!(
            (a.loss, a.mae, a.mse, a.steps),
            (b.loss, b.mae, b.mse, b.steps)
        );
        assert!(a.loss.is_finite() && a.mae.is_finite());
        assert_eq!(a.steps, 3 * 18);
    }

    let m = evaluate(
        &model,
        &params_a,
        &test,
        LabelKind::CountMap.coverage(model.label()),
    )
    .unwrap();
    assert_eq!(m.n, 3);
    assert_eq!(m.mae, log_a[1].mae);
    assert!(constant_baseline(&train, &test).unwrap().mae >= 0.0);
}
