use tta_core::adapt::{adapt_run, source_pretrain, AdaptConfig, Adapter, DualBranchState, PretrainConfig};
use tta_core::augment::AugmentationPolicy;
use tta_core::losses::LossConfig;
use tta_core::metrics::RegionSpec;
use tta_core::network::{predict_probs, ModelState, NetConfig, ParamGroup};
use tta_core::tensor::AdamWConfig;
use tta_core::volume::{Case, LabelMap, Volume};

const N: usize = 10;

fn net() -> NetConfig {
    NetConfig {
        in_channels: 2,
        class_count: 4,
        base_channels: 2,
        depth: 1,
        style_dim: 2,
    }
}

/// Nested shells around an off-centre point: 3 inside 1 inside 2.
fn case(k: usize, gain: f64) -> Case {
    let c = [4.0 + (k % 2) as f64, 5.0 - (k % 3) as f64 * 0.5, 4.5];
    let v = N * N * N;
    let mut labels = vec![0u16; v];
    let mut data = vec![0.0; 2 * v];
    for z in 0..N {
        for y in 0..N {
            for x in 0..N {
                let i = (z * N + y) * N + x;
                let r = ((z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2)).sqrt();
                let l = match r {
                    r if r < 1.5 => 3,
                    r if r < 2.5 => 1,
                    r if r < 3.5 => 2,
                    _ => 0,
                };
                labels[i] = l;
                let wobble = ((i * 7919 + k * 31) % 17) as f64 / 170.0;
                data[i] = gain * (0.5 + 0.4 * l as f64) + wobble;
                data[v + i] = gain * (1.0 - 0.2 * l as f64) + wobble;
            }
        }
    }
    Case {
        id: format!("c{k}"),
        image: Volume::new(2, [N; 3], [1.0; 3], data).unwrap(),
        labels: Some(LabelMap::new([N; 3], [1.0; 3], labels, 4).unwrap()),
    }
}

fn pretrained() -> ModelState {
    let cases: Vec<Case> = (0..3).map(|k| case(k, 1.0)).collect();
    let cfg = PretrainConfig {
        epochs: 4,
        ..PretrainConfig::default()
    };
    source_pretrain(&cases, &net(), &cfg, 5).unwrap().0
}

#[test]
fn pretraining_is_deterministic_and_reduces_loss() {
    let cases: Vec<Case> = (0..3).map(|k| case(k, 1.0)).collect();
    let cfg = PretrainConfig {
        epochs: 8,
        ..PretrainConfig::default()
    };
    let (a, ra) = source_pretrain(&cases, &net(), &cfg, 11).unwrap();
    let (b, rb) = source_pretrain(&cases, &net(), &cfg, 11).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    let l = &ra.epoch_losses;
    assert!(l[l.len() - 1] < l[0], "{l:?}");
    let (c, _) = source_pretrain(&cases, &net(), &cfg, 12).unwrap();
    assert_ne!(a, c);
}

#[test]
fn zero_lr_ema_contracts_geometrically() {
    let source = pretrained();
    let mut state = DualBranchState::new(&source, 0.95);
    for (k, p) in state.ema.params.iter_mut().enumerate() {
        for (j, v) in p.value.data_mut().iter_mut().enumerate() {
            *v += 0.5 + ((k * 13 + j) % 7) as f64 * 0.1;
        }
    }
    let anchor = state.adaptive.clone();
    let config = AdaptConfig {
        optimizer: AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        },
        ..AdaptConfig::default()
    };
    let mut a = Adapter::from_state(state, AugmentationPolicy::default(), config, LossConfig::default(), 3).unwrap();
    let dist = |a: &Adapter| tta_core::adapt::param_distance(&a.state.ema, &anchor);
    let d0 = dist(&a);
    let image = case(4, 1.3).image;
    for t in 1..=50 {
        a.step("x", &image, 1).unwrap();
        assert_eq!(a.state.adaptive, anchor);
        let ratio = dist(&a) / d0;
        assert!((ratio - 0.95f64.powi(t)).abs() < 1e-10, "t {t}: {ratio}");
    }
}

#[test]
fn modulation_starts_as_exact_identity() {
    let source = pretrained();
    let x = case(1, 1.4).image.to_tensor();
    let plain = predict_probs(&source, &x, false).unwrap();
    assert_eq!(predict_probs(&source, &x, true).unwrap().data(), plain.data());
    let s = DualBranchState::new(&source, 0.95);
    for b in [&s.ema, &s.adaptive] {
        assert_eq!(predict_probs(b, &x, true).unwrap().data(), plain.data());
    }
}

#[test]
fn adaptation_run_contract() {
    let source = pretrained();
    let target: Vec<Case> = (0..3).map(|k| case(k + 10, 1.4)).collect();
    let config = AdaptConfig {
        epochs: 2,
        ..AdaptConfig::default()
    };
    let run = || {
        adapt_run(
            &source,
            &target,
            &target,
            AugmentationPolicy::default(),
            config.clone(),
            LossConfig::default(),
            &RegionSpec::default(),
            8,
        )
        .unwrap()
    };
    let first = run();
    assert_eq!(first.report.steps.len(), 2 * target.len());
    assert_eq!(first.report.epochs.len(), 3);
    for p in &source.params {
        if p.group == ParamGroup::Trunk {
            assert_eq!(first.state.ema.get(&p.name), Some(&p.value), "{}", p.name);
            assert_eq!(first.state.adaptive.get(&p.name), Some(&p.value), "{}", p.name);
        }
    }
    let second = run();
    assert_eq!(first.state, second.state);
    assert_eq!(first.policy, second.policy);
    assert_eq!(first.report.to_jsonl(), second.report.to_jsonl());
}
