//! Adapter gradients and arithmetic, head isolation and selection.

use ncadapt::adapt::{predict_head, select_head, FreezePolicy, NcadaptModel, NqmRule, Owner, PerceptionScope, Role};
use ncadapt::autodiff::{finite_diff_check, finite_diff_check_sampled, Rng, Tape, Tensor};
use ncadapt::nca::{adapter_apply, m3d_forward, AdapterPlacement, AdapterVars, ArchConfig, LevelVars, NcaLevelParams};
use ncadapt::train::dice_focal_on_tape;

#[test]
fn adapter_hand_example() {
    // Two channels, width one: down = [1, -1], up = [2, 3]^T.
    // Cell (1, 0.5): z = relu(0.5) = 0.5, out = (1 + 1, 0.5 + 1.5) = (2, 2).
    // Cell (0, 1):   z = relu(-1) = 0,    out unchanged.
    let mut tape = Tape::<f64>::new();
    let h = tape.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.5, 1.0]).unwrap());
    let a = AdapterVars {
        down: tape.constant(Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap()),
        up: tape.constant(Tensor::from_vec(&[2, 1], vec![2.0, 3.0]).unwrap()),
    };
    let out = adapter_apply(&mut tape, h, &a).unwrap();
    assert_eq!(tape.value(out).data(), &[2.0, 0.0, 2.0, 1.0]);
}

#[test]
fn zero_up_adapter_is_identity() {
    let mut rng = Rng::new(1, 0);
    let mut tape = Tape::<f32>::new();
    let x = Tensor::<f32>::uniform(&[16, 5, 5], -1.0, 1.0, &mut rng).unwrap();
    let h = tape.constant(x.clone());
    let a = AdapterVars {
        down: tape.constant(Tensor::uniform(&[6, 16], -1.0, 1.0, &mut rng).unwrap()),
        up: tape.constant(Tensor::zeros(&[16, 6]).unwrap()),
    };
    let out = adapter_apply(&mut tape, h, &a).unwrap();
    assert_eq!(tape.value(out), &x);
}

#[test]
fn adapter_gradient_matches_central_differences() {
    for seed in 0..10 {
        let mut rng = Rng::new(seed, 3);
        let h = Tensor::<f64>::uniform(&[4, 3, 3], -1.0, 1.0, &mut rng).unwrap();
        let down = Tensor::<f64>::uniform(&[3, 4], -1.0, 1.0, &mut rng).unwrap();
        let up = Tensor::<f64>::uniform(&[4, 3], -1.0, 1.0, &mut rng).unwrap();
        let w = Tensor::<f64>::uniform(&[4, 3, 3], -1.0, 1.0, &mut rng).unwrap();
        let err = finite_diff_check(
            |tape, v| {
                let out = adapter_apply(tape, v[0], &AdapterVars { down: v[1], up: v[2] })?;
                let w = tape.constant(w.clone());
                let y = tape.mul(out, w)?;
                tape.sum(y)
            },
            &[h, down, up],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn forward_with_adapters_and_loss_gradient() {
    let arch = ArchConfig {
        channels: 4,
        hidden: 6,
        kernels: vec![3, 3],
        steps: vec![2, 2],
        coarse_factor: 2,
        adapter_width: 2,
        ..ArchConfig::default_2d()
    };
    for placement in [AdapterPlacement::Update, AdapterPlacement::PostState] {
        let arch = ArchConfig {
            adapter_placement: placement,
            ..arch.clone()
        };
        let mut rng = Rng::new(7, 7);
        let mut params = Vec::new();
        for l in 0..2 {
            let mut p = NcaLevelParams::<f64>::init(&arch, l, &mut rng).unwrap();
            p.mlp2 = Tensor::uniform(p.mlp2.shape(), -0.3, 0.3, &mut rng).unwrap();
            params.extend([p.kernel, p.bias, p.mlp1, p.mlp2]);
            params.push(Tensor::uniform(&[2, 4], -0.5, 0.5, &mut rng).unwrap());
            params.push(Tensor::uniform(&[4, 2], -0.5, 0.5, &mut rng).unwrap());
        }
        let img = Tensor::<f64>::uniform(&[8, 6], 0.0, 1.0, &mut rng).unwrap();
        let target = Tensor::<f64>::from_vec(&[8, 6], (0..48).map(|i| ((i / 6 + i % 6) % 3 == 0) as u8 as f64).collect())
            .unwrap();
        let err = finite_diff_check_sampled(
            |tape, v| {
                let lv: Vec<LevelVars> = v
                    .chunks(6)
                    .map(|c| LevelVars {
                        kernel: c[0],
                        bias: c[1],
                        mlp1: c[2],
                        mlp2: c[3],
                        adapter: Some(AdapterVars { down: c[4], up: c[5] }),
                    })
                    .collect();
                let out = m3d_forward(tape, &img, &lv, &arch, &Rng::new(3, 4))?;
                dice_focal_on_tape(tape, out, &target)
            },
            &params,
            1e-6,
            6,
            &mut Rng::new(8, 8),
        )
        .unwrap();
        assert!(err < 1e-3, "{placement:?}: {err}");
    }
}

fn three_head_model() -> NcadaptModel {
    let arch = ArchConfig {
        hidden: 12,
        steps: vec![3, 3],
        ..ArchConfig::default_2d()
    };
    let mut m = NcadaptModel::new(arch, FreezePolicy::Ncadapt, PerceptionScope::Shared, 4).unwrap();
    for (k, label) in ["a", "b", "c"].into_iter().enumerate() {
        m.add_domain(label).unwrap();
        if k == 0 {
            m.apply_freeze_policy(FreezePolicy::Ncadapt).unwrap();
        }
    }
    // Make every head distinct and its update non-trivial.
    let mut rng = Rng::new(5, 5);
    let idx: Vec<usize> = m
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| matches!(p.role, Role::AdapterUp | Role::Mlp2))
        .map(|(i, _)| i)
        .collect();
    for i in idx {
        let shape = m.params()[i].value.shape().to_vec();
        *m.value_mut(i) = Tensor::uniform(&shape, -0.4, 0.4, &mut rng).unwrap();
    }
    m
}

#[test]
fn selection_is_reproducible_for_a_fixed_stream() {
    let m = three_head_model();
    let img = Tensor::<f32>::uniform(&[16, 16], 0.0, 1.0, &mut Rng::new(9, 0)).unwrap();
    let rng = Rng::new(10, 0);
    let a = select_head(&m, &img, 4, &rng, NqmRule::Min).unwrap();
    let b = select_head(&m, &img, 4, &rng, NqmRule::Min).unwrap();
    assert_eq!(a.domain, b.domain);
    assert_eq!(a.prediction, b.prediction);
    assert_eq!(a.scores, b.scores);
    assert_eq!(a.scores.len(), 3);
}

#[test]
fn heads_are_stochastic_across_streams() {
    let m = three_head_model();
    let img = Tensor::<f32>::uniform(&[16, 16], 0.0, 1.0, &mut Rng::new(9, 0)).unwrap();
    let p1 = predict_head(&m, &img, 2, 3, &Rng::new(1, 0)).unwrap();
    let p2 = predict_head(&m, &img, 2, 3, &Rng::new(2, 0)).unwrap();
    assert_ne!(p1.mean, p2.mean, "different fire masks must change the prediction");
    assert!(p1.nqm.is_finite() && p1.nqm > 0.0);
}

#[test]
fn selected_prediction_matches_the_chosen_head() {
    let m = three_head_model();
    let img = Tensor::<f32>::uniform(&[16, 16], 0.0, 1.0, &mut Rng::new(11, 0)).unwrap();
    let rng = Rng::new(12, 0);
    for rule in [NqmRule::Min, NqmRule::Max] {
        let c = select_head(&m, &img, 4, &rng, rule).unwrap();
        let scores: Vec<f64> = c.scores.iter().map(|s| s.1).collect();
        let best = match rule {
            NqmRule::Min => scores.iter().cloned().fold(f64::INFINITY, f64::min),
            NqmRule::Max => scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        };
        assert_eq!(c.scores[c.domain - 1].1, best);
        let direct = predict_head(&m, &img, c.domain, 4, &rng).unwrap();
        assert_eq!(direct.mask, c.prediction);
    }
}

#[test]
fn per_domain_scope_owns_perception_copies() {
    let mut m = NcadaptModel::new(ArchConfig::default_2d(), FreezePolicy::Ncadapt, PerceptionScope::PerDomain, 1).unwrap();
    m.add_domain("a").unwrap();
    m.apply_freeze_policy(FreezePolicy::Ncadapt).unwrap();
    m.add_domain("b").unwrap();
    let owned = |k| m.params().iter().filter(|p| p.owner == Owner::Domain(k) && p.role.is_perception()).count();
    assert_eq!((owned(1), owned(2)), (4, 4));
    let shared = NcadaptModel::new(ArchConfig::default_2d(), FreezePolicy::Ncadapt, PerceptionScope::Shared, 1).unwrap();
    let kernel = |m: &NcadaptModel, name: &str| m.params().iter().find(|p| p.name == name).unwrap().value.clone();
    assert_eq!(kernel(&m, "domain1.level0.kernel"), kernel(&shared, "level0.kernel"));
    assert_eq!(kernel(&m, "domain2.level0.kernel"), kernel(&m, "domain1.level0.kernel"));
}
