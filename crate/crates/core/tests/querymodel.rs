use odet_core::geom::RotatedBox;
use odet_core::querymodel::{
    fuse_features, gradient_check, raster_memory, scene_pass, select_topk, topk_indices, train_toy, Decoder,
    DecoderConfig, Matrix, ParamGroup, PreparedScene, QuerySchedule, QueryState, TrainConfig, GRAD_CHECK_TOL,
};
use odet_core::rng::Rng;
use odet_core::synth::{generate_scenes, Scene, SceneObject, SynthConfig};
use odet_core::ModelError;
use proptest::prelude::*;

fn small_cfg() -> DecoderConfig {
    DecoderConfig {
        d: 16,
        heads: 2,
        layers: 3,
        k_points: 9,
        classes: 3,
        memory_tokens: 64,
        queries: 12,
        ffn: 32,
        locality: vec![0.0, 32.0],
        ..DecoderConfig::default()
    }
}

fn sched(cfg: &DecoderConfig, n_last: usize) -> QuerySchedule {
    QuerySchedule {
        n_first: cfg.queries,
        n_last,
        rho: 0.5,
        layers: cfg.layers,
    }
}

fn scenes(seed: u64, n: usize) -> Vec<Scene> {
    generate_scenes(&SynthConfig {
        seed,
        scenes: n,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn memory_of(scene: &Scene, cfg: &DecoderConfig) -> odet_core::querymodel::SceneMemory {
    raster_memory(scene, cfg.grid(), cfg.classes)
}

fn random_state(rng: &mut Rng, n: usize, d: usize) -> QueryState {
    QueryState {
        features: Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()),
        refs: (0..n).map(|_| [rng.range(-2.0, 2.0), rng.range(-2.0, 2.0)]).collect(),
        ids: (0..n).collect(),
    }
}

#[test]
fn schedule_examples() {
    let s = QuerySchedule {
        n_first: 300,
        n_last: 100,
        rho: 0.5,
        layers: 6,
    };
    assert_eq!(s.counts(), vec![300, 200, 150, 125, 113, 106]);
    assert!(matches!(s.query_count(6), Err(ModelError::LayerOutOfRange { .. })));
    let c = QuerySchedule::constant(40, 5);
    assert_eq!(c.counts(), vec![40; 5]);
    let fast = QuerySchedule {
        n_first: 300,
        n_last: 100,
        rho: 0.01,
        layers: 12,
    };
    assert_eq!(fast.query_count(11).unwrap(), 100);
}

proptest! {
    #[test]
    fn schedule_is_monotone(
        n_last in 1usize..200,
        extra in 1usize..300,
        rho in 0.01f64..0.99,
        layers in 1usize..12,
    ) {
        let s = QuerySchedule { n_first: n_last + extra, n_last, rho, layers };
        let c = s.counts();
        prop_assert_eq!(c[0], s.n_first);
        for w in c.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert!(c.iter().all(|&n| n >= n_last));
        let raw = extra as f64 * rho.powi(layers as i32 - 1) + n_last as f64;
        prop_assert_eq!(c[layers - 1], (raw + 0.5).floor() as usize);
    }

    #[test]
    fn topk_matches_sort_oracle(scores in prop::collection::vec(0u8..20, 1..40), frac in 0.0f64..1.0) {
        let scores: Vec<f64> = scores.iter().map(|&s| s as f64 / 20.0).collect();
        let k = (frac * scores.len() as f64) as usize;
        // Oracle: repeatedly take the first maximum.
        let mut left: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        let mut want = Vec::new();
        for _ in 0..k {
            let mut best = 0;
            for (j, e) in left.iter().enumerate() {
                if e.1 > left[best].1 {
                    best = j;
                }
            }
            want.push(left.remove(best).0);
        }
        want.sort_unstable();
        prop_assert_eq!(topk_indices(&scores, k).unwrap(), want);
    }
}

#[test]
fn topk_examples() {
    assert_eq!(topk_indices(&[0.9, 0.1, 0.5], 2).unwrap(), vec![0, 2]);
    assert_eq!(topk_indices(&[0.3, 0.3, 0.3], 3).unwrap(), vec![0, 1, 2]);
    assert!(matches!(topk_indices(&[0.1], 2), Err(ModelError::TopKTooLarge { k: 2, count: 1 })));
}

#[test]
fn pruning_keeps_survivors_bitwise() {
    let mut rng = Rng::new(5);
    let s = random_state(&mut rng, 20, 8);
    let probs: Vec<f64> = (0..20).map(|_| rng.uniform()).collect();
    assert_eq!(select_topk(&s, &probs, 20).unwrap(), s);
    let kept = select_topk(&s, &probs, 7).unwrap();
    let keep = topk_indices(&probs, 7).unwrap();
    for (r, &q) in keep.iter().enumerate() {
        let a: Vec<u64> = kept.features.row(r).iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = s.features.row(q).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(kept.refs[r], s.refs[q]);
        assert_eq!(kept.ids[r], q);
    }
}

#[test]
fn fusion_is_elementwise_sum() {
    let mut rng = Rng::new(6);
    let a = random_state(&mut rng, 5, 8);
    let b = random_state(&mut rng, 5, 8);
    let f = fuse_features(&a, &b).unwrap();
    let g = fuse_features(&b, &a).unwrap();
    assert_eq!(f.features, g.features);
    for k in 0..40 {
        assert_eq!(f.features.data[k], a.features.data[k] + b.features.data[k]);
    }
    let zero = QueryState {
        features: Matrix::zeros(5, 8),
        ..b.clone()
    };
    assert_eq!(fuse_features(&a, &zero).unwrap().features, a.features);
    let short = random_state(&mut rng, 4, 8);
    assert!(fuse_features(&a, &short).is_err());
}

#[test]
fn layer_shapes_and_finiteness() {
    let cfg = small_cfg();
    let model = Decoder::new(cfg.clone(), 1).unwrap();
    let scene = &scenes(1, 1)[0];
    let mem = memory_of(scene, &cfg);
    let mut rng = Rng::new(2);
    let state = random_state(&mut rng, 4, 16);
    let (out, att) = model.decoder_layer(0, &state, &mem).unwrap();
    assert_eq!(out.class_features.shape(), (4, 16));
    assert_eq!(out.box_features.shape(), (4, 16));
    assert_eq!(out.logits.shape(), (4, 3));
    assert_eq!(out.points.shape(), (4, 18));
    assert!(out.class_features.is_finite() && out.box_features.is_finite());
    assert!(out.logits.is_finite() && out.points.is_finite());
    assert_eq!(att.self_attn.len(), 2);
    assert_eq!(att.class_cross[0].shape(), (4, 64));

    let wrong = random_state(&mut rng, 4, 8);
    assert!(matches!(model.decoder_layer(0, &wrong, &mem), Err(ModelError::Shape(_))));
    assert!(matches!(
        model.decoder_layer(3, &state, &mem),
        Err(ModelError::LayerOutOfRange { .. })
    ));
}

fn assert_rows_sum_to_one(m: &Matrix) {
    for r in 0..m.rows {
        let s: f64 = m.row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
        assert!(m.row(r).iter().all(|&w| w >= 0.0));
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = small_cfg();
    let model = Decoder::new(cfg.clone(), 3).unwrap();
    for scene in scenes(4, 3) {
        let out = model.forward_opts(&memory_of(&scene, &cfg), &sched(&cfg, 4), true).unwrap();
        assert_eq!(out.attention.len(), cfg.layers);
        for layer in &out.attention {
            for m in layer.self_attn.iter().chain(&layer.class_cross).chain(&layer.box_cross) {
                assert_rows_sum_to_one(m);
            }
        }
    }
}

#[test]
fn singleton_attention_is_exactly_one() {
    let cfg = DecoderConfig {
        memory_tokens: 1,
        queries: 1,
        ..small_cfg()
    };
    let model = Decoder::new(cfg.clone(), 3).unwrap();
    let scene = &scenes(2, 1)[0];
    let mem = memory_of(scene, &cfg);
    let mut rng = Rng::new(9);
    let (_, att) = model.decoder_layer(1, &random_state(&mut rng, 1, 16), &mem).unwrap();
    for m in att.self_attn.iter().chain(&att.class_cross).chain(&att.box_cross) {
        assert_eq!(m.shape(), (1, 1));
        assert_eq!(m.data[0], 1.0);
    }
}

#[test]
fn zero_weights_give_neutral_outputs() {
    let cfg = small_cfg();
    let mut model = Decoder::new(cfg.clone(), 3).unwrap();
    for v in &mut model.params_mut().values {
        v.data.iter_mut().for_each(|x| *x = 0.0);
    }
    let scene = &scenes(2, 1)[0];
    let out = model.forward(&memory_of(scene, &cfg), &sched(&cfg, 12)).unwrap();
    for l in &out.layers {
        assert!(l.logits.data.iter().all(|&z| z == 0.0));
        assert!(l.points.data.iter().all(|&p| p == 128.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn points_stay_inside_the_image(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let cfg = small_cfg();
        let mut model = Decoder::new(cfg.clone(), seed).unwrap();
        // Blow up every weight so the squashing map saturates.
        for v in &mut model.params_mut().values {
            v.data.iter_mut().for_each(|x| *x *= scale);
        }
        let scene = &scenes(seed % 7, 1)[0];
        let out = model.forward(&memory_of(scene, &cfg), &sched(&cfg, 4)).unwrap();
        for l in &out.layers {
            prop_assert!(l.points.data.iter().all(|&p| (0.0..=256.0).contains(&p)));
        }
    }
}

#[test]
fn branches_are_decoupled_within_a_layer() {
    let cfg = small_cfg();
    let base = Decoder::new(cfg.clone(), 11).unwrap();
    let scene = &scenes(3, 1)[0];
    let mem = memory_of(scene, &cfg);
    let s = QuerySchedule::constant(cfg.queries, cfg.layers);
    let before = base.forward(&mem, &s).unwrap();
    for layer in 0..cfg.layers {
        let mut m = base.clone();
        let mut rng = Rng::new(layer as u64);
        let mut touched = 0;
        for i in 0..m.params().len() {
            if m.param_group(i) == ParamGroup::ClassBranch(layer) {
                touched += 1;
                m.params_mut().values[i].data.iter_mut().for_each(|x| *x += rng.normal());
            }
        }
        assert!(touched > 0);
        let after = m.forward(&mem, &s).unwrap();
        assert_eq!(after.layers[layer].points, before.layers[layer].points);
        assert_eq!(after.layers[layer].box_features, before.layers[layer].box_features);
        assert_ne!(after.layers[layer].logits, before.layers[layer].logits);
        // The next layer sees the change through fusion.
        if layer + 1 < cfg.layers {
            assert_ne!(after.layers[layer + 1].points, before.layers[layer + 1].points);
        }
        // And the mirror image: box-branch changes leave the logits alone.
        let mut m = base.clone();
        for i in 0..m.params().len() {
            if m.param_group(i) == ParamGroup::BoxBranch(layer) {
                m.params_mut().values[i].data.iter_mut().for_each(|x| *x += rng.normal());
            }
        }
        let after = m.forward(&mem, &s).unwrap();
        assert_eq!(after.layers[layer].logits, before.layers[layer].logits);
        assert_ne!(after.layers[layer].points, before.layers[layer].points);
    }
}

#[test]
fn forward_follows_the_schedule() {
    let cfg = DecoderConfig {
        layers: 4,
        queries: 60,
        ..small_cfg()
    };
    let model = Decoder::new(cfg.clone(), 2).unwrap();
    let scene = &scenes(5, 1)[0];
    let mem = memory_of(scene, &cfg);
    let s = QuerySchedule {
        n_first: 60,
        n_last: 20,
        rho: 0.6,
        layers: 4,
    };
    let out = model.forward(&mem, &s).unwrap();
    let counts: Vec<usize> = out.layers.iter().map(|l| l.logits.rows).collect();
    assert_eq!(counts, vec![60, 44, 34, 29]);
    // Layer i keeps the top queries of layer i - 1.
    for i in 1..4 {
        let prev = &out.layers[i - 1];
        let keep = topk_indices(&prev.class_probs(), counts[i]).unwrap();
        let want: Vec<usize> = keep.iter().map(|&q| prev.ids[q]).collect();
        assert_eq!(out.layers[i].ids, want);
    }
    let flat = model.forward(&mem, &QuerySchedule::constant(60, 4)).unwrap();
    assert!(flat.layers.iter().all(|l| l.logits.rows == 60));
}

#[test]
fn self_attention_cost_scales_quadratically() {
    let cfg = DecoderConfig {
        layers: 4,
        queries: 60,
        ..small_cfg()
    };
    let model = Decoder::new(cfg.clone(), 2).unwrap();
    let mem = memory_of(&scenes(5, 1)[0], &cfg);
    let s = QuerySchedule {
        n_first: 60,
        n_last: 20,
        rho: 0.6,
        layers: 4,
    };
    let pruned = model.forward(&mem, &s).unwrap().ops;
    let flat = model.forward(&mem, &QuerySchedule::constant(60, 4)).unwrap().ops;
    for (i, n) in s.counts().into_iter().enumerate() {
        let ratio = pruned.layers[i].self_attn as f64 / flat.layers[i].self_attn as f64;
        let want = (n as f64 / 60.0).powi(2);
        assert!((ratio / want - 1.0).abs() < 0.01, "layer {i}: {ratio} vs {want}");
    }
    assert!(pruned.total() < flat.total());
    assert_eq!(pruned.memory, flat.memory);
}

fn one_target_scene() -> Scene {
    Scene {
        id: "single".into(),
        size: 256.0,
        objects: vec![SceneObject {
            class: 1,
            rect: RotatedBox::new(120.0, 140.0, 60.0, 16.0, 0.4).unwrap(),
            difficult: false,
        }],
    }
}

fn tiny_train(cfg: DecoderConfig, steps: usize) -> TrainConfig {
    TrainConfig {
        schedule: QuerySchedule {
            n_first: cfg.queries,
            n_last: cfg.queries / 2,
            rho: 0.5,
            layers: cfg.layers,
        },
        model: cfg,
        steps,
        batch: 1,
        warmup: 10,
        grad_check_every: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn gradient_spot_checks_pass() {
    let cfg = small_cfg();
    let tc = tiny_train(cfg.clone(), 0);
    let model = Decoder::new(cfg.clone(), 13).unwrap();
    let mut rng = Rng::new(77);
    for scene in scenes(8, 3) {
        let prepared = PreparedScene::new(&scene, &cfg);
        let r = gradient_check(&model, &prepared, &tc, 20, &mut rng).unwrap();
        assert_eq!(r.checked, 20);
        assert!(r.max_rel_err < GRAD_CHECK_TOL, "{r:?}");
    }
}

#[test]
fn spot_checks_leave_training_unchanged() {
    let cfg = small_cfg();
    let data = scenes(10, 3);
    let plain = tiny_train(cfg.clone(), 6);
    let checked = TrainConfig {
        grad_check_every: 2,
        ..plain.clone()
    };
    let mut seen = 0;
    let a = train_toy(&data, &plain, |_| {}).unwrap();
    let b = train_toy(&data, &checked, |r| seen += usize::from(r.grad_check.is_some())).unwrap();
    assert_eq!(seen, 3);
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = small_cfg();
    let data = scenes(9, 4);
    let tc = TrainConfig {
        lr: 0.0,
        seed: 4,
        ..tiny_train(cfg.clone(), 5)
    };
    let out = train_toy(&data, &tc, |_| {}).unwrap();
    let init = Decoder::new(cfg.clone(), 4).unwrap();
    assert_eq!(out.model.params(), init.params());
    let p = PreparedScene::new(&data[0], &cfg);
    let a = scene_pass(&init, init.params(), &p, &tc, None, false).unwrap().loss;
    let b = scene_pass(&out.model, out.model.params(), &p, &tc, None, false).unwrap().loss;
    assert_eq!(a, b);
    assert_eq!(out.log.len(), 5);
}

#[test]
fn nan_parameters_abort_training() {
    let cfg = small_cfg();
    let tc = tiny_train(cfg.clone(), 3);
    let mut model = Decoder::new(cfg, 0).unwrap();
    let head = model.params().names.iter().position(|n| n.ends_with("class.head.b")).unwrap();
    model.params_mut().values[head].data[0] = f64::NAN;
    let err = odet_core::querymodel::train_from(model, &scenes(1, 2), &tc, |_| {}).err().unwrap();
    assert!(matches!(err, ModelError::Diverged { step: 0, .. }), "{err}");
}

#[test]
fn single_scene_overfits() {
    let cfg = DecoderConfig {
        queries: 8,
        layers: 2,
        ..small_cfg()
    };
    let tc = TrainConfig {
        lr: 2e-3,
        augment: false,
        weight_decay: 0.0,
        final_lr_frac: 0.01,
        ..tiny_train(cfg.clone(), 2000)
    };
    let scene = one_target_scene();
    let out = train_toy(std::slice::from_ref(&scene), &tc, |_| {}).unwrap();
    let p = PreparedScene::new(&scene, &cfg);
    let pass = scene_pass(&out.model, out.model.params(), &p, &tc, None, false).unwrap();
    let last = pass.layers.last().unwrap().total;
    assert!(last < 0.05, "final total loss {last}, per layer {:?}", pass.layers);
    let first = out.log[0].loss;
    assert!(out.log.last().unwrap().loss < first);
}
