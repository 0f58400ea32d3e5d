mod common;

use common::{random_tensor, rng};
use mitoloc::numerics::{first_argmax, Adam, AdamConfig, Checkpoint, ParamStore, Tape, Tensor};
use mitoloc::train::train_step;
use mitoloc::{
    aggregate, bce_loss, Aggregator, Backbone, BackboneConfig, FeatureMap, Head, HeadConfig, HeadMode, Mode, Model,
    ModelError, ProbabilityMap,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn small(num_stages: usize) -> BackboneConfig {
    BackboneConfig { num_stages, stem_channels: 4, ..Default::default() }
}

fn random_batch(seed: u64, n: usize, size: usize) -> Tensor<f32> {
    random_tensor(&mut rng(seed), &[n, 3, size, size])
}

/// Trainable parameter count summed layer by layer from the architecture.
fn expected_trainable(cfg: &BackboneConfig, head: &HeadConfig) -> usize {
    let conv = |o: usize, i: usize, k: usize| o * i * k * k;
    let bn = |c: usize| 2 * c;
    let stem = cfg.stem_channels;
    let mut n = conv(stem, cfg.input_channels, 7) + bn(stem);
    let mut in_c = stem;
    for s in 0..cfg.num_stages {
        let out_c = stem << s;
        for b in 0..2 {
            let bi = if b == 0 { in_c } else { out_c };
            n += conv(out_c, bi, 3) + bn(out_c) + conv(out_c, out_c, 3) + bn(out_c);
            if b == 0 && (s > 0 || bi != out_c) {
                n += conv(out_c, bi, 1) + bn(out_c);
            }
        }
        in_c = out_c;
    }
    n += in_c + 1;
    if head.aggregator == Aggregator::Attention {
        n += in_c * head.attention_hidden_dim + head.attention_hidden_dim;
    }
    n
}

#[test]
fn parameter_count_matches_layer_sum() {
    for stages in 1..=4 {
        for head in HeadConfig::ablation_variants() {
            let cfg = BackboneConfig { num_stages: stages, stem_channels: 8, ..Default::default() };
            let m = Model::new(&cfg, &head, 0).unwrap();
            assert_eq!(m.params.trainable_count(), expected_trainable(&cfg, &head), "{stages} stages, {}", head.label());
        }
    }
}

#[test]
fn full_width_three_stage_feature_shapes() {
    let cfg = BackboneConfig::default();
    assert_eq!(cfg.out_channels(), 256);
    let mut store = ParamStore::<f32>::new();
    let bb = Backbone::build(&cfg, &mut store, &mut rng(0)).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[1, 3, 64, 64])).unwrap();
    let f = bb.forward(&mut tape, &store, x, Mode::Eval).unwrap();
    assert_eq!(tape.value(f.var).shape(), &[1, 256, 4, 4]);
    assert_eq!(f.stride, 16);
}

#[test]
fn one_stage_resolution_and_depth_doubling() {
    for (stages, cells) in [(1, 16), (2, 8), (3, 4), (4, 2)] {
        let m = Model::new(&small(stages), &HeadConfig::default(), 1).unwrap();
        let p = m.predict(random_batch(2, 1, 64)).unwrap();
        assert_eq!(p[0].cells.shape(), &[cells, cells], "{stages} stages");
        assert_eq!(p[0].stride, 64 / cells);
    }
}

#[test]
fn image_smaller_than_stride_is_rejected() {
    let m = Model::new(&small(3), &HeadConfig::default(), 1).unwrap();
    assert!(m.predict(random_batch(1, 1, 8)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn output_size_follows_stride_formula(h in 32usize..=512, w in 32usize..=512, stages in 1usize..=4) {
        let cfg = BackboneConfig { num_stages: stages, stem_channels: 1, ..Default::default() };
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::build(&cfg, &mut store, &mut rng(0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, h, w])).unwrap();
        let f = bb.forward(&mut tape, &store, x, Mode::Eval).unwrap();
        let s = cfg.output_stride();
        prop_assert_eq!(tape.value(f.var).shape(), &[1, cfg.out_channels(), h.div_ceil(s), w.div_ceil(s)]);
    }

    #[test]
    fn bce_is_convex_and_non_negative(h1 in 0.0f64..=1.0, h2 in 0.0f64..=1.0, y in 0u8..2) {
        let y = y as f64;
        let mid = bce_loss((h1 + h2) / 2.0, y).unwrap();
        let (l1, l2) = (bce_loss(h1, y).unwrap(), bce_loss(h2, y).unwrap());
        prop_assert!(l1 >= 0.0 && l2 >= 0.0);
        prop_assert!(mid <= (l1 + l2) / 2.0 + 1e-9);
    }
}

#[test]
fn forward_is_deterministic_and_seeded() {
    let a = Model::new(&small(3), &HeadConfig::default(), 5).unwrap();
    let b = Model::new(&small(3), &HeadConfig::default(), 5).unwrap();
    let c = Model::new(&small(3), &HeadConfig::default(), 6).unwrap();
    assert_eq!(a.params.checksum(), b.params.checksum());
    assert_ne!(a.params.checksum(), c.params.checksum());
    let x = random_batch(3, 2, 64);
    let pa = a.predict(x.clone()).unwrap();
    let pb = b.predict(x).unwrap();
    for (p, q) in pa.iter().zip(&pb) {
        assert_eq!(p.global.to_bits(), q.global.to_bits());
        assert_eq!(p.cells, q.cells);
    }
}

#[test]
fn save_load_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    for head in HeadConfig::ablation_variants() {
        let m = Model::new(&small(3), &head, 9).unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.params.checksum(), m.params.checksum());
        assert_eq!(back.head_config(), m.head_config());
        let x = random_batch(4, 2, 64);
        let (p, q) = (m.predict(x.clone()).unwrap(), back.predict(x).unwrap());
        for (a, b) in p.iter().zip(&q) {
            assert_eq!(a.global.to_bits(), b.global.to_bits());
            assert_eq!(a.cells, b.cells);
        }
        assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), m.to_checkpoint().to_bytes());
    }
}

#[test]
fn pretrained_file_missing_a_stage_names_the_absent_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("two.ckpt");
    Model::new(&small(2), &HeadConfig::default(), 1).unwrap().save(&path).unwrap();
    let mut m = Model::new(&small(3), &HeadConfig::default(), 1).unwrap();
    let err = m.load_pretrained(&path).unwrap_err();
    assert!(matches!(err, ModelError::Load(_)));
    assert!(err.to_string().contains("backbone.layer3.0.conv1.weight"), "{err}");
    assert!(matches!(m.load_pretrained(&dir.path().join("none.ckpt")), Err(ModelError::Numerics(_))));
}

#[test]
fn pretrained_import_accepts_bare_names_and_reports_extras() {
    let dir = tempfile::tempdir().unwrap();
    let src = Model::new(&small(3), &HeadConfig::default(), 11).unwrap();
    let mut ck = Checkpoint::new();
    for (_, p) in src.params.iter() {
        let name = p.name.strip_prefix("backbone.").unwrap_or(&p.name).to_string();
        ck.insert(name, p.tensor.clone());
    }
    ck.insert("fc.weight", Tensor::zeros(&[2, 2]));
    let path = dir.path().join("bare.ckpt");
    ck.save(&path).unwrap();
    let mut m = Model::new(&small(3), &HeadConfig::default(), 12).unwrap();
    let unmatched = m.load_pretrained(&path).unwrap();
    assert!(unmatched.contains(&"fc.weight".to_string()));
    assert!(unmatched.iter().any(|n| n.starts_with("head.")));
    for name in m.backbone.param_names(&m.params) {
        assert_eq!(m.params.by_name(&name).unwrap().tensor, src.params.by_name(&name).unwrap().tensor);
    }
}

#[test]
fn fine_tuning_moves_parameters_away_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Model::new(&small(3), &HeadConfig::default(), 2).unwrap().save(&path).unwrap();
    let mut m = Model::load(&path).unwrap();
    let before = m.params.checksum();
    let mut adam = Adam::new(AdamConfig::default());
    train_step(&mut m, &mut adam, random_batch(5, 2, 64), &[1.0, 0.0]).unwrap();
    assert_ne!(m.params.checksum(), before);
    assert_eq!(Model::load(&path).unwrap().params.checksum(), before);
}

#[test]
fn max_aggregation_gradient_reaches_only_the_argmax_cell() {
    let m = Model::new(&small(2), &HeadConfig::default(), 3).unwrap();
    let mut store = m.params.clone();
    let mut tape = Tape::new();
    let x = tape.leaf(random_batch(6, 3, 64)).unwrap();
    let out = m.forward(&mut tape, &store, x, Mode::Train).unwrap();
    tape.retain_grad(out.head.cell_probs);
    let cells = tape.value(out.head.cell_probs).clone();
    let loss = tape.bce_mean(out.head.global, &[1.0, 0.0, 1.0]).unwrap();
    let grads = tape.backward(loss, &mut store).unwrap();
    let g = grads.get(out.head.cell_probs).unwrap();
    let hw = cells.numel() / 3;
    for i in 0..3 {
        let (arg, _) = first_argmax(&cells.data()[i * hw..(i + 1) * hw]);
        for (j, v) in g[i * hw..(i + 1) * hw].iter().enumerate() {
            assert_eq!(*v == 0.0, j != arg, "image {i} cell {j}: {v}");
        }
    }
}

#[test]
fn instance_cells_equal_dense_layer_applied_per_cell() {
    let mut r = rng(7);
    for agg in [Aggregator::Max, Aggregator::Mean] {
        let cfg = HeadConfig::new(HeadMode::Instance, agg);
        let mut store = ParamStore::<f64>::new();
        let head = Head::build(&cfg, 5, &mut store, &mut r).unwrap();
        store.get_mut(store.id("head.classifier.bias").unwrap()).tensor.data_mut()[0] = 0.3;
        let feats: Tensor<f64> = random_tensor(&mut r, &[2, 5, 3, 4]);
        let mut tape = Tape::new();
        let fv = tape.leaf(feats.clone()).unwrap();
        let out = head.forward(&mut tape, &store, &FeatureMap { var: fv, stride: 16 }).unwrap();
        let w = store.by_name("head.classifier.weight").unwrap().tensor.data().to_vec();
        let probs = tape.value(out.cell_probs).data();
        for n in 0..2 {
            let mut cell = Vec::new();
            for p in 0..12 {
                let z: f64 = (0..5).map(|c| w[c] * feats.data()[(n * 5 + c) * 12 + p]).sum::<f64>() + 0.3;
                let want = 1.0 / (1.0 + (-z).exp());
                assert!((probs[n * 12 + p] - want).abs() < 1e-12);
                cell.push(want);
            }
            let h = match agg {
                Aggregator::Max => cell.iter().cloned().fold(f64::MIN, f64::max),
                _ => cell.iter().sum::<f64>() / 12.0,
            };
            assert!((tape.value(out.global).data()[n] - h).abs() < 1e-12);
        }
    }
}

#[test]
fn single_cell_map_is_sigmoid_of_affine() {
    let mut r = rng(8);
    let mut store = ParamStore::<f64>::new();
    let head = Head::build(&HeadConfig::default(), 3, &mut store, &mut r).unwrap();
    let f = [0.5, -1.0, 2.0];
    let mut tape = Tape::new();
    let fv = tape.leaf(Tensor::new(vec![1, 3, 1, 1], f.to_vec()).unwrap()).unwrap();
    let out = head.forward(&mut tape, &store, &FeatureMap { var: fv, stride: 16 }).unwrap();
    let w = store.by_name("head.classifier.weight").unwrap().tensor.data();
    let z: f64 = w.iter().zip(&f).map(|(a, b)| a * b).sum();
    assert_eq!(tape.value(out.cell_probs).shape(), &[1, 1, 1, 1]);
    assert!((tape.value(out.cell_probs).data()[0] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
}

/// Global score of a head on features whose cells are reordered by `perm`.
fn global_with_permutation(head: &Head, store: &ParamStore<f64>, feats: &Tensor<f64>, perm: &[usize]) -> (f64, Option<Vec<f64>>) {
    let [n, c, h, w] = feats.dims4().unwrap();
    let hw = h * w;
    let mut data = vec![0.0; feats.numel()];
    for i in 0..n * c {
        for (dst, &src) in perm.iter().enumerate() {
            data[i * hw + dst] = feats.data()[i * hw + src];
        }
    }
    let mut tape = Tape::new();
    let fv = tape.leaf(Tensor::new(vec![n, c, h, w], data).unwrap()).unwrap();
    let out = head.forward(&mut tape, store, &FeatureMap { var: fv, stride: 16 }).unwrap();
    (tape.value(out.global).data()[0], out.attention.map(|a| tape.value(a).data().to_vec()))
}

#[test]
fn aggregators_are_invariant_to_cell_permutation() {
    let mut r = rng(9);
    for cfg in HeadConfig::ablation_variants() {
        let cfg = HeadConfig { attention_hidden_dim: 6, ..cfg };
        let mut store = ParamStore::<f64>::new();
        let head = Head::build(&cfg, 4, &mut store, &mut r).unwrap();
        let feats: Tensor<f64> = random_tensor(&mut r, &[1, 4, 3, 3]);
        let ident: Vec<usize> = (0..9).collect();
        let (h0, a0) = global_with_permutation(&head, &store, &feats, &ident);
        assert!((0.0..=1.0).contains(&h0));
        if let Some(a) = a0 {
            assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for _ in 0..10 {
            let mut perm = ident.clone();
            perm.shuffle(&mut r);
            let (h, _) = global_with_permutation(&head, &store, &feats, &perm);
            assert!((h - h0).abs() < 1e-12, "{}: {h} vs {h0}", cfg.label());
        }
    }
}

#[test]
fn map_aggregation_is_invariant_to_permutation() {
    let mut r = rng(10);
    for _ in 0..50 {
        let mut v: Vec<f32> = (0..12).map(|_| r.random::<f32>()).collect();
        let m = ProbabilityMap::new(Tensor::new(vec![3, 4], v.clone()).unwrap(), 16).unwrap();
        v.shuffle(&mut r);
        let p = ProbabilityMap::new(Tensor::new(vec![4, 3], v).unwrap(), 16).unwrap();
        for agg in [Aggregator::Max, Aggregator::Mean] {
            let (a, b) = (aggregate(&m, agg).unwrap().0, aggregate(&p, agg).unwrap().0);
            assert!((a - b).abs() < 1e-6 && (0.0..=1.0).contains(&a));
        }
    }
}

#[test]
fn attention_weights_sum_to_one_on_model_output() {
    let head = HeadConfig::new(HeadMode::Embedding, Aggregator::Attention);
    let m = Model::new(&small(1), &head, 4).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(random_batch(11, 3, 64)).unwrap();
    let out = m.forward(&mut tape, &m.params, x, Mode::Eval).unwrap();
    let a = tape.value(out.head.attention.unwrap());
    let [n, cells] = a.dims2().unwrap();
    assert_eq!((n, cells), (3, 256));
    for row in a.data().chunks(cells) {
        assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn attention_over_uniform_embeddings_is_uniform() {
    let mut r = rng(12);
    let cfg = HeadConfig { attention_hidden_dim: 8, ..HeadConfig::new(HeadMode::Embedding, Aggregator::Attention) };
    let mut store = ParamStore::<f64>::new();
    let head = Head::build(&cfg, 3, &mut store, &mut r).unwrap();
    let e = [0.4, -0.7, 1.1];
    let feats = Tensor::from_fn(&[1, 3, 2, 3], |i| e[i / 6]);
    let (h, a) = global_with_permutation(&head, &store, &feats, &[0, 1, 2, 3, 4, 5]);
    for v in a.unwrap() {
        assert!((v - 1.0 / 6.0).abs() < 1e-12);
    }
    let w = store.by_name("head.classifier.weight").unwrap().tensor.data();
    let z: f64 = w.iter().zip(&e).map(|(a, b)| a * b).sum();
    assert!((h - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
}

#[test]
fn confident_correct_scores_give_near_zero_loss_and_gradient() {
    let mut store = ParamStore::<f64>::new();
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::new(vec![4, 1], vec![30.0, -30.0, 30.0, -30.0]).unwrap().with_requires_grad(true)).unwrap();
    let h = tape.sigmoid(z).unwrap();
    let loss = tape.bce_mean(h, &[1.0, 0.0, 1.0, 0.0]).unwrap();
    assert!(tape.value(loss).data()[0] < 1e-6);
    let grads = tape.backward(loss, &mut store).unwrap();
    assert!(grads.get(z).unwrap().iter().all(|g| g.abs() < 1e-6));
}

#[test]
fn attention_head_in_instance_mode_is_rejected() {
    let bad = HeadConfig::new(HeadMode::Instance, Aggregator::Attention);
    assert!(matches!(Model::new(&small(3), &bad, 0), Err(ModelError::Config(_))));
}
