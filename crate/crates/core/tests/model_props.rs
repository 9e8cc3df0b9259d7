use std::collections::BTreeMap;
use std::sync::Arc;

use msn_core::backbone::{self, LabelledPatch};
use msn_core::evaluation::{stitched_score, ConfusionMatrix};
use msn_core::mainbody::{mem_rm, memrm_grad, memrm_init_random, memrm_layer_params, meta_forward, select_gaps, RecallSample};
use msn_core::pyramid::{extract_triples, generate_virtual_slide};
use msn_core::training::train_backbone;
use msn_core::{BackboneConfig, MsnError, ParameterStore, ResolutionSpec, Tensor, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(n_classes: usize, base: usize, blocks: usize) -> BackboneConfig {
    BackboneConfig {
        n_classes,
        base_channels: base,
        encoder_blocks: blocks,
        decoder_blocks: blocks,
    }
}

fn image(p: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[3, p, p], (0..3 * p * p).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn labels(p: usize, n: usize, seed: u64) -> Arc<Vec<u16>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Arc::new((0..p * p).map(|_| rng.random_range(0..=n) as u16).collect())
}

fn batch(c: &BackboneConfig, p: usize, n: usize) -> Vec<LabelledPatch> {
    (0..n as u64)
        .map(|i| LabelledPatch {
            x: image(p, 100 + i),
            y: labels(p, c.n_classes, 200 + i),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backbone_layers_have_the_stated_shapes(base in 1usize..6, blocks in 1usize..4, mult in 1usize..3, n in 2usize..6) {
        let c = cfg(n, base, blocks);
        let p = (1 << blocks) * 4 * mult;
        let params: ParameterStore<f32> = c.init(3);
        let taps: Vec<usize> = (0..c.num_layers()).collect();
        let out = backbone::forward(&params, &c, &image(p, 1), &taps).unwrap();
        for (&l, t) in &out.tapped {
            let (ch, h, w) = c.layer_output_shape(l, p);
            prop_assert_eq!(t.shape(), &[ch, h, w][..]);
        }
        prop_assert_eq!(out.logits.shape(), &[n, p, p][..]);
        prop_assert_eq!(params.num_elements(), c.num_params());
    }

    #[test]
    fn recalled_features_keep_the_branch_shape(base in 1usize..5, blocks in 1usize..3, ratio in prop::sample::select(vec![2usize, 4, 16]), seed in 0u64..1000) {
        let c = cfg(3, base, blocks);
        let p = (1 << blocks) * 8;
        let meta: ParameterStore<f64> = c.init::<f32>(seed).cast();
        let gaps: Vec<usize> = (0..c.head_index()).collect();
        let adapters: ParameterStore<f64> = memrm_init_random(&c, &gaps, seed);
        let a = backbone::forward(&meta, &c, &image(p, seed), &gaps).unwrap();
        let b = backbone::forward(&meta, &c, &image(p, seed + 1), &gaps).unwrap();
        for &l in &gaps {
            let out = mem_rm(&a.tapped[&l], &b.tapped[&l], ratio, &adapters, l).unwrap();
            prop_assert_eq!(out.shape(), b.tapped[&l].shape());
        }
    }

    #[test]
    fn raising_tau_never_adds_gap_layers(scores in prop::collection::vec(0.0f64..3.0, 3..10), t1 in 0.0f64..3.0, dt in 0.0f64..3.0) {
        let head = scores.len() - 1;
        let (low, _) = select_gaps(&scores, t1, head);
        let (high, fallback) = select_gaps(&scores, t1 + dt, head);
        prop_assert!(!low.contains(&head) && !high.contains(&head));
        if !fallback {
            prop_assert!(high.iter().all(|l| low.contains(l)));
        } else {
            prop_assert_eq!(high.len(), 2.min(head));
        }
    }
}

fn max_rel_error(exact: &[f64], approx: &[f64]) -> f64 {
    exact
        .iter()
        .zip(approx)
        .map(|(&a, &b)| (a - b).abs() / (a.abs() + b.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[test]
fn backbone_gradient_matches_central_differences() {
    let c = cfg(3, 4, 2);
    let data = batch(&c, 32, 2);
    let params: ParameterStore<f64> = c.init::<f32>(11).cast();
    let (_, grads) = backbone::grad(&params, &c, &data, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut exact, mut approx) = (Vec::new(), Vec::new());
    let eps = 1e-6;
    for name in params.names().cloned().collect::<Vec<_>>() {
        let len = params.get(&name).unwrap().len();
        for _ in 0..4 {
            let i = rng.random_range(0..len);
            let shifted = |d: f64| {
                let mut p = params.clone();
                p.get_mut(&name).unwrap().data_mut()[i] += d;
                backbone::grad(&p, &c, &data, 0).unwrap().0
            };
            approx.push((shifted(eps) - shifted(-eps)) / (2.0 * eps));
            exact.push(grads[&name].data()[i]);
        }
    }
    let err = max_rel_error(&exact, &approx);
    assert!(err < 1e-5, "f64 relative error {err}");
}

#[test]
fn single_precision_gradient_tracks_double() {
    let c = cfg(3, 4, 2);
    let data = batch(&c, 32, 2);
    let single: ParameterStore<f32> = c.init(11);
    let (_, g32) = backbone::grad(&single, &c, &data, 0).unwrap();
    let (_, g64) = backbone::grad(&single.cast::<f64>(), &c, &data, 0).unwrap();
    for (name, g) in &g64 {
        let lo: Vec<f64> = g32[name].data().iter().map(|&v| v as f64).collect();
        let err = max_rel_error(g.data(), &lo);
        assert!(err < 1e-3, "{name}: f32 relative error {err}");
    }
}

#[test]
fn memory_from_another_triple_is_rejected() {
    let c = cfg(3, 4, 2);
    let meta: ParameterStore<f32> = c.init::<f32>(1).freeze();
    let gaps = [0, 2];
    let (_, memory) = meta_forward(&meta, &c, &image(32, 1), 7, &gaps).unwrap();
    let adapters: ParameterStore<f32> = memrm_init_random(&c, &gaps, 2);
    let x = image(32, 2);
    let sample = RecallSample {
        x: &x,
        patch_id: 8,
        memory: &memory,
        y: labels(32, 3, 1),
    };
    let err = memrm_grad(&meta, &adapters, &c, &gaps, 4, &[sample], 0).unwrap_err();
    assert!(matches!(err, MsnError::StaleMemory { memory_scope: 7, patch_id: 8 }), "{err}");
}

#[test]
fn step_two_updates_only_the_adapters() {
    let c = cfg(3, 4, 2);
    let meta: ParameterStore<f32> = c.init::<f32>(1).freeze();
    let gaps = [0, 1, 3];
    let adapters: ParameterStore<f32> = memrm_init_random(&c, &gaps, 2);
    let (_, memory) = meta_forward(&meta, &c, &image(32, 1), 7, &gaps).unwrap();
    let x = image(32, 2);
    let sample = RecallSample {
        x: &x,
        patch_id: 7,
        memory: &memory,
        y: labels(32, 3, 1),
    };
    let (_, grads) = memrm_grad(&meta, &adapters, &c, &gaps, 4, &[sample], 0).unwrap();
    assert_eq!(grads.keys().collect::<Vec<_>>(), adapters.names().collect::<Vec<_>>());
    for (name, g) in &grads {
        assert_eq!(g.shape(), adapters.get(name).unwrap().shape());
    }
    let layers = c.layers();
    let expected: usize = gaps.iter().map(|&l| memrm_layer_params(layers[l].out_channels)).sum();
    assert_eq!(adapters.num_trainable(), expected);

    let thawed = c.init::<f32>(1);
    let sample = RecallSample {
        x: &x,
        patch_id: 7,
        memory: &memory,
        y: labels(32, 3, 1),
    };
    assert!(memrm_grad(&thawed, &adapters, &c, &gaps, 4, &[sample], 0).is_err());
}

#[test]
fn training_is_reproducible() {
    let spec = ResolutionSpec {
        factors: [16, 4, 1],
        patch_size: 32,
    };
    let slide = generate_virtual_slide(4, 128, 3, &spec).unwrap();
    let triples = extract_triples(&slide, &spec).unwrap();
    let tc = TrainConfig {
        epochs_step1: 2,
        batch_size: 4,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let c = cfg(3, 4, 2);
    let run = || train_backbone(&triples[..12], &triples[12..], 2, &c, &tc, 1, 2, "S3").unwrap();
    let (pa, la) = run();
    let (pb, lb) = run();
    assert_eq!(pa.checksum(), pb.checksum());
    let strip = |l: &msn_core::TrainLog| l.records.iter().map(|r| (r.epoch, r.loss, r.miou)).collect::<Vec<_>>();
    assert_eq!(strip(&la), strip(&lb));
}

#[test]
fn stitched_score_equals_patchwise_confusion_without_overlap() {
    let spec = ResolutionSpec {
        factors: [16, 4, 1],
        patch_size: 32,
    };
    let slide = generate_virtual_slide(21, 160, 4, &spec).unwrap();
    let triples = extract_triples(&slide, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits: BTreeMap<u64, Tensor<f32>> = triples
        .iter()
        .map(|t| {
            let z = (0..4 * 32 * 32).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            (t.patch_id, Tensor::from_vec(&[4, 32, 32], z).unwrap())
        })
        .collect();
    let (stitched, _) = stitched_score(&[&slide], &triples, 32, &logits).unwrap();
    let mut cm = ConfusionMatrix::new(4);
    for t in &triples {
        let pred = logits[&t.patch_id].argmax_channels().unwrap();
        cm.add(&pred, &t.y[0], slide.ignore_label()).unwrap();
    }
    assert_eq!(stitched, cm.miou().unwrap());
}
