use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use tripvec::corpus::{build_vocabulary, generate_synthetic, SyntheticConfig};
use tripvec::neural::{grad_check, LossSpec, Parameters};
use tripvec::rng::seeded;
use tripvec::skipgram::{train_embeddings, SkipgramConfig};
use tripvec::traveler::*;

fn random_seq(t: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..t).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn small_dims() -> TravelerDims {
    TravelerDims {
        expand: 8,
        hidden: 4,
        embedding: 3,
        lstm_hidden: 4,
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn pooling_matches_brute_force_mean() {
    let mut rng = seeded(1, 0);
    let viewed = random_seq(7, 5, &mut rng);
    let expected: Vec<f64> = (0..5).map(|j| viewed.iter().map(|v| v[j]).sum::<f64>() / 7.0).collect();
    assert!(close(&pool_average(&viewed).unwrap(), &expected, 1e-12));
    assert!(pool_average(&[]).is_err());
}

#[test]
fn random_baseline_picks_uniformly() {
    let viewed = vec![vec![0.0], vec![1.0], vec![2.0]];
    let mut rng = seeded(2, 0);
    let mut hist = [0usize; 3];
    let n = 100_000;
    for _ in 0..n {
        hist[baseline_random(&viewed, &mut rng).unwrap()[0] as usize] += 1;
    }
    for c in hist {
        assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() <= 0.01, "{hist:?}");
    }
}

#[test]
fn dan_and_average_ignore_order() {
    let mut rng = seeded(3, 0);
    for kind in [ModelKind::Dan, ModelKind::Average] {
        let model = random_parameters(kind, 4, &small_dims(), 1.0, 7).unwrap();
        let mut viewed = random_seq(9, 4, &mut rng);
        let p0 = model.booking_probability(&viewed).unwrap().unwrap();
        let e0 = model.traveler_embedding(&viewed, &mut rng).unwrap();
        for _ in 0..20 {
            viewed.shuffle(&mut rng);
            let p = model.booking_probability(&viewed).unwrap().unwrap();
            assert!((p - p0).abs() <= 1e-12, "{kind}");
            assert!(close(&model.traveler_embedding(&viewed, &mut rng).unwrap(), &e0, 1e-12));
        }
    }
}

#[test]
fn recurrent_kinds_depend_on_order() {
    let mut rng = seeded(4, 0);
    for kind in [ModelKind::Lstm, ModelKind::LstmAttention] {
        let model = random_parameters(kind, 4, &small_dims(), 1.0, 11).unwrap();
        let viewed = random_seq(6, 4, &mut rng);
        let p0 = model.booking_probability(&viewed).unwrap().unwrap();
        let differs = (0..20).any(|_| {
            let mut v = viewed.clone();
            v.shuffle(&mut rng);
            (model.booking_probability(&v).unwrap().unwrap() - p0).abs() > 1e-9
        });
        assert!(differs, "{kind} gave the same output for every ordering");
    }
}

#[test]
fn attention_matches_softmax_oracle() {
    let mut rng = seeded(5, 0);
    for _ in 0..20 {
        let hidden = random_seq(6, 5, &mut rng);
        let w: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let e: Vec<f64> = hidden.iter().map(|h| h.iter().zip(&w).map(|(x, wi)| wi * x.tanh()).sum()).collect();
        let z: f64 = e.iter().map(|x| x.exp()).sum();
        let alpha: Vec<f64> = e.iter().map(|x| x.exp() / z).collect();
        let context: Vec<f64> = (0..5).map(|j| hidden.iter().zip(&alpha).map(|(h, a)| a * h[j]).sum()).collect();
        let (c, a) = attention_combine(&w, &hidden).unwrap();
        assert!(close(&a, &alpha, 1e-12));
        assert!(close(&c, &context, 1e-12));
    }
}

proptest! {
    #[test]
    fn attention_weights_form_a_distribution(
        seed in any::<u64>(),
        t in 1usize..12,
        d in 1usize..6,
        scale in 0.1f64..50.0,
    ) {
        let mut rng = seeded(seed, 0);
        let hidden: Vec<Vec<f64>> = random_seq(t, d, &mut rng)
            .into_iter()
            .map(|h| h.into_iter().map(|x| x * scale).collect())
            .collect();
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-scale..scale)).collect();
        let (_, alpha) = attention_combine(&w, &hidden).unwrap();
        prop_assert!(alpha.iter().all(|&a| a >= 0.0));
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-12);

        let same = vec![hidden[0].clone(); t];
        let (ctx, alpha) = attention_combine(&w, &same).unwrap();
        prop_assert!(alpha.iter().all(|&a| (a - 1.0 / t as f64).abs() <= 1e-12));
        prop_assert!(close(&ctx, &hidden[0], 1e-12));
    }

    #[test]
    fn probabilities_stay_inside_the_unit_interval(seed in any::<u64>(), t in 1usize..8, k in 0usize..4) {
        let kind = ModelKind::TRAINABLE[k];
        // Bounded so the head logit stays below 36, where f64 sigmoid rounds to 1.
        let model = random_parameters(kind, 4, &small_dims(), 1.0, seed).unwrap();
        let mut rng = seeded(seed, 1);
        let viewed = random_seq(t, 4, &mut rng);
        let p = model.booking_probability(&viewed).unwrap().unwrap();
        prop_assert!(p > 0.0 && p < 1.0);
    }
}

fn max_rel_error<M: SequenceModel>(model: &M, example: &TravelerExample, loss: &LossSpec, h: f64) -> f64 {
    grad_check(model, h, |m: &M| {
        let mut g = m.zeroed();
        let l = m.loss_and_grad(example, loss, &mut g)?;
        Ok((l, g))
    })
    .unwrap()
    .max_relative_error
}

fn worst_over_trials(kind: ModelKind, h: f64) -> f64 {
    let mut rng = seeded(6, kind as u64);
    let mut worst: f64 = 0.0;
    for trial in 0..30 {
        let ex = TravelerExample::new("x", random_seq(1 + trial % 5, 4, &mut rng), (trial % 2) as u8).unwrap();
        let loss = LossSpec::new(1.5).unwrap();
        let model = random_parameters(kind, 4, &small_dims(), 0.5, 100 + trial as u64).unwrap();
        let err = match &model {
            TravelerModel::Average(m) => max_rel_error(m, &ex, &loss, h),
            TravelerModel::Dan(m) => max_rel_error(m, &ex, &loss, h),
            TravelerModel::Lstm(m) => max_rel_error(m, &ex, &loss, h),
            TravelerModel::LstmAttention(m) => max_rel_error(m, &ex, &loss, h),
            TravelerModel::Random { .. } => unreachable!(),
        };
        worst = worst.max(err);
    }
    worst
}

#[test]
fn feedforward_kinds_pass_gradient_check() {
    for kind in [ModelKind::Average, ModelKind::Dan] {
        let worst = worst_over_trials(kind, 1e-5);
        assert!(worst < 1e-4, "{kind}: {worst}");
    }
}

#[test]
fn recurrent_gradients_agree_with_a_larger_step() {
    // At h = 1e-4 truncation error stays tiny while cancellation in the loss
    // difference drops tenfold, which isolates genuine gradient mistakes.
    for kind in [ModelKind::Lstm, ModelKind::LstmAttention] {
        let worst = worst_over_trials(kind, 1e-4);
        assert!(worst < 1e-4, "{kind}: {worst}");
    }
}

#[test]
fn positive_weight_doubles_positive_gradients() {
    let mut rng = seeded(7, 0);
    for kind in ModelKind::TRAINABLE {
        let model = random_parameters(kind, 4, &small_dims(), 0.5, 3).unwrap();
        let pos = TravelerExample::new("p", random_seq(3, 4, &mut rng), 1).unwrap();
        let neg = TravelerExample::new("n", random_seq(3, 4, &mut rng), 0).unwrap();
        let (one, two) = (LossSpec::new(1.0).unwrap(), LossSpec::new(2.0).unwrap());
        let grads = |spec: &LossSpec, ex: &TravelerExample| -> Vec<f64> {
            match &model {
                TravelerModel::Average(m) => {
                    let mut g = m.zeroed();
                    m.loss_and_grad(ex, spec, &mut g).unwrap();
                    g.param_slices().concat()
                }
                TravelerModel::Dan(m) => {
                    let mut g = m.zeroed();
                    m.loss_and_grad(ex, spec, &mut g).unwrap();
                    g.param_slices().concat()
                }
                TravelerModel::Lstm(m) => {
                    let mut g = m.zeroed();
                    m.loss_and_grad(ex, spec, &mut g).unwrap();
                    g.param_slices().concat()
                }
                TravelerModel::LstmAttention(m) => {
                    let mut g = m.zeroed();
                    m.loss_and_grad(ex, spec, &mut g).unwrap();
                    g.param_slices().concat()
                }
                TravelerModel::Random { .. } => unreachable!(),
            }
        };
        let (g1, g2) = (grads(&one, &pos), grads(&two, &pos));
        assert!(g1.iter().zip(&g2).all(|(a, b)| 2.0 * a == *b), "{kind}");
        assert_eq!(grads(&one, &neg), grads(&two, &neg), "{kind}");
        // One batch: the weighted batch gradient is neg + 2 * pos.
        let batch: Vec<f64> = grads(&two, &neg).iter().zip(&g2).map(|(a, b)| a + b).collect();
        let expected: Vec<f64> = grads(&one, &neg).iter().zip(&g1).map(|(a, b)| a + 2.0 * b).collect();
        assert!(close(&batch, &expected, 1e-15));
    }
}

fn separable_toy(n: usize, seed: u64) -> Vec<TravelerExample> {
    let mut rng = seeded(seed, 0);
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let t = rng.random_range(1..5);
            let viewed = (0..t)
                .map(|_| {
                    let mut v: Vec<f64> = (0..4).map(|_| rng.random_range(-0.1..0.1)).collect();
                    v[0] += sign;
                    v
                })
                .collect();
            TravelerExample::new(format!("t{i}"), viewed, label).unwrap()
        })
        .collect()
}

#[test]
fn every_kind_fits_a_separable_toy() {
    let examples = separable_toy(200, 1);
    let config = TravelerConfig {
        dims: small_dims(),
        epochs: 50,
        batch_size: 16,
        seed: 2,
        ..TravelerConfig::default()
    };
    for kind in ModelKind::TRAINABLE {
        let trained = train_traveler_model(&examples, kind, &config).unwrap();
        let acc = accuracy(&trained.model, &examples).unwrap();
        assert!(acc >= 0.99, "{kind}: accuracy {acc}");
        assert_eq!(trained.loss_trace.len(), 50);
    }
}

#[test]
fn training_rejects_bad_inputs() {
    let mut examples = separable_toy(20, 2);
    let config = TravelerConfig {
        dims: small_dims(),
        epochs: 1,
        ..TravelerConfig::default()
    };
    assert!(train_traveler_model(&examples, ModelKind::Random, &config).unwrap_err().is_config());
    examples.iter_mut().for_each(|e| e.label = 0);
    let err = train_traveler_model(&examples, ModelKind::Dan, &config).unwrap_err();
    assert!(err.to_string().contains("degenerate labels"));
}

#[test]
fn default_weight_is_class_ratio() {
    let mut examples = separable_toy(40, 3);
    for e in examples.iter_mut().take(30) {
        e.label = 0;
    }
    // 30 forced negatives plus 5 of the remaining 10.
    assert_eq!(default_positive_weight(&examples).unwrap(), 35.0 / 5.0);
}

fn synthetic_examples(seed: u64) -> Vec<TravelerExample> {
    let config = SyntheticConfig {
        n_listings: 300,
        n_clusters: 6,
        n_travelers: 3000,
        seed,
        ..SyntheticConfig::default()
    };
    let (corpus, _) = generate_synthetic(&config).unwrap();
    let vocab = build_vocabulary(&corpus, 5).unwrap();
    let sg = SkipgramConfig {
        dim: 16,
        epochs: 3,
        seed,
        ..SkipgramConfig::default()
    };
    let trained = train_embeddings(&corpus, &vocab, &sg).unwrap();
    let vectors = trained.table.keyed(&vocab).unwrap();
    let prefixes = session_prefixes(&corpus, &vectors);
    examples_from_prefixes(&prefixes, &vectors, DEFAULT_MAX_PREFIX).unwrap()
}

#[test]
fn synthetic_training_is_deterministic_with_sane_loss() {
    let examples = synthetic_examples(5);
    let config = TravelerConfig {
        dims: TravelerDims {
            expand: 32,
            hidden: 12,
            embedding: 6,
            lstm_hidden: 8,
        },
        epochs: 15,
        seed: 9,
        ..TravelerConfig::default()
    };
    let a = train_traveler_model(&examples, ModelKind::Dan, &config).unwrap();
    let b = train_traveler_model(&examples, ModelKind::Dan, &config).unwrap();
    let prov = BTreeMap::from([("seed".to_string(), "9".to_string())]);
    assert_eq!(
        a.model.to_model_file(prov.clone()).to_json().unwrap(),
        b.model.to_model_file(prov).to_json().unwrap()
    );
    let losses: Vec<f64> = a.loss_trace.iter().map(|e| e.mean_loss).collect();
    assert_eq!(losses, b.loss_trace.iter().map(|e| e.mean_loss).collect::<Vec<_>>());
    let inversions: Vec<f64> = losses.windows(2).filter(|w| w[1] > w[0]).map(|w| (w[1] - w[0]) / w[0]).collect();
    assert!(inversions.len() <= 1 && inversions.iter().all(|&r| r <= 0.02), "{losses:?}");
}

#[test]
fn embedding_dimensions_per_kind() {
    let dims = small_dims();
    let mut rng = seeded(8, 0);
    let viewed = random_seq(3, 5, &mut rng);
    for (kind, d) in [
        (ModelKind::Random, 5),
        (ModelKind::Average, 5),
        (ModelKind::Dan, dims.embedding),
        (ModelKind::Lstm, dims.lstm_hidden),
        (ModelKind::LstmAttention, dims.lstm_hidden),
    ] {
        let model = TravelerModel::initialize(kind, 5, &dims, 1).unwrap();
        assert_eq!(model.embedding_dim(), d);
        assert_eq!(model.traveler_embedding(&viewed, &mut rng).unwrap().len(), d);
        assert!(model.traveler_embedding(&[], &mut rng).is_err());
    }
    let zero = TravelerModel::Dan(DanModel::zeros(5, &dims).unwrap());
    assert_eq!(zero.traveler_embedding(&viewed, &mut rng).unwrap(), vec![0.0; dims.embedding]);
}
