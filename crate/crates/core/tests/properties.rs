use ndarray::Array2;
use proptest::prelude::*;

use taskprune::allocator::{solve_schedule, LogisticParams, SparsitySchedule};
use taskprune::classifier::{embed, TaskClassifier};
use taskprune::corpus::Tokenizer;
use taskprune::model::{ModelConfig, TinyModel};
use taskprune::pruner::{lowest_indices, make_plan, plan_diff, pruned_count};
use taskprune::scoring::{score_sf, score_sw, ImportanceScores, Method, Origin, ScoreSet, WeightSlice};
use taskprune::stats::Site;
use taskprune::Stats;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-12)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-100.0f64..100.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn accumulate(batches: &[Array2<f64>], width: usize) -> Stats {
    let mut s = Stats::empty(0, Site::Mlp, "t", width);
    for b in batches {
        s.add_prompt(b).unwrap();
    }
    s
}

fn mlp_scores(n_layers: usize, channels: &[f64]) -> ScoreSet {
    let mut set = ScoreSet::new();
    for layer in 0..n_layers {
        for site in Site::ALL {
            let (channel_scores, head_scores) = match site {
                Site::Mlp => (channels.to_vec(), None),
                Site::Attn => (vec![1.0; 8], Some(vec![1.0, 2.0])),
            };
            set.insert(
                (layer, site),
                ImportanceScores {
                    layer,
                    site,
                    origin: Origin::General,
                    method: Method::Wanda,
                    channel_scores,
                    head_scores,
                },
            );
        }
    }
    set
}

proptest! {
    #[test]
    fn merge_is_associative_and_commutative(
        a in matrix(5, 3), b in matrix(2, 3), c in matrix(7, 3)
    ) {
        let (sa, sb, sc) = (accumulate(&[a.clone()], 3), accumulate(&[b.clone()], 3), accumulate(&[c.clone()], 3));
        let left = sa.merge(&sb).unwrap().merge(&sc).unwrap();
        let right = sa.merge(&sb.merge(&sc).unwrap()).unwrap();
        let swapped = sc.merge(&sb).unwrap().merge(&sa).unwrap();
        let streamed = accumulate(&[a, b, c], 3);
        for other in [&right, &swapped, &streamed] {
            prop_assert_eq!(left.n(), other.n());
            prop_assert_eq!(left.n_prompts(), other.n_prompts());
            for (x, y) in left.variance().iter().zip(other.variance().iter()) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
            for (x, y) in left.raw_l2().iter().zip(other.raw_l2().iter()) {
                prop_assert!(close(*x, *y));
            }
        }
    }

    #[test]
    fn positive_rescaling_keeps_score_order(
        data in matrix(6, 5), w in matrix(4, 5), k in -3i32..4
    ) {
        // power-of-two factors scale every score exactly
        let c = 2f64.powi(k);
        let slices: Vec<WeightSlice<f64>> =
            (0..5).map(|i| WeightSlice::new(0, Site::Mlp, i, w.column(i).to_vec())).collect();
        let base = accumulate(&[data.clone()], 5);
        let scaled = accumulate(&[data.mapv(|x| x * c)], 5);
        for method in [Method::Fluctuation, Method::Wanda] {
            let (s0, s1) = match method {
                Method::Fluctuation => (score_sf(&base, &slices).unwrap(), score_sf(&scaled, &slices).unwrap()),
                Method::Wanda => (score_sw(&base, &slices).unwrap(), score_sw(&scaled, &slices).unwrap()),
            };
            let order = |v: &[f64]| lowest_indices(v, v.len());
            let rank = |v: &[f64]| {
                let mut idx: Vec<usize> = (0..v.len()).collect();
                idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]).then(i.cmp(&j)));
                idx
            };
            prop_assert_eq!(order(&s0.channel_scores), order(&s1.channel_scores));
            prop_assert_eq!(rank(&s0.channel_scores), rank(&s1.channel_scores));
        }
    }

    #[test]
    fn schedule_mean_hits_target(l in 2usize..=64, frac in 0.0f64..0.999, frozen_seed in 0usize..64) {
        let n_frozen = frozen_seed % l;
        let params = LogisticParams { n_frozen, ..LogisticParams::default() };
        let max_mean = params.rho_cap * (l - n_frozen) as f64 / l as f64;
        let g = (frac * max_mean).min(0.7);
        let s = solve_schedule(l, g, params).unwrap();
        prop_assert!((s.mean() - g).abs() <= 1e-4);
        prop_assert!(s.rho[l - n_frozen..].iter().all(|&r| r == 0.0));
        prop_assert!(s.rho.iter().all(|&r| (0.0..=params.rho_cap).contains(&r)));
        prop_assert!(s.rho[..l - n_frozen].windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn plans_are_exact_and_nested(
        scores in prop::collection::vec(0u8..4, 1..40), r1 in 0usize..10, r2 in 0usize..10
    ) {
        let (lo, hi) = (r1.min(r2) as f64 / 10.0, r1.max(r2) as f64 / 10.0);
        let v: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
        let a = lowest_indices(&v, pruned_count(lo, v.len()));
        let b = lowest_indices(&v, pruned_count(hi, v.len()));
        prop_assert_eq!(a.len(), (lo * v.len() as f64 + 1e-9).floor() as usize);
        prop_assert!(a.iter().all(|i| b.contains(i)));
        // no kept unit scores below a pruned one
        let max_pruned = b.iter().map(|&i| v[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((0..v.len()).filter(|i| !b.contains(i)).all(|i| v[i] >= max_pruned));
    }

    #[test]
    fn plan_overlap_is_symmetric_and_bounded(
        a in prop::collection::vec(0.0f64..1.0, 16), b in prop::collection::vec(0.0f64..1.0, 16), rho in 0.0f64..0.9
    ) {
        let config = ModelConfig::new(2, 8, 2, 16, 16, 8).unwrap();
        let schedule = SparsitySchedule::uniform(2, rho).unwrap();
        let pa = make_plan(&mlp_scores(2, &a), &schedule, &config).unwrap();
        let pb = make_plan(&mlp_scores(2, &b), &schedule, &config).unwrap();
        let ab = plan_diff(&pa, &pb).unwrap();
        let ba = plan_diff(&pb, &pa).unwrap();
        prop_assert_eq!(ab.mean_jaccard, ba.mean_jaccard);
        prop_assert!((0.0..=1.0).contains(&ab.mean_jaccard));
        prop_assert_eq!(plan_diff(&pa, &pa).unwrap().mean_jaccard, 1.0);
    }

    #[test]
    fn embedding_ignores_order_and_repetition(tokens in prop::collection::vec(0u32..64, 1..20), seed in 0u64..4) {
        let model = TinyModel::<f32>::init_random(ModelConfig::new(2, 8, 2, 8, 64, 16).unwrap(), seed).unwrap();
        let e: ndarray::Array1<f64> = embed(&model, &tokens).unwrap();
        let mut rev = tokens.clone();
        rev.reverse();
        let twice: Vec<u32> = tokens.iter().chain(&tokens).copied().collect();
        let e_rev: ndarray::Array1<f64> = embed(&model, &rev).unwrap();
        let e_twice: ndarray::Array1<f64> = embed(&model, &twice).unwrap();
        for ((x, y), z) in e.iter().zip(&e_rev).zip(&e_twice) {
            prop_assert!((x - y).abs() < 1e-9 && (x - z).abs() < 1e-9);
        }
    }

    #[test]
    fn classifier_probabilities_and_shift(
        w in matrix(8, 3), shift in -50.0f64..50.0, tokens in prop::collection::vec(0u32..64, 1..10)
    ) {
        let model = TinyModel::<f32>::init_random(ModelConfig::new(2, 8, 2, 8, 64, 16).unwrap(), 1).unwrap();
        let clf = TaskClassifier {
            weight: w,
            bias: ndarray::Array1::zeros(3),
            labels: vec!["a".into(), "b".into(), "c".into()],
            model_fingerprint: None,
        };
        let (best, p) = clf.classify(&model, &tokens).unwrap();
        prop_assert!((p.sum() - 1.0).abs() < 1e-6 && p.iter().all(|&v| v >= 0.0));
        let mut moved = clf.clone();
        moved.bias += shift;
        prop_assert_eq!(moved.classify(&model, &tokens).unwrap().0, best);
    }

    #[test]
    fn checkpoints_round_trip(seed in 0u64..1000) {
        let model = TinyModel::<f32>::init_random(ModelConfig::new(2, 8, 2, 12, 32, 16).unwrap(), seed).unwrap();
        let back = TinyModel::<f32>::from_bytes(&model.to_bytes()).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(back.fingerprint(), model.fingerprint());
    }

    #[test]
    fn byte_tokenizer_round_trips(text in "\\PC{0,40}") {
        let tok = Tokenizer::byte_level();
        prop_assert_eq!(tok.decode(&tok.encode(&text).unwrap()).unwrap(), text);
    }
}

/// Pruned sets of two independent random half-prunings overlap with
/// Jaccard index near 1/3.
#[test]
fn random_plans_overlap_by_a_third() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let n = 200;
    let trials = 200;
    let mut total = 0.0;
    for _ in 0..trials {
        let a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let pa = lowest_indices(&a, n / 2);
        let pb = lowest_indices(&b, n / 2);
        let inter = pa.iter().filter(|i| pb.contains(i)).count();
        total += inter as f64 / (n - inter) as f64;
    }
    let mean = total / trials as f64;
    assert!((mean - 1.0 / 3.0).abs() < 0.01, "{mean}");
}
