use std::path::Path;

use mpcc::autodiff::{Graph, ParameterStore, Tensor};
use mpcc::cli::checkpoint::Checkpoint;
use mpcc::cli::metrics_log::{format_row, parse_row};
use mpcc::config::TrainConfig;
use mpcc::data::{gen_gmm2d, DataSpec};
use mpcc::losses::{cluster_ce, encoder_nll, hinge_d_loss, LossBreakdown};
use mpcc::metrics::{clustering_accuracy, ContingencyTable, MetricsRecord};
use mpcc::prior::{GmmPrior, PriorInit};
use mpcc::rng::seeded;
use mpcc::trainer::Model;
use proptest::prelude::*;

/// Best matching count by trying every injective map of the smaller side
/// into the larger one.
fn brute_force_best(t: &ContingencyTable) -> u64 {
    let (k, c) = (t.clusters(), t.classes());
    let (small, large) = (k.min(c), k.max(c));
    let get = |s: usize, l: usize| if k <= c { t.get(s, l) } else { t.get(l, s) };
    fn rec(i: usize, small: usize, large: usize, used: &mut Vec<bool>, get: &dyn Fn(usize, usize) -> u64) -> u64 {
        if i == small {
            return 0;
        }
        let mut best = 0;
        for l in 0..large {
            if !used[l] {
                used[l] = true;
                best = best.max(get(i, l) + rec(i + 1, small, large, used, get));
                used[l] = false;
            }
        }
        best
    }
    rec(0, small, large, &mut vec![false; large], &get)
}

fn table_strategy() -> impl Strategy<Value = ContingencyTable> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(k, c)| {
        prop::collection::vec(0u64..50, k * c)
            .prop_filter("non-empty", |v| v.iter().any(|&x| x > 0))
            .prop_map(move |counts| ContingencyTable::from_counts(k, c, counts).unwrap())
    })
}

fn small_model(k: usize, j: usize, seed: u64, iters: usize) -> Model {
    let cfg = TrainConfig {
        k,
        j,
        seed,
        g_hidden: vec![5],
        d_hidden: vec![4, 3],
        batch_size: 6,
        d_steps: 2,
        e_steps: 2,
        ..TrainConfig::default()
    };
    let data = gen_gmm2d(3, 8, 4.0, 0.5, seed).unwrap();
    let mut m = Model::new(cfg, 2).unwrap();
    for _ in 0..iters {
        m.train_iteration(&data).unwrap();
    }
    m
}

fn loss_bits(r: &MetricsRecord) -> Vec<u64> {
    let l = &r.losses;
    [l.d_loss, l.g_adv_loss, l.enc_nll, l.cluster_ce, l.prior_reg, r.acc, r.latent_mse, r.mmd]
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hungarian_matches_exhaustive_search(t in table_strategy()) {
        let acc = clustering_accuracy(&t).unwrap();
        prop_assert_eq!(acc, brute_force_best(&t) as f64 / t.total() as f64);
    }

    #[test]
    fn metrics_rows_round_trip(
        it in any::<u64>(),
        vals in prop::collection::vec(any::<f64>(), 8),
        cov in prop::option::of(0.0f64..=1.0),
    ) {
        let r = MetricsRecord {
            iteration: it,
            losses: LossBreakdown {
                d_loss: vals[0],
                g_adv_loss: vals[1],
                enc_nll: vals[2],
                cluster_ce: vals[3],
                prior_reg: vals[4],
            },
            acc: vals[5],
            latent_mse: vals[6],
            mmd: vals[7],
            mode_coverage: cov,
        };
        let back = parse_row(&format_row(&r)).unwrap();
        prop_assert_eq!(back.iteration, r.iteration);
        prop_assert_eq!(loss_bits(&back), loss_bits(&r));
        prop_assert_eq!(back.mode_coverage.map(f64::to_bits), r.mode_coverage.map(f64::to_bits));
    }

    #[test]
    fn membership_is_normalized(
        k in 1usize..8,
        j in 1usize..5,
        seed in any::<u64>(),
        reach in 0.0f64..50.0,
    ) {
        let mut rng = seeded(seed);
        let mut store = ParameterStore::new();
        let prior = GmmPrior::new(&mut store, k, j, 0.5, PriorInit::Gaussian, &mut rng).unwrap();
        let sigma = prior.sigma(&store);
        let z: Vec<f64> = (0..j).map(|d| prior.mu(&store)[d] + reach * sigma[d] * if d % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let lm = prior.log_membership(&store, &z);
        let total: f64 = lm.iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12, "sum {}", total);
        prop_assert!(lm.iter().all(|v| v.is_finite() && *v <= 0.0));
    }

    #[test]
    fn sigma_floor_projection_holds(raw in prop::collection::vec(-20.0f64..5.0, 6), floor in 0.01f64..3.0) {
        let mut rng = seeded(0);
        let mut store = ParameterStore::new();
        let prior = GmmPrior::new(&mut store, 3, 2, floor, PriorInit::Gaussian, &mut rng).unwrap();
        store.values_mut(prior.log_sigma_id()).copy_from_slice(&raw);
        prior.project_sigma_floor(&mut store);
        prop_assert!(prior.min_sigma(&store) >= floor);
        for (l, r) in prior.log_sigma(&store).iter().zip(&raw) {
            if r.exp() >= floor {
                prop_assert_eq!(l, r);
            }
        }
    }

    #[test]
    fn losses_invariant_under_batch_permutation(
        n in 2usize..12,
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let (j, k) = (3, 4);
        let mut rng = seeded(seed);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let rows = |w: usize, rng: &mut _| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..w).map(|_| Rng::random_range(rng, -2.0..2.0)).collect()).collect()
        };
        let permute = |m: &Vec<Vec<f64>>| -> Tensor {
            Tensor::from_rows(&perm.iter().map(|&i| m[i].clone()).collect::<Vec<_>>()).unwrap()
        };
        let real = rows(1, &mut rng);
        let fake = rows(1, &mut rng);
        let mean = rows(j, &mut rng);
        let lv = rows(j, &mut rng);
        let z = rows(j, &mut rng);
        let logits = rows(k, &mut rng);
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();

        let eval = |real: Tensor, fake: Tensor, mean: Tensor, lv: Tensor, z: Tensor, logits: Tensor, y: &[usize]| {
            let mut g = Graph::new();
            let (r, f) = (g.constant(real), g.constant(fake));
            let d = hinge_d_loss(&mut g, r, f).unwrap();
            let (m, l, zz) = (g.constant(mean), g.constant(lv), g.constant(z));
            let e = encoder_nll(&mut g, m, l, zz, 2).unwrap();
            let lg = g.constant(logits);
            let lse = g.log_sum_exp(lg);
            let lse = g.reshape(lse, &[y.len(), 1]).unwrap();
            let lse = g.concat(&vec![lse; k]).unwrap();
            let lm = g.sub(lg, lse).unwrap();
            let c = cluster_ce(&mut g, y, lm).unwrap();
            [g.value(d).item(), g.value(e).item(), g.value(c).item()]
        };
        let t = |m: &Vec<Vec<f64>>| Tensor::from_rows(m).unwrap();
        let a = eval(t(&real), t(&fake), t(&mean), t(&lv), t(&z), t(&logits), &y);
        let b = eval(permute(&real), permute(&fake), permute(&mean), permute(&lv), permute(&z), permute(&logits), &yp);
        for (x, w) in a.iter().zip(&b) {
            prop_assert!((x - w).abs() <= 1e-12 * x.abs().max(1.0), "{} vs {}", x, w);
        }
    }

    #[test]
    fn data_spec_display_round_trips(
        c in 1usize..10, n in 1usize..5000, sep in 0.5f64..20.0, noise in 0.01f64..3.0, seed in any::<u64>(), ring in any::<bool>(),
    ) {
        let spec = if ring {
            DataSpec::Ring { modes: c, n, noise, seed }
        } else {
            DataSpec::Gmm2d { c, n_per: n, separation: sep, noise, seed }
        };
        prop_assert_eq!(DataSpec::parse(&spec.to_string()).unwrap(), spec);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        k in 1usize..5,
        j in 1usize..4,
        seed in any::<u64>(),
        iters in 0usize..3,
        noise in prop::collection::vec(any::<f64>(), 4),
    ) {
        let mut model = small_model(k, j, seed, iters);
        // Arbitrary bit patterns, NaN and infinities included, must survive.
        let id = model.store().ids().next().unwrap();
        for (v, n) in model.store_mut().values_mut(id).iter_mut().zip(&noise) {
            *v = *n;
        }
        let bytes = Checkpoint::from_model(&model).unwrap().to_bytes();
        let ck = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(ck.to_bytes(), bytes.clone());
        let restored = ck.to_model().unwrap();
        prop_assert_eq!(Checkpoint::from_model(&restored).unwrap().to_bytes(), bytes);
    }
}
