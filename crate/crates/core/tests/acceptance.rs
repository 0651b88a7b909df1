//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! straight to stderr (bypassing output capture) and then asserts.
//! Tests are serialized so wall-clock budgets are measured without
//! interference.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use mpcc::autodiff::{finite_difference_check, Graph, ParamId, ParameterStore, Tensor};
use mpcc::config::TrainConfig;
use mpcc::data::DataSpec;
use mpcc::losses::{cluster_ce, encoder_nll, hinge_d_loss, hinge_g_loss, prior_objective};
use mpcc::metrics::{clustering_accuracy, ContingencyTable};
use mpcc::networks::{Conditioning, NetworkConfig, NetworkSet};
use mpcc::prior::{GmmPrior, PriorInit};
use mpcc::rng::{normals, seeded};
use mpcc::trainer::{train, EmaShadow, Model, SubStep};
use mpcc::verify::mc::{mc_estimate_check, GaussianPair, MC_DRAWS};
use mpcc::verify::run_suite;
use rand::Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{verdict}] criterion {n:>2}: {title}: {detail}");
    assert!(pass, "criterion {n} ({title}) failed: {detail}");
}

#[test]
fn criterion_01_identity_suite() {
    let _g = serial();
    let t = Instant::now();
    let suite = run_suite(100, 1e-10, 0, 0, 2024).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let all_ran = suite.identities.len() == 5 && suite.identities.iter().all(|s| s.trials == 100);
    let worst = suite.identities.iter().map(|s| s.worst).fold(0.0, f64::max);
    let detail: Vec<String> = suite
        .identities
        .iter()
        .map(|s| format!("{}={}/{}", s.name, s.trials - s.failures, s.trials))
        .collect();
    report(
        1,
        "KL identity suite",
        all_ran && suite.passed() && secs < 30.0,
        &format!("{}; worst gap {worst:.2e}; {secs:.2} s", detail.join(" ")),
    );
}

struct GradFixture {
    store: ParameterStore,
    nets: NetworkSet,
    prior: GmmPrior,
    x_real: Tensor,
    y: Vec<usize>,
    eps: Tensor,
    data_dim: usize,
}

impl GradFixture {
    fn new(seed: u64) -> Self {
        let mut r = seeded(seed);
        let k = r.random_range(2..=5);
        let j = r.random_range(1..=3);
        let d = r.random_range(2..=4);
        let n = r.random_range(2..=6);
        let share = r.random_bool(0.5);
        let conditioning = if r.random_bool(0.5) {
            Conditioning::ZOnly
        } else {
            Conditioning::Embedding { dim: 2 }
        };
        let mut store = ParameterStore::new();
        let nets = NetworkSet::new(
            &mut store,
            NetworkConfig {
                data_dim: d,
                latent_dim: j,
                clusters: k,
                g_hidden: vec![r.random_range(3..=6), r.random_range(3..=6)],
                d_hidden: vec![r.random_range(3..=6), r.random_range(3..=6)],
                share_trunk: share,
                trunk_depth: None,
                conditioning,
                init_std: 0.4,
            },
            &mut r,
        )
        .unwrap();
        let prior = GmmPrior::new(&mut store, k, j, 0.5, PriorInit::Gaussian, &mut r).unwrap();
        // Move sigmas off 1 so every term sees a generic point.
        for l in store.values_mut(prior.log_sigma_id()) {
            *l = r.random_range(-0.5..0.7);
        }
        let x_real = Tensor::matrix(n, d, (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let y = (0..n).map(|_| r.random_range(0..k)).collect();
        let eps = Tensor::matrix(n, j, normals(&mut r, n * j)).unwrap();
        Self {
            store,
            nets,
            prior,
            x_real,
            y,
            eps,
            data_dim: d,
        }
    }

    fn scores(&self, g: &mut Graph, s: &ParameterStore) -> (mpcc::autodiff::Var, mpcc::autodiff::Var) {
        let xr = g.constant(self.x_real.clone());
        let z = self.prior.latent_graph(g, s, &self.y, &self.eps).unwrap();
        let xf = self.nets.generator_forward(g, s, z, &self.y).unwrap();
        let or = self.nets.discriminator_forward(g, s, xr).unwrap();
        let of = self.nets.discriminator_forward(g, s, xf).unwrap();
        (or, of)
    }

    /// Distance of the hinge arguments from their kinks.
    fn hinge_clearance(&self) -> f64 {
        let mut g = Graph::new();
        let (or, of) = self.scores(&mut g, &self.store);
        let a = g.value(or).data().iter().map(|o| (1.0 - o).abs());
        let b = g.value(of).data().iter().map(|o| (1.0 + o).abs());
        a.chain(b).fold(f64::INFINITY, f64::min)
    }
}

#[test]
fn criterion_02_gradient_checks() {
    let _g = serial();
    const STEP: f64 = 1e-6;
    const TOL: f64 = 1e-4;
    let t = Instant::now();
    let mut configs = 0;
    let mut worst = [0.0f64; 6];
    let mut all_pass = true;
    let mut seed = 0u64;
    while configs < 24 {
        seed += 1;
        let fx = GradFixture::new(seed);
        if fx.hinge_clearance() < 1e-3 {
            continue;
        }
        configs += 1;
        let lambda_p = if configs % 2 == 0 { 0.01 } else { seeded(seed).random_range(0.05..2.0) };
        let disc = fx.nets.discriminator_params();
        let mut gen = fx.nets.generator_params();
        gen.extend(fx.prior.param_ids());
        let enc = fx.nets.encoder_params();
        let prior_ids = fx.prior.param_ids().to_vec();
        let fx = &fx;

        let checks: [(&[ParamId], Box<dyn Fn(&mut Graph, &ParameterStore) -> mpcc::Result<mpcc::autodiff::Var>>); 6] = [
            (&disc, Box::new(|g, s| {
                let (or, of) = fx.scores(g, s);
                hinge_d_loss(g, or, of)
            })),
            (&gen, Box::new(|g, s| {
                let (_, of) = fx.scores(g, s);
                hinge_g_loss(g, of)
            })),
            (&enc, Box::new(|g, s| {
                let z = fx.prior.latent_graph(g, s, &fx.y, &fx.eps)?;
                let x = fx.nets.generator_forward(g, s, z, &fx.y)?;
                let (m, lv) = fx.nets.encoder_forward(g, s, x)?;
                encoder_nll(g, m, lv, z, fx.data_dim)
            })),
            (&prior_ids, Box::new(|g, s| {
                let z = fx.prior.latent_graph(g, s, &fx.y, &fx.eps)?;
                let lm = fx.prior.log_membership_graph(g, s, z)?;
                cluster_ce(g, &fx.y, lm)
            })),
            (&prior_ids, Box::new(move |g, s| {
                let reg = fx.prior.scaled_regularizer_graph(g, s)?;
                Ok(g.scale(reg, lambda_p))
            })),
            (&prior_ids, Box::new(move |g, s| {
                let z = fx.prior.latent_graph(g, s, &fx.y, &fx.eps)?;
                let lm = fx.prior.log_membership_graph(g, s, z)?;
                let ce = cluster_ce(g, &fx.y, lm)?;
                let reg = fx.prior.scaled_regularizer_graph(g, s)?;
                prior_objective(g, ce, reg, lambda_p)
            })),
        ];
        for (i, (ids, f)) in checks.iter().enumerate() {
            let rep = finite_difference_check(|g, s| f(g, s), &fx.store, ids, STEP, TOL).unwrap();
            worst[i] = worst[i].max(rep.max_rel_err());
            all_pass &= rep.passed();
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let names = ["hinge_d", "hinge_g", "encoder_nll", "cluster_ce", "lambda*reg", "prior_total"];
    let detail: Vec<String> = names.iter().zip(worst).map(|(n, w)| format!("{n}={w:.1e}")).collect();
    report(
        2,
        "gradient checks",
        all_pass && configs >= 20 && secs < 60.0,
        &format!("{configs} configs, max rel err {}; {secs:.2} s", detail.join(" ")),
    );
}

#[test]
fn criterion_03_membership_normalization() {
    let _g = serial();
    let mut r = seeded(3);
    let mut worst = 0.0f64;
    let mut max_reach = 0.0f64;
    for _ in 0..10_000 {
        let k = r.random_range(1..=10);
        let j = r.random_range(1..=6);
        let mut store = ParameterStore::new();
        let prior = GmmPrior::new(&mut store, k, j, 0.5, PriorInit::Gaussian, &mut r).unwrap();
        for v in store.values_mut(prior.mu_id()) {
            *v *= 3.0;
        }
        for l in store.values_mut(prior.log_sigma_id()) {
            *l = r.random_range(0.5f64.ln()..2.0f64.ln());
        }
        let anchor = r.random_range(0..k);
        let reach = r.random_range(0.0..50.0);
        let mu = prior.mu(&store).to_vec();
        let sigma = prior.sigma(&store);
        let dir = normals(&mut r, j);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let z: Vec<f64> = (0..j)
            .map(|d| mu[anchor * j + d] + reach * sigma[anchor * j + d] * dir[d] / norm)
            .collect();
        let total: f64 = prior.log_membership(&store, &z).iter().map(|v| v.exp()).sum();
        worst = worst.max((total - 1.0).abs());
        max_reach = max_reach.max(reach);
    }
    report(
        3,
        "membership normalization",
        worst <= 1e-12,
        &format!("10000 pairs, reach up to {max_reach:.1} sigma, worst |sum-1| = {worst:.2e}"),
    );
}

#[test]
fn criterion_04_sigma_floor() {
    let _g = serial();
    let cfg = TrainConfig {
        lr_prior: 1e-2,
        total_iters: 500,
        ..TrainConfig::default()
    };
    let spec = DataSpec::parse(&cfg.dataset).unwrap();
    let data = spec.load().unwrap();
    let mut model = Model::new(cfg.clone(), data.dim()).unwrap();
    let mut lowest = f64::INFINITY;
    let mut at_floor = 0;
    for _ in 0..cfg.total_iters {
        model.train_iteration(&data).unwrap();
        let m = model.prior().min_sigma(model.store());
        lowest = lowest.min(m);
        if m == cfg.sigma_min {
            at_floor += 1;
        }
    }
    report(
        4,
        "sigma floor",
        lowest >= cfg.sigma_min,
        &format!("min sigma over 500 iterations = {lowest}, floor active after {at_floor} iterations"),
    );
}

/// Best matching count over every injective map of the smaller side into the
/// larger one.
fn exhaustive_best(t: &ContingencyTable) -> u64 {
    let (k, c) = (t.clusters(), t.classes());
    let (small, large) = (k.min(c), k.max(c));
    let cell = |s: usize, l: usize| if k <= c { t.get(s, l) } else { t.get(l, s) };
    let mut perm: Vec<usize> = (0..large).collect();
    let mut best = 0;
    // Heap's algorithm over all permutations of the larger side.
    let mut stack = vec![0usize; large];
    let score = |p: &[usize]| (0..small).map(|s| cell(s, p[s])).sum::<u64>();
    best = best.max(score(&perm));
    let mut i = 0;
    while i < large {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            best = best.max(score(&perm));
            stack[i] += 1;
            i = 0;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    best
}

#[test]
fn criterion_05_hungarian_exact() {
    let _g = serial();
    let mut r = seeded(5);
    let mut mismatches = 0;
    for _ in 0..200 {
        let k = r.random_range(1..=6);
        let c = r.random_range(1..=6);
        let mut counts: Vec<u64> = (0..k * c).map(|_| r.random_range(0..100)).collect();
        counts[0] += 1;
        let t = ContingencyTable::from_counts(k, c, counts).unwrap();
        let acc = clustering_accuracy(&t).unwrap();
        if acc != exhaustive_best(&t) as f64 / t.total() as f64 {
            mismatches += 1;
        }
    }
    report(5, "Hungarian accuracy", mismatches == 0, &format!("200 tables, {mismatches} mismatches"));
}

#[test]
fn criterion_06_gradient_partition() {
    let _g = serial();
    let cfg = TrainConfig::default();
    let spec = DataSpec::parse(&cfg.dataset).unwrap();
    let data = spec.load().unwrap();
    let mut model = Model::new(cfg.clone(), data.dim()).unwrap();
    for _ in 0..3 {
        model.train_iteration(&data).unwrap();
    }
    let sets: Vec<(SubStep, Vec<ParamId>)> = [SubStep::Discriminator(0), SubStep::Generator, SubStep::Encoder(0), SubStep::Prior]
        .into_iter()
        .map(|s| (s, model.designated_params(s)))
        .collect();
    let designated = |step: SubStep| -> &Vec<ParamId> {
        let key = match step {
            SubStep::Discriminator(_) => 0,
            SubStep::Generator => 1,
            SubStep::Encoder(_) => 2,
            SubStep::Prior => 3,
        };
        &sets[key].1
    };
    let mut steps = Vec::new();
    let mut leaks = Vec::new();
    let mut vacuous = Vec::new();
    model
        .train_iteration_observed(&data, &mut |step, store| {
            steps.push(step);
            let allowed = designated(step);
            let mut any_signal = false;
            for (id, p) in store.iter() {
                let nonzero = store.grad(id).is_some_and(|g| g.iter().any(|v| *v != 0.0));
                if allowed.contains(&id) {
                    any_signal |= nonzero;
                } else if nonzero {
                    leaks.push(format!("{step:?}:{}", p.name));
                }
            }
            if !any_signal {
                vacuous.push(format!("{step:?}"));
            }
        })
        .unwrap();
    let expected = cfg.d_steps + cfg.e_steps + 2;
    report(
        6,
        "gradient-flow partition",
        leaks.is_empty() && vacuous.is_empty() && steps.len() == expected,
        &format!("{} sub-steps inspected, leaks {leaks:?}, steps without gradient {vacuous:?}", steps.len()),
    );
}

fn gmm_config(seed: u64, lr_prior: f64) -> TrainConfig {
    TrainConfig {
        seed,
        lr_prior,
        total_iters: 10_000,
        eval_interval: 10_000,
        ..TrainConfig::default()
    }
}

struct Runs {
    accs: Vec<f64>,
    secs: f64,
}

fn gmm_runs(lr_prior: f64) -> &'static Runs {
    static FAST: OnceLock<Runs> = OnceLock::new();
    static SLOW: OnceLock<Runs> = OnceLock::new();
    let cell = if lr_prior == 6e-4 { &FAST } else { &SLOW };
    cell.get_or_init(|| {
        let t = Instant::now();
        let accs = (0..3)
            .map(|seed| {
                let cfg = gmm_config(seed, lr_prior);
                let spec = DataSpec::parse(&cfg.dataset).unwrap();
                let data = spec.load().unwrap();
                let (_, log) = train(&cfg, &data, Some(&spec)).unwrap();
                log.last().unwrap().acc
            })
            .collect();
        Runs {
            accs,
            secs: t.elapsed().as_secs_f64(),
        }
    })
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(", ")
}

#[test]
fn criterion_07_gmm_clustering() {
    let _g = serial();
    let cfg = gmm_config(0, 6e-4);
    assert_eq!(cfg.dataset, "gmm2d:c=5,n_per=2000,separation=6,noise=1,seed=0");
    let runs = gmm_runs(6e-4);
    let best = runs.accs.iter().copied().fold(0.0, f64::max);
    report(
        7,
        "desk-scale clustering",
        best >= 0.95 && runs.secs < 900.0,
        &format!("ACC per seed [{}], best {best:.4}; 3 runs in {:.0} s", fmt_list(&runs.accs), runs.secs),
    );
}

#[test]
fn criterion_08_ring_mode_coverage() {
    let _g = serial();
    let t = Instant::now();
    let mut results = Vec::new();
    for seed in 0..3 {
        let cfg = TrainConfig {
            k: 8,
            seed,
            ema_decay: 0.999,
            total_iters: 10_000,
            eval_interval: 10_000,
            dataset: "ring:modes=8,n=4000,noise=0.05,seed=0".into(),
            ..TrainConfig::default()
        };
        let spec = DataSpec::parse(&cfg.dataset).unwrap();
        let data = spec.load().unwrap();
        let (_, log) = train(&cfg, &data, Some(&spec)).unwrap();
        let rec = log.last().unwrap();
        results.push((rec.mode_coverage.unwrap(), rec.mmd));
    }
    let ok = results.iter().any(|&(cov, mmd)| cov >= 7.0 / 8.0 && mmd < 0.05);
    let detail: Vec<String> = results
        .iter()
        .map(|(c, m)| format!("{}/8 modes, MMD2 {m:.4}", (c * 8.0).round()))
        .collect();
    report(
        8,
        "ring mode coverage",
        ok,
        &format!("[{}]; {:.0} s", detail.join("; "), t.elapsed().as_secs_f64()),
    );
}

#[test]
fn criterion_09_prior_rate_ablation() {
    let _g = serial();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fast = gmm_runs(6e-4);
    let slow = gmm_runs(2e-4);
    let (a, b) = (mean(&fast.accs), mean(&slow.accs));
    report(
        9,
        "prior learning-rate ablation",
        a >= b - 0.02,
        &format!(
            "mean ACC {a:.4} at 6e-4 [{}] vs {b:.4} at 2e-4 [{}]",
            fmt_list(&fast.accs),
            fmt_list(&slow.accs)
        ),
    );
}

#[test]
fn criterion_10_ema_closed_form() {
    let _g = serial();
    const N: u64 = 100;

    // Power-of-two decay with a zero target: every operation is exact, so the
    // closed form must agree to the bit.
    let mut store = ParameterStore::new();
    let zero = store.add("g.zero", Tensor::zeros(&[4])).unwrap();
    let same = store.add("g.same", Tensor::new(vec![3], vec![0.375, -6.0, 1e-3]).unwrap()).unwrap();
    let mut ema = EmaShadow::new(&store, vec![zero, same]);
    let start = [1.0, -3.0, 0.75, 2f64.powi(-20)];
    ema.set_values(0, start.to_vec()).unwrap();
    for it in 0..N {
        ema.update(&store, it, 0, 0.5);
    }
    let dn = 0.5f64.powi(N as i32);
    let dyadic_exact = ema.values(0).iter().zip(start).all(|(s, s0)| *s == dn * s0 + (1.0 - dn) * 0.0)
        && ema.values(1).iter().zip(store.values(same)).all(|(s, t)| *s == dn * t + (1.0 - dn) * t);

    // Frozen generator inside the full training loop: zero learning rates,
    // averaging from the first iteration.
    let mut recursion_exact = true;
    let mut closed_gap = 0.0f64;
    for decay in [0.9999, 0.999, 0.9] {
        let cfg = TrainConfig {
            lr: 0.0,
            lr_prior: 0.0,
            ema_start_iter: 0,
            ema_decay: decay,
            g_hidden: vec![16, 16],
            d_hidden: vec![16, 16],
            ..TrainConfig::default()
        };
        let spec = DataSpec::parse(&cfg.dataset).unwrap();
        let data = spec.load().unwrap();
        let mut model = Model::new(cfg, data.dim()).unwrap();
        let ids = model.ema().params().to_vec();
        let theta: Vec<Vec<f64>> = ids.iter().map(|&id| model.store().values(id).to_vec()).collect();
        let mut r = seeded(10);
        let shadow0: Vec<Vec<f64>> = theta
            .iter()
            .map(|t| t.iter().map(|v| v + r.random_range(-1.0..1.0)).collect())
            .collect();
        for (i, s) in shadow0.iter().enumerate() {
            model.ema_mut().set_values(i, s.clone()).unwrap();
        }
        for _ in 0..N {
            model.train_iteration(&data).unwrap();
        }
        let dn = decay.powi(N as i32);
        for (i, &id) in ids.iter().enumerate() {
            assert_eq!(model.store().values(id), theta[i].as_slice(), "generator moved");
            for ((s, &s0), &t) in model.ema().values(i).iter().zip(&shadow0[i]).zip(&theta[i]) {
                let mut oracle = s0;
                for _ in 0..N {
                    oracle = decay * oracle + (1.0 - decay) * t;
                }
                recursion_exact &= s.to_bits() == oracle.to_bits();
                let closed = dn * s0 + (1.0 - dn) * t;
                closed_gap = closed_gap.max((s - closed).abs() / closed.abs().max(1.0));
            }
        }
    }
    report(
        10,
        "EMA closed form",
        dyadic_exact && recursion_exact && closed_gap < 1e-12,
        &format!(
            "dyadic case bit-exact: {dyadic_exact}; recursion bit-exact: {recursion_exact}; \
             max relative gap to closed form {closed_gap:.2e}"
        ),
    );
}

#[test]
fn criterion_11_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.txt");
    std::fs::write(
        &cfg,
        "total_iters = 300\neval_interval = 100\ncheckpoint_interval = 150\neval_samples = 300\nseed = 7\n",
    )
    .unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let args = ["mpcc", "train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        let code = mpcc::cli::run(args, &mut std::io::sink(), &mut std::io::sink());
        assert_eq!(code, 0);
        out
    };
    let (a, b) = (run("a"), run("b"));
    let files = ["metrics.csv", "checkpoint.bin", "checkpoint_00000150.bin", "checkpoint_00000300.bin"];
    let mut differing = Vec::new();
    for f in files {
        if std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap() {
            differing.push(f);
        }
    }
    let rows = std::fs::read_to_string(a.join("metrics.csv")).unwrap().lines().count() - 1;
    report(
        11,
        "determinism",
        differing.is_empty() && rows == 3,
        &format!("{} files compared, {rows} log rows, differing: {differing:?}", files.len()),
    );
}

#[test]
fn criterion_12_monte_carlo_consistency() {
    let _g = serial();
    let mut r = seeded(12);
    let mut zs = Vec::new();
    for _ in 0..10 {
        let j = r.random_range(1..=4);
        let pair = GaussianPair::random(j, &mut r);
        let rep = mc_estimate_check(&pair, MC_DRAWS, &mut r).unwrap();
        assert_eq!(rep.draws, 1_000_000);
        zs.push(rep.z_score());
    }
    let worst = zs.iter().copied().fold(0.0, f64::max);
    report(
        12,
        "Monte Carlo cross-entropy",
        zs.iter().all(|z| *z <= 3.0),
        &format!("10 configs at 1e6 draws, |z| = [{}], worst {worst:.2}", fmt_list(&zs)),
    );
}
