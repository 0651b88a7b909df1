//! The alternating training loop.
//!
//! One iteration runs, in order: `d_steps` discriminator updates, one
//! generator update (which also moves the mixture means and scales at rate
//! `lr`), then `e_steps` encoder updates. Right after the first encoder update
//! the mixture parameters take one extra step at rate `lr_prior` on the
//! cluster cross-entropy plus the weighted prior regularizer. The sigma floor
//! is re-applied after every write to the mixture scales, and the generator's
//! moving average is refreshed after the generator update.

mod adam;
mod ema;

pub use adam::AdamState;
pub use ema::{ema_blend, EmaShadow};

use crate::autodiff::{Graph, ParamId, ParameterStore, Tensor, Var};
use crate::config::TrainConfig;
use crate::data::{DataSpec, Dataset};
use crate::error::{Error, Result};
use crate::losses::{self, BatchPieces, LossBreakdown};
use crate::metrics::{self, ContingencyTable, MetricsRecord};
use crate::networks::NetworkSet;
use crate::prior::GmmPrior;
use crate::rng::{self, Stream};

const INIT_STREAM: u64 = 0x494E_4954;
const TRAIN_STREAM: u64 = 0x5452_4149_4E00_0000;
const EVAL_STREAM: u64 = 0x4556_414C_0000_0000;
const HELD_OUT_STREAM: u64 = 0x484F_4C44;

/// Sub-steps of one iteration, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubStep {
    Discriminator(usize),
    Generator,
    Encoder(usize),
    Prior,
}

/// All trainable state: parameters, optimizer moments and the generator EMA.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub(crate) config: TrainConfig,
    pub(crate) data_dim: usize,
    pub(crate) store: ParameterStore,
    pub(crate) prior: GmmPrior,
    pub(crate) nets: NetworkSet,
    pub(crate) ema: EmaShadow,
    pub(crate) opt_d: AdamState,
    pub(crate) opt_g: AdamState,
    pub(crate) opt_e: AdamState,
    pub(crate) opt_p: AdamState,
    pub(crate) iteration: u64,
    pub(crate) last_losses: LossBreakdown,
}

fn generator_and_prior(nets: &NetworkSet, prior: &GmmPrior) -> Vec<ParamId> {
    let mut ids = nets.generator_params();
    ids.extend(prior.param_ids());
    ids
}

impl Model {
    /// Fresh initialization, seeded by `config.seed`.
    pub fn new(config: TrainConfig, data_dim: usize) -> Result<Self> {
        config.validate_structure()?;
        let mut init = rng::derived(config.seed, INIT_STREAM);
        let mut store = ParameterStore::new();
        let prior = GmmPrior::new(&mut store, config.k, config.j, config.sigma_min, config.prior_init, &mut init)?;
        let nets = NetworkSet::new(&mut store, config.network_config(data_dim), &mut init)?;
        Self::assemble(config, data_dim, store, prior, nets)
    }

    /// Rebinds to a store holding every parameter (checkpoint restore).
    /// Optimizer and EMA state start fresh and may be overwritten afterwards.
    pub fn from_store(config: TrainConfig, data_dim: usize, mut store: ParameterStore) -> Result<Self> {
        config.validate_structure()?;
        let prior = GmmPrior::attach(&store, config.k, config.j, config.sigma_min)?;
        let nets = NetworkSet::attach(&mut store, config.network_config(data_dim))?;
        Self::assemble(config, data_dim, store, prior, nets)
    }

    fn assemble(
        config: TrainConfig,
        data_dim: usize,
        store: ParameterStore,
        prior: GmmPrior,
        nets: NetworkSet,
    ) -> Result<Self> {
        let adam = |ids: Vec<ParamId>| AdamState::new(&store, ids, config.beta1, config.beta2, config.adam_eps);
        let opt_d = adam(nets.discriminator_params());
        let opt_g = adam(generator_and_prior(&nets, &prior));
        let opt_e = adam(nets.encoder_params());
        let opt_p = adam(prior.param_ids().to_vec());
        let ema = EmaShadow::new(&store, nets.generator_params());
        Ok(Self {
            config,
            data_dim,
            store,
            prior,
            nets,
            ema,
            opt_d,
            opt_g,
            opt_e,
            opt_p,
            iteration: 0,
            last_losses: LossBreakdown::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn prior(&self) -> &GmmPrior {
        &self.prior
    }

    pub fn networks(&self) -> &NetworkSet {
        &self.nets
    }

    pub fn ema(&self) -> &EmaShadow {
        &self.ema
    }

    /// Optimizers in the order discriminator, generator, encoder, prior.
    pub fn optimizers(&self) -> [&AdamState; 4] {
        [&self.opt_d, &self.opt_g, &self.opt_e, &self.opt_p]
    }

    pub fn optimizers_mut(&mut self) -> [&mut AdamState; 4] {
        [&mut self.opt_d, &mut self.opt_g, &mut self.opt_e, &mut self.opt_p]
    }

    pub fn ema_mut(&mut self) -> &mut EmaShadow {
        &mut self.ema
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn set_iteration(&mut self, iteration: u64) {
        self.iteration = iteration;
    }

    pub fn last_losses(&self) -> LossBreakdown {
        self.last_losses
    }

    /// Parameters with the generator replaced by its moving average.
    pub fn ema_store(&self) -> ParameterStore {
        self.ema.apply_to(&self.store)
    }

    /// Parameters each sub-step may write to.
    pub fn designated_params(&self, step: SubStep) -> Vec<ParamId> {
        match step {
            SubStep::Discriminator(_) => self.nets.discriminator_params(),
            SubStep::Generator => generator_and_prior(&self.nets, &self.prior),
            SubStep::Encoder(_) => self.nets.encoder_params(),
            SubStep::Prior => self.prior.param_ids().to_vec(),
        }
    }

    pub fn train_iteration(&mut self, data: &Dataset) -> Result<LossBreakdown> {
        self.train_iteration_observed(data, &mut |_, _| {})
    }

    /// As [`Self::train_iteration`], calling `observer` after each sub-step's
    /// gradients are in the store and before its optimizer step.
    pub fn train_iteration_observed(
        &mut self,
        data: &Dataset,
        observer: &mut dyn FnMut(SubStep, &ParameterStore),
    ) -> Result<LossBreakdown> {
        if data.dim() != self.data_dim {
            return Err(Error::ShapeMismatch {
                op: "train_iteration",
                lhs: vec![data.dim()],
                rhs: vec![self.data_dim],
            });
        }
        let cfg = self.config.clone();
        let it = self.iteration;
        let n = cfg.batch_size;
        let mut rng = rng::derived(cfg.seed, TRAIN_STREAM.wrapping_add(it));
        let mut pieces = BatchPieces::default();

        for step in 0..cfg.d_steps {
            let real = data.sample_batch(n, &mut rng)?;
            let (y, eps) = self.draw_latent_noise(n, &mut rng)?;
            let (prior, nets) = (&self.prior, &self.nets);
            pieces.d_loss = sub_step(&mut self.store, nets.discriminator_params(), it, "d_loss", |g, s| {
                let z = prior.latent_graph(g, s, &y, &eps)?;
                let fake = nets.generator_forward(g, s, z, &y)?;
                let xr = g.constant(real);
                let o_real = nets.discriminator_forward(g, s, xr)?;
                let o_fake = nets.discriminator_forward(g, s, fake)?;
                losses::hinge_d_loss(g, o_real, o_fake)
            })?;
            observer(SubStep::Discriminator(step), &self.store);
            self.opt_d.step(&mut self.store, cfg.lr)?;
        }

        {
            let (y, eps) = self.draw_latent_noise(n, &mut rng)?;
            let (prior, nets) = (&self.prior, &self.nets);
            pieces.g_adv_loss = sub_step(&mut self.store, generator_and_prior(nets, prior), it, "g_adv_loss", |g, s| {
                let z = prior.latent_graph(g, s, &y, &eps)?;
                let fake = nets.generator_forward(g, s, z, &y)?;
                let o_fake = nets.discriminator_forward(g, s, fake)?;
                losses::hinge_g_loss(g, o_fake)
            })?;
            observer(SubStep::Generator, &self.store);
            self.opt_g.step(&mut self.store, cfg.lr)?;
            self.prior.project_sigma_floor(&mut self.store);
            self.ema.update(&self.store, it, cfg.ema_start_iter, cfg.ema_decay);
        }

        for step in 0..cfg.e_steps {
            let (y, eps) = self.draw_latent_noise(n, &mut rng)?;
            let z = latent_values(&self.prior, &self.store, &y, &eps)?;
            let fake = self.nets.generate(&self.store, &z, &y)?;
            let (nets, data_dim) = (&self.nets, self.data_dim);
            pieces.enc_nll = sub_step(&mut self.store, nets.encoder_params(), it, "enc_nll", |g, s| {
                let x = g.constant(fake);
                let (mean, log_var) = nets.encoder_forward(g, s, x)?;
                let zc = g.constant(z);
                losses::encoder_nll(g, mean, log_var, zc, data_dim)
            })?;
            observer(SubStep::Encoder(step), &self.store);
            self.opt_e.step(&mut self.store, cfg.lr)?;

            if step == 0 {
                let prior = &self.prior;
                let mut ce = 0.0;
                let mut reg = 0.0;
                sub_step(&mut self.store, prior.param_ids().to_vec(), it, "cluster_ce", |g, s| {
                    let z = prior.latent_graph(g, s, &y, &eps)?;
                    let log_q = prior.log_membership_graph(g, s, z)?;
                    let c = losses::cluster_ce(g, &y, log_q)?;
                    let r = prior.scaled_regularizer_graph(g, s)?;
                    ce = g.value(c).item();
                    reg = g.value(r).item();
                    if !reg.is_finite() {
                        return Err(Error::NonFinite {
                            iteration: it,
                            term: "prior_reg".into(),
                        });
                    }
                    losses::prior_objective(g, c, r, cfg.lambda_p)
                })?;
                pieces.cluster_ce = ce;
                pieces.scaled_regularizer = reg;
                observer(SubStep::Prior, &self.store);
                self.opt_p.step(&mut self.store, cfg.lr_prior)?;
                self.prior.project_sigma_floor(&mut self.store);
            }
        }

        self.store.zero_grad();
        let out = LossBreakdown::assemble(&cfg, pieces);
        if let Some(term) = out.first_non_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                term: term.into(),
            });
        }
        self.iteration += 1;
        self.last_losses = out;
        Ok(out)
    }

    fn draw_latent_noise(&self, n: usize, rng: &mut Stream) -> Result<(Vec<usize>, Tensor)> {
        let y = self.prior.sample_y(n, rng)?;
        let eps = Tensor::matrix(n, self.config.j, rng::normals(rng, n * self.config.j))?;
        Ok((y, eps))
    }

    /// Cluster assignments of `x` under the current encoder and prior.
    pub fn assign(&self, x: &Tensor) -> Result<Vec<usize>> {
        metrics::assign_clusters(&self.prior, &self.nets, &self.store, x)
    }

    /// `n` samples per requested cluster from the EMA generator, with their
    /// latents.
    pub fn sample(&self, clusters: &[usize], rng: &mut Stream) -> Result<(Tensor, Tensor)> {
        let n = clusters.len();
        let eps = Tensor::matrix(n, self.config.j, rng::normals(rng, n * self.config.j))?;
        let ema = self.ema_store();
        let z = latent_values(&self.prior, &ema, clusters, &eps)?;
        let x = self.nets.generate(&ema, &z, clusters)?;
        Ok((x, z))
    }

    /// Scores the current state: accuracy on `data`, latent MSE, MMD against
    /// `ctx.reference` and mode coverage, using the EMA generator.
    pub fn evaluate(&self, data: &Dataset, ctx: &EvalContext) -> Result<MetricsRecord> {
        let labels = data
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("evaluation needs labeled data".into()))?;
        let pred = self.assign(&data.x)?;
        let table = ContingencyTable::from_labels(&pred, labels, self.config.k, data.classes)?;
        let acc = metrics::clustering_accuracy(&table)?;

        let mut rng = rng::derived(self.config.seed, EVAL_STREAM.wrapping_add(self.iteration));
        let n = self.config.eval_samples.max(2);
        let y = self.prior.sample_y(n, &mut rng)?;
        let (fake, z) = self.sample(&y, &mut rng)?;
        let mean = self.nets.encode_mean(&self.store, &fake)?;
        let latent_mse = metrics::latent_mse(&mean, &z)?;
        let bw = metrics::median_heuristic_bandwidths(&ctx.reference, &fake, 500);
        let mmd = metrics::mmd_rbf(&ctx.reference, &fake, &bw)?;
        let mode_coverage = match &ctx.centers {
            Some(c) => Some(metrics::mode_coverage(&fake, c, ctx.radius, self.config.coverage_min_hits)?),
            None => None,
        };
        Ok(MetricsRecord {
            iteration: self.iteration,
            losses: self.last_losses,
            acc,
            latent_mse,
            mmd,
            mode_coverage,
        })
    }
}

/// Builds a graph with `trainable` parameters, evaluates `build`, and leaves
/// the loss gradient in `store` (all other gradient buffers cleared).
fn sub_step(
    store: &mut ParameterStore,
    trainable: Vec<ParamId>,
    iteration: u64,
    term: &str,
    build: impl FnOnce(&mut Graph, &ParameterStore) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::with_trainable(trainable);
    let loss = build(&mut g, store)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            iteration,
            term: term.into(),
        });
    }
    g.backward(loss)?;
    store.zero_grad();
    g.accumulate_into(store);
    Ok(value)
}

/// `mu_y + sigma_y * eps` row by row, without a graph.
pub fn latent_values(prior: &GmmPrior, store: &ParameterStore, y: &[usize], eps: &Tensor) -> Result<Tensor> {
    let j = prior.j();
    let mut z = Vec::with_capacity(y.len() * j);
    for (i, &c) in y.iter().enumerate() {
        z.extend(prior.latent(store, c, eps.row(i))?.z);
    }
    Tensor::matrix(y.len(), j, z)
}

/// Fixed inputs for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalContext {
    /// Real samples the generator is compared against.
    pub reference: Tensor,
    pub centers: Option<Vec<Vec<f64>>>,
    pub radius: f64,
}

impl EvalContext {
    /// Held-out draws for synthetic data (a resample of `data` otherwise),
    /// with coverage radius `config.coverage_radius`, or three noise
    /// standard deviations when that is 0.
    pub fn new(config: &TrainConfig, data: &Dataset, spec: Option<&DataSpec>) -> Result<Self> {
        let n = config.eval_samples.max(2);
        let mut held = rng::derived(config.seed, HELD_OUT_STREAM);
        let fresh = match spec {
            Some(s) => s.held_out(data, n, rand::Rng::random(&mut held))?,
            None => None,
        };
        let reference = match fresh {
            Some(t) => t,
            None => data.sample_batch(n, &mut held)?,
        };
        let radius = if config.coverage_radius > 0.0 {
            config.coverage_radius
        } else {
            3.0 * data.noise.unwrap_or(0.0)
        };
        Ok(Self {
            reference,
            centers: data.centers.clone(),
            radius,
        })
    }
}

/// Runs `model` up to `config.total_iters`, evaluating every `eval_interval`
/// iterations and after the last one. `hook` sees the model after every
/// iteration together with the record evaluated at that point, if any.
pub fn run_training(
    model: &mut Model,
    data: &Dataset,
    ctx: &EvalContext,
    mut hook: impl FnMut(&Model, Option<&MetricsRecord>) -> Result<()>,
) -> Result<Vec<MetricsRecord>> {
    let total = model.config.total_iters;
    let every = model.config.eval_interval;
    let mut log = Vec::new();
    while model.iteration < total {
        model.train_iteration(data)?;
        let it = model.iteration;
        if it % every == 0 || it == total {
            let rec = model.evaluate(data, ctx)?;
            hook(model, Some(&rec))?;
            log.push(rec);
        } else {
            hook(model, None)?;
        }
    }
    Ok(log)
}

/// Fresh model trained on `data` per `config`.
pub fn train(config: &TrainConfig, data: &Dataset, spec: Option<&DataSpec>) -> Result<(Model, Vec<MetricsRecord>)> {
    let mut model = Model::new(config.clone(), data.dim())?;
    let ctx = EvalContext::new(config, data, spec)?;
    let log = run_training(&mut model, data, &ctx, |_, _| Ok(()))?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gmm2d;

    fn small_config() -> TrainConfig {
        TrainConfig {
            g_hidden: vec![8, 8],
            d_hidden: vec![8, 8],
            batch_size: 16,
            total_iters: 3,
            eval_interval: 2,
            eval_samples: 50,
            ..TrainConfig::default()
        }
    }

    fn small_data() -> Dataset {
        gen_gmm2d(5, 40, 6.0, 1.0, 0).unwrap()
    }

    #[test]
    fn one_iteration_is_finite_and_floors_sigma() {
        let data = small_data();
        let mut m = Model::new(small_config(), 2).unwrap();
        let l = m.train_iteration(&data).unwrap();
        assert!(l.first_non_finite().is_none());
        assert!(m.prior.min_sigma(&m.store) >= 0.5);
        assert_eq!(m.iteration(), 1);
    }

    #[test]
    fn zero_rates_leave_parameters_bit_identical() {
        let data = small_data();
        let cfg = TrainConfig {
            lr: 0.0,
            lr_prior: 0.0,
            ..small_config()
        };
        let mut m = Model::new(cfg, 2).unwrap();
        let before: Vec<Vec<u64>> = m.store.iter().map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect()).collect();
        m.train_iteration(&data).unwrap();
        let after: Vec<Vec<u64>> = m.store.iter().map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn sub_steps_run_in_order_and_touch_only_their_parameters() {
        let data = small_data();
        let mut m = Model::new(small_config(), 2).unwrap();
        let designated: Vec<(SubStep, Vec<ParamId>)> = [
            SubStep::Discriminator(0),
            SubStep::Generator,
            SubStep::Encoder(0),
            SubStep::Prior,
        ]
        .into_iter()
        .map(|s| (s, m.designated_params(s)))
        .collect();
        let mut seen = Vec::new();
        let mut violations = Vec::new();
        m.train_iteration_observed(&data, &mut |step, store| {
            seen.push(step);
            let allowed = &designated
                .iter()
                .find(|(s, _)| std::mem::discriminant(s) == std::mem::discriminant(&step))
                .unwrap()
                .1;
            for (id, p) in store.iter() {
                let inside = allowed.contains(&id);
                match (&p.grad, inside) {
                    (Some(g), false) if g.iter().any(|v| *v != 0.0) => violations.push(p.name.clone()),
                    (None, true) => violations.push(format!("{} missing", p.name)),
                    _ => {}
                }
            }
        })
        .unwrap();
        assert!(violations.is_empty(), "{violations:?}");
        use SubStep::*;
        assert_eq!(
            seen,
            vec![
                Discriminator(0),
                Discriminator(1),
                Discriminator(2),
                Discriminator(3),
                Generator,
                Encoder(0),
                Prior,
                Encoder(1),
                Encoder(2),
                Encoder(3)
            ]
        );
    }

    #[test]
    fn optimizer_versions_follow_update_order() {
        let data = small_data();
        let mut m = Model::new(small_config(), 2).unwrap();
        let mu = m.prior.mu_id();
        let gen0 = m.nets.generator_params()[0];
        let disc_last = *m.nets.discriminator_params().last().unwrap();
        let enc_last = *m.nets.encoder_params().last().unwrap();
        let mut log = Vec::new();
        m.train_iteration_observed(&data, &mut |step, store| {
            let v = |id: ParamId| store.get(id).version;
            log.push((step, v(disc_last), v(gen0), v(enc_last), v(mu)));
        })
        .unwrap();
        // D steps see 0..3 prior discriminator updates and no others
        for (i, entry) in log[..4].iter().enumerate() {
            assert_eq!(*entry, (SubStep::Discriminator(i), i as u64, 0, 0, 0));
        }
        assert_eq!(log[4], (SubStep::Generator, 4, 0, 0, 0));
        assert_eq!(log[5], (SubStep::Encoder(0), 4, 1, 0, 1));
        assert_eq!(log[6], (SubStep::Prior, 4, 1, 1, 1));
        assert_eq!(log[7], (SubStep::Encoder(1), 4, 1, 1, 2));
    }

    #[test]
    fn run_training_is_deterministic() {
        let data = small_data();
        let cfg = small_config();
        let (a, la) = train(&cfg, &data, None).unwrap();
        let (b, lb) = train(&cfg, &data, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(la.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let data = small_data();
        let cfg = TrainConfig {
            total_iters: 0,
            ..small_config()
        };
        let (m, log) = train(&cfg, &data, None).unwrap();
        assert!(log.is_empty());
        assert_eq!(m, Model::new(cfg, 2).unwrap());
    }

    #[test]
    fn non_finite_loss_aborts_with_iteration() {
        let data = small_data();
        let mut m = Model::new(small_config(), 2).unwrap();
        m.train_iteration(&data).unwrap();
        let w = m.nets.discriminator_params()[0];
        m.store.values_mut(w)[0] = f64::NAN;
        match m.train_iteration(&data) {
            Err(Error::NonFinite { iteration: 1, term }) => assert_eq!(term, "d_loss"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let data = small_data();
        let mut m = Model::new(small_config(), 3).unwrap();
        assert!(m.train_iteration(&data).is_err());
    }
}
