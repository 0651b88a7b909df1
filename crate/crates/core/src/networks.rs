//! Generator, encoder and discriminator MLPs.
//!
//! Hidden layers use leaky-ReLU(0.2). The encoder and discriminator may share
//! their first `trunk_depth` hidden layers; shared layers are registered once
//! in the store (under `trunk.*`) and both layer lists point at the same ids.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    Tanh,
    Linear,
    /// Two equal-width linear outputs (mean, log-variance).
    LinearPair,
}

/// Layer widths from input to output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub head: OutputHead,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, head: OutputHead) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::InvalidArgument(
                "an MLP needs at least one hidden layer".into(),
            ));
        }
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        if widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer widths must be positive: {widths:?}"
            )));
        }
        Ok(Self { widths, head })
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Conditioning {
    /// The generator sees only `z`.
    #[default]
    ZOnly,
    /// A learnable `K × dim` embedding of `y` is appended to `z`.
    Embedding { dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub clusters: usize,
    pub g_hidden: Vec<usize>,
    pub d_hidden: Vec<usize>,
    pub share_trunk: bool,
    /// Shared hidden layers; `None` means all but the last.
    pub trunk_depth: Option<usize>,
    pub conditioning: Conditioning,
    pub init_std: f64,
}

impl NetworkConfig {
    pub fn effective_trunk_depth(&self) -> usize {
        if !self.share_trunk {
            return 0;
        }
        self.trunk_depth
            .unwrap_or(self.d_hidden.len().saturating_sub(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSet {
    config: NetworkConfig,
    generator: Vec<Layer>,
    embedding: Option<ParamId>,
    discriminator: Vec<Layer>,
    encoder: Vec<Layer>,
    trunk_depth: usize,
}

impl NetworkSet {
    /// Registers freshly initialized parameters: weights `N(0, init_std^2)`,
    /// biases zero.
    pub fn new(store: &mut ParameterStore, config: NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::build(store, config, Some(rng))
    }

    /// Binds to parameters already present in `store` (e.g. after loading a
    /// checkpoint).
    pub fn attach(store: &mut ParameterStore, config: NetworkConfig) -> Result<Self> {
        Self::build::<rand_chacha::ChaCha8Rng>(store, config, None)
    }

    fn build<R: Rng>(
        store: &mut ParameterStore,
        config: NetworkConfig,
        mut rng: Option<&mut R>,
    ) -> Result<Self> {
        let trunk_depth = config.effective_trunk_depth();
        if trunk_depth > config.d_hidden.len() {
            return Err(Error::InvalidArgument(format!(
                "trunk depth {trunk_depth} exceeds {} discriminator hidden layers",
                config.d_hidden.len()
            )));
        }
        let embed_dim = match config.conditioning {
            Conditioning::ZOnly => 0,
            Conditioning::Embedding { dim } => dim,
        };
        let g_spec = MlpSpec::new(
            config.latent_dim + embed_dim,
            &config.g_hidden,
            config.data_dim,
            OutputHead::Tanh,
        )?;
        let d_spec = MlpSpec::new(config.data_dim, &config.d_hidden, 1, OutputHead::Linear)?;
        let e_spec = MlpSpec::new(
            config.data_dim,
            &config.d_hidden,
            2 * config.latent_dim,
            OutputHead::LinearPair,
        )?;

        let std = config.init_std;
        let mut generator = Vec::new();
        for (i, w) in g_spec.widths.windows(2).enumerate() {
            generator.push(make_layer(store, std, rng.as_deref_mut(), format!("gen.l{i}"), w[0], w[1])?);
        }
        let embedding = match config.conditioning {
            Conditioning::ZOnly => None,
            Conditioning::Embedding { dim } => Some(match rng.as_deref_mut() {
                Some(r) => {
                    let e: Vec<f64> = rng::normals(r, config.clusters * dim)
                        .into_iter()
                        .map(|v| v * std)
                        .collect();
                    store.add("gen.embed", Tensor::matrix(config.clusters, dim, e)?)?
                }
                None => store.id("gen.embed")?,
            }),
        };

        let mut trunk = Vec::new();
        for i in 0..trunk_depth {
            let (a, b) = (d_spec.widths[i], d_spec.widths[i + 1]);
            trunk.push(make_layer(store, std, rng.as_deref_mut(), format!("trunk.l{i}"), a, b)?);
        }
        let mut discriminator = trunk.clone();
        for i in trunk_depth..d_spec.widths.len() - 1 {
            let (a, b) = (d_spec.widths[i], d_spec.widths[i + 1]);
            discriminator.push(make_layer(store, std, rng.as_deref_mut(), format!("disc.l{i}"), a, b)?);
        }
        let mut encoder = trunk;
        for i in trunk_depth..e_spec.widths.len() - 1 {
            let (a, b) = (e_spec.widths[i], e_spec.widths[i + 1]);
            encoder.push(make_layer(store, std, rng.as_deref_mut(), format!("enc.l{i}"), a, b)?);
        }

        Ok(Self {
            config,
            generator,
            embedding,
            discriminator,
            encoder,
            trunk_depth,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn trunk_depth(&self) -> usize {
        self.trunk_depth
    }

    pub fn generator_layers(&self) -> &[Layer] {
        &self.generator
    }

    pub fn discriminator_layers(&self) -> &[Layer] {
        &self.discriminator
    }

    pub fn encoder_layers(&self) -> &[Layer] {
        &self.encoder
    }

    /// `theta_g`, including the embedding table when present.
    pub fn generator_params(&self) -> Vec<ParamId> {
        let mut ids = flatten(&self.generator);
        ids.extend(self.embedding);
        ids
    }

    /// `theta_d`, including any shared trunk.
    pub fn discriminator_params(&self) -> Vec<ParamId> {
        flatten(&self.discriminator)
    }

    /// `theta_e`, including any shared trunk.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        flatten(&self.encoder)
    }

    pub fn trunk_params(&self) -> Vec<ParamId> {
        flatten(&self.discriminator[..self.trunk_depth])
    }

    fn expect_cols(&self, g: &Graph, x: Var, cols: usize, op: &'static str) -> Result<usize> {
        match g.shape(x) {
            [n, c] if *c == cols => Ok(*n),
            other => Err(Error::ShapeMismatch {
                op,
                lhs: other.to_vec(),
                rhs: vec![0, cols],
            }),
        }
    }

    /// `x~ = G(z, y)`, an `n × D` batch in `(-1, 1)`.
    pub fn generator_forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        z: Var,
        y: &[usize],
    ) -> Result<Var> {
        let n = self.expect_cols(g, z, self.config.latent_dim, "generator")?;
        let input = match self.embedding {
            None => z,
            Some(table) => {
                if y.len() != n {
                    return Err(Error::InvalidArgument(format!(
                        "generator: {} labels for {n} latents",
                        y.len()
                    )));
                }
                let t = g.param(store, table);
                let e = g.index_rows(t, y)?;
                g.concat(&[z, e])?
            }
        };
        let out = mlp(g, store, &self.generator, input)?;
        Ok(g.tanh(out))
    }

    /// Encoder mean and log-variance, each `n × J`.
    pub fn encoder_forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<(Var, Var)> {
        self.expect_cols(g, x, self.config.data_dim, "encoder")?;
        let out = mlp(g, store, &self.encoder, x)?;
        let j = self.config.latent_dim;
        let mean = g.slice(out, 0, j)?;
        let log_var = g.slice(out, j, 2 * j)?;
        Ok((mean, log_var))
    }

    /// Discriminator scores, `n × 1`.
    pub fn discriminator_forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        self.expect_cols(g, x, self.config.data_dim, "discriminator")?;
        mlp(g, store, &self.discriminator, x)
    }

    /// Generator outputs without recording gradients, row-major `n × D`.
    pub fn generate(&self, store: &ParameterStore, z: &Tensor, y: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let x = self.generator_forward(&mut g, store, zv, y)?;
        Ok(g.value(x).clone())
    }

    /// Encoder means without recording gradients.
    pub fn encode_mean(&self, store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (mean, _) = self.encoder_forward(&mut g, store, xv)?;
        Ok(g.value(mean).clone())
    }
}

fn make_layer<R: Rng>(
    store: &mut ParameterStore,
    std: f64,
    rng: Option<&mut R>,
    name: String,
    fan_in: usize,
    fan_out: usize,
) -> Result<Layer> {
    let w_name = format!("{name}.w");
    let b_name = format!("{name}.b");
    match rng {
        Some(r) => {
            let w: Vec<f64> = rng::normals(r, fan_in * fan_out)
                .into_iter()
                .map(|v| v * std)
                .collect();
            let weight = store.add(w_name, Tensor::matrix(fan_in, fan_out, w)?)?;
            let bias = store.add(b_name, Tensor::zeros(&[fan_out]))?;
            Ok(Layer { weight, bias })
        }
        None => {
            let weight = store.id(&w_name)?;
            let bias = store.id(&b_name)?;
            if store.value(weight).shape() != [fan_in, fan_out] {
                return Err(Error::ShapeMismatch {
                    op: "attach",
                    lhs: store.value(weight).shape().to_vec(),
                    rhs: vec![fan_in, fan_out],
                });
            }
            Ok(Layer { weight, bias })
        }
    }
}

fn flatten(layers: &[Layer]) -> Vec<ParamId> {
    layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
}

/// Affine layers with leaky-ReLU between them; the last layer is left linear.
fn mlp(g: &mut Graph, store: &ParameterStore, layers: &[Layer], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        let w = g.param(store, layer.weight);
        let b = g.param(store, layer.bias);
        let a = g.matmul(h, w)?;
        h = g.add(a, b)?;
        if i + 1 < layers.len() {
            h = g.leaky_relu(h);
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    pub(crate) fn config(share: bool) -> NetworkConfig {
        NetworkConfig {
            data_dim: 3,
            latent_dim: 2,
            clusters: 4,
            g_hidden: vec![8, 8],
            d_hidden: vec![8, 6],
            share_trunk: share,
            trunk_depth: None,
            conditioning: Conditioning::ZOnly,
            init_std: 0.02,
        }
    }

    fn zero_all(store: &mut ParameterStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.values_mut(id).fill(0.0);
        }
    }

    fn batch(g: &mut Graph, n: usize, d: usize, seed: u64) -> Var {
        let v = rng::normals(&mut seeded(seed), n * d);
        g.constant(Tensor::matrix(n, d, v).unwrap())
    }

    #[test]
    fn zero_weights_give_zero_generator_output() {
        let mut store = ParameterStore::new();
        let nets = NetworkSet::new(&mut store, config(true), &mut seeded(0)).unwrap();
        zero_all(&mut store);
        let mut g = Graph::new();
        let z = batch(&mut g, 5, 2, 1);
        let x = nets.generator_forward(&mut g, &store, z, &[0; 5]).unwrap();
        assert_eq!(g.shape(x), &[5, 3]);
        assert!(g.value(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_output_is_bounded() {
        let mut store = ParameterStore::new();
        let mut cfg = config(true);
        cfg.init_std = 3.0;
        let nets = NetworkSet::new(&mut store, cfg, &mut seeded(0)).unwrap();
        let mut g = Graph::new();
        let z = batch(&mut g, 50, 2, 1);
        let z = g.scale(z, 100.0);
        let x = nets.generator_forward(&mut g, &store, z, &[0; 50]).unwrap();
        assert!(g.value(x).data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn zero_weight_heads_return_biases() {
        let mut store = ParameterStore::new();
        let nets = NetworkSet::new(&mut store, config(false), &mut seeded(0)).unwrap();
        zero_all(&mut store);
        let enc_head = *nets.encoder_layers().last().unwrap();
        store
            .values_mut(enc_head.bias)
            .copy_from_slice(&[0.1, 0.2, -0.3, 0.4]);
        let disc_head = *nets.discriminator_layers().last().unwrap();
        store.values_mut(disc_head.bias)[0] = 0.7;

        let mut g = Graph::new();
        let x = batch(&mut g, 4, 3, 2);
        let (mean, log_var) = nets.encoder_forward(&mut g, &store, x).unwrap();
        for r in 0..4 {
            assert_eq!(g.value(mean).row(r), &[0.1, 0.2]);
            assert_eq!(g.value(log_var).row(r), &[-0.3, 0.4]);
        }
        let o = nets.discriminator_forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(o), &[4, 1]);
        assert!(g.value(o).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut store = ParameterStore::new();
        let nets = NetworkSet::new(&mut store, config(true), &mut seeded(0)).unwrap();
        let mut g = Graph::new();
        let x = batch(&mut g, 4, 2, 2);
        assert!(nets.discriminator_forward(&mut g, &store, x).is_err());
        assert!(nets.encoder_forward(&mut g, &store, x).is_err());
        let z = batch(&mut g, 4, 3, 2);
        assert!(nets.generator_forward(&mut g, &store, z, &[0; 4]).is_err());
    }

    #[test]
    fn shared_trunk_is_registered_once() {
        let mut store = ParameterStore::new();
        let nets = NetworkSet::new(&mut store, config(true), &mut seeded(0)).unwrap();
        assert_eq!(nets.trunk_depth(), 1);
        assert_eq!(
            nets.discriminator_layers()[0],
            nets.encoder_layers()[0]
        );
        let trunk_names = store.iter().filter(|(_, p)| p.name.starts_with("trunk.")).count();
        assert_eq!(trunk_names, 2);

        let mut store = ParameterStore::new();
        let nets = NetworkSet::new(&mut store, config(false), &mut seeded(0)).unwrap();
        assert_eq!(nets.trunk_depth(), 0);
        let d: std::collections::HashSet<_> = nets.discriminator_params().into_iter().collect();
        assert!(nets.encoder_params().iter().all(|id| !d.contains(id)));
    }

    #[test]
    fn trunk_perturbation_moves_both_heads() {
        let mut store = ParameterStore::new();
        let nets = NetworkSet::new(&mut store, config(true), &mut seeded(0)).unwrap();
        let x = Tensor::matrix(3, 3, rng::normals(&mut seeded(5), 9)).unwrap();
        let eval = |store: &ParameterStore| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let (m, _) = nets.encoder_forward(&mut g, store, xv).unwrap();
            let o = nets.discriminator_forward(&mut g, store, xv).unwrap();
            (g.value(m).clone(), g.value(o).clone())
        };
        let (m0, o0) = eval(&store);
        let w = nets.trunk_params()[0];
        store.values_mut(w)[0] += 0.5;
        let (m1, o1) = eval(&store);
        assert_ne!(m0, m1);
        assert_ne!(o0, o1);
    }

    #[test]
    fn zero_embedding_matches_z_only() {
        let mut cfg = config(true);
        cfg.conditioning = Conditioning::Embedding { dim: 3 };
        let mut store = ParameterStore::new();
        let nets = NetworkSet::new(&mut store, cfg, &mut seeded(0)).unwrap();
        let embed = store.id("gen.embed").unwrap();
        store.values_mut(embed).fill(0.0);

        // Copy into a z-only generator whose first layer keeps only the z rows.
        let mut plain_store = ParameterStore::new();
        let plain = NetworkSet::new(&mut plain_store, config(true), &mut seeded(1)).unwrap();
        for (a, b) in nets.generator_layers().iter().zip(plain.generator_layers()) {
            let w = store.values(a.weight).to_vec();
            let n = plain_store.values(b.weight).len();
            plain_store.values_mut(b.weight).copy_from_slice(&w[..n]);
            let bias = store.values(a.bias).to_vec();
            plain_store.values_mut(b.bias).copy_from_slice(&bias);
        }
        let z = Tensor::matrix(4, 2, rng::normals(&mut seeded(5), 8)).unwrap();
        let y = [0, 3, 1, 2];
        let with = nets.generate(&store, &z, &y).unwrap();
        let without = plain.generate(&plain_store, &z, &y).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn forward_is_deterministic_given_seed() {
        let run = || {
            let mut store = ParameterStore::new();
            let nets = NetworkSet::new(&mut store, config(true), &mut seeded(42)).unwrap();
            let x = Tensor::matrix(6, 3, rng::normals(&mut seeded(5), 18)).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x);
            let o = nets.discriminator_forward(&mut g, &store, xv).unwrap();
            g.value(o).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn attach_finds_existing_parameters() {
        let mut store = ParameterStore::new();
        let nets = NetworkSet::new(&mut store, config(true), &mut seeded(0)).unwrap();
        let again = NetworkSet::attach(&mut store, config(true)).unwrap();
        assert_eq!(nets, again);
    }
}
