//! The attention-based spatial planner: a 1×1-convolution encoder, sinusoidal
//! positional encoding over flattened grid positions, a stack of post-norm
//! transformer layers, and a position-wise affine decoder that reads out one
//! action distance per cell.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{uniform_init, Binding, Graph, PadMode, ParamId, ParamSet, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{goal_onehot, DistanceField, GoalSpec, GridMap};

/// Architecture hyperparameters. `d` must divide evenly into `heads`;
/// per-head key/value width is `d / heads`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SPTConfig {
    /// Map side length; the model plans over M² tokens.
    pub m: usize,
    /// Embedding size.
    pub d: usize,
    /// Transformer layer count.
    pub n_layers: usize,
    /// Attention heads per layer.
    pub heads: usize,
    /// Inner width of the position-wise feed-forward network.
    pub d_fc: usize,
}

impl SPTConfig {
    pub fn with_defaults(m: usize) -> Self {
        Self { m, d: 64, n_layers: 5, heads: 8, d_fc: 512 }
    }

    /// Small configuration used by gradient checks and smoke tests.
    pub fn tiny(m: usize) -> Self {
        Self { m, d: 8, n_layers: 2, heads: 2, d_fc: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.d == 0 || self.n_layers == 0 || self.heads == 0 || self.d_fc == 0 {
            return Err(Error::InvalidConfig(format!("all dimensions must be positive: {self:?}")));
        }
        if self.d % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embedding size {} not divisible by head count {}",
                self.d, self.heads
            )));
        }
        if self.d % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "embedding size {} must be even for the positional encoding",
                self.d
            )));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d / self.heads
    }

    pub fn tokens(&self) -> usize {
        self.m * self.m
    }
}

/// Sinusoidal positional encoding as a (d, M²) tensor. Positions j number
/// the flattened grid row-major; row 2i holds sin(j / C^{2i/d}) and row
/// 2i+1 holds cos(j / C^{2i/d}) with C = M².
pub fn positional_encoding<T: Scalar>(m: usize, d: usize) -> Result<Tensor<T>> {
    if d % 2 != 0 {
        return Err(Error::InvalidConfig(format!("embedding size {d} must be even")));
    }
    let s = m * m;
    let c = (m * m) as f64;
    let mut data = vec![T::zero(); d * s];
    for i in 0..d / 2 {
        let denom = c.powf(2.0 * i as f64 / d as f64);
        for j in 0..s {
            let angle = j as f64 / denom;
            data[(2 * i) * s + j] = T::of_f64(angle.sin());
            data[(2 * i + 1) * s + j] = T::of_f64(angle.cos());
        }
    }
    Tensor::from_vec(&[d, s], data)
}

/// Positional encoding laid out token-major, (M², d), for adding to
/// row-per-token activations.
pub(crate) fn positional_encoding_tokens<T: Scalar>(m: usize, d: usize) -> Result<Tensor<T>> {
    let pe = positional_encoding::<T>(m, d)?;
    let s = m * m;
    let mut data = vec![T::zero(); d * s];
    for i in 0..d {
        for j in 0..s {
            data[j * d + i] = pe.data()[i * s + j];
        }
    }
    Tensor::from_vec(&[s, d], data)
}

/// Scaled dot-product attention with the shapes of the whole-map planner:
/// queries and keys are (d_k, S) column-per-position, values (d_v, S).
/// Queries may be fewer than keys; key and value counts must match.
pub fn attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (sq, sk, sv) =
        (g.value(q).shape().to_vec(), g.value(k).shape().to_vec(), g.value(v).shape().to_vec());
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[0] != sk[0] || sk[1] != sv[1] {
        return Err(Error::ShapeMismatch { op: "attention", lhs: sq, rhs: sk });
    }
    let d_k = sq[0];
    let qt = g.transpose(q)?; // (Sq, dk)
    let vt = g.transpose(v)?; // (Sk, dv)
    let logits = g.matmul(qt, k)?; // (Sq, Sk)
    let scaled = g.scale(logits, T::one() / T::of_f64((d_k as f64).sqrt()));
    let weights = g.softmax(scaled);
    let out = g.matmul(weights, vt)?; // (Sq, dv)
    g.transpose(out)
}

struct HeadIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

struct LayerIds {
    heads: Vec<HeadIds>,
    attn_w: ParamId,
    attn_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

/// Shared transformer stack (self-attention + position-wise feed-forward,
/// post-norm residuals), reused by the planner and the mapper.
pub struct Trunk {
    layers: Vec<LayerIds>,
    d: usize,
    heads: usize,
    d_fc: usize,
}

impl Trunk {
    pub(crate) fn register<T: Scalar, R: Rng>(
        set: &mut ParamSet<T>,
        prefix: &str,
        d: usize,
        n_layers: usize,
        heads: usize,
        d_fc: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d_k = d / heads;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let mut head_ids = Vec::with_capacity(heads);
            for h in 0..heads {
                head_ids.push(HeadIds {
                    wq: set.add(
                        format!("{prefix}.layer{l}.head{h}.wq"),
                        uniform_init(rng, &[d, d_k], d),
                    )?,
                    wk: set.add(
                        format!("{prefix}.layer{l}.head{h}.wk"),
                        uniform_init(rng, &[d, d_k], d),
                    )?,
                    wv: set.add(
                        format!("{prefix}.layer{l}.head{h}.wv"),
                        uniform_init(rng, &[d, d_k], d),
                    )?,
                });
            }
            layers.push(LayerIds {
                heads: head_ids,
                attn_w: set
                    .add(format!("{prefix}.layer{l}.attn_out.w"), uniform_init(rng, &[d, d], d))?,
                attn_b: set.add(format!("{prefix}.layer{l}.attn_out.b"), Tensor::zeros(&[d]))?,
                fc1_w: set
                    .add(format!("{prefix}.layer{l}.fc1.w"), uniform_init(rng, &[d, d_fc], d))?,
                fc1_b: set.add(format!("{prefix}.layer{l}.fc1.b"), Tensor::zeros(&[d_fc]))?,
                fc2_w: set
                    .add(format!("{prefix}.layer{l}.fc2.w"), uniform_init(rng, &[d_fc, d], d_fc))?,
                fc2_b: set.add(format!("{prefix}.layer{l}.fc2.b"), Tensor::zeros(&[d]))?,
                ln1_gain: set.add(format!("{prefix}.layer{l}.ln1.gain"), Tensor::full(&[d], T::one()))?,
                ln1_bias: set.add(format!("{prefix}.layer{l}.ln1.bias"), Tensor::zeros(&[d]))?,
                ln2_gain: set.add(format!("{prefix}.layer{l}.ln2.gain"), Tensor::full(&[d], T::one()))?,
                ln2_bias: set.add(format!("{prefix}.layer{l}.ln2.bias"), Tensor::zeros(&[d]))?,
            });
        }
        Ok(Self { layers, d, heads, d_fc })
    }

    pub(crate) fn resolve<T: Scalar>(
        set: &ParamSet<T>,
        prefix: &str,
        d: usize,
        n_layers: usize,
        heads: usize,
        d_fc: usize,
    ) -> Result<Self> {
        let lookup = |name: String| {
            set.id(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let mut head_ids = Vec::with_capacity(heads);
            for h in 0..heads {
                head_ids.push(HeadIds {
                    wq: lookup(format!("{prefix}.layer{l}.head{h}.wq"))?,
                    wk: lookup(format!("{prefix}.layer{l}.head{h}.wk"))?,
                    wv: lookup(format!("{prefix}.layer{l}.head{h}.wv"))?,
                });
            }
            layers.push(LayerIds {
                heads: head_ids,
                attn_w: lookup(format!("{prefix}.layer{l}.attn_out.w"))?,
                attn_b: lookup(format!("{prefix}.layer{l}.attn_out.b"))?,
                fc1_w: lookup(format!("{prefix}.layer{l}.fc1.w"))?,
                fc1_b: lookup(format!("{prefix}.layer{l}.fc1.b"))?,
                fc2_w: lookup(format!("{prefix}.layer{l}.fc2.w"))?,
                fc2_b: lookup(format!("{prefix}.layer{l}.fc2.b"))?,
                ln1_gain: lookup(format!("{prefix}.layer{l}.ln1.gain"))?,
                ln1_bias: lookup(format!("{prefix}.layer{l}.ln1.bias"))?,
                ln2_gain: lookup(format!("{prefix}.layer{l}.ln2.gain"))?,
                ln2_bias: lookup(format!("{prefix}.layer{l}.ln2.bias"))?,
            });
        }
        Ok(Self { layers, d, heads, d_fc })
    }

    /// Applies the stack to (B·S, d) token rows. Returns the output tokens
    /// and, per layer and head, the (B, S, S) attention weight nodes.
    pub(crate) fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        tokens: Var,
        batch: usize,
        s: usize,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let d = self.d;
        let d_k = d / self.heads;
        let scale = T::one() / T::of_f64((d_k as f64).sqrt());
        let mut x = tokens;
        let mut attn_weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut head_outs = Vec::with_capacity(self.heads);
            let mut head_weights = Vec::with_capacity(self.heads);
            for head in &layer.heads {
                let q = g.matmul(x, binding.var(head.wq))?;
                let k = g.matmul(x, binding.var(head.wk))?;
                let v = g.matmul(x, binding.var(head.wv))?;
                let qb = g.reshape(q, &[batch, s, d_k])?;
                let kb = g.reshape(k, &[batch, s, d_k])?;
                let vb = g.reshape(v, &[batch, s, d_k])?;
                let logits = g.batch_matmul(qb, kb, true)?;
                let scaled = g.scale(logits, scale);
                let weights = g.softmax(scaled);
                head_weights.push(weights);
                let z = g.batch_matmul(weights, vb, false)?;
                head_outs.push(z);
            }
            attn_weights.push(head_weights);
            let concat = g.concat(&head_outs, 2)?; // (B, S, d)
            let flat = g.reshape(concat, &[batch * s, d])?;
            let proj = g.matmul(flat, binding.var(layer.attn_w))?;
            let proj = g.add_bias(proj, binding.var(layer.attn_b))?;
            let res1 = g.add(x, proj)?;
            let r = g.layer_norm(res1, binding.var(layer.ln1_gain), binding.var(layer.ln1_bias))?;
            let h1 = g.matmul(r, binding.var(layer.fc1_w))?;
            let h1 = g.add_bias(h1, binding.var(layer.fc1_b))?;
            let h1 = g.relu(h1);
            let h2 = g.matmul(h1, binding.var(layer.fc2_w))?;
            let h2 = g.add_bias(h2, binding.var(layer.fc2_b))?;
            let res2 = g.add(r, h2)?;
            x = g.layer_norm(res2, binding.var(layer.ln2_gain), binding.var(layer.ln2_bias))?;
        }
        Ok((x, attn_weights))
    }

    pub(crate) fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub(crate) fn head_count(&self) -> usize {
        self.heads
    }
}

/// One transformer layer applied to a (d, S) activation matrix.
pub fn transformer_layer<T: Scalar>(
    g: &mut Graph<T>,
    trunk: &Trunk,
    binding: &Binding,
    layer: usize,
    z: Var,
) -> Result<Var> {
    let shape = g.value(z).shape().to_vec();
    if shape.len() != 2 || shape[0] != trunk.d {
        return Err(Error::ShapeMismatch { op: "transformer_layer", lhs: shape, rhs: vec![trunk.d] });
    }
    let s = shape[1];
    let tokens = g.transpose(z)?;
    let single = Trunk {
        layers: vec![clone_layer(&trunk.layers[layer])],
        d: trunk.d,
        heads: trunk.heads,
        d_fc: trunk.d_fc,
    };
    let (out, _) = single.apply(g, binding, tokens, 1, s)?;
    g.transpose(out)
}

fn clone_layer(l: &LayerIds) -> LayerIds {
    LayerIds {
        heads: l.heads.iter().map(|h| HeadIds { wq: h.wq, wk: h.wk, wv: h.wv }).collect(),
        attn_w: l.attn_w,
        attn_b: l.attn_b,
        fc1_w: l.fc1_w,
        fc1_b: l.fc1_b,
        fc2_w: l.fc2_w,
        fc2_b: l.fc2_b,
        ln1_gain: l.ln1_gain,
        ln1_bias: l.ln1_bias,
        ln2_gain: l.ln2_gain,
        ln2_bias: l.ln2_bias,
    }
}

struct SptIds {
    enc_w1: ParamId,
    enc_b1: ParamId,
    enc_w2: ParamId,
    enc_b2: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
}

/// Planner model: owns its parameters and the precomputed positional
/// encoding for its map size.
pub struct SptModel<T: Scalar> {
    pub config: SPTConfig,
    pub params: ParamSet<T>,
    trunk: Trunk,
    ids: SptIds,
    pe_tokens: Tensor<T>,
}

impl<T: Scalar> SptModel<T> {
    /// Fresh model with seeded initialization: weights uniform in
    /// ±1/√fan_in, biases zero, layer-norm gain one.
    pub fn new(config: SPTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.d;
        let ids = SptIds {
            enc_w1: params.add("spt.enc.w1", uniform_init(&mut rng, &[d, 2, 1, 1], 2))?,
            enc_b1: params.add("spt.enc.b1", Tensor::zeros(&[d]))?,
            enc_w2: params.add("spt.enc.w2", uniform_init(&mut rng, &[d, d, 1, 1], d))?,
            enc_b2: params.add("spt.enc.b2", Tensor::zeros(&[d]))?,
            dec_w: params.add("spt.dec.w", uniform_init(&mut rng, &[d, 1], d))?,
            dec_b: params.add("spt.dec.b", Tensor::zeros(&[1]))?,
        };
        let trunk = Trunk::register(
            &mut params,
            "spt",
            d,
            config.n_layers,
            config.heads,
            config.d_fc,
            &mut rng,
        )?;
        let pe_tokens = positional_encoding_tokens(config.m, d)?;
        Ok(Self { config, params, trunk, ids, pe_tokens })
    }

    /// Wraps parameters loaded from a checkpoint.
    pub fn from_params(config: SPTConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let lookup = |name: &str| {
            params.id(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let ids = SptIds {
            enc_w1: lookup("spt.enc.w1")?,
            enc_b1: lookup("spt.enc.b1")?,
            enc_w2: lookup("spt.enc.w2")?,
            enc_b2: lookup("spt.enc.b2")?,
            dec_w: lookup("spt.dec.w")?,
            dec_b: lookup("spt.dec.b")?,
        };
        let trunk = Trunk::resolve(
            &params,
            "spt",
            config.d,
            config.n_layers,
            config.heads,
            config.d_fc,
        )?;
        let pe_tokens = positional_encoding_tokens(config.m, config.d)?;
        Ok(Self { config, params, trunk, ids, pe_tokens })
    }

    /// Reads the architecture out of checkpoint tensor shapes. The map size
    /// comes from the caller (checkpoints are map-size agnostic).
    pub fn config_from_params(params: &ParamSet<T>, m: usize) -> Result<SPTConfig> {
        let w1 = params
            .id("spt.enc.w1")
            .ok_or_else(|| Error::Checkpoint("missing tensor spt.enc.w1".into()))?;
        let d = params.value(w1).shape()[0];
        let mut n_layers = 0;
        while params.id(&format!("spt.layer{n_layers}.ln1.gain")).is_some() {
            n_layers += 1;
        }
        let mut heads = 0;
        while params.id(&format!("spt.layer0.head{heads}.wq")).is_some() {
            heads += 1;
        }
        let fc1 = params
            .id("spt.layer0.fc1.w")
            .ok_or_else(|| Error::Checkpoint("missing tensor spt.layer0.fc1.w".into()))?;
        let d_fc = params.value(fc1).shape()[1];
        let config = SPTConfig { m, d, n_layers, heads, d_fc };
        config.validate()?;
        Ok(config)
    }

    /// Two 1×1 convolutions with ReLU after each; (B,2,M,M) → (B,d,M,M).
    /// Positions with identical input values get identical encodings.
    fn encode_graph(&self, g: &mut Graph<T>, binding: &Binding, x: Var) -> Result<Var> {
        let h = g.conv2d(x, binding.var(self.ids.enc_w1), Some(binding.var(self.ids.enc_b1)), 1, 0, PadMode::Zero)?;
        let h = g.relu(h);
        let h = g.conv2d(h, binding.var(self.ids.enc_w2), Some(binding.var(self.ids.enc_b2)), 1, 0, PadMode::Zero)?;
        Ok(g.relu(h))
    }

    /// Full forward pass: (B,2,M,M) input → (B,M,M) distance predictions.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        x: Var,
        batch: usize,
    ) -> Result<Var> {
        Ok(self.forward_with_attn(g, binding, x, batch)?.0)
    }

    /// Forward pass that also returns the attention weight nodes, one
    /// (B,S,S) tensor per layer per head.
    pub fn forward_with_attn(
        &self,
        g: &mut Graph<T>,
        binding: &Binding,
        x: Var,
        batch: usize,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let (m, d) = (self.config.m, self.config.d);
        let s = m * m;
        let shape = g.value(x).shape().to_vec();
        if shape != [batch, 2, m, m] {
            return Err(Error::ShapeMismatch { op: "spt_forward", lhs: shape, rhs: vec![batch, 2, m, m] });
        }
        let enc = self.encode_graph(g, binding, x)?; // (B,d,M,M)
        let enc = g.reshape(enc, &[batch, d, s])?;
        let tokens = g.swap_last2(enc)?; // (B,S,d)
        let tokens = g.reshape(tokens, &[batch * s, d])?;
        let pe = self.pe_tiled(batch);
        let pe = g.constant(pe);
        let z = g.add(tokens, pe)?;
        let (out, attn) = self.trunk.apply(g, binding, z, batch, s)?;
        let dec = g.matmul(out, binding.var(self.ids.dec_w))?;
        let dec = g.add_bias(dec, binding.var(self.ids.dec_b))?;
        let pred = g.reshape(dec, &[batch, m, m])?;
        Ok((pred, attn))
    }

    fn pe_tiled(&self, batch: usize) -> Tensor<T> {
        let s = self.config.tokens();
        let d = self.config.d;
        let mut data = Vec::with_capacity(batch * s * d);
        for _ in 0..batch {
            data.extend_from_slice(self.pe_tokens.data());
        }
        Tensor::from_vec(&[batch * s, d], data).expect("length matches")
    }

    pub fn trunk(&self) -> &Trunk {
        &self.trunk
    }

    /// Input planes for one instance: the map plane stacked on the goal
    /// one-hot plane, (2,M,M) row-major.
    pub fn input_planes(map: &GridMap, goal: GoalSpec) -> Result<Tensor<T>> {
        let m = map.size();
        let mut data = Vec::with_capacity(2 * m * m);
        data.extend(map.cells().iter().map(|&c| T::of_f64(c as f64)));
        data.extend(goal_onehot(goal, m)?.iter().map(|&v| T::of_f64(v as f64)));
        Tensor::from_vec(&[2, m, m], data)
    }

    /// Single-instance inference convenience.
    pub fn predict(&self, map: &GridMap, goal: GoalSpec) -> Result<DistanceField> {
        let mut g = Graph::new();
        let binding = self.params.bind(&mut g, false);
        let planes = Self::input_planes(map, goal)?;
        let batched = planes.reshaped(&[1, 2, map.size(), map.size()])?;
        let x = g.constant(batched);
        let pred = self.forward(&mut g, &binding, x, 1)?;
        let values = g.value(pred).data().iter().map(|v| v.as_f64() as f32).collect();
        DistanceField::from_prediction(map.size(), values)
    }
}
