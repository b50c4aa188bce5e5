//! Networks: MLP backbone and projector, prediction head, the distillation
//! predictor, the EMA target and the prototype bank.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{l2_normalize, Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Dense layer computing `x · weight + bias` with `weight` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// He-style uniform fan-in initialization, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], w).expect("sized"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Stack of dense layers with ReLU between them; `final_relu` also applies
/// it after the last layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_relu: bool,
}

impl Mlp {
    pub fn init(widths: &[usize], final_relu: bool, rng: &mut impl Rng) -> Self {
        let layers = widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Mlp { layers, final_relu }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, Linear::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::out_dim)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [(format!("{prefix}.{i}.weight"), &l.weight), (format!("{prefix}.{i}.bias"), &l.bias)]
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Places every parameter on `g` as a trainable or constant leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| (g.leaf(l.weight.clone(), trainable), g.leaf(l.bias.clone(), trainable)))
            .collect();
        BoundMlp { layers, final_relu: self.final_relu }
    }

    fn check_chain(&self, what: &str) -> Result<()> {
        for w in self.layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(shape_err!("{what}: layer widths do not chain"));
            }
        }
        Ok(())
    }
}

/// An [`Mlp`] whose parameters live on a graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    final_relu: bool,
}

impl BoundMlp {
    /// Pairs consecutive `(weight, bias)` vars into layers.
    pub fn from_vars(vars: &[Var], final_relu: bool) -> Self {
        BoundMlp { layers: vars.chunks_exact(2).map(|c| (c[0], c[1])).collect(), final_relu }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            if g.shape(h).len() != 2 || g.shape(h)[1] != g.shape(w)[0] {
                return Err(shape_err!("layer {i} expects {} inputs, got {:?}", g.shape(w)[0], g.shape(h)));
            }
            let lin = g.matmul(h, w)?;
            h = g.add(lin, b)?;
            if i < last || self.final_relu {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Layer widths of the encoder. `backbone[0]` is the input dimension and
/// `projector[0]` must equal the last backbone width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub backbone: Vec<usize>,
    pub projector: Vec<usize>,
    /// Hidden width of the prediction head `h` (BYOL family), if any.
    #[serde(default)]
    pub head_hidden: Option<usize>,
    /// Number of prototypes (clustering family), if any.
    #[serde(default)]
    pub prototypes: Option<usize>,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.backbone.len() < 2 {
            return Err(Error::config("arch.backbone", "needs an input width and at least one layer"));
        }
        if self.projector.len() < 2 {
            return Err(Error::config("arch.projector", "needs an input width and at least one layer"));
        }
        if let Some(i) = self.backbone.iter().position(|&w| w == 0) {
            return Err(Error::config(format!("arch.backbone[{i}]"), "zero-width layer"));
        }
        if let Some(i) = self.projector.iter().position(|&w| w == 0) {
            return Err(Error::config(format!("arch.projector[{i}]"), "zero-width layer"));
        }
        if self.projector[0] != *self.backbone.last().unwrap() {
            return Err(Error::config("arch.projector[0]", "must equal the backbone output width"));
        }
        if self.head_hidden == Some(0) {
            return Err(Error::config("arch.head_hidden", "zero-width layer"));
        }
        if self.prototypes == Some(0) {
            return Err(Error::config("arch.prototypes", "empty prototype bank"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.backbone[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.backbone.last().unwrap()
    }

    pub fn proj_dim(&self) -> usize {
        *self.projector.last().unwrap()
    }
}

/// Cluster prototypes, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub weights: Tensor,
    pub trainable: bool,
}

impl PrototypeBank {
    pub fn init(k: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / dim as f64).sqrt();
        let w = (0..k * dim).map(|_| rng.gen_range(-bound..bound)).collect();
        PrototypeBank { weights: Tensor::new(vec![k, dim], w).expect("sized"), trainable: true }
    }

    pub fn len(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bind(&self, g: &mut Graph) -> Var {
        g.leaf(self.weights.clone(), self.trainable)
    }
}

/// Backbone `f_b` + projector `f_p`, plus the optional head and prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub backbone: Mlp,
    pub projector: Mlp,
    pub head: Option<Mlp>,
    pub prototypes: Option<PrototypeBank>,
    pub seed: u64,
}

/// An encoder bound to a graph.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub backbone: BoundMlp,
    pub projector: BoundMlp,
    pub head: Option<BoundMlp>,
    pub prototypes: Option<Var>,
}

impl BoundEncoder {
    /// Returns `(f_b(x), f_p(f_b(x)))`.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let features = self.backbone.forward(g, x)?;
        let z = self.projector.forward(g, features)?;
        Ok((features, z))
    }

    /// Parameter vars in the order of [`EncoderState::params_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.backbone.vars();
        v.extend(self.projector.vars());
        if let Some(h) = &self.head {
            v.extend(h.vars());
        }
        v.extend(self.prototypes);
        v
    }
}

impl EncoderState {
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Mlp::init(&arch.backbone, true, &mut rng);
        let projector = Mlp::init(&arch.projector, false, &mut rng);
        let d = arch.proj_dim();
        let head = arch.head_hidden.map(|hid| Mlp::init(&[d, hid, d], false, &mut rng));
        let prototypes = arch.prototypes.map(|k| PrototypeBank::init(k, d, &mut rng));
        Ok(EncoderState { backbone, projector, head, prototypes, seed })
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.out_dim()
    }

    pub fn proj_dim(&self) -> usize {
        self.projector.out_dim()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut p = self.backbone.named_params("backbone");
        p.extend(self.projector.named_params("projector"));
        if let Some(h) = &self.head {
            p.extend(h.named_params("head"));
        }
        if let Some(b) = &self.prototypes {
            p.push(("prototypes".to_string(), &b.weights));
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.backbone.params_mut();
        p.extend(self.projector.params_mut());
        if let Some(h) = &mut self.head {
            p.extend(h.params_mut());
        }
        if let Some(b) = &mut self.prototypes {
            p.push(&mut b.weights);
        }
        p
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundEncoder {
        BoundEncoder {
            backbone: self.backbone.bind(g, trainable),
            projector: self.projector.bind(g, trainable),
            head: self.head.as_ref().map(|h| h.bind(g, trainable)),
            prototypes: self.prototypes.as_ref().map(|b| g.leaf(b.weights.clone(), trainable && b.trainable)),
        }
    }

    /// Forward pass outside any training graph; returns `(features, z)` values.
    pub fn encode_values(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (f, z) = bound.encode(&mut g, xv)?;
        Ok((g.value(f).clone(), g.value(z).clone()))
    }

    /// Backbone features for a batch of inputs, computed in chunks.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.backbone.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let f = bound.forward(&mut g, xv)?;
        Ok(g.value(f).clone())
    }

    /// Rebuilds an encoder from named parameters (checkpoint order).
    pub fn from_named(params: Vec<(String, Tensor)>, seed: u64) -> Result<Self> {
        let mut backbone = Vec::new();
        let mut projector = Vec::new();
        let mut head = Vec::new();
        let mut prototypes = None;
        let mut pending: Option<(String, Tensor)> = None;
        for (name, t) in params {
            if name == "prototypes" {
                prototypes = Some(PrototypeBank { weights: t, trainable: true });
                continue;
            }
            let (prefix, rest) = name
                .split_once('.')
                .ok_or_else(|| Error::Format(format!("unexpected parameter name `{name}`")))?;
            match (rest.ends_with(".weight"), pending.take()) {
                (true, None) => pending = Some((prefix.to_string(), t)),
                (false, Some((p, w))) if p == prefix && rest.ends_with(".bias") => {
                    let layer = Linear { weight: w, bias: t };
                    match prefix {
                        "backbone" => backbone.push(layer),
                        "projector" => projector.push(layer),
                        "head" => head.push(layer),
                        _ => return Err(Error::Format(format!("unknown module `{prefix}`"))),
                    }
                }
                _ => return Err(Error::Format(format!("parameter `{name}` out of order"))),
            }
        }
        let enc = EncoderState {
            backbone: Mlp { layers: backbone, final_relu: true },
            projector: Mlp { layers: projector, final_relu: false },
            head: (!head.is_empty()).then_some(Mlp { layers: head, final_relu: false }),
            prototypes,
            seed,
        };
        enc.backbone.check_chain("backbone")?;
        enc.projector.check_chain("projector")?;
        if enc.backbone.out_dim() != enc.projector.in_dim() {
            return Err(shape_err!("projector input does not match backbone output"));
        }
        Ok(enc)
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// CaSSLe's predictor `g`: `d → hidden → d` with ReLU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorState {
    pub mlp: Mlp,
}

impl PredictorState {
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::config("training.predictor_hidden", "zero-width predictor layer"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(PredictorState { mlp: Mlp::init(&[dim, hidden, dim], false, &mut rng) })
    }

    /// Exact identity map: hidden units `relu(z)` and `relu(-z)`, recombined
    /// as `relu(z) − relu(−z) = z`.
    pub fn identity(dim: usize) -> Self {
        let mut w1 = Tensor::zeros(&[dim, 2 * dim]);
        let mut w2 = Tensor::zeros(&[2 * dim, dim]);
        for i in 0..dim {
            w1.data_mut()[i * 2 * dim + i] = 1.0;
            w1.data_mut()[i * 2 * dim + dim + i] = -1.0;
            w2.data_mut()[i * dim + i] = 1.0;
            w2.data_mut()[(dim + i) * dim + i] = -1.0;
        }
        PredictorState {
            mlp: Mlp {
                layers: vec![
                    Linear { weight: w1, bias: Tensor::zeros(&[2 * dim]) },
                    Linear { weight: w2, bias: Tensor::zeros(&[dim]) },
                ],
                final_relu: false,
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        self.mlp.bind(g, trainable)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.mlp.named_params("predictor")
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.params_mut()
    }
}

/// Maps current projections to the frozen feature space: `g(z)`.
pub fn predict_past(g: &mut Graph, predictor: &BoundMlp, z: Var) -> Result<Var> {
    predictor.forward(g, z)
}

/// Exponential-moving-average copy of an encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub shadow: EncoderState,
    pub momentum: f64,
}

impl EmaState {
    pub fn new(online: &EncoderState, momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        Ok(EmaState { shadow: online.clone(), momentum })
    }

    /// Binds the shadow encoder as constants.
    pub fn bind(&self, g: &mut Graph) -> BoundEncoder {
        self.shadow.bind(g, false)
    }

    /// `shadow ← m·shadow + (1 − m)·online` for every parameter.
    pub fn update(&mut self, online: &EncoderState) -> Result<()> {
        let m = self.momentum;
        ema_update(self, online, m)
    }
}

fn check_momentum(m: f64) -> Result<()> {
    if (0.0..=1.0).contains(&m) {
        Ok(())
    } else {
        Err(Error::config("training.ema_momentum", "momentum must lie in [0, 1]"))
    }
}

pub fn ema_update(ema: &mut EmaState, online: &EncoderState, m: f64) -> Result<()> {
    check_momentum(m)?;
    let src = online.named_params();
    let dst = ema.shadow.params_mut();
    if src.len() != dst.len() {
        return Err(shape_err!("EMA shadow has {} tensors, online has {}", dst.len(), src.len()));
    }
    for ((name, s), d) in src.iter().zip(dst) {
        if s.shape() != d.shape() {
            return Err(shape_err!("EMA shape mismatch at {name}"));
        }
        for (dv, &sv) in d.data_mut().iter_mut().zip(s.data()) {
            *dv = m * *dv + (1.0 - m) * sv;
        }
    }
    Ok(())
}

/// Cosine similarity between each row of `z` and each prototype, divided by `tau`.
pub fn prototype_scores(g: &mut Graph, z: Var, bank: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::config("losses.temperature", "temperature must be positive"));
    }
    if g.shape(z).len() != 2 || g.shape(bank).len() != 2 || g.shape(z)[1] != g.shape(bank)[1] {
        return Err(shape_err!("scores of {:?} against bank {:?}", g.shape(z), g.shape(bank)));
    }
    let zn = l2_normalize(g, z, 1)?;
    let cn = l2_normalize(g, bank, 1)?;
    let ct = g.transpose(cn)?;
    let sim = g.matmul(zn, ct)?;
    g.scale(sim, 1.0 / tau)
}
