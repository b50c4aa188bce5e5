//! The per-task training loop and the continual strategies.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentPolicy};
use crate::autograd::{Graph, Tensor, Var};
use crate::checkpoint;
use crate::data::LabeledDataset;
use crate::distill::{
    cassle_total_loss, snapshot_frozen, ssl_loss, AblationFlags, DistillMethod, FrozenEncoder, FrozenViews, SslMethod,
    SslViews,
};
use crate::error::{Error, Result};
use crate::ewc::{ewc_penalty, FisherDiagonal};
use crate::losses::LossConfig;
use crate::nn::{BoundEncoder, EmaState, EncoderState, PredictorState};
use crate::optim::{cosine_lr, Optimizer, OptimizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Finetune,
    Cassle,
    Ewc,
    CassleSwap,
    CassleNopred,
}

impl Strategy {
    pub const ALL: [Strategy; 5] =
        [Strategy::Finetune, Strategy::Cassle, Strategy::Ewc, Strategy::CassleSwap, Strategy::CassleNopred];

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Finetune => "finetune",
            Strategy::Cassle => "cassle",
            Strategy::Ewc => "ewc",
            Strategy::CassleSwap => "cassle_swap",
            Strategy::CassleNopred => "cassle_nopred",
        }
    }

    pub fn distills(self) -> bool {
        matches!(self, Strategy::Cassle | Strategy::CassleSwap | Strategy::CassleNopred)
    }

    pub fn flags(self) -> AblationFlags {
        AblationFlags {
            swap_views: self == Strategy::CassleSwap,
            use_predictor: self != Strategy::CassleNopred,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps_per_task: usize,
    pub batch_size: usize,
    pub ema_momentum: f64,
    /// Hidden width of the predictor; four times the projection size when unset.
    pub predictor_hidden: Option<usize>,
    /// Keep the predictor across task boundaries instead of re-initializing it.
    pub persist_predictor: bool,
    pub ewc_lambda: f64,
    pub fisher_batches: usize,
    /// Record every n-th step in the loss curve (the last step is always kept).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps_per_task: 2000,
            batch_size: 128,
            ema_momentum: 0.99,
            predictor_hidden: None,
            persist_predictor: false,
            ewc_lambda: 100.0,
            fisher_batches: 16,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("training.batch_size", "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::config("training.ema_momentum", "must lie in [0, 1]"));
        }
        if self.predictor_hidden == Some(0) {
            return Err(Error::config("training.predictor_hidden", "must be positive"));
        }
        if !(self.ewc_lambda >= 0.0 && self.ewc_lambda.is_finite()) {
            return Err(Error::config("training.ewc_lambda", "must be non-negative"));
        }
        if self.fisher_batches == 0 {
            return Err(Error::config("training.fisher_batches", "must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("training.log_every", "must be at least 1"));
        }
        Ok(())
    }
}

/// Everything a training step needs besides the learner's state.
#[derive(Clone, Debug)]
pub struct StepSettings {
    pub method: SslMethod,
    pub strategy: Strategy,
    pub train: TrainConfig,
    pub optimizer: OptimizerConfig,
    pub losses: LossConfig,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub ssl_loss: f64,
    pub distill_loss: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: usize,
    pub steps: Vec<StepLog>,
    /// Digest of the frozen encoder used as distillation target.
    pub frozen_digest: Option<String>,
    /// Largest gradient norm that reached any frozen parameter during the task.
    pub frozen_grad_norm: Option<f64>,
    /// Number of distinct samples of this task read by training.
    pub samples_read: usize,
    pub final_digest: String,
}

/// Mutable state carried across tasks.
#[derive(Clone, Debug)]
pub struct Learner {
    pub encoder: EncoderState,
    pub ema: Option<EmaState>,
    pub predictor: Option<PredictorState>,
    pub frozen: Option<FrozenEncoder>,
    pub fishers: Vec<FisherDiagonal>,
}

impl Learner {
    pub fn new(encoder: EncoderState, method: SslMethod, train: &TrainConfig) -> Result<Self> {
        let ema = match method {
            SslMethod::Byol => Some(EmaState::new(&encoder, train.ema_momentum)?),
            _ => None,
        };
        Ok(Learner { encoder, ema, predictor: None, frozen: None, fishers: Vec::new() })
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ a.wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ b.wrapping_add(0x1656_67B1_9E37_79F9)
}

/// Builds the SSL inputs of a method for two views.
fn ssl_views(g: &mut Graph, enc: &BoundEncoder, ema: Option<&BoundEncoder>, xa: Var, xb: Var) -> Result<SslViews> {
    let (_, za) = enc.encode(g, xa)?;
    let (_, zb) = enc.encode(g, xb)?;
    let mut v = SslViews::plain(za, zb);
    if let Some(h) = &enc.head {
        v.qa = Some(h.forward(g, za)?);
        v.qb = Some(h.forward(g, zb)?);
    }
    if let Some(t) = ema {
        v.target_a = Some(t.encode(g, xa)?.1);
        v.target_b = Some(t.encode(g, xb)?.1);
    }
    v.prototypes = enc.prototypes;
    Ok(v)
}

fn batch_indices(n: usize, bs: usize, seed: u64, task: usize, step: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, task as u64, step as u64));
    let mut idx = sample(&mut rng, n, bs.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Trains one task. For distilling strategies a frozen snapshot of the
/// incoming encoder is taken first (from the second task on) and a predictor
/// is prepared; EWC adds the penalties of all earlier tasks.
pub fn train_task(learner: &mut Learner, task: &LabeledDataset, task_index: usize, s: &StepSettings) -> Result<TaskLog> {
    s.train.validate()?;
    let distilling = s.strategy.distills() && task_index > 0;
    learner.frozen = None;
    if distilling {
        learner.frozen = Some(snapshot_frozen(&learner.encoder));
        let flags = s.strategy.flags();
        if flags.use_predictor && !(s.train.persist_predictor && learner.predictor.is_some()) {
            let d = learner.encoder.proj_dim();
            let hidden = s.train.predictor_hidden.unwrap_or(4 * d);
            learner.predictor = Some(PredictorState::init(d, hidden, mix(s.seed, task_index as u64, 0xD15_7111))?);
        }
    }
    let mut log = TaskLog {
        task: task_index,
        steps: Vec::new(),
        frozen_digest: learner.frozen.as_ref().map(|f| f.digest().to_string()),
        frozen_grad_norm: learner.frozen.as_ref().map(|_| 0.0),
        samples_read: 0,
        final_digest: String::new(),
    };
    let steps = s.train.steps_per_task;
    if steps > 0 && task.len() < 2 {
        return Err(Error::config("training.batch_size", "task has fewer than two samples"));
    }
    let mut opt = Optimizer::new(s.optimizer.clone())?;
    let mut seen = vec![false; task.len()];
    let aug_seed = mix(s.seed, task_index as u64, 0xA06);
    let distill = DistillMethod::matching(s.method);
    for step in 0..steps {
        let idx = batch_indices(task.len(), s.train.batch_size, s.seed, task_index, step);
        for &i in &idx {
            seen[i] = true;
        }
        let (va, vb) = augment_batch(&task.samples, &idx, &s.augment, aug_seed, step as u64)?;

        let mut g = Graph::new();
        let enc = learner.encoder.bind(&mut g, true);
        let ema = learner.ema.as_ref().map(|e| e.bind(&mut g));
        let xa = g.constant(va);
        let xb = g.constant(vb);
        let views = ssl_views(&mut g, &enc, ema.as_ref(), xa, xb)?;

        let mut frozen_vars = Vec::new();
        let frozen_views = match (&learner.frozen, distilling) {
            (Some(f), true) => {
                let fb = f.bind(&mut g);
                frozen_vars = fb.vars();
                let (_, fa) = fb.encode(&mut g, xa)?;
                let (_, fbz) = fb.encode(&mut g, xb)?;
                Some(FrozenViews { za: fa, zb: fbz, prototypes: fb.prototypes })
            }
            _ => None,
        };
        let pred = match (&learner.predictor, distilling && s.strategy.flags().use_predictor) {
            (Some(p), true) => Some(p.bind(&mut g, true)),
            _ => None,
        };
        let terms = cassle_total_loss(
            &mut g,
            s.method,
            distill,
            &views,
            frozen_views.as_ref(),
            pred.as_ref(),
            s.strategy.flags(),
            &s.losses,
        )?;
        let enc_vars = enc.vars();
        let mut total = terms.total;
        if s.strategy == Strategy::Ewc {
            for f in &learner.fishers {
                let p = ewc_penalty(&mut g, &enc_vars, f, s.train.ewc_lambda)?;
                total = g.add(total, p)?;
            }
        }
        let loss = g.value(total).item();
        if !loss.is_finite() {
            log.final_digest = checkpoint::encoder_digest(&learner.encoder);
            return Err(Error::Numeric(format!("non-finite loss at task {} step {step}", task_index + 1)));
        }
        let grads = g.backward(total)?;
        if let Some(n) = log.frozen_grad_norm.as_mut() {
            let leaked: f64 = frozen_vars.iter().map(|&v| grads.norm(v)).sum();
            *n = n.max(leaked);
        }

        let lr = cosine_lr(s.optimizer.global_lr, step, steps);
        let mut params: Vec<&mut Tensor> = learner.encoder.params_mut();
        let mut grad_list: Vec<Tensor> = enc_vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect();
        if let (Some(p), Some(bound)) = (learner.predictor.as_mut(), pred.as_ref()) {
            params.extend(p.params_mut());
            grad_list.extend(bound.vars().iter().map(|&v| grads.get_or_zeros(&g, v)));
        }
        opt.step(&mut params, &grad_list, lr)?;
        if let Some(e) = learner.ema.as_mut() {
            e.update(&learner.encoder)?;
        }

        if step % s.train.log_every == 0 || step + 1 == steps {
            log.steps.push(StepLog {
                step,
                ssl_loss: g.value(terms.ssl).item(),
                distill_loss: terms.distill.map(|d| g.value(d).item()),
                total: loss,
            });
        }
    }
    log.samples_read = seen.iter().filter(|&&b| b).count();
    log.final_digest = checkpoint::encoder_digest(&learner.encoder);
    if s.strategy == Strategy::Ewc {
        let f = estimate_fisher(learner, task, s.method, s.train.fisher_batches, s, task_index)?;
        learner.fishers.push(f);
    }
    Ok(log)
}

/// Diagonal Fisher from squared gradients of the SSL loss over `n_batches`
/// augmented minibatches of `task`, anchored at the current parameters.
pub fn estimate_fisher(
    learner: &Learner,
    task: &LabeledDataset,
    method: SslMethod,
    n_batches: usize,
    s: &StepSettings,
    task_index: usize,
) -> Result<FisherDiagonal> {
    if n_batches == 0 {
        return Err(Error::config("training.fisher_batches", "must be at least 1"));
    }
    let anchors: Vec<Tensor> = learner.encoder.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    let seed = mix(s.seed, task_index as u64, 0xF15E);
    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let idx = batch_indices(task.len(), s.train.batch_size, seed, task_index, b);
        let (va, vb) = augment_batch(&task.samples, &idx, &s.augment, seed, b as u64)?;
        let mut g = Graph::new();
        let enc = learner.encoder.bind(&mut g, true);
        let ema = learner.ema.as_ref().map(|e| e.bind(&mut g));
        let xa = g.constant(va);
        let xb = g.constant(vb);
        let views = ssl_views(&mut g, &enc, ema.as_ref(), xa, xb)?;
        let loss = ssl_loss(&mut g, method, &views, &s.losses)?;
        let grads = g.backward(loss)?;
        batches.push(enc.vars().iter().map(|&v| grads.get_or_zeros(&g, v)).collect::<Vec<_>>());
    }
    FisherDiagonal::from_squared_grads(&batches, anchors)
}
