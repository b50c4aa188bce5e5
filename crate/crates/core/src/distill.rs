//! Continual distillation through the SSL loss.
//!
//! At each task boundary the encoder is copied into a [`FrozenEncoder`]. The
//! live encoder's projections `z` are mapped by the predictor `g` and compared
//! to the frozen projections `z̄` with the same loss family the method uses
//! for self-supervision: `L_D(z, z̄) = L_SSL(g(z), z̄)`. The frozen side is
//! always a constant on the graph.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::losses::{
    barlow_twins_loss, infonce_loss, negative_cosine_loss, prototype_ce_loss, sinkhorn_assignments, soft_cross_entropy,
    LossConfig,
};
use crate::nn::{predict_past, prototype_scores, BoundEncoder, BoundMlp, EncoderState};

/// Snapshot of the encoder (and its prototypes) taken at a task boundary.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    encoder: EncoderState,
    digest: String,
}

impl FrozenEncoder {
    pub fn encoder(&self) -> &EncoderState {
        &self.encoder
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Binds every parameter as a constant.
    pub fn bind(&self, g: &mut Graph) -> BoundEncoder {
        self.encoder.bind(g, false)
    }
}

pub fn snapshot_frozen(enc: &EncoderState) -> FrozenEncoder {
    let mut encoder = enc.clone();
    if let Some(bank) = &mut encoder.prototypes {
        bank.trainable = false;
    }
    let digest = checkpoint::encoder_digest(&encoder);
    FrozenEncoder { encoder, digest }
}

/// The four loss families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    Contrastive,
    Mse,
    PrototypeCe,
    CrossCorrelation,
}

/// Self-supervised methods, one per family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslMethod {
    Simclr,
    Barlow,
    Byol,
    Swav,
}

impl SslMethod {
    pub fn family(self) -> LossFamily {
        match self {
            SslMethod::Simclr => LossFamily::Contrastive,
            SslMethod::Barlow => LossFamily::CrossCorrelation,
            SslMethod::Byol => LossFamily::Mse,
            SslMethod::Swav => LossFamily::PrototypeCe,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SslMethod::Simclr => "simclr",
            SslMethod::Barlow => "barlow",
            SslMethod::Byol => "byol",
            SslMethod::Swav => "swav",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "simclr" => Some(SslMethod::Simclr),
            "barlow" => Some(SslMethod::Barlow),
            "byol" => Some(SslMethod::Byol),
            "swav" => Some(SslMethod::Swav),
            _ => None,
        }
    }
}

/// Which family distills, and whether it may differ from the SSL family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DistillMethod {
    pub family: LossFamily,
    pub allow_cross_family: bool,
}

impl DistillMethod {
    pub fn matching(method: SslMethod) -> Self {
        DistillMethod { family: method.family(), allow_cross_family: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub swap_views: bool,
    pub use_predictor: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags { swap_views: false, use_predictor: true }
    }
}

fn frozen_side(g: &mut Graph, v: Var) -> Var {
    if g.requires_grad(v) {
        g.detach(v)
    } else {
        v
    }
}

fn predicted(g: &mut Graph, z: Var, predictor: Option<&BoundMlp>) -> Result<Var> {
    match predictor {
        Some(p) => predict_past(g, p, z),
        None => Ok(z),
    }
}

/// InfoNCE between `g(z_i)` and `z̄_i`; negatives come from the other
/// samples' predicted and frozen features unless an explicit pool is given.
pub fn distill_contrastive(
    g: &mut Graph,
    z: Var,
    z_frozen: Var,
    predictor: Option<&BoundMlp>,
    negatives: Option<Var>,
    cfg: &LossConfig,
) -> Result<Var> {
    let zf = frozen_side(g, z_frozen);
    let p = predicted(g, z, predictor)?;
    let neg = negatives.map(|n| frozen_side(g, n));
    infonce_loss(g, p, zf, neg, cfg)
}

/// Negative cosine between `g(z)` and `z̄`.
pub fn distill_mse(g: &mut Graph, z: Var, z_frozen: Var, predictor: Option<&BoundMlp>) -> Result<Var> {
    let zf = frozen_side(g, z_frozen);
    let p = predicted(g, z, predictor)?;
    negative_cosine_loss(g, p, zf)
}

/// Cross-entropy between the frozen soft assignment `ā = softmax(sim(z̄, C)/τ)`
/// and the predicted one, both against the frozen prototypes.
pub fn distill_prototype_ce(
    g: &mut Graph,
    z: Var,
    z_frozen: Var,
    predictor: Option<&BoundMlp>,
    frozen_bank: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    if g.shape(frozen_bank).first().copied().unwrap_or(0) == 0 {
        return Err(Error::config("arch.prototypes", "distillation needs a non-empty frozen prototype bank"));
    }
    let bank = frozen_side(g, frozen_bank);
    let zf = frozen_side(g, z_frozen);
    let target_scores = prototype_scores(g, zf, bank, cfg.temperature)?;
    let targets = softmax_rows(g.value(target_scores));
    let p = predicted(g, z, predictor)?;
    let scores = prototype_scores(g, p, bank, cfg.temperature)?;
    soft_cross_entropy(g, scores, &targets)
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let k = t.cols();
    for row in out.data_mut().chunks_exact_mut(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - m).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Barlow Twins loss on the cross-correlation of `g(z)` with `z̄`.
pub fn distill_cross_correlation(
    g: &mut Graph,
    z: Var,
    z_frozen: Var,
    predictor: Option<&BoundMlp>,
    cfg: &LossConfig,
) -> Result<Var> {
    let zf = frozen_side(g, z_frozen);
    let p = predicted(g, z, predictor)?;
    barlow_twins_loss(g, p, zf, cfg)
}

pub fn distill_loss(
    g: &mut Graph,
    family: LossFamily,
    z: Var,
    z_frozen: Var,
    predictor: Option<&BoundMlp>,
    frozen_bank: Option<Var>,
    cfg: &LossConfig,
) -> Result<Var> {
    match family {
        LossFamily::Contrastive => distill_contrastive(g, z, z_frozen, predictor, None, cfg),
        LossFamily::Mse => distill_mse(g, z, z_frozen, predictor),
        LossFamily::PrototypeCe => {
            let bank = frozen_bank.ok_or_else(|| {
                Error::config("distill.family", "prototype distillation needs frozen prototypes")
            })?;
            distill_prototype_ce(g, z, z_frozen, predictor, bank, cfg)
        }
        LossFamily::CrossCorrelation => distill_cross_correlation(g, z, z_frozen, predictor, cfg),
    }
}

/// Graph nodes the SSL objective of a method needs for one pair of views.
#[derive(Clone, Copy, Debug)]
pub struct SslViews {
    pub za: Var,
    pub zb: Var,
    /// Prediction-head outputs `h(z)` (BYOL).
    pub qa: Option<Var>,
    pub qb: Option<Var>,
    /// EMA target projections (BYOL); `z` itself, detached, when absent.
    pub target_a: Option<Var>,
    pub target_b: Option<Var>,
    /// Live prototype bank (SwAV).
    pub prototypes: Option<Var>,
}

impl SslViews {
    pub fn plain(za: Var, zb: Var) -> Self {
        SslViews { za, zb, qa: None, qb: None, target_a: None, target_b: None, prototypes: None }
    }
}

/// The method's symmetrized SSL loss `L(A, B) + L(B, A)`.
pub fn ssl_loss(g: &mut Graph, method: SslMethod, v: &SslViews, cfg: &LossConfig) -> Result<Var> {
    let (ab, ba) = match method {
        SslMethod::Simclr => (infonce_loss(g, v.za, v.zb, None, cfg)?, infonce_loss(g, v.zb, v.za, None, cfg)?),
        SslMethod::Barlow => (barlow_twins_loss(g, v.za, v.zb, cfg)?, barlow_twins_loss(g, v.zb, v.za, cfg)?),
        SslMethod::Byol => {
            let qa = v.qa.unwrap_or(v.za);
            let qb = v.qb.unwrap_or(v.zb);
            let ta = v.target_a.unwrap_or(v.za);
            let tb = v.target_b.unwrap_or(v.zb);
            (negative_cosine_loss(g, qa, tb)?, negative_cosine_loss(g, qb, ta)?)
        }
        SslMethod::Swav => {
            let bank = v.prototypes.ok_or_else(|| Error::config("arch.prototypes", "swav needs a prototype bank"))?;
            let codes = |g: &mut Graph, z: Var| -> Result<_> {
                // targets come from detached cosine scores
                let zc = g.detach(z);
                let bc = g.detach(bank);
                let s = prototype_scores(g, zc, bc, 1.0)?;
                sinkhorn_assignments(g.value(s), cfg)
            };
            let qa = codes(g, v.za)?;
            let qb = codes(g, v.zb)?;
            (prototype_ce_loss(g, v.za, &qb, bank, cfg)?, prototype_ce_loss(g, v.zb, &qa, bank, cfg)?)
        }
    };
    g.add(ab, ba)
}

/// Frozen projections of both views plus the frozen prototypes.
#[derive(Clone, Copy, Debug)]
pub struct FrozenViews {
    pub za: Var,
    pub zb: Var,
    pub prototypes: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ssl: Var,
    pub distill: Option<Var>,
    pub total: Var,
}

/// `L = L_SSL(A, B) + L_SSL(B, A) + L_D(z^A, z̄^A) + L_D(z^B, z̄^B)`, with unit
/// weights. Without a frozen encoder (first task) the distillation term is
/// omitted.
#[allow(clippy::too_many_arguments)]
pub fn cassle_total_loss(
    g: &mut Graph,
    method: SslMethod,
    distill: DistillMethod,
    views: &SslViews,
    frozen: Option<&FrozenViews>,
    predictor: Option<&BoundMlp>,
    flags: AblationFlags,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    if distill.family != method.family() && !distill.allow_cross_family {
        return Err(Error::config(
            "distill.family",
            "distillation family differs from the SSL family without cross-family opt-in",
        ));
    }
    let ssl = ssl_loss(g, method, views, cfg)?;
    let Some(fz) = frozen else {
        return Ok(LossTerms { ssl, distill: None, total: ssl });
    };
    let pred = if flags.use_predictor {
        Some(predictor.ok_or_else(|| Error::Contract("predictor requested but not bound".into()))?)
    } else {
        None
    };
    let (ta, tb) = if flags.swap_views { (fz.zb, fz.za) } else { (fz.za, fz.zb) };
    let da = distill_loss(g, distill.family, views.za, ta, pred, fz.prototypes, cfg)?;
    let db = distill_loss(g, distill.family, views.zb, tb, pred, fz.prototypes, cfg)?;
    let d = g.add(da, db)?;
    let total = g.add(ssl, d)?;
    Ok(LossTerms { ssl, distill: Some(d), total })
}
