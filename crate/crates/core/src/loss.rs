//! Categorical cross-entropy, fuzzy entropy and the fuzzy categorical
//! cross-entropy (FCCE) that combines them, with analytic gradients with
//! respect to the pre-softmax logits.
//!
//! Every loss is a mean over pixels: a `c x N` field contributes
//! `(1/N) * sum_j loss_j`. The fuzzy-entropy term is scaled by
//! [`LossConfig::lambda`].
//!
//! The membership field fed to the entropy term comes from one of three
//! sources (see [`MembershipSource`]). FCM memberships do not depend on
//! the network, so in [`MembershipSource::FcmFixed`] mode the entropy term
//! only shifts the reported loss and contributes no gradient.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fcm::MembershipMatrix;
use crate::matrix::ClassMatrix;

/// Clamp applied inside every logarithm.
pub const LOG_EPSILON: f64 = 1e-12;

/// Slack allowed when checking that memberships lie in `[0, 1]`.
const RANGE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Cce,
    Fcce,
    /// The nested-network supervision loss from [`deep_supervision_loss`].
    DeepSupervision,
}

/// Which membership field the fuzzy-entropy term measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MembershipSource {
    /// Cached FCM memberships of the input image; constant during training.
    FcmFixed,
    /// The network's own softmax output.
    Prediction,
    /// `beta * u_fcm + (1 - beta) * p`.
    Blend,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub membership_source: MembershipSource,
    pub blend_beta: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::cce()
    }
}

impl LossConfig {
    pub fn cce() -> Self {
        Self {
            kind: LossKind::Cce,
            membership_source: MembershipSource::Prediction,
            blend_beta: 0.5,
            lambda: 1.0,
            epsilon: LOG_EPSILON,
        }
    }

    pub fn fcce(source: MembershipSource, lambda: f64) -> Self {
        Self { kind: LossKind::Fcce, membership_source: source, lambda, ..Self::cce() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-6) {
            return Err(Error::config(format!("epsilon must be in (0, 1e-6], got {}", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.blend_beta) {
            return Err(Error::config(format!("blend_beta must be in [0, 1], got {}", self.blend_beta)));
        }
        Ok(())
    }

    /// True when the loss reads cached FCM memberships.
    pub fn needs_fcm(&self) -> bool {
        self.kind == LossKind::Fcce
            && matches!(self.membership_source, MembershipSource::FcmFixed | MembershipSource::Blend)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Cce => "cce",
            LossKind::Fcce => "fcce",
            LossKind::DeepSupervision => "deep_supervision",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cce" => Ok(LossKind::Cce),
            "fcce" => Ok(LossKind::Fcce),
            "deep_supervision" | "deep-supervision" => Ok(LossKind::DeepSupervision),
            other => Err(Error::config(format!("unknown loss kind `{other}`"))),
        }
    }
}

impl fmt::Display for MembershipSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MembershipSource::FcmFixed => "fcm_fixed",
            MembershipSource::Prediction => "prediction",
            MembershipSource::Blend => "blend",
        })
    }
}

impl FromStr for MembershipSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "fcm_fixed" | "fcm" => Ok(MembershipSource::FcmFixed),
            "prediction" => Ok(MembershipSource::Prediction),
            "blend" => Ok(MembershipSource::Blend),
            other => Err(Error::config(format!("unknown membership source `{other}`"))),
        }
    }
}

/// Predicted class probabilities, one column per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityField(pub ClassMatrix);

impl ProbabilityField {
    /// Wraps a matrix after checking entries and column sums.
    pub fn new(matrix: ClassMatrix) -> Result<Self> {
        if matrix.as_slice().iter().any(|&p| !(-1e-12..=1.0 + 1e-12).contains(&p)) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        if matrix.max_column_sum_error() > 1e-6 {
            return Err(Error::invalid("probability columns must sum to 1"));
        }
        Ok(Self(matrix))
    }

    pub fn matrix(&self) -> &ClassMatrix {
        &self.0
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.0.argmax_columns()
    }
}

/// One-hot ground truth, one column per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField(pub ClassMatrix);

impl LabelField {
    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        let mut m = ClassMatrix::zeros(classes, labels.len());
        for (j, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::invalid(format!("label {l} at pixel {j} is not below {classes}")));
            }
            m.set(l, j, 1.0);
        }
        Ok(Self(m))
    }

    /// Checks the one-hot invariant.
    pub fn new(matrix: ClassMatrix) -> Result<Self> {
        for j in 0..matrix.pixels() {
            let col = matrix.column(j);
            let ones = col.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 || col.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::invalid(format!("column {j} is not one-hot")));
            }
        }
        Ok(Self(matrix))
    }

    pub fn to_labels(&self) -> Vec<usize> {
        self.0.argmax_columns()
    }

    pub fn matrix(&self) -> &ClassMatrix {
        &self.0
    }
}

/// Column-wise softmax with max subtraction.
pub fn softmax(logits: &ClassMatrix) -> Result<ProbabilityField> {
    if logits.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax of non-finite logits"));
    }
    let (c, n) = (logits.classes(), logits.pixels());
    let mut out = ClassMatrix::zeros(c, n);
    for j in 0..n {
        let max = (0..c).map(|i| logits.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..c {
            let e = (logits.get(i, j) - max).exp();
            out.set(i, j, e);
            sum += e;
        }
        for i in 0..c {
            out.set(i, j, out.get(i, j) / sum);
        }
    }
    Ok(ProbabilityField(out))
}

fn mean_over_pixels(total: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

fn cce_eps(y: &LabelField, p: &ProbabilityField, eps: f64) -> Result<f64> {
    y.0.check_same_shape(&p.0, "cce")?;
    let (c, n) = (p.0.classes(), p.0.pixels());
    let mut total = 0.0;
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..c {
            let yij = y.0.get(i, j);
            if yij != 0.0 {
                col -= yij * p.0.get(i, j).max(eps).ln();
            }
        }
        total += col;
    }
    Ok(mean_over_pixels(total, n))
}

/// Categorical cross-entropy averaged over pixels.
pub fn cce(y: &LabelField, p: &ProbabilityField) -> Result<f64> {
    cce_eps(y, p, LOG_EPSILON)
}

/// Gradient of `cce(y, softmax(z))` with respect to `z`: `(p - y) / N`.
pub fn cce_grad_logits(y: &LabelField, p: &ProbabilityField) -> Result<ClassMatrix> {
    y.0.check_same_shape(&p.0, "cce_grad_logits")?;
    let n = p.0.pixels().max(1) as f64;
    let data = p.0.as_slice().iter().zip(y.0.as_slice()).map(|(&pv, &yv)| (pv - yv) / n).collect();
    ClassMatrix::from_vec(p.0.classes(), p.0.pixels(), data)
}

fn check_unit_range(u: &ClassMatrix) -> Result<()> {
    match u.as_slice().iter().position(|&v| !(v >= -RANGE_SLACK && v <= 1.0 + RANGE_SLACK)) {
        Some(k) => Err(Error::invalid(format!("membership entry {k} is outside [0, 1]"))),
        None => Ok(()),
    }
}

#[inline]
fn neg_u_log_u(u: f64, eps: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else {
        -u * u.max(eps).ln()
    }
}

/// Derivative of `-u log(max(u, eps))` with respect to `u`.
#[inline]
fn neg_u_log_u_grad(u: f64, eps: f64) -> f64 {
    if u >= eps {
        -u.ln() - 1.0
    } else {
        -eps.ln()
    }
}

fn fuzzy_entropy_eps(u: &ClassMatrix, eps: f64) -> Result<f64> {
    check_unit_range(u)?;
    let (c, n) = (u.classes(), u.pixels());
    let mut total = 0.0;
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..c {
            col += neg_u_log_u(u.get(i, j), eps);
        }
        total += col;
    }
    Ok(mean_over_pixels(total, n))
}

/// Fuzzy entropy `-(1/N) sum_ij u_ij log u_ij`, with `0 log 0 = 0`.
///
/// Accepts any `c x N` field with entries in `[0, 1]`: FCM memberships or
/// predicted probabilities.
pub fn fuzzy_entropy(u: &ClassMatrix) -> Result<f64> {
    fuzzy_entropy_eps(u, LOG_EPSILON)
}

/// Elementwise `(-log u_ij - 1) / N`; entries below the clamp use the
/// clamped logarithm.
pub fn fuzzy_entropy_grad(u: &ClassMatrix) -> Result<ClassMatrix> {
    check_unit_range(u)?;
    let n = u.pixels().max(1) as f64;
    let eps = LOG_EPSILON;
    Ok(u.map(|v| (-(v.max(eps)).ln() - 1.0) / n))
}

fn effective_memberships(
    p: &ProbabilityField,
    u_fcm: Option<&MembershipMatrix>,
    cfg: &LossConfig,
) -> Result<ClassMatrix> {
    let need_fcm = || {
        u_fcm.ok_or_else(|| Error::invalid(format!("membership source {} needs FCM memberships", cfg.membership_source)))
    };
    match cfg.membership_source {
        MembershipSource::Prediction => Ok(p.0.clone()),
        MembershipSource::FcmFixed => {
            let u = need_fcm()?;
            u.0.check_same_shape(&p.0, "fcce memberships")?;
            Ok(u.0.clone())
        }
        MembershipSource::Blend => {
            let u = need_fcm()?;
            u.0.check_same_shape(&p.0, "fcce memberships")?;
            let b = cfg.blend_beta;
            let data = u.0.as_slice().iter().zip(p.0.as_slice()).map(|(&uv, &pv)| b * uv + (1.0 - b) * pv).collect();
            ClassMatrix::from_vec(p.0.classes(), p.0.pixels(), data)
        }
    }
}

/// Fuzzy categorical cross-entropy: `cce(y, p) + lambda * H(u_eff)`.
///
/// For any kind other than [`LossKind::Fcce`] only the first term is
/// evaluated; [`loss_and_grad`] dispatches the deep-supervision kind.
pub fn fcce(y: &LabelField, p: &ProbabilityField, u_fcm: Option<&MembershipMatrix>, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let base = cce_eps(y, p, cfg.epsilon)?;
    if cfg.kind != LossKind::Fcce {
        return Ok(base);
    }
    let u = effective_memberships(p, u_fcm, cfg)?;
    Ok(base + cfg.lambda * fuzzy_entropy_eps(&u, cfg.epsilon)?)
}

/// Pulls a per-probability gradient `g` back through the column softmax:
/// `dz_k = p_k (g_k - sum_i p_i g_i)`.
fn softmax_backward(p: &ClassMatrix, g: &ClassMatrix) -> ClassMatrix {
    let (c, n) = (p.classes(), p.pixels());
    let mut out = ClassMatrix::zeros(c, n);
    for j in 0..n {
        let dot: f64 = (0..c).map(|i| p.get(i, j) * g.get(i, j)).sum();
        for k in 0..c {
            out.set(k, j, p.get(k, j) * (g.get(k, j) - dot));
        }
    }
    out
}

/// Gradient of `fcce(y, softmax(z), u_fcm)` with respect to `z`.
pub fn fcce_grad_logits(
    y: &LabelField,
    p: &ProbabilityField,
    u_fcm: Option<&MembershipMatrix>,
    cfg: &LossConfig,
) -> Result<ClassMatrix> {
    cfg.validate()?;
    let mut grad = cce_grad_logits(y, p)?;
    if cfg.kind != LossKind::Fcce {
        return Ok(grad);
    }
    let u = effective_memberships(p, u_fcm, cfg)?;
    let weight = match cfg.membership_source {
        MembershipSource::FcmFixed => return Ok(grad),
        MembershipSource::Prediction => 1.0,
        MembershipSource::Blend => 1.0 - cfg.blend_beta,
    };
    let n = p.0.pixels().max(1) as f64;
    let eps = cfg.epsilon;
    let dp = u.map(|v| weight * neg_u_log_u_grad(v, eps) / n);
    let dz = softmax_backward(&p.0, &dp);
    for (g, d) in grad.as_mut_slice().iter_mut().zip(dz.as_slice()) {
        *g += cfg.lambda * d;
    }
    Ok(grad)
}

/// Value and logit gradient of the configured loss in one pass.
pub fn loss_and_grad(
    y: &LabelField,
    logits: &ClassMatrix,
    u_fcm: Option<&MembershipMatrix>,
    cfg: &LossConfig,
) -> Result<(f64, ClassMatrix)> {
    let p = softmax(logits)?;
    if cfg.kind == LossKind::DeepSupervision {
        cfg.validate()?;
        return Ok((deep_supervision_loss(y, &p)?, deep_supervision_grad_logits(y, &p)?));
    }
    let value = fcce(y, &p, u_fcm, cfg)?;
    let grad = fcce_grad_logits(y, &p, u_fcm, cfg)?;
    Ok((value, grad))
}

#[inline]
fn dice_like(y: f64, p: f64) -> f64 {
    if y == 0.0 {
        0.0
    } else {
        2.0 * y * p / (y * y + p * p)
    }
}

/// Deep-supervision loss, evaluated literally:
/// `-(1/N) sum_{c,n} (y log p + 2 y p / (y^2 + p^2))`.
///
/// The Dice-like term enters with a negative sign, so a perfect prediction
/// scores `-C_present` rather than zero. Terms with `y = 0` vanish.
pub fn deep_supervision_loss(y: &LabelField, p: &ProbabilityField) -> Result<f64> {
    y.0.check_same_shape(&p.0, "deep_supervision_loss")?;
    let (c, n) = (p.0.classes(), p.0.pixels());
    let mut total = 0.0;
    for j in 0..n {
        for i in 0..c {
            let (yv, pv) = (y.0.get(i, j), p.0.get(i, j));
            if yv != 0.0 {
                total += yv * pv.max(LOG_EPSILON).ln() + dice_like(yv, pv);
            }
        }
    }
    Ok(-mean_over_pixels(total, n))
}

/// Gradient of [`deep_supervision_loss`] with respect to the probabilities.
pub fn deep_supervision_grad_probs(y: &LabelField, p: &ProbabilityField) -> Result<ClassMatrix> {
    y.0.check_same_shape(&p.0, "deep_supervision_grad_probs")?;
    let n = p.0.pixels().max(1) as f64;
    let data = y
        .0
        .as_slice()
        .iter()
        .zip(p.0.as_slice())
        .map(|(&yv, &pv)| {
            if yv == 0.0 {
                return 0.0;
            }
            let log_term = if pv >= LOG_EPSILON { yv / pv } else { 0.0 };
            let s = yv * yv + pv * pv;
            let dice_term = 2.0 * yv * (yv * yv - pv * pv) / (s * s);
            -(log_term + dice_term) / n
        })
        .collect();
    ClassMatrix::from_vec(p.0.classes(), p.0.pixels(), data)
}

/// Gradient of `deep_supervision_loss(y, softmax(z))` with respect to `z`.
pub fn deep_supervision_grad_logits(y: &LabelField, p: &ProbabilityField) -> Result<ClassMatrix> {
    let dp = deep_supervision_grad_probs(y, p)?;
    Ok(softmax_backward(&p.0, &dp))
}
