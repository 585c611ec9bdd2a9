//! Classification loss and the attribution-prior regularizers.
//!
//! Every penalty is computed per sample and then averaged over the batch, so
//! the regularization weights are batch-size independent. The two
//! input-gradient penalties build the gradient of an auxiliary scalar with
//! respect to the input on the same tape as the forward pass; the result
//! stays differentiable with respect to the parameters (double
//! backpropagation).

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Training method selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Masked,
    ActDiff,
    Adversarial,
    GradMask,
    Rrr,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Baseline,
        Method::Masked,
        Method::ActDiff,
        Method::Adversarial,
        Method::GradMask,
        Method::Rrr,
    ];

    /// Methods that need segmentation masks during training.
    pub fn needs_masks(self) -> bool {
        !matches!(self, Method::Baseline)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Baseline => "baseline",
            Method::Masked => "masked",
            Method::ActDiff => "actdiff",
            Method::Adversarial => "adversarial",
            Method::GradMask => "gradmask",
            Method::Rrr => "rrr",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "masked" => Ok(Method::Masked),
            "actdiff" => Ok(Method::ActDiff),
            "adversarial" => Ok(Method::Adversarial),
            "gradmask" => Ok(Method::GradMask),
            "rrr" => Ok(Method::Rrr),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Method plus regularizer weights; the classification term always has
/// weight 1.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossConfig {
    pub method: Method,
    pub lambda_act: f64,
    pub lambda_disc: f64,
    pub lambda_gradmask: f64,
    pub lambda_rrr: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            method: Method::Baseline,
            lambda_act: 0.0,
            lambda_disc: 0.0,
            lambda_gradmask: 0.0,
            lambda_rrr: 0.0,
        }
    }
}

impl LossConfig {
    /// Single-λ constructor: the weight lands on the active method's slot.
    pub fn for_method(method: Method, lambda: f64) -> Self {
        let mut cfg = LossConfig { method, ..Default::default() };
        match method {
            Method::ActDiff => cfg.lambda_act = lambda,
            Method::Adversarial => cfg.lambda_disc = lambda,
            Method::GradMask => cfg.lambda_gradmask = lambda,
            Method::Rrr => cfg.lambda_rrr = lambda,
            Method::Baseline | Method::Masked => {}
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_act", self.lambda_act),
            ("lambda_disc", self.lambda_disc),
            ("lambda_gradmask", self.lambda_gradmask),
            ("lambda_rrr", self.lambda_rrr),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative real")));
            }
        }
        Ok(())
    }

    pub fn active_lambda(&self) -> f64 {
        match self.method {
            Method::ActDiff => self.lambda_act,
            Method::Adversarial => self.lambda_disc,
            Method::GradMask => self.lambda_gradmask,
            Method::Rrr => self.lambda_rrr,
            Method::Baseline | Method::Masked => 0.0,
        }
    }
}

/// Batch-mean negative log likelihood: mean_n −log softmax(logits)[label_n].
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape(format!(
            "logits {:?} vs {} labels",
            shape,
            labels.len()
        )));
    }
    let k = shape[1];
    if labels.iter().any(|&l| l >= k) {
        return Err(Error::Config(format!("label out of range for {k} classes")));
    }
    let lp = tape.log_softmax(logits);
    let picked = tape.row_gather(lp, Arc::new(labels.to_vec()));
    let total = tape.sum_all(picked);
    let scaled = tape.scale(total, -T::ONE / T::from_f64(labels.len() as f64));
    Ok(scaled)
}

/// λ · mean_n ||pre_masked_n − pre_clean_n||₂ over (N,D) representation
/// pairs.
pub fn actdiff_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pre_masked: Var,
    pre_clean: Var,
    lambda: T,
) -> Result<Var> {
    if tape.shape(pre_masked) != tape.shape(pre_clean) {
        return Err(Error::Shape(format!(
            "representation dims differ: {:?} vs {:?}",
            tape.shape(pre_masked),
            tape.shape(pre_clean)
        )));
    }
    let diff = tape.sub(pre_masked, pre_clean);
    let sq = tape.mul(diff, diff);
    let per_sample = tape.sample_sum(sq);
    let norms = tape.sqrt(per_sample);
    let mean = tape.mean_all(norms);
    Ok(tape.scale(mean, lambda))
}

/// λ · mean_n Σ_pixels ((keep_out ⊙ g)²) for a precomputed input-gradient
/// field g. `keep_out` is the (1 − seg) indicator.
fn masked_square_sum<T: Scalar>(tape: &mut Tape<T>, g: Var, keep_out: Var, lambda: T) -> Var {
    let masked = tape.mul(g, keep_out);
    let sq = tape.mul(masked, masked);
    let per_sample = tape.sample_sum(sq);
    let mean = tape.mean_all(per_sample);
    tape.scale(mean, lambda)
}

/// λ · mean_n ||keep_out ⊙ c||₂ for a precomputed contrast-gradient field.
fn masked_l2<T: Scalar>(tape: &mut Tape<T>, c: Var, keep_out: Var, lambda: T) -> Var {
    let masked = tape.mul(c, keep_out);
    let sq = tape.mul(masked, masked);
    let per_sample = tape.sample_sum(sq);
    let norms = tape.sqrt(per_sample);
    let mean = tape.mean_all(norms);
    tape.scale(mean, lambda)
}

/// Penalty on the input gradient of the summed class log-probabilities
/// outside the mask. `logits` must be derived from `input` on this tape.
/// Multi-class inputs sum the log-probability over every class.
pub fn rrr_penalty<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    logits: Var,
    keep_out: Var,
    lambda: T,
) -> Result<Var> {
    if tape.shape(input) != tape.shape(keep_out) {
        return Err(Error::Shape(format!(
            "input {:?} vs keep_out {:?}",
            tape.shape(input),
            tape.shape(keep_out)
        )));
    }
    let lp = tape.log_softmax(logits);
    let s = tape.sum_all(lp);
    let g = tape.grad(s, &[input])[0];
    Ok(masked_square_sum(tape, g, keep_out, lambda))
}

/// Penalty on the input gradient of the binary logit contrast |ŷ₀ − ŷ₁|
/// outside the mask. Only defined for 2-class heads.
pub fn gradmask_penalty<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    logits: Var,
    keep_out: Var,
    lambda: T,
) -> Result<Var> {
    let shape = tape.shape(logits);
    if shape.len() != 2 || shape[1] != 2 {
        return Err(Error::Config(format!(
            "the contrast penalty is only defined for binary classification, got {:?} logits",
            shape
        )));
    }
    if tape.shape(input) != tape.shape(keep_out) {
        return Err(Error::Shape(format!(
            "input {:?} vs keep_out {:?}",
            tape.shape(input),
            tape.shape(keep_out)
        )));
    }
    let n = shape[0];
    let y0 = tape.row_gather(logits, Arc::new(vec![0usize; n]));
    let y1 = tape.row_gather(logits, Arc::new(vec![1usize; n]));
    let diff = tape.sub(y0, y1);
    let contrast = tape.abs(diff);
    let total = tape.sum_all(contrast);
    let c = tape.grad(total, &[input])[0];
    Ok(masked_l2(tape, c, keep_out, lambda))
}

/// Probability floor used when the discriminator saturates.
pub const PROB_EPS: f64 = 1e-7;

/// Adversarial objectives from discriminator probabilities on the masked and
/// clean embeddings. Returns `(disc_loss, encoder_term)`:
/// the discriminator minimizes `disc_loss`
/// (= maximizing its log likelihood of telling the domains apart), while the
/// encoder minimizes `encoder_term` added to its classification loss.
pub fn adversarial_losses<T: Scalar>(
    tape: &mut Tape<T>,
    d_prob_masked: Var,
    d_prob_clean: Var,
    lambda: T,
) -> Result<(Var, Var)> {
    if tape.shape(d_prob_masked).len() != 1 || tape.shape(d_prob_clean).len() != 1 {
        return Err(Error::Shape("discriminator probabilities must be rank-1".into()));
    }
    let eps = T::from_f64(PROB_EPS);
    let one = T::ONE;
    let pm = tape.clamp(d_prob_masked, eps, one - eps);
    let pc = tape.clamp(d_prob_clean, eps, one - eps);

    let ln_pm = tape.ln(pm);
    let mean_ln_pm = tape.mean_all(ln_pm);
    let npc = tape.neg(pc);
    let one_m_pc = tape.add_scalar(npc, one);
    let ln_1mpc = tape.ln(one_m_pc);
    let mean_ln_1mpc = tape.mean_all(ln_1mpc);
    let lik = tape.add(mean_ln_pm, mean_ln_1mpc);
    let neg_lik = tape.neg(lik);
    let disc_loss = tape.scale(neg_lik, lambda);

    let npm = tape.neg(pm);
    let one_m_pm = tape.add_scalar(npm, one);
    let ln_1mpm = tape.ln(one_m_pm);
    let mean_ln_1mpm = tape.mean_all(ln_1mpm);
    let ln_pc = tape.ln(pc);
    let mean_ln_pc = tape.mean_all(ln_pc);
    let fool = tape.add(mean_ln_1mpm, mean_ln_pc);
    let enc_term = tape.scale(fool, lambda);

    Ok((disc_loss, enc_term))
}
