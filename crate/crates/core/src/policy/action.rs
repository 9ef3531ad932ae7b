//! Spatial softmax over masked pixel logits and the actor-critic surrogate loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Result};
use crate::geometry::Pixel;
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Sample,
    Greedy,
}

/// Masked softmax probabilities; masked pixels get exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(domain_err!("logits and mask sizes differ"));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(domain_err!("no valid pixel to pick"));
    }
    let mut p: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(l, m)| if *m { (l - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    Ok(p)
}

/// Chooses a pixel: a draw from the masked softmax or the row-major-first argmax.
pub fn select_action<R: Rng + ?Sized>(
    logits: &Grid<f64>,
    mask: &Grid<bool>,
    mode: SelectionMode,
    rng: &mut R,
) -> Result<Pixel> {
    if (logits.width(), logits.height()) != (mask.width(), mask.height()) {
        return Err(domain_err!("logits and mask sizes differ"));
    }
    let index = match mode {
        SelectionMode::Greedy => {
            let mut best: Option<(usize, f64)> = None;
            for (i, (l, m)) in logits.as_slice().iter().zip(mask.as_slice()).enumerate() {
                if *m && best.is_none_or(|(_, b)| *l > b) {
                    best = Some((i, *l));
                }
            }
            best.ok_or_else(|| domain_err!("no valid pixel to pick"))?.0
        }
        SelectionMode::Sample => {
            let p = masked_softmax(logits.as_slice(), mask.as_slice())?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, pi) in p.iter().enumerate() {
                if *pi > 0.0 {
                    acc += pi;
                    chosen = Some(i);
                    if u < acc {
                        break;
                    }
                }
            }
            chosen.expect("at least one valid pixel")
        }
    };
    let (x, y) = logits.coords(index);
    Ok(Pixel::new(x as i32, y as i32))
}

/// Entropy of the masked distribution.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyObjective {
    /// Plain advantage actor-critic.
    AdvantageActorCritic,
    /// Probability-ratio clipping at `clip_epsilon`.
    Clipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub objective: PolicyObjective,
    pub clip_epsilon: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            objective: PolicyObjective::Clipped,
            clip_epsilon: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.001,
        }
    }
}

/// One transition as seen by the loss.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateSample<'a> {
    pub logits: &'a [f64],
    pub mask: &'a [bool],
    pub action: usize,
    /// Log-probability of `action` under the policy that collected it.
    pub old_log_prob: f64,
    pub advantage: f64,
    pub value: f64,
    pub target_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateLoss {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub ratio: f64,
    /// dL/dlogits (zero on masked pixels).
    pub grad_logits: Vec<f64>,
    pub grad_value: f64,
}

/// `L = policy + value_coef·(V − G)² − entropy_coef·H`, with the gradient with respect to
/// the logits and the value.
pub fn surrogate_loss(s: &SurrogateSample, cfg: &SurrogateConfig) -> Result<SurrogateLoss> {
    let p = masked_softmax(s.logits, s.mask)?;
    if s.action >= p.len() || !s.mask[s.action] {
        return Err(domain_err!("action {} is not a valid pixel", s.action));
    }
    let log_p = p[s.action].ln();
    let ratio = (log_p - s.old_log_prob).exp();
    let a = s.advantage;
    // dL/dlog_p of the chosen action
    let (policy, dlogp) = match cfg.objective {
        PolicyObjective::AdvantageActorCritic => (-a * log_p, -a),
        PolicyObjective::Clipped => {
            let clipped = ratio.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon);
            let (u, c) = (ratio * a, clipped * a);
            if u <= c {
                (-u, -a * ratio)
            } else {
                (-c, 0.0)
            }
        }
    };
    let h = entropy(&p);
    let value = (s.value - s.target_return).powi(2);
    let mut grad = vec![0.0; p.len()];
    for (j, g) in grad.iter_mut().enumerate() {
        if !s.mask[j] {
            continue;
        }
        let onehot = if j == s.action { 1.0 } else { 0.0 };
        // d log_p / dz_j = 1[j = a] − p_j ; dH/dz_j = −p_j (ln p_j + H)
        let dh = if p[j] > 0.0 { -p[j] * (p[j].ln() + h) } else { 0.0 };
        *g = dlogp * (onehot - p[j]) - cfg.entropy_coef * dh;
    }
    Ok(SurrogateLoss {
        total: policy + cfg.value_coef * value - cfg.entropy_coef * h,
        policy,
        value,
        entropy: h,
        ratio,
        grad_logits: grad,
        grad_value: 2.0 * cfg.value_coef * (s.value - s.target_return),
    })
}
