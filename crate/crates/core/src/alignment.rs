//! Training-objective arithmetic: likelihood, odds-ratio preference loss,
//! the gated reward, group-relative advantages and preference pairing.
//!
//! Sequence probabilities are carried as summed natural-log token
//! probabilities so long sequences do not underflow.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{parse_action_output, Action};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignmentError {
    #[error("sequence probability must be in (0, 1], got log-probability {0}")]
    NonPositiveProbability(f64),
    #[error("sequence probability must be strictly between 0 and 1, got log-probability {0}")]
    DegenerateProbability(f64),
    #[error("group needs at least two samples, got {0}")]
    GroupTooSmall(usize),
    #[error("group declares {declared} samples but holds {actual}")]
    GroupSizeMismatch { declared: usize, actual: usize },
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceScore {
    #[serde(default)]
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<f64>,
}

impl SequenceScore {
    /// A single-token score carrying `prob` directly.
    pub fn from_prob(prob: f64) -> Self {
        SequenceScore {
            tokens: Vec::new(),
            token_logprobs: vec![prob.ln()],
        }
    }

    pub fn logprob(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }

    pub fn sequence_prob(&self) -> f64 {
        self.logprob().exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub r_fmt: f64,
    pub r_opt: f64,
    pub r_perf: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            r_fmt: 0.1,
            r_opt: 1.0,
            r_perf: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn max_total(&self) -> f64 {
        self.r_fmt + self.r_opt + 1.0 + self.r_perf
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub fmt: f64,
    pub opt_gate: u8,
    pub opt: f64,
    pub f1: f64,
    pub perf: f64,
    pub total: f64,
}

/// What the reward needs to know about one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardInputs {
    pub format_valid: bool,
    pub element_correct: bool,
    pub kind_correct: bool,
    pub argument_f1: f64,
}

/// Token-level F1 over lowercased whitespace-token multisets.
pub fn token_f1(predicted: &str, gold: &str) -> f64 {
    let count = |s: &str| {
        let mut bag: HashMap<String, usize> = HashMap::new();
        for tok in s.split_whitespace() {
            *bag.entry(tok.to_lowercase()).or_default() += 1;
        }
        bag
    };
    let (p, g) = (count(predicted), count(gold));
    let (np, ng): (usize, usize) = (p.values().sum(), g.values().sum());
    if np == 0 && ng == 0 {
        return 1.0;
    }
    let common: usize = p
        .iter()
        .map(|(tok, n)| (*n).min(g.get(tok).copied().unwrap_or(0)))
        .sum();
    // Equal to 2PR/(P+R), written so that swapping arguments is exact.
    2.0 * common as f64 / (np + ng) as f64
}

/// Argument F1 between two actions; 1.0 when neither carries an argument.
pub fn argument_f1(predicted: &Action, gold: &Action) -> f64 {
    token_f1(predicted.argument().unwrap_or(""), gold.argument().unwrap_or(""))
}

/// `fmt + gate * (opt + f1 + perf)`; everything after the gate is zeroed when
/// the element is wrong.
pub fn compose_reward(inputs: RewardInputs, cfg: &RewardConfig) -> RewardBreakdown {
    if !inputs.format_valid {
        return RewardBreakdown {
            fmt: 0.0,
            opt_gate: 0,
            opt: 0.0,
            f1: 0.0,
            perf: 0.0,
            total: 0.0,
        };
    }
    let fmt = cfg.r_fmt;
    if !inputs.element_correct {
        return RewardBreakdown {
            fmt,
            opt_gate: 0,
            opt: 0.0,
            f1: 0.0,
            perf: 0.0,
            total: fmt,
        };
    }
    let f1 = inputs.argument_f1.clamp(0.0, 1.0);
    let opt = cfg.r_opt;
    let perf = if inputs.kind_correct && f1 == 1.0 { cfg.r_perf } else { 0.0 };
    RewardBreakdown {
        fmt,
        opt_gate: 1,
        opt,
        f1,
        perf,
        total: fmt + (opt + f1 + perf),
    }
}

/// Reward for an already parsed prediction; `None` means the raw output did
/// not parse.
pub fn hierarchical_reward(predicted: Option<&Action>, gold: &Action, cfg: &RewardConfig) -> RewardBreakdown {
    let inputs = match predicted {
        None => RewardInputs {
            format_valid: false,
            element_correct: false,
            kind_correct: false,
            argument_f1: 0.0,
        },
        Some(p) => RewardInputs {
            format_valid: true,
            element_correct: p.element_id() == gold.element_id(),
            kind_correct: p.kind() == gold.kind(),
            argument_f1: argument_f1(p, gold),
        },
    };
    compose_reward(inputs, cfg)
}

/// Parses raw model text and scores it.
pub fn reward_from_output(raw_output: &str, gold: &Action, cfg: &RewardConfig) -> RewardBreakdown {
    hierarchical_reward(parse_action_output(raw_output).ok().as_ref(), gold, cfg)
}

fn checked_logprob(score: &SequenceScore) -> Result<f64, AlignmentError> {
    let lp = score.logprob();
    if lp.is_nan() || lp == f64::NEG_INFINITY || lp > 0.0 {
        return Err(AlignmentError::NonPositiveProbability(lp));
    }
    Ok(lp)
}

/// Mean negative log-likelihood of the batch.
pub fn sft_nll(scores: &[SequenceScore]) -> Result<f64, AlignmentError> {
    if scores.is_empty() {
        return Err(AlignmentError::EmptyBatch);
    }
    let mut total = 0.0;
    for score in scores {
        total -= checked_logprob(score)?;
    }
    Ok(total / scores.len() as f64)
}

/// `ln(p / (1 - p))` from `ln p`, accurate near both ends.
pub fn log_odds(logprob: f64) -> Result<f64, AlignmentError> {
    if !(logprob < 0.0) || logprob == f64::NEG_INFINITY {
        return Err(AlignmentError::DegenerateProbability(logprob));
    }
    Ok(logprob - (-logprob.exp_m1()).ln())
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredAction {
    pub action: Action,
    pub score: SequenceScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferencePair {
    pub prompt_id: String,
    pub winner: ScoredAction,
    pub loser: ScoredAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrpoLoss {
    pub loss: f64,
    pub nll: f64,
    pub or_term: f64,
}

/// `-ln P(y_w) + lambda * -ln sigmoid(ln(odds(y_w) / odds(y_l)))`.
pub fn orpo_loss(pair: &PreferencePair, lambda_or: f64) -> Result<OrpoLoss, AlignmentError> {
    let lw = pair.winner.score.logprob();
    let ll = pair.loser.score.logprob();
    let ratio = log_odds(lw)? - log_odds(ll)?;
    let nll = -lw;
    let or_term = softplus(-ratio);
    Ok(OrpoLoss {
        loss: nll + lambda_or * or_term,
        nll,
        or_term,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSample {
    pub rewards: Vec<f64>,
    #[serde(default = "default_group_size")]
    pub group_size: usize,
}

fn default_group_size() -> usize {
    5
}

impl GroupSample {
    pub fn new(rewards: Vec<f64>) -> Self {
        GroupSample {
            group_size: rewards.len(),
            rewards,
        }
    }
}

/// Rewards standardised within the group by population standard deviation.
/// A group whose rewards are all equal gets all-zero advantages.
pub fn grpo_advantages(group: &GroupSample) -> Result<Vec<f64>, AlignmentError> {
    let n = group.rewards.len();
    if n != group.group_size {
        return Err(AlignmentError::GroupSizeMismatch {
            declared: group.group_size,
            actual: n,
        });
    }
    if n < 2 {
        return Err(AlignmentError::GroupTooSmall(n));
    }
    let first = group.rewards[0];
    if group.rewards.iter().all(|&r| r == first) {
        return Ok(vec![0.0; n]);
    }
    let mean = group.rewards.iter().sum::<f64>() / n as f64;
    let var = group.rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let std = var.sqrt();
    Ok(group.rewards.iter().map(|r| (r - mean) / std).collect())
}

/// A sample is incorrect when it picks another element or another operation.
pub fn is_incorrect(sample: &Action, gold: &Action) -> bool {
    sample.element_id() != gold.element_id() || sample.kind() != gold.kind()
}

/// Gold action as winner; loser is the most probable incorrect sample, the
/// earliest one on ties. `None` when every sample is correct.
pub fn build_preference_pairs(
    prompt_id: &str,
    gold: &ScoredAction,
    samples: &[ScoredAction],
) -> Option<PreferencePair> {
    let mut loser: Option<&ScoredAction> = None;
    for sample in samples.iter().filter(|s| is_incorrect(&s.action, &gold.action)) {
        if loser.is_none_or(|best| sample.score.logprob() > best.score.logprob()) {
            loser = Some(sample);
        }
    }
    loser.map(|l| PreferencePair {
        prompt_id: prompt_id.to_string(),
        winner: gold.clone(),
        loser: l.clone(),
    })
}
