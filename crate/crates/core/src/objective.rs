//! Task loss, the quantization regularizer, and 1-hotness diagnostics.

use serde::{Deserialize, Serialize};

use crate::cell::{SequenceOutput, StepTrace};
use crate::error::{Error, Result};

/// What the task head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// A label per token, from a linear classifier over `[out_fwd ; out_bwd]`.
    #[default]
    TokenClassification,
    /// Start and end pointers over the sequence.
    SpanPointing,
}

/// Which gold annotation a token classifier is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenTarget {
    /// `class * n_roles + role`.
    #[default]
    Joint,
    Class,
    Role,
}

/// How per-step quantization penalties are pooled over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QAggregation {
    /// Mean over every step of every sequence, both directions.
    #[default]
    Mean,
    /// Sum over the steps of each sequence (both directions), averaged over sequences.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub c_q: f64,
    pub task: TaskKind,
    pub target: TokenTarget,
    pub q_aggregation: QAggregation,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            c_q: 1e-5,
            task: TaskKind::TokenClassification,
            target: TokenTarget::Joint,
            q_aggregation: QAggregation::Mean,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_q >= 0.0 && self.c_q.is_finite()) {
            return Err(Error::Config(format!("c_q must be a finite non-negative number, got {}", self.c_q)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub quantization: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(cross_entropy: f64, quantization: f64, c_q: f64) -> Self {
        Self { cross_entropy, quantization, total: cross_entropy + c_q * quantization }
    }
}

/// `Σ aᵢ²(1−aᵢ)² + (Σ aᵢ² − 1)²`, zero exactly on 1-hot vectors.
pub fn q_penalty_vec(a: &[f64]) -> f64 {
    let mut wells = 0.0;
    let mut sq = 0.0;
    for &x in a {
        let y = x * (1.0 - x);
        wells += y * y;
        sq += x * x;
    }
    wells + (sq - 1.0) * (sq - 1.0)
}

/// Gradient of [`q_penalty_vec`], accumulated as `out += scale * ∇Q(a)`.
pub fn q_penalty_grad_acc(a: &[f64], scale: f64, out: &mut [f64]) {
    let sq: f64 = a.iter().map(|x| x * x).sum();
    let norm_term = 4.0 * (sq - 1.0);
    for (o, &x) in out.iter_mut().zip(a) {
        *o += scale * (2.0 * x * (1.0 - x) * (1.0 - 2.0 * x) + norm_term * x);
    }
}

pub fn q_penalty_step(a_s: &[f64], a_r: &[f64]) -> f64 {
    q_penalty_vec(a_s) + q_penalty_vec(a_r)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter_mut().for_each(|x| *x /= sum);
    e
}

/// `−log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Input(format!(
            "target class {target} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok((lse - logits[target]).max(0.0))
}

/// Pools quantization penalties over a batch according to `agg`.
pub fn batch_quantization(batch: &[SequenceOutput], agg: QAggregation) -> f64 {
    let mut total = 0.0;
    let mut steps = 0usize;
    for seq in batch {
        for tr in seq.forward.iter().chain(&seq.backward) {
            total += q_penalty_step(tr.a_s.as_slice(), tr.a_r.as_slice());
            steps += 1;
        }
    }
    match agg {
        QAggregation::Mean => total / steps as f64,
        QAggregation::Sum => total / batch.len() as f64,
    }
}

/// Combines per-token (or per-example, for span pointing) task losses with
/// the pooled quantization penalty.
pub fn total_objective(
    batch: &[SequenceOutput],
    task_losses: &[f64],
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() || task_losses.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let expected = match cfg.task {
        TaskKind::TokenClassification => batch.iter().map(|s| s.per_token.len()).sum(),
        TaskKind::SpanPointing => batch.len(),
    };
    if task_losses.len() != expected {
        return Err(Error::Config(format!(
            "{} task losses for a batch needing {expected}",
            task_losses.len()
        )));
    }
    let ce = task_losses.iter().sum::<f64>() / task_losses.len() as f64;
    let q = batch_quantization(batch, cfg.q_aggregation);
    Ok(LossBreakdown::compose(ce, q, cfg.c_q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneHotness {
    /// Mean of the largest component over all symbol and role attention vectors.
    pub mean_max_component: f64,
    pub mean_max_symbol: f64,
    pub mean_max_role: f64,
    /// Mean per-step penalty `Q_a(a_S) + Q_a(a_R)`.
    pub mean_q: f64,
}

fn max_component(a: &[f64]) -> f64 {
    a.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn onehotness<'a, I>(traces: I) -> Result<OneHotness>
where
    I: IntoIterator<Item = &'a StepTrace>,
{
    let mut acc = OneHotAccumulator::default();
    for tr in traces {
        acc.push(tr.a_s.as_slice(), tr.a_r.as_slice());
    }
    acc.finish()
}

/// Running form of [`onehotness`] for callers that do not keep traces around.
#[derive(Debug, Clone, Default)]
pub struct OneHotAccumulator {
    max_s: f64,
    max_r: f64,
    q: f64,
    steps: usize,
}

impl OneHotAccumulator {
    pub fn push(&mut self, a_s: &[f64], a_r: &[f64]) {
        self.max_s += max_component(a_s);
        self.max_r += max_component(a_r);
        self.q += q_penalty_step(a_s, a_r);
        self.steps += 1;
    }

    pub fn merge(&mut self, other: &OneHotAccumulator) {
        self.max_s += other.max_s;
        self.max_r += other.max_r;
        self.q += other.q;
        self.steps += other.steps;
    }

    pub fn finish(&self) -> Result<OneHotness> {
        if self.steps == 0 {
            return Err(Error::Degenerate("no attention vectors to summarize".into()));
        }
        let n = self.steps as f64;
        Ok(OneHotness {
            mean_max_component: (self.max_s + self.max_r) / (2.0 * n),
            mean_max_symbol: self.max_s / n,
            mean_max_role: self.max_r / n,
            mean_q: self.q / n,
        })
    }
}
