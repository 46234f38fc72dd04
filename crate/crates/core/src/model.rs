//! Bidirectional TPR network with a task head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{run_bidirectional, CellParams, Hyper, SequenceOutput};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::objective::TaskKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskHead {
    /// Linear classifier over `[out_fwd ; out_bwd]`: `n_labels x 2D` weight.
    Token { weight: Matrix, bias: Vector },
    /// Start/end pointer logits `u · h_t` against learned query summaries.
    Span { start: Vector, end: Vector },
}

impl TaskHead {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskHead::Token { .. } => TaskKind::TokenClassification,
            TaskHead::Span { .. } => TaskKind::SpanPointing,
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            TaskHead::Token { weight, bias } => TaskHead::Token {
                weight: Matrix::zeros(weight.rows(), weight.cols()),
                bias: Vector::zeros(bias.len()),
            },
            TaskHead::Span { start, end } => {
                TaskHead::Span { start: Vector::zeros(start.len()), end: Vector::zeros(end.len()) }
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            TaskHead::Token { weight, .. } => weight.cols(),
            TaskHead::Span { start, .. } => start.len(),
        }
    }

    pub fn n_labels(&self) -> Option<usize> {
        match self {
            TaskHead::Token { weight, .. } => Some(weight.rows()),
            TaskHead::Span { .. } => None,
        }
    }

    pub fn groups(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            TaskHead::Token { weight, bias } => vec![("W", weight.as_slice()), ("b", bias.as_slice())],
            TaskHead::Span { start, end } => vec![("start", start.as_slice()), ("end", end.as_slice())],
        }
    }

    pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        match self {
            TaskHead::Token { weight, bias } => {
                vec![("W", weight.as_mut_slice()), ("b", bias.as_mut_slice())]
            }
            TaskHead::Span { start, end } => {
                vec![("start", start.as_mut_slice()), ("end", end.as_mut_slice())]
            }
        }
    }

    /// Per-token logits for a token head.
    pub fn token_logits(&self, h: &[f64]) -> Vec<f64> {
        match self {
            TaskHead::Token { weight, bias } => {
                let mut out = bias.as_slice().to_vec();
                linalg::gemv_acc(weight, h, &mut out);
                out
            }
            TaskHead::Span { .. } => panic!("token_logits on a span head"),
        }
    }
}

/// Forward and backward cells plus the task head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TprModel {
    pub hyper: Hyper,
    pub forward: CellParams,
    pub backward: CellParams,
    pub head: TaskHead,
}

/// Collects flat tensor views as `direction.group` / `head.group` names.
macro_rules! named_groups {
    ($fwd:expr, $bwd:expr, $head:expr, $method:ident) => {{
        let mut out = Vec::new();
        for (name, g) in $fwd.$method() {
            out.push((format!("forward.{name}"), g));
        }
        for (name, g) in $bwd.$method() {
            out.push((format!("backward.{name}"), g));
        }
        for (name, g) in $head.$method() {
            out.push((format!("head.{name}"), g));
        }
        out
    }};
}

impl TprModel {
    /// Fresh model. `n_labels` is only used by token heads.
    pub fn init<R: Rng>(hyper: Hyper, task: TaskKind, n_labels: usize, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        let forward = CellParams::init(&hyper, rng);
        let backward = CellParams::init(&hyper, rng);
        let dim = 2 * hyper.binding_dim();
        let head = match task {
            TaskKind::TokenClassification => {
                if n_labels == 0 {
                    return Err(Error::Config("token head needs at least one label".into()));
                }
                let a = (6.0 / (n_labels + dim) as f64).sqrt();
                let data = (0..n_labels * dim).map(|_| rng.gen_range(-a..=a)).collect();
                TaskHead::Token {
                    weight: Matrix::from_col_major(n_labels, dim, data)?,
                    bias: Vector::zeros(n_labels),
                }
            }
            TaskKind::SpanPointing => {
                let a = (6.0 / (1 + dim) as f64).sqrt();
                let mut draw = || Vector::new((0..dim).map(|_| rng.gen_range(-a..=a)).collect());
                TaskHead::Span { start: draw()?, end: draw()? }
            }
        };
        Ok(Self { hyper, forward, backward, head })
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.forward.validate(&self.hyper)?;
        self.backward.validate(&self.hyper)?;
        let dim = 2 * self.hyper.binding_dim();
        if self.head.input_dim() != dim {
            return Err(Error::Config(format!(
                "head expects {}-dimensional input, network produces {dim}",
                self.head.input_dim()
            )));
        }
        if let TaskHead::Token { weight, bias } = &self.head {
            if bias.len() != weight.rows() {
                return Err(Error::Config("head bias length disagrees with weight rows".into()));
            }
        }
        if let TaskHead::Span { start, end } = &self.head {
            if start.len() != end.len() {
                return Err(Error::Config("span head vectors differ in length".into()));
            }
        }
        Ok(())
    }

    pub fn groups(&self) -> Vec<(String, &[f64])> {
        named_groups!(self.forward, self.backward, self.head, groups)
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        named_groups!(self.forward, self.backward, self.head, groups_mut)
    }

    pub fn param_count(&self) -> usize {
        self.groups().iter().map(|(_, g)| g.len()).sum()
    }

    pub fn run(&self, tokens: &[Vector]) -> Result<SequenceOutput> {
        run_bidirectional(&self.forward, &self.backward, tokens)
    }
}

/// Shape-matched gradient of every model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub forward: CellParams,
    pub backward: CellParams,
    pub head: TaskHead,
}

impl Gradients {
    pub fn zeros_like(model: &TprModel) -> Self {
        Self {
            forward: CellParams::zeros(&model.hyper),
            backward: CellParams::zeros(&model.hyper),
            head: model.head.zeros_like(),
        }
    }

    pub fn groups(&self) -> Vec<(String, &[f64])> {
        named_groups!(self.forward, self.backward, self.head, groups)
    }

    pub fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        named_groups!(self.forward, self.backward, self.head, groups_mut)
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((_, a), (_, b)) in self.groups_mut().into_iter().zip(other.groups()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for (_, g) in self.groups_mut() {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn norm(&self) -> f64 {
        self.groups().iter().flat_map(|(_, g)| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }
}
