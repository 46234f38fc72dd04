//! Back-propagation through time, gradient verification, AdaDelta, and the
//! training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{CellParams, Direction};
use crate::error::{Error, IoContext, Result};
use crate::linalg::{self, Vector};
use crate::model::{Gradients, TaskHead, TprModel};
use crate::reference;
use crate::wide::{Real, Wide};
use crate::objective::{
    cross_entropy, q_penalty_grad_acc, q_penalty_step, softmax, LossBreakdown, ObjectiveConfig,
    OneHotAccumulator, QAggregation, TaskKind,
};

/// Samples per parallel work unit. Fixed so the reduction order does not
/// depend on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Tokens(Vec<usize>),
    Span { start: usize, end: usize },
}

/// A sequence of word vectors with its supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub inputs: Vec<Vector>,
    pub target: Target,
}

impl Sample {
    pub(crate) fn check(&self, head: &TaskHead) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::Degenerate("empty sample".into()));
        }
        match (&self.target, head) {
            (Target::Tokens(labels), TaskHead::Token { weight, .. }) => {
                if labels.len() != self.inputs.len() {
                    return Err(Error::Input(format!(
                        "{} labels for {} tokens",
                        labels.len(),
                        self.inputs.len()
                    )));
                }
                if let Some(&l) = labels.iter().find(|&&l| l >= weight.rows()) {
                    return Err(Error::Input(format!("label {l} out of range for {} classes", weight.rows())));
                }
                Ok(())
            }
            (Target::Span { start, end }, TaskHead::Span { .. }) => {
                if start > end || *end >= self.inputs.len() {
                    return Err(Error::Input(format!(
                        "span ({start}, {end}) invalid for length {}",
                        self.inputs.len()
                    )));
                }
                Ok(())
            }
            _ => Err(Error::Config("sample target does not match the task head".into())),
        }
    }
}

/// Unnormalized sums gathered over a batch or an epoch.
#[derive(Debug, Clone, Default)]
pub struct BatchStats {
    pub task_loss_sum: f64,
    /// Tokens for a token head, examples for a span head.
    pub units: usize,
    pub q_sum: f64,
    pub steps: usize,
    pub sequences: usize,
    pub correct: usize,
    pub onehot: OneHotAccumulator,
}

impl BatchStats {
    pub fn merge(&mut self, o: &BatchStats) {
        self.task_loss_sum += o.task_loss_sum;
        self.units += o.units;
        self.q_sum += o.q_sum;
        self.steps += o.steps;
        self.sequences += o.sequences;
        self.correct += o.correct;
        self.onehot.merge(&o.onehot);
    }

    pub fn loss(&self, cfg: &ObjectiveConfig) -> LossBreakdown {
        let ce = self.task_loss_sum / self.units as f64;
        let q = match cfg.q_aggregation {
            QAggregation::Mean => self.q_sum / self.steps as f64,
            QAggregation::Sum => self.q_sum / self.sequences as f64,
        };
        LossBreakdown::compose(ce, q, cfg.c_q)
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.units as f64
    }
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Head loss for one sample given the per-token network outputs. Returns the
/// gradient of the summed unit losses with respect to each `h_t`, scaled by
/// `scale`, and accumulates head gradients when `grads` is given.
fn head_pass(
    head: &TaskHead,
    hs: &[Vec<f64>],
    target: &Target,
    scale: f64,
    grads: Option<&mut TaskHead>,
    stats: &mut BatchStats,
) -> Result<Vec<Vec<f64>>> {
    let mut dh = vec![vec![0.0; head.input_dim()]; hs.len()];
    match (head, target) {
        (TaskHead::Token { weight, .. }, Target::Tokens(labels)) => {
            let mut grads = grads;
            for (t, h) in hs.iter().enumerate() {
                let logits = head.token_logits(h);
                stats.task_loss_sum += cross_entropy(&logits, labels[t])?;
                stats.units += 1;
                stats.correct += usize::from(argmax(&logits) == labels[t]);
                if let Some(TaskHead::Token { weight: gw, bias: gb }) = grads.as_deref_mut() {
                    let mut d = softmax(&logits);
                    d[labels[t]] -= 1.0;
                    d.iter_mut().for_each(|x| *x *= scale);
                    linalg::ger(gw, &d, h);
                    for (b, x) in gb.as_mut_slice().iter_mut().zip(&d) {
                        *b += x;
                    }
                    linalg::gemv_t_acc(weight, &d, &mut dh[t]);
                }
            }
        }
        (TaskHead::Span { start, end }, Target::Span { start: s0, end: e0 }) => {
            let ls: Vec<f64> = hs.iter().map(|h| start.dot(&Vector::from_vec_unchecked(h.clone()))).collect();
            let le: Vec<f64> = hs.iter().map(|h| end.dot(&Vector::from_vec_unchecked(h.clone()))).collect();
            stats.task_loss_sum += cross_entropy(&ls, *s0)? + cross_entropy(&le, *e0)?;
            stats.units += 1;
            stats.correct += usize::from(argmax(&ls) == *s0 && argmax(&le) == *e0);
            if let Some(TaskHead::Span { start: gs, end: ge }) = grads {
                let mut ds = softmax(&ls);
                ds[*s0] -= 1.0;
                let mut de = softmax(&le);
                de[*e0] -= 1.0;
                for (t, h) in hs.iter().enumerate() {
                    let (a, b) = (ds[t] * scale, de[t] * scale);
                    for (g, x) in gs.as_mut_slice().iter_mut().zip(h) {
                        *g += a * x;
                    }
                    for (g, x) in ge.as_mut_slice().iter_mut().zip(h) {
                        *g += b * x;
                    }
                    for ((d, u), w) in dh[t].iter_mut().zip(start.as_slice()).zip(end.as_slice()) {
                        *d += a * u + b * w;
                    }
                }
            }
        }
        _ => return Err(Error::Config("sample target does not match the task head".into())),
    }
    Ok(dh)
}

/// Intermediate values of one cell step kept for the backward pass.
struct StepCache {
    prev: Vec<f64>,
    a_s: Vec<f64>,
    a_r: Vec<f64>,
    s: Vec<f64>,
    r: Vec<f64>,
    vv: Vec<f64>,
    gate: Option<Vec<f64>>,
    out: Vec<f64>,
}

fn processing_order(len: usize, dir: Direction) -> Vec<usize> {
    match dir {
        Direction::Forward => (0..len).collect(),
        Direction::Backward => (0..len).rev().collect(),
    }
}

/// Factorized forward pass `v = (S a_S)(R a_R)ᵀ`, caches in token order.
fn forward_cell(p: &CellParams, inputs: &[Vector], dir: Direction) -> Vec<StepCache> {
    let (ns, nr, ds, dr) = (p.n_symbols(), p.n_roles(), p.d_symbols(), p.d_roles());
    let d = ds * dr;
    let mut prev = vec![0.0; d];
    let mut caches: Vec<Option<StepCache>> = (0..inputs.len()).map(|_| None).collect();
    for t in processing_order(inputs.len(), dir) {
        let w = inputs[t].as_slice();
        let mut zs = p.bs.as_slice().to_vec();
        linalg::gemv_acc(&p.ws_in, w, &mut zs);
        linalg::gemv_acc(&p.ws_rec, &prev, &mut zs);
        let a_s: Vec<f64> = zs.iter().map(|&z| linalg::logistic(z)).collect();
        let mut zr = p.br.as_slice().to_vec();
        linalg::gemv_acc(&p.wr_in, w, &mut zr);
        linalg::gemv_acc(&p.wr_rec, &prev, &mut zr);
        let a_r: Vec<f64> = zr.iter().map(|&z| linalg::logistic(z)).collect();
        debug_assert_eq!((a_s.len(), a_r.len()), (ns, nr));

        let mut s = vec![0.0; ds];
        linalg::gemv(&p.symbols, &a_s, &mut s);
        let mut r = vec![0.0; dr];
        linalg::gemv(&p.roles, &a_r, &mut r);
        let mut vv = vec![0.0; d];
        for k in 0..dr {
            for i in 0..ds {
                vv[i + ds * k] = s[i] * r[k];
            }
        }
        let (gate, out, feedback) = match &p.gate {
            Some(g) => {
                let mut z = g.b.as_slice().to_vec();
                linalg::gemv_acc(&g.w, w, &mut z);
                linalg::gemv_acc(&g.u, &prev, &mut z);
                let gv: Vec<f64> = z.iter().map(|&x| linalg::logistic(x)).collect();
                let out: Vec<f64> = gv.iter().zip(&vv).map(|(a, b)| a * b).collect();
                let fb = if g.gated_feedback { out.clone() } else { vv.clone() };
                (Some(gv), out, fb)
            }
            None => (None, vv.clone(), vv.clone()),
        };
        caches[t] = Some(StepCache { prev: std::mem::replace(&mut prev, feedback), a_s, a_r, s, r, vv, gate, out });
    }
    caches.into_iter().map(|c| c.expect("every position visited")).collect()
}

/// Back-propagates `d_out` (per token) through one direction's recurrence.
fn backward_cell(
    p: &CellParams,
    inputs: &[Vector],
    dir: Direction,
    caches: &[StepCache],
    d_out: &[&[f64]],
    q_scale: f64,
    g: &mut CellParams,
) {
    let (ds, dr) = (p.d_symbols(), p.d_roles());
    let d = ds * dr;
    let mut d_feedback = vec![0.0; d];
    for t in processing_order(inputs.len(), dir).into_iter().rev() {
        let c = &caches[t];
        let w = inputs[t].as_slice();
        let mut d_prev = vec![0.0; d];
        let dvv: Vec<f64> = match (&p.gate, &c.gate, g.gate.as_mut()) {
            (Some(pg), Some(gv), Some(gg)) => {
                let mut dout = d_out[t].to_vec();
                let mut dvv = vec![0.0; d];
                if pg.gated_feedback {
                    dout.iter_mut().zip(&d_feedback).for_each(|(a, b)| *a += b);
                    for i in 0..d {
                        dvv[i] = dout[i] * gv[i];
                    }
                } else {
                    for i in 0..d {
                        dvv[i] = dout[i] * gv[i] + d_feedback[i];
                    }
                }
                let dz: Vec<f64> =
                    (0..d).map(|i| dout[i] * c.vv[i] * gv[i] * (1.0 - gv[i])).collect();
                linalg::ger(&mut gg.w, &dz, w);
                linalg::ger(&mut gg.u, &dz, &c.prev);
                gg.b.as_mut_slice().iter_mut().zip(&dz).for_each(|(a, b)| *a += b);
                linalg::gemv_t_acc(&pg.u, &dz, &mut d_prev);
                dvv
            }
            _ => d_out[t].iter().zip(&d_feedback).map(|(a, b)| a + b).collect(),
        };

        let mut d_s = vec![0.0; ds];
        let mut d_r = vec![0.0; dr];
        for k in 0..dr {
            for i in 0..ds {
                let x = dvv[i + ds * k];
                d_s[i] += x * c.r[k];
                d_r[k] += x * c.s[i];
            }
        }
        linalg::ger(&mut g.symbols, &d_s, &c.a_s);
        linalg::ger(&mut g.roles, &d_r, &c.a_r);

        let mut da_s = vec![0.0; c.a_s.len()];
        linalg::gemv_t_acc(&p.symbols, &d_s, &mut da_s);
        let mut da_r = vec![0.0; c.a_r.len()];
        linalg::gemv_t_acc(&p.roles, &d_r, &mut da_r);
        if q_scale != 0.0 {
            q_penalty_grad_acc(&c.a_s, q_scale, &mut da_s);
            q_penalty_grad_acc(&c.a_r, q_scale, &mut da_r);
        }

        let dz_s: Vec<f64> = da_s.iter().zip(&c.a_s).map(|(d, a)| d * a * (1.0 - a)).collect();
        linalg::ger(&mut g.ws_in, &dz_s, w);
        linalg::ger(&mut g.ws_rec, &dz_s, &c.prev);
        g.bs.as_mut_slice().iter_mut().zip(&dz_s).for_each(|(a, b)| *a += b);
        linalg::gemv_t_acc(&p.ws_rec, &dz_s, &mut d_prev);

        let dz_r: Vec<f64> = da_r.iter().zip(&c.a_r).map(|(d, a)| d * a * (1.0 - a)).collect();
        linalg::ger(&mut g.wr_in, &dz_r, w);
        linalg::ger(&mut g.wr_rec, &dz_r, &c.prev);
        g.br.as_mut_slice().iter_mut().zip(&dz_r).for_each(|(a, b)| *a += b);
        linalg::gemv_t_acc(&p.wr_rec, &dz_r, &mut d_prev);

        d_feedback = d_prev;
    }
}

struct Scales {
    task: f64,
    q: f64,
}

fn batch_scales(batch: &[&Sample], cfg: &ObjectiveConfig) -> Scales {
    let tokens: usize = batch.iter().map(|s| s.inputs.len()).sum();
    let units = match cfg.task {
        TaskKind::TokenClassification => tokens,
        TaskKind::SpanPointing => batch.len(),
    };
    let q = match cfg.q_aggregation {
        QAggregation::Mean => cfg.c_q / (2 * tokens) as f64,
        QAggregation::Sum => cfg.c_q / batch.len() as f64,
    };
    Scales { task: 1.0 / units as f64, q }
}

fn sample_pass(
    model: &TprModel,
    sample: &Sample,
    scales: &Scales,
    grads: &mut Gradients,
    stats: &mut BatchStats,
) -> Result<()> {
    let fwd = forward_cell(&model.forward, &sample.inputs, Direction::Forward);
    let bwd = forward_cell(&model.backward, &sample.inputs, Direction::Backward);
    let hs: Vec<Vec<f64>> = fwd
        .iter()
        .zip(&bwd)
        .map(|(f, b)| {
            let mut h = f.out.clone();
            h.extend_from_slice(&b.out);
            h
        })
        .collect();
    for c in fwd.iter().chain(&bwd) {
        stats.q_sum += q_penalty_step(&c.a_s, &c.a_r);
        stats.steps += 1;
        stats.onehot.push(&c.a_s, &c.a_r);
    }
    stats.sequences += 1;

    let dh = head_pass(&model.head, &hs, &sample.target, scales.task, Some(&mut grads.head), stats)?;
    let d = model.hyper.binding_dim();
    let d_fwd: Vec<&[f64]> = dh.iter().map(|x| &x[..d]).collect();
    let d_bwd: Vec<&[f64]> = dh.iter().map(|x| &x[d..]).collect();
    backward_cell(&model.forward, &sample.inputs, Direction::Forward, &fwd, &d_fwd, scales.q, &mut grads.forward);
    backward_cell(&model.backward, &sample.inputs, Direction::Backward, &bwd, &d_bwd, scales.q, &mut grads.backward);
    Ok(())
}

fn check_gradients(grads: &Gradients) -> Result<()> {
    for (name, g) in grads.groups() {
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("gradient of {name}[{i}] is not finite")));
        }
    }
    Ok(())
}

/// Exact reverse-mode gradient of the batch objective, with batch statistics.
pub fn backward_with_stats(
    model: &TprModel,
    batch: &[&Sample],
    cfg: &ObjectiveConfig,
) -> Result<(BatchStats, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    if model.head.kind() != cfg.task {
        return Err(Error::Config("objective task does not match the model head".into()));
    }
    for s in batch {
        s.check(&model.head)?;
        if let Some(x) = s.inputs.iter().find(|x| x.len() != model.hyper.d_word) {
            return Err(Error::Config(format!(
                "word vector of length {}, model expects {}",
                x.len(),
                model.hyper.d_word
            )));
        }
    }
    let scales = batch_scales(batch, cfg);
    let parts: Vec<Result<(BatchStats, Gradients)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = Gradients::zeros_like(model);
            let mut stats = BatchStats::default();
            for s in chunk {
                sample_pass(model, s, &scales, &mut grads, &mut stats)?;
            }
            Ok((stats, grads))
        })
        .collect();
    let mut stats = BatchStats::default();
    let mut grads = Gradients::zeros_like(model);
    for part in parts {
        let (s, g) = part?;
        stats.merge(&s);
        grads.add_assign(&g);
    }
    let loss = stats.loss(cfg);
    if !loss.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {:?}", loss)));
    }
    check_gradients(&grads)?;
    Ok((stats, grads))
}

pub fn backward(model: &TprModel, batch: &[Sample], cfg: &ObjectiveConfig) -> Result<(LossBreakdown, Gradients)> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let (stats, grads) = backward_with_stats(model, &refs, cfg)?;
    Ok((stats.loss(cfg), grads))
}

/// Batch statistics computed through the public cell API (`S B Rᵀ` route),
/// independent of the factorized training path.
pub fn evaluate(model: &TprModel, batch: &[Sample], cfg: &ObjectiveConfig) -> Result<BatchStats> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    if model.head.kind() != cfg.task {
        return Err(Error::Config("objective task does not match the model head".into()));
    }
    let mut stats = BatchStats::default();
    for s in batch {
        s.check(&model.head)?;
        let out = model.run(&s.inputs)?;
        for tr in out.forward.iter().chain(&out.backward) {
            stats.q_sum += q_penalty_step(tr.a_s.as_slice(), tr.a_r.as_slice());
            stats.steps += 1;
            stats.onehot.push(tr.a_s.as_slice(), tr.a_r.as_slice());
        }
        stats.sequences += 1;
        let hs: Vec<Vec<f64>> = out.per_token.into_iter().map(Vector::into_vec).collect();
        head_pass(&model.head, &hs, &s.target, 1.0, None, &mut stats)?;
    }
    Ok(stats)
}

/// Objective value through the reference route.
pub fn objective(model: &TprModel, batch: &[Sample], cfg: &ObjectiveConfig) -> Result<LossBreakdown> {
    Ok(evaluate(model, batch, cfg)?.loss(cfg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub h: f64,
    /// Groups up to this many scalars are swept completely.
    pub full_sweep_limit: usize,
    /// Coordinates drawn from each larger group.
    pub sample_per_group: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { h: 1e-5, full_sweep_limit: 1000, sample_per_group: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub groups: Vec<GroupCheck>,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Central-difference check of `analytic` against an arbitrary scalar
/// function of the model parameters. The difference quotient is formed in
/// `T`, so a wide `T` keeps rounding in `f` out of the comparison.
pub fn fd_check_fn<T, F>(model: &TprModel, analytic: &Gradients, opts: &FdOptions, f: F) -> Result<FdReport>
where
    T: Real + Send,
    F: Fn(&TprModel) -> Result<T> + Sync,
{
    if !(opts.h > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let analytic = analytic.groups();
    let params = model.groups();
    let mut groups = Vec::with_capacity(params.len());
    for (gi, (name, values)) in params.iter().enumerate() {
        let len = values.len();
        let coords: Vec<usize> = if len <= opts.full_sweep_limit {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, opts.sample_per_group.min(len)).into_vec()
        };
        let errs: Vec<Result<(usize, f64)>> = coords
            .par_iter()
            .map(|&idx| {
                let mut work = model.clone();
                let orig = values[idx];
                let (up, down) = (orig + opts.h, orig - opts.h);
                work.groups_mut()[gi].1[idx] = up;
                let plus = f(&work)?;
                work.groups_mut()[gi].1[idx] = down;
                let minus = f(&work)?;
                let numeric = ((plus - minus) / (T::from_f64(up) - T::from_f64(down))).to_f64();
                Ok((idx, relative_error(analytic[gi].1[idx], numeric)))
            })
            .collect();
        let mut check = GroupCheck { name: name.clone(), checked: coords.len(), max_rel_err: 0.0, worst_index: 0 };
        for e in errs {
            let (idx, err) = e?;
            if err > check.max_rel_err || !err.is_finite() {
                check.max_rel_err = err;
                check.worst_index = idx;
            }
        }
        groups.push(check);
    }
    let worst = groups
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .ok_or_else(|| Error::Degenerate("model has no parameters".into()))?;
    Ok(FdReport {
        max_rel_err: worst.max_rel_err,
        worst_param: format!("{}[{}]", worst.name, worst.worst_index),
        groups,
    })
}

/// Checks `analytic` against finite differences of the batch objective,
/// evaluated in double-double precision.
pub fn fd_check_against(
    model: &TprModel,
    batch: &[Sample],
    cfg: &ObjectiveConfig,
    analytic: &Gradients,
    opts: &FdOptions,
) -> Result<FdReport> {
    fd_check_fn(model, analytic, opts, |m| reference::batch_objective::<Wide>(m, batch, cfg))
}

/// Checks [`backward`] against finite differences of the batch objective.
pub fn fd_check(model: &TprModel, batch: &[Sample], cfg: &ObjectiveConfig, opts: &FdOptions) -> Result<FdReport> {
    let (_, analytic) = backward(model, batch, cfg)?;
    fd_check_against(model, batch, cfg, &analytic, opts)
}

/// AdaDelta accumulators, one array per parameter group.
///
/// Per coordinate, with gradient `g`:
///
/// ```text
/// E[g²] ← ρ E[g²] + (1 − ρ) g²
/// Δ     = −(√(E[Δ²] + ε) / √(E[g²] + ε)) g
/// E[Δ²] ← ρ E[Δ²] + (1 − ρ) Δ²
/// θ     ← θ + Δ
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaDelta {
    pub rho: f64,
    pub eps: f64,
    pub acc_grad: Vec<Vec<f64>>,
    pub acc_update: Vec<Vec<f64>>,
}

impl AdaDelta {
    pub fn new(sizes: &[usize], rho: f64, eps: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1), got {rho}")));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
        }
        Ok(Self {
            rho,
            eps,
            acc_grad: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            acc_update: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn for_model(model: &TprModel, rho: f64, eps: f64) -> Result<Self> {
        let sizes: Vec<usize> = model.groups().iter().map(|(_, g)| g.len()).collect();
        Self::new(&sizes, rho, eps)
    }

    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        let shapes_match = params.len() == self.acc_grad.len()
            && grads.len() == self.acc_grad.len()
            && params
                .iter()
                .zip(grads)
                .zip(&self.acc_grad)
                .all(|((p, g), a)| p.len() == a.len() && g.len() == a.len());
        if !shapes_match {
            return Err(Error::Config("parameter, gradient and accumulator shapes differ".into()));
        }
        let (rho, eps) = (self.rho, self.eps);
        for (((p, g), eg), eu) in params.iter_mut().zip(grads).zip(&mut self.acc_grad).zip(&mut self.acc_update) {
            for i in 0..p.len() {
                let gi = g[i];
                eg[i] = rho * eg[i] + (1.0 - rho) * gi * gi;
                let delta = -((eu[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * gi;
                eu[i] = rho * eu[i] + (1.0 - rho) * delta * delta;
                p[i] += delta;
            }
        }
        Ok(())
    }

    pub fn update_model(&mut self, model: &mut TprModel, grads: &Gradients) -> Result<()> {
        let g = grads.groups();
        let gs: Vec<&[f64]> = g.iter().map(|(_, x)| *x).collect();
        let mut groups = model.groups_mut();
        let mut ps: Vec<&mut [f64]> = groups.iter_mut().map(|(_, x)| &mut **x).collect();
        self.update(&mut ps, &gs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub rho: f64,
    pub eps: f64,
    /// Rescale each batch gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 12, batch_size: 16, seed: 0, rho: 0.95, eps: 1e-6, clip_norm: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        AdaDelta::new(&[], self.rho, self.eps).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub cross_entropy: f64,
    /// Mean per-step `Q_a(a_S) + Q_a(a_R)`.
    pub quantization: f64,
    /// Mean largest component of the raw role attention.
    pub mean_max_component: f64,
    pub mean_max_symbol: f64,
    pub accuracy: f64,
}

impl EpochMetrics {
    pub fn from_stats(epoch: usize, stats: &BatchStats) -> Result<Self> {
        let oh = stats.onehot.finish()?;
        Ok(Self {
            epoch,
            cross_entropy: stats.task_loss_sum / stats.units as f64,
            quantization: oh.mean_q,
            mean_max_component: oh.mean_max_role,
            mean_max_symbol: oh.mean_max_symbol,
            accuracy: stats.accuracy(),
        })
    }
}

pub fn write_metrics_csv<W: Write>(log: &[EpochMetrics], mut w: W) -> Result<()> {
    let ctx = || "writing metrics".to_string();
    writeln!(w, "epoch,crossEntropy,quantization,meanMaxComponent,accuracy").io_context(ctx)?;
    for m in log {
        writeln!(
            w,
            "{},{},{},{},{}",
            m.epoch, m.cross_entropy, m.quantization, m.mean_max_component, m.accuracy
        )
        .io_context(ctx)?;
    }
    Ok(())
}

/// Model, optimizer state, and the number of completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: TprModel,
    pub optimizer: AdaDelta,
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(model: TprModel, cfg: &TrainConfig) -> Result<Self> {
        let optimizer = AdaDelta::for_model(&model, cfg.rho, cfg.eps)?;
        Ok(Self { model, optimizer, epoch: 0 })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] Error),
    /// The state at the end of the last completed epoch is returned for saving.
    #[error("training diverged in epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String, last_good: Box<TrainState> },
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Runs epochs `state.epoch + 1 ..= cfg.epochs` over seeded permutations of
/// `samples`. Each epoch's shuffle depends only on `(seed, epoch)`, so a
/// resumed run replays the same batches as an uninterrupted one.
pub fn train_loop(
    mut state: TrainState,
    samples: &[Sample],
    cfg: &TrainConfig,
    objective: &ObjectiveConfig,
) -> Result<(TrainState, Vec<EpochMetrics>), TrainError> {
    cfg.validate()?;
    objective.validate()?;
    if samples.is_empty() {
        return Err(Error::Degenerate("empty training set".into()).into());
    }
    let mut log = Vec::new();
    for epoch in (state.epoch + 1)..=cfg.epochs {
        let last_good = state.clone();
        let diverged = |reason: String| TrainError::Diverged {
            epoch,
            reason,
            last_good: Box::new(last_good.clone()),
        };
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut epoch_stats = BatchStats::default();
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let (stats, mut grads) = match backward_with_stats(&state.model, &batch, objective) {
                Ok(x) => x,
                Err(Error::Numerical(msg)) => return Err(diverged(msg)),
                Err(e) => return Err(e.into()),
            };
            if let Some(max) = cfg.clip_norm {
                let n = grads.norm();
                if n > max {
                    grads.scale(max / n);
                }
            }
            state.optimizer.update_model(&mut state.model, &grads)?;
            if let Some((name, _)) =
                state.model.groups().iter().find(|(_, g)| g.iter().any(|x| !x.is_finite()))
            {
                return Err(diverged(format!("{name} became non-finite")));
            }
            epoch_stats.merge(&stats);
        }
        state.epoch = epoch;
        let m = EpochMetrics::from_stats(epoch, &epoch_stats)?;
        log::info!(
            "epoch {epoch}: ce {:.4} q {:.4} max-role {:.3} acc {:.4}",
            m.cross_entropy,
            m.quantization,
            m.mean_max_component,
            m.accuracy
        );
        log.push(m);
    }
    Ok((state, log))
}

/// Draws a model-sized random perturbation; used to build negative controls.
pub fn corrupt_gradients<R: Rng>(grads: &mut Gradients, rng: &mut R) {
    for (_, g) in grads.groups_mut() {
        for x in g.iter_mut() {
            *x += rng.gen_range(-1.0..1.0) * (x.abs() + 1e-3);
        }
    }
}
