//! Straight-line batch objective, generic over the scalar type.
//!
//! Builds `B = a_S a_Rᵀ` and `v = S B Rᵀ` explicitly and shares no code with
//! the factorized training path. Evaluated in [`Wide`](crate::wide::Wide)
//! it serves as the finite-difference oracle.

use crate::cell::CellParams;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{TaskHead, TprModel};
use crate::objective::{ObjectiveConfig, QAggregation};
use crate::train::{Sample, Target};
use crate::wide::Real;

fn mat_vec<T: Real>(m: &Matrix, x: &[T]) -> Vec<T> {
    (0..m.rows())
        .map(|i| {
            let mut acc = T::zero();
            for (j, &xj) in x.iter().enumerate() {
                acc += T::from_f64(m.get(i, j)) * xj;
            }
            acc
        })
        .collect()
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn q_vec<T: Real>(a: &[T]) -> T {
    let mut wells = T::zero();
    let mut sq = T::zero();
    for &x in a {
        let y = x * (T::one() - x);
        wells += y * y;
        sq += x * x;
    }
    let n = sq - T::one();
    wells + n * n
}

fn log_softmax_at<T: Real>(logits: &[T], target: usize) -> T {
    let max = logits.iter().copied().fold(logits[0], |m, x| if x > m { x } else { m });
    let mut sum = T::zero();
    for &x in logits {
        sum += (x - max).exp();
    }
    max + sum.ln() - logits[target]
}

/// Runs one cell; returns `(outputs in token order, summed Q)`.
fn run_cell<T: Real>(p: &CellParams, inputs: &[Vector], reverse: bool) -> (Vec<Vec<T>>, T) {
    let (ds, dr) = (p.symbols.rows(), p.roles.rows());
    let (ns, nr) = (p.symbols.cols(), p.roles.cols());
    let mut prev = vec![T::zero(); ds * dr];
    let mut outs = vec![Vec::new(); inputs.len()];
    let mut q = T::zero();
    let order: Vec<usize> = if reverse { (0..inputs.len()).rev().collect() } else { (0..inputs.len()).collect() };
    for t in order {
        let w: Vec<T> = inputs[t].as_slice().iter().map(|&x| T::from_f64(x)).collect();
        let pre = |win: &Matrix, wrec: &Matrix, b: &Vector| -> Vec<T> {
            let a = mat_vec(win, &w);
            let r = mat_vec(wrec, &prev);
            a.iter().zip(&r).zip(b.as_slice()).map(|((&x, &y), &z)| sigmoid(x + y + T::from_f64(z))).collect()
        };
        let a_s = pre(&p.ws_in, &p.ws_rec, &p.bs);
        let a_r = pre(&p.wr_in, &p.wr_rec, &p.br);
        q += q_vec(&a_s) + q_vec(&a_r);

        // B = a_S a_Rᵀ, then v = S B Rᵀ entry by entry.
        let mut b = vec![T::zero(); ns * nr];
        for j in 0..nr {
            for i in 0..ns {
                b[i + j * ns] = a_s[i] * a_r[j];
            }
        }
        let mut sb = vec![T::zero(); ds * nr];
        for j in 0..nr {
            for i in 0..ds {
                let mut acc = T::zero();
                for k in 0..ns {
                    acc += T::from_f64(p.symbols.get(i, k)) * b[k + j * ns];
                }
                sb[i + j * ds] = acc;
            }
        }
        let mut v = vec![T::zero(); ds * dr];
        for j in 0..dr {
            for i in 0..ds {
                let mut acc = T::zero();
                for k in 0..nr {
                    acc += sb[i + k * ds] * T::from_f64(p.roles.get(j, k));
                }
                v[i + j * ds] = acc;
            }
        }

        let (out, feedback) = match &p.gate {
            Some(g) => {
                let gw = mat_vec(&g.w, &w);
                let gu = mat_vec(&g.u, &prev);
                let out: Vec<T> = (0..v.len())
                    .map(|i| sigmoid(gw[i] + gu[i] + T::from_f64(g.b[i])) * v[i])
                    .collect();
                let fb = if g.gated_feedback { out.clone() } else { v };
                (out, fb)
            }
            None => (v.clone(), v),
        };
        outs[t] = out;
        prev = feedback;
    }
    (outs, q)
}

/// Total batch objective `CE + c_q · Q` evaluated in scalar type `T`.
pub fn batch_objective<T: Real>(model: &TprModel, batch: &[Sample], cfg: &ObjectiveConfig) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    if model.head.kind() != cfg.task {
        return Err(Error::Config("objective task does not match the model head".into()));
    }
    let mut task = T::zero();
    let mut q = T::zero();
    let (mut units, mut steps) = (0usize, 0usize);
    for s in batch {
        s.check(&model.head)?;
        let (fwd, qf) = run_cell::<T>(&model.forward, &s.inputs, false);
        let (bwd, qb) = run_cell::<T>(&model.backward, &s.inputs, true);
        q += qf + qb;
        steps += 2 * s.inputs.len();
        let hs: Vec<Vec<T>> = fwd.into_iter().zip(bwd).map(|(mut f, b)| {
            f.extend(b);
            f
        }).collect();
        match (&model.head, &s.target) {
            (TaskHead::Token { weight, bias }, Target::Tokens(labels)) => {
                for (h, &l) in hs.iter().zip(labels) {
                    let logits: Vec<T> =
                        mat_vec(weight, h).into_iter().zip(bias.as_slice()).map(|(x, &b)| x + T::from_f64(b)).collect();
                    task += log_softmax_at(&logits, l);
                    units += 1;
                }
            }
            (TaskHead::Span { start, end }, Target::Span { start: s0, end: e0 }) => {
                let score = |u: &Vector| -> Vec<T> {
                    hs.iter()
                        .map(|h| {
                            let mut acc = T::zero();
                            for (&x, &y) in h.iter().zip(u.as_slice()) {
                                acc += x * T::from_f64(y);
                            }
                            acc
                        })
                        .collect()
                };
                task += log_softmax_at(&score(start), *s0) + log_softmax_at(&score(end), *e0);
                units += 1;
            }
            _ => return Err(Error::Config("sample target does not match the task head".into())),
        }
    }
    let q_mean = match cfg.q_aggregation {
        QAggregation::Mean => q / T::from_f64(steps as f64),
        QAggregation::Sum => q / T::from_f64(batch.len() as f64),
    };
    Ok(task / T::from_f64(units as f64) + T::from_f64(cfg.c_q) * q_mean)
}
