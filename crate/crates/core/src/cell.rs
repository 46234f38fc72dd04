//! The recurrent TPR cell.
//!
//! Each word `w` is encoded by soft-selecting a symbol and a role:
//!
//! ```text
//! a_S = σ(W_S_in w + W_S_rec vec(v_prev) + b_S)
//! a_R = σ(W_R_in w + W_R_rec vec(v_prev) + b_R)
//! B   = a_S a_Rᵀ
//! v   = S B Rᵀ = (S a_S)(R a_R)ᵀ
//! ```
//!
//! and optionally an output gate `g = σ(W_g w + U_g vec(v_prev) + b_g)` is
//! applied elementwise to `vec(v)`. Nothing projects the attention vectors
//! onto 1-hot form; discreteness comes only from the training objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, affine, outer, sigmoid, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    pub n_symbols: usize,
    pub n_roles: usize,
    pub d_symbols: usize,
    pub d_roles: usize,
    pub d_word: usize,
    #[serde(default)]
    pub gate_enabled: bool,
    /// With gating on, feed the gated output (instead of `v`) back into the
    /// next step's attention.
    #[serde(default)]
    pub gated_feedback: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            n_symbols: 100,
            n_roles: 20,
            d_symbols: 10,
            d_roles: 10,
            d_word: 100,
            gate_enabled: false,
            gated_feedback: false,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_symbols", self.n_symbols),
            ("n_roles", self.n_roles),
            ("d_symbols", self.d_symbols),
            ("d_roles", self.d_roles),
            ("d_word", self.d_word),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.gated_feedback && !self.gate_enabled {
            return Err(Error::Config("gated_feedback requires gate_enabled".into()));
        }
        Ok(())
    }

    /// Length of `vec(v)`, i.e. `d_symbols * d_roles`.
    pub fn binding_dim(&self) -> usize {
        self.d_symbols * self.d_roles
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub w: Matrix,
    pub u: Matrix,
    pub b: Vector,
    pub gated_feedback: bool,
}

/// Learned tensors of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    /// `d_symbols x n_symbols`, one symbol embedding per column.
    pub symbols: Matrix,
    /// `d_roles x n_roles`, one role embedding per column.
    pub roles: Matrix,
    pub ws_in: Matrix,
    pub ws_rec: Matrix,
    pub bs: Vector,
    pub wr_in: Matrix,
    pub wr_rec: Matrix,
    pub br: Vector,
    pub gate: Option<Gate>,
}

/// Parameter group names in [`CellParams::groups`] order.
pub const CELL_GROUPS: [&str; 11] =
    ["S", "R", "WSin", "WSrec", "bS", "WRin", "WRrec", "bR", "Wg", "Ug", "bg"];

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..=a)).collect();
    Matrix::from_col_major(rows, cols, data).expect("finite glorot draw")
}

impl CellParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(h: &Hyper, rng: &mut R) -> Self {
        let d = h.binding_dim();
        let symbols = glorot(h.d_symbols, h.n_symbols, rng);
        let roles = glorot(h.d_roles, h.n_roles, rng);
        let ws_in = glorot(h.n_symbols, h.d_word, rng);
        let ws_rec = glorot(h.n_symbols, d, rng);
        let wr_in = glorot(h.n_roles, h.d_word, rng);
        let wr_rec = glorot(h.n_roles, d, rng);
        let gate = h.gate_enabled.then(|| Gate {
            w: glorot(d, h.d_word, rng),
            u: glorot(d, d, rng),
            b: Vector::zeros(d),
            gated_feedback: h.gated_feedback,
        });
        Self {
            symbols,
            roles,
            ws_in,
            ws_rec,
            bs: Vector::zeros(h.n_symbols),
            wr_in,
            wr_rec,
            br: Vector::zeros(h.n_roles),
            gate,
        }
    }

    pub fn zeros(h: &Hyper) -> Self {
        let d = h.binding_dim();
        Self {
            symbols: Matrix::zeros(h.d_symbols, h.n_symbols),
            roles: Matrix::zeros(h.d_roles, h.n_roles),
            ws_in: Matrix::zeros(h.n_symbols, h.d_word),
            ws_rec: Matrix::zeros(h.n_symbols, d),
            bs: Vector::zeros(h.n_symbols),
            wr_in: Matrix::zeros(h.n_roles, h.d_word),
            wr_rec: Matrix::zeros(h.n_roles, d),
            br: Vector::zeros(h.n_roles),
            gate: h.gate_enabled.then(|| Gate {
                w: Matrix::zeros(d, h.d_word),
                u: Matrix::zeros(d, d),
                b: Vector::zeros(d),
                gated_feedback: h.gated_feedback,
            }),
        }
    }

    pub fn n_symbols(&self) -> usize {
        self.symbols.cols()
    }

    pub fn n_roles(&self) -> usize {
        self.roles.cols()
    }

    pub fn d_symbols(&self) -> usize {
        self.symbols.rows()
    }

    pub fn d_roles(&self) -> usize {
        self.roles.rows()
    }

    pub fn d_word(&self) -> usize {
        self.ws_in.cols()
    }

    pub fn binding_dim(&self) -> usize {
        self.d_symbols() * self.d_roles()
    }

    /// Checks every tensor against `h`.
    pub fn validate(&self, h: &Hyper) -> Result<()> {
        let d = h.binding_dim();
        let expect = |name: &str, m: &Matrix, shape: (usize, usize)| {
            if m.shape() == shape {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} is {:?}, expected {shape:?}", m.shape())))
            }
        };
        let expect_len = |name: &str, v: &Vector, n: usize| {
            if v.len() == n {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} has length {}, expected {n}", v.len())))
            }
        };
        expect("S", &self.symbols, (h.d_symbols, h.n_symbols))?;
        expect("R", &self.roles, (h.d_roles, h.n_roles))?;
        expect("WSin", &self.ws_in, (h.n_symbols, h.d_word))?;
        expect("WSrec", &self.ws_rec, (h.n_symbols, d))?;
        expect_len("bS", &self.bs, h.n_symbols)?;
        expect("WRin", &self.wr_in, (h.n_roles, h.d_word))?;
        expect("WRrec", &self.wr_rec, (h.n_roles, d))?;
        expect_len("bR", &self.br, h.n_roles)?;
        match (&self.gate, h.gate_enabled) {
            (Some(g), true) => {
                expect("Wg", &g.w, (d, h.d_word))?;
                expect("Ug", &g.u, (d, d))?;
                expect_len("bg", &g.b, d)?;
                if g.gated_feedback != h.gated_feedback {
                    return Err(Error::Config("gate feedback mode disagrees with hyper".into()));
                }
            }
            (None, false) => {}
            (Some(_), false) => return Err(Error::Config("gate present but gating disabled".into())),
            (None, true) => return Err(Error::Config("gating enabled but gate missing".into())),
        }
        for (name, data) in self.groups() {
            if let Some(i) = data.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("{name}[{i}] is not finite")));
            }
        }
        Ok(())
    }

    /// Flat views of every tensor, named as in [`CELL_GROUPS`]. Gate groups
    /// are present only when the gate is.
    pub fn groups(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = vec![
            ("S", self.symbols.as_slice()),
            ("R", self.roles.as_slice()),
            ("WSin", self.ws_in.as_slice()),
            ("WSrec", self.ws_rec.as_slice()),
            ("bS", self.bs.as_slice()),
            ("WRin", self.wr_in.as_slice()),
            ("WRrec", self.wr_rec.as_slice()),
            ("bR", self.br.as_slice()),
        ];
        if let Some(g) = &self.gate {
            out.push(("Wg", g.w.as_slice()));
            out.push(("Ug", g.u.as_slice()));
            out.push(("bg", g.b.as_slice()));
        }
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = vec![
            ("S", self.symbols.as_mut_slice()),
            ("R", self.roles.as_mut_slice()),
            ("WSin", self.ws_in.as_mut_slice()),
            ("WSrec", self.ws_rec.as_mut_slice()),
            ("bS", self.bs.as_mut_slice()),
            ("WRin", self.wr_in.as_mut_slice()),
            ("WRrec", self.wr_rec.as_mut_slice()),
            ("bR", self.br.as_mut_slice()),
        ];
        if let Some(g) = &mut self.gate {
            out.push(("Wg", g.w.as_mut_slice()));
            out.push(("Ug", g.u.as_mut_slice()));
            out.push(("bg", g.b.as_mut_slice()));
        }
        out
    }
}

/// Everything computed for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub token_index: usize,
    pub a_s: Vector,
    pub a_r: Vector,
    pub binding: Matrix,
    pub v: Matrix,
    /// Gated `vec(v)`, or `vec(v)` itself when gating is off.
    pub out: Vector,
}

impl StepTrace {
    /// The value fed into the next step's attention.
    fn feedback(&self, p: &CellParams) -> Matrix {
        match &p.gate {
            Some(g) if g.gated_feedback => {
                Matrix::reshape(&self.out, self.v.rows(), self.v.cols()).expect("shape of v")
            }
            _ => self.v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

fn check_inputs(p: &CellParams, w: &Vector, v_prev: &Matrix) -> Result<()> {
    if w.len() != p.d_word() {
        return Err(Error::Config(format!(
            "word vector has length {}, cell expects {}",
            w.len(),
            p.d_word()
        )));
    }
    if v_prev.shape() != (p.d_symbols(), p.d_roles()) {
        return Err(Error::Config(format!(
            "previous binding is {:?}, cell expects {:?}",
            v_prev.shape(),
            (p.d_symbols(), p.d_roles())
        )));
    }
    Ok(())
}

/// Symbol and role attention for word `w` given the previous encoding.
pub fn attend(p: &CellParams, w: &Vector, v_prev: &Matrix) -> Result<(Vector, Vector)> {
    check_inputs(p, w, v_prev)?;
    let prev = v_prev.vectorize();
    let mut zs = affine(&p.ws_in, w, &p.bs)?;
    linalg::gemv_acc(&p.ws_rec, prev.as_slice(), zs.as_mut_slice());
    let mut zr = affine(&p.wr_in, w, &p.br)?;
    linalg::gemv_acc(&p.wr_rec, prev.as_slice(), zr.as_mut_slice());
    Ok((sigmoid(&zs), sigmoid(&zr)))
}

/// Binding matrix `a_S a_Rᵀ`.
pub fn bind(a_s: &Vector, a_r: &Vector) -> Matrix {
    outer(a_s, a_r)
}

/// `S B Rᵀ`.
pub fn embed(p: &CellParams, binding: &Matrix) -> Result<Matrix> {
    if binding.shape() != (p.n_symbols(), p.n_roles()) {
        return Err(Error::Config(format!(
            "binding is {:?}, cell expects {:?}",
            binding.shape(),
            (p.n_symbols(), p.n_roles())
        )));
    }
    p.symbols.matmul(binding)?.matmul(&p.roles.transpose())
}

/// `σ(W_g w + U_g vec(v_prev) + b_g) ⊙ vec(v)`.
pub fn gate_output(p: &CellParams, w: &Vector, v_prev: &Matrix, v: &Matrix) -> Result<Vector> {
    let g = p
        .gate
        .as_ref()
        .ok_or_else(|| Error::Config("gate_output called with gating disabled".into()))?;
    check_inputs(p, w, v_prev)?;
    if v.shape() != v_prev.shape() {
        return Err(Error::Config("v and v_prev shapes differ".into()));
    }
    let mut z = affine(&g.w, w, &g.b)?;
    linalg::gemv_acc(&g.u, v_prev.as_slice(), z.as_mut_slice());
    let gate = sigmoid(&z);
    let out = gate.as_slice().iter().zip(v.as_slice()).map(|(a, b)| a * b).collect();
    Ok(Vector::from_vec_unchecked(out))
}

/// One full cell step: attend, bind, embed and (optionally) gate.
pub fn step(p: &CellParams, w: &Vector, v_prev: &Matrix) -> Result<StepTrace> {
    let (a_s, a_r) = attend(p, w, v_prev)?;
    let binding = bind(&a_s, &a_r);
    let v = embed(p, &binding)?;
    let out = match p.gate {
        Some(_) => gate_output(p, w, v_prev, &v)?,
        None => v.vectorize(),
    };
    Ok(StepTrace { token_index: 0, a_s, a_r, binding, v, out })
}

/// Runs the recurrence over `tokens` starting from `v = 0`. Traces are
/// returned in token order regardless of direction.
pub fn run_sequence(p: &CellParams, tokens: &[Vector], direction: Direction) -> Result<Vec<StepTrace>> {
    if tokens.is_empty() {
        return Err(Error::Degenerate("empty token sequence".into()));
    }
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..tokens.len()).collect(),
        Direction::Backward => (0..tokens.len()).rev().collect(),
    };
    let mut prev = Matrix::zeros(p.d_symbols(), p.d_roles());
    let mut traces: Vec<Option<StepTrace>> = vec![None; tokens.len()];
    for t in order {
        let mut tr = step(p, &tokens[t], &prev)?;
        tr.token_index = t;
        prev = tr.feedback(p);
        traces[t] = Some(tr);
    }
    Ok(traces.into_iter().map(|t| t.expect("every position visited")).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutput {
    /// `[out_fwd ; out_bwd]` per token.
    pub per_token: Vec<Vector>,
    pub forward: Vec<StepTrace>,
    pub backward: Vec<StepTrace>,
}

/// Runs a forward and a backward cell and concatenates their outputs.
pub fn run_bidirectional(fwd: &CellParams, bwd: &CellParams, tokens: &[Vector]) -> Result<SequenceOutput> {
    let forward = run_sequence(fwd, tokens, Direction::Forward)?;
    let backward = run_sequence(bwd, tokens, Direction::Backward)?;
    let per_token = forward
        .iter()
        .zip(&backward)
        .map(|(f, b)| {
            let mut x = f.out.as_slice().to_vec();
            x.extend_from_slice(b.out.as_slice());
            Vector::from_vec_unchecked(x)
        })
        .collect();
    Ok(SequenceOutput { per_token, forward, backward })
}
