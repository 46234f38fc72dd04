//! Versioned model checkpoints.
//!
//! A JSON envelope around a body whose tensors are base64-encoded
//! little-endian `f64` arrays. The SHA-256 checksum covers the compact body
//! encoding; `createdAt` sits outside it.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cell::Hyper;
use crate::error::{Error, IoContext, Result};
use crate::jsonfmt;
use crate::model::TprModel;
use crate::objective::TaskKind;
use crate::train::{AdaDelta, TrainState};

pub const FORMAT: &str = "tprn-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TprModel,
    pub optimizer: Option<AdaDelta>,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// RFC 3339 timestamp. Not covered by the checksum.
    pub created_at: String,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct Envelope {
    format: String,
    format_version: u32,
    created_at: String,
    checksum: String,
    body: Body,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct Body {
    hyper: Hyper,
    task: TaskKind,
    seed: u64,
    epoch: usize,
    params: Vec<Tensor>,
    optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct OptimizerState {
    rho: f64,
    eps: f64,
    acc_grad: Vec<Tensor>,
    acc_update: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Tensor {
    name: String,
    len: usize,
    data: String,
}

impl Tensor {
    fn encode(name: &str, xs: &[f64]) -> Self {
        let bytes: Vec<u8> = xs.iter().flat_map(|x| x.to_le_bytes()).collect();
        Self { name: name.to_string(), len: xs.len(), data: B64.encode(bytes) }
    }

    fn decode(&self) -> Result<Vec<f64>> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", self.name)))?;
        if bytes.len() != 8 * self.len {
            return Err(Error::Checkpoint(format!(
                "tensor {}: {} bytes for {} values",
                self.name,
                bytes.len(),
                self.len
            )));
        }
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
    }
}

fn digest(body: &Body) -> Result<String> {
    Ok(hex::encode(Sha256::digest(jsonfmt::to_string(body)?.as_bytes())))
}

pub fn now_rfc3339() -> String {
    humantime::format_rfc3339_seconds(std::time::SystemTime::now()).to_string()
}

impl Checkpoint {
    pub fn new(model: TprModel, optimizer: Option<AdaDelta>, seed: u64, epoch: usize) -> Self {
        Self { model, optimizer, seed, epoch, created_at: now_rfc3339() }
    }

    pub fn from_state(state: &TrainState, seed: u64) -> Self {
        Self::new(state.model.clone(), Some(state.optimizer.clone()), seed, state.epoch)
    }

    /// Training state to resume from; fails without optimizer state.
    pub fn into_state(self) -> Result<TrainState> {
        let optimizer = self
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no optimizer state".into()))?;
        Ok(TrainState { model: self.model, optimizer, epoch: self.epoch })
    }

    fn body(&self) -> Body {
        let params = self.model.groups().iter().map(|(n, g)| Tensor::encode(n, g)).collect();
        let names: Vec<String> = self.model.groups().into_iter().map(|(n, _)| n).collect();
        let optimizer = self.optimizer.as_ref().map(|o| {
            let enc = |acc: &[Vec<f64>]| names.iter().zip(acc).map(|(n, a)| Tensor::encode(n, a)).collect();
            OptimizerState { rho: o.rho, eps: o.eps, acc_grad: enc(&o.acc_grad), acc_update: enc(&o.acc_update) }
        });
        Body {
            hyper: self.model.hyper.clone(),
            task: self.model.head.kind(),
            seed: self.seed,
            epoch: self.epoch,
            params,
            optimizer,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let body = self.body();
        let env = Envelope {
            format: FORMAT.into(),
            format_version: FORMAT_VERSION,
            created_at: self.created_at.clone(),
            checksum: digest(&body)?,
            body,
        };
        let mut s = jsonfmt::to_string_pretty(&env)?;
        s.push('\n');
        Ok(s.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(format!("not a checkpoint: {e}")))?;
        if raw.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
            return Err(Error::Checkpoint("missing or unknown format tag".into()));
        }
        match raw.get("formatVersion").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!("format version {v}, this build reads {FORMAT_VERSION}")))
            }
            None => return Err(Error::Checkpoint("missing format version".into())),
        }
        let env: Envelope = serde_json::from_value(raw).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let actual = digest(&env.body)?;
        if actual != env.checksum {
            return Err(Error::Checkpoint(format!("checksum mismatch: stored {}, computed {actual}", env.checksum)));
        }
        let body = env.body;

        let head_len = |name: &str| body.params.iter().find(|t| t.name == name).map(|t| t.len);
        let n_labels = match body.task {
            TaskKind::TokenClassification => {
                head_len("head.b").ok_or_else(|| Error::Checkpoint("token head without bias".into()))?
            }
            TaskKind::SpanPointing => 0,
        };
        // Shape template; every value is overwritten below.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = TprModel::init(body.hyper.clone(), body.task, n_labels, &mut rng)
            .map_err(|e| Error::Checkpoint(format!("hyperparameters: {e}")))?;
        let names: Vec<String> = model.groups().into_iter().map(|(n, _)| n).collect();
        let check_names = |ts: &[Tensor], what: &str| {
            if ts.len() != names.len() || ts.iter().zip(&names).any(|(t, n)| &t.name != n) {
                return Err(Error::Checkpoint(format!("{what} tensors do not match the model layout")));
            }
            Ok(())
        };
        check_names(&body.params, "parameter")?;
        for ((_, dst), t) in model.groups_mut().into_iter().zip(&body.params) {
            let v = t.decode()?;
            if v.len() != dst.len() {
                return Err(Error::Checkpoint(format!("tensor {}: {} values, expected {}", t.name, v.len(), dst.len())));
            }
            dst.copy_from_slice(&v);
        }
        let sizes: Vec<usize> = model.groups().iter().map(|(_, g)| g.len()).collect();
        let optimizer = match body.optimizer {
            None => None,
            Some(o) => {
                check_names(&o.acc_grad, "optimizer")?;
                check_names(&o.acc_update, "optimizer")?;
                let dec = |ts: &[Tensor]| -> Result<Vec<Vec<f64>>> {
                    ts.iter()
                        .zip(&sizes)
                        .map(|(t, &n)| {
                            let v = t.decode()?;
                            if v.len() != n {
                                return Err(Error::Checkpoint(format!("optimizer tensor {} has wrong length", t.name)));
                            }
                            Ok(v)
                        })
                        .collect()
                };
                let mut opt = AdaDelta::new(&sizes, o.rho, o.eps)?;
                opt.acc_grad = dec(&o.acc_grad)?;
                opt.acc_update = dec(&o.acc_update)?;
                Some(opt)
            }
        };
        Ok(Self { model, optimizer, seed: body.seed, epoch: body.epoch, created_at: env.created_at })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).io_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).io_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn hyper(gate: bool) -> Hyper {
        Hyper {
            n_symbols: 5,
            n_roles: 4,
            d_symbols: 3,
            d_roles: 3,
            d_word: 6,
            gate_enabled: gate,
            gated_feedback: gate,
        }
    }

    fn sample(task: TaskKind, gate: bool) -> Checkpoint {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut model = TprModel::init(hyper(gate), task, 7, &mut rng).unwrap();
        // Awkward values: subnormals, signed zero, extremes.
        let g = &mut model.groups_mut()[0].1;
        g[0] = -0.0;
        g[1] = 5e-324;
        g[2] = f64::MAX;
        g[3] = 0.1 + 0.2;
        let mut opt = AdaDelta::for_model(&model, 0.95, 1e-6).unwrap();
        for a in opt.acc_grad.iter_mut().chain(opt.acc_update.iter_mut()) {
            a.iter_mut().for_each(|x| *x = rng.gen::<f64>() * 1e-7);
        }
        Checkpoint { model, optimizer: Some(opt), seed: 11, epoch: 4, created_at: "2020-01-01T00:00:00Z".into() }
    }

    fn bits(c: &Checkpoint) -> Vec<u64> {
        let mut out: Vec<u64> = c.model.groups().iter().flat_map(|(_, g)| g.iter().map(|x| x.to_bits())).collect();
        if let Some(o) = &c.optimizer {
            out.extend(o.acc_grad.iter().chain(&o.acc_update).flatten().map(|x| x.to_bits()));
        }
        out
    }

    #[test]
    fn round_trip_is_bitwise() {
        for task in [TaskKind::TokenClassification, TaskKind::SpanPointing] {
            for gate in [false, true] {
                let c = sample(task, gate);
                let bytes = c.to_bytes().unwrap();
                let back = Checkpoint::from_bytes(&bytes).unwrap();
                assert_eq!(bits(&back), bits(&c));
                assert_eq!(back.model.hyper, c.model.hyper);
                assert_eq!((back.seed, back.epoch), (11, 4));
                assert_eq!(back.to_bytes().unwrap(), bytes);
            }
        }
    }

    #[test]
    fn without_optimizer() {
        let mut c = sample(TaskKind::TokenClassification, false);
        c.optimizer = None;
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert!(back.optimizer.is_none());
        assert!(back.into_state().is_err());
    }

    #[test]
    fn timestamp_is_outside_the_checksum() {
        let c = sample(TaskKind::TokenClassification, true);
        let mut d = c.clone();
        d.created_at = "2031-05-05T12:00:00Z".into();
        let (a, b) = (c.to_bytes().unwrap(), d.to_bytes().unwrap());
        assert_ne!(a, b);
        assert!(Checkpoint::from_bytes(&b).is_ok());
        let strip = |x: &[u8]| String::from_utf8(x.to_vec()).unwrap().lines().filter(|l| !l.contains("createdAt")).collect::<String>();
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn tampered_tensor_fails_checksum() {
        let bytes = sample(TaskKind::TokenClassification, false).to_bytes().unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let at = text.find("\"data\": \"").unwrap() + 12;
        let mut b = text.into_bytes();
        b[at] = if b[at] == b'A' { b'B' } else { b'A' };
        match Checkpoint::from_bytes(&b) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("checksum"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_and_version_are_rejected() {
        let bytes = sample(TaskKind::TokenClassification, false).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]), Err(Error::Checkpoint(_))));
        let text = String::from_utf8(bytes).unwrap().replace("\"formatVersion\": 1", "\"formatVersion\": 2");
        match Checkpoint::from_bytes(text.as_bytes()) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("version 2"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
