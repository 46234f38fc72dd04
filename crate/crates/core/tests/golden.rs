//! Forward traces, loss and gradients against values computed independently
//! with torch autograd in float64 (`tests/tools/oracle.py`).

use std::path::Path;

use rand::SeedableRng;
use serde::Deserialize;
use tprn::cell::Hyper;
use tprn::linalg::Vector;
use tprn::model::TprModel;
use tprn::objective::ObjectiveConfig;
use tprn::train::{self, Sample, Target};
use tprn::wide::{Real, Wide};

const TOL: f64 = 1e-12;

#[derive(Deserialize)]
struct Named {
    name: String,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct Example {
    inputs: Vec<Vec<f64>>,
    target: Target,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct Traces {
    forward_a_s: Vec<Vec<f64>>,
    forward_a_r: Vec<Vec<f64>>,
    backward_a_s: Vec<Vec<f64>>,
    backward_a_r: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct Expected {
    cross_entropy: f64,
    quantization: f64,
    total: f64,
    traces: Vec<Traces>,
    gradients: Vec<Named>,
}

#[derive(Deserialize)]
struct Case {
    name: String,
    hyper: Hyper,
    objective: ObjectiveConfig,
    params: Vec<Named>,
    batch: Vec<Example>,
    expected: Expected,
}

fn load(name: &str) -> Case {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.json"));
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn close(what: &str, got: f64, want: f64) {
    let err = (got - want).abs() / want.abs().max(1.0);
    assert!(err <= TOL, "{what}: got {got:e}, want {want:e}, scaled error {err:e}");
}

fn close_all(what: &str, got: &[f64], want: &[f64]) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        close(&format!("{what}[{i}]"), *g, *w);
    }
}

fn build(case: &Case) -> (TprModel, Vec<Sample>) {
    let n_labels = case.params.iter().find(|p| p.name == "head.b").map_or(0, |p| p.values.len());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = TprModel::init(case.hyper, case.objective.task, n_labels, &mut rng).unwrap();
    let mut groups = model.groups_mut();
    assert_eq!(groups.len(), case.params.len(), "{}: group count", case.name);
    for ((name, dst), src) in groups.iter_mut().zip(&case.params) {
        assert_eq!(name, &src.name);
        dst.copy_from_slice(&src.values);
    }
    let batch = case
        .batch
        .iter()
        .map(|ex| Sample {
            inputs: ex.inputs.iter().map(|x| Vector::new(x.clone()).unwrap()).collect(),
            target: ex.target.clone(),
        })
        .collect();
    (model, batch)
}

fn check(name: &str) {
    let case = load(name);
    let (model, batch) = build(&case);
    let exp = &case.expected;

    for (i, (s, t)) in batch.iter().zip(&exp.traces).enumerate() {
        let out = model.run(&s.inputs).unwrap();
        for (k, tr) in out.forward.iter().enumerate() {
            close_all(&format!("{name} seq {i} fwd aS {k}"), tr.a_s.as_slice(), &t.forward_a_s[k]);
            close_all(&format!("{name} seq {i} fwd aR {k}"), tr.a_r.as_slice(), &t.forward_a_r[k]);
        }
        for (k, tr) in out.backward.iter().enumerate() {
            close_all(&format!("{name} seq {i} bwd aS {k}"), tr.a_s.as_slice(), &t.backward_a_s[k]);
            close_all(&format!("{name} seq {i} bwd aR {k}"), tr.a_r.as_slice(), &t.backward_a_r[k]);
        }
        for (k, h) in out.per_token.iter().enumerate() {
            close_all(&format!("{name} seq {i} out {k}"), h.as_slice(), &t.outputs[k]);
        }
    }

    let (loss, grads) = train::backward(&model, &batch, &case.objective).unwrap();
    close(&format!("{name} CE"), loss.cross_entropy, exp.cross_entropy);
    close(&format!("{name} Q"), loss.quantization, exp.quantization);
    close(&format!("{name} total"), loss.total, exp.total);
    for ((gname, g), want) in grads.groups().iter().zip(&exp.gradients) {
        assert_eq!(gname, &want.name);
        close_all(&format!("{name} d{gname}"), g, &want.values);
    }

    let wide: Wide = tprn::reference::batch_objective(&model, &batch, &case.objective).unwrap();
    close(&format!("{name} reference total"), wide.to_f64(), exp.total);
}

#[test]
fn token_head_without_gate_mean_q() {
    check("token_plain_mean");
}

#[test]
fn token_head_gated_feedback_sum_q() {
    check("token_gated_feedback_sum");
}

#[test]
fn span_head_gated_mean_q() {
    check("span_gated_mean");
}
