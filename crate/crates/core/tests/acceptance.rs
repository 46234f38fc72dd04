//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any fails.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tprn::cell::{self, CellParams, Hyper};
use tprn::checkpoint::Checkpoint;
use tprn::data::{self, Example, GrammarParams, SyntheticGrammar};
use tprn::interpret::{self, ContingencyTable, InterpretConfig};
use tprn::linalg::{self, Matrix, Vector};
use tprn::model::TprModel;
use tprn::objective::{q_penalty_vec, ObjectiveConfig, TaskKind};
use tprn::train::{self, AdaDelta, EpochMetrics, FdOptions, Sample, Target, TrainConfig, TrainState};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_col_major(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_attention(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    Vector::new((0..n).map(|_| linalg::logistic(rng.gen_range(-4.0..4.0))).collect()).unwrap()
}

fn hyper(n_symbols: usize, n_roles: usize, d_symbols: usize, d_roles: usize, d_word: usize) -> Hyper {
    Hyper { n_symbols, n_roles, d_symbols, d_roles, d_word, gate_enabled: false, gated_feedback: false }
}

// 1. S B Rᵀ equals (S a_S)(R a_R)ᵀ.
fn bilinear_identity() -> Verdict {
    let configs = [(100, 20, 10, 10), (5, 4, 3, 3), (8, 5, 4, 4), (20, 8, 8, 8), (7, 3, 2, 5), (1, 1, 1, 1)];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let draws = 1000;
    for i in 0..draws {
        let (ns, nr, ds, dr) = configs[i % configs.len()];
        let mut p = CellParams::zeros(&hyper(ns, nr, ds, dr, 1));
        p.symbols = random_matrix(&mut rng, ds, ns);
        p.roles = random_matrix(&mut rng, dr, nr);
        let (a_s, a_r) = (random_attention(&mut rng, ns), random_attention(&mut rng, nr));
        let v = cell::embed(&p, &cell::bind(&a_s, &a_r)).unwrap();
        let f = p.symbols.matvec(&a_s).unwrap();
        let r = p.roles.matvec(&a_r).unwrap();
        let fr = linalg::outer(&f, &r);
        for (x, y) in v.as_slice().iter().zip(fr.as_slice()) {
            worst = worst.max((x - y).abs());
        }
    }
    Verdict::new(worst < 1e-10, format!("max |S B R^T - (S aS)(R aR)^T| = {worst:.2e} over {draws} draws"))
}

// 2. Q_a vanishes exactly on 1-hot vectors and nowhere else nearby.
fn quantization_minimum() -> Verdict {
    let mut fails = Vec::new();
    for n in 1..=64 {
        for k in 0..n {
            let mut a = vec![0.0; n];
            a[k] = 1.0;
            if q_penalty_vec(&a) != 0.0 {
                fails.push(format!("1-hot n={n} k={k}"));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut min_random = f64::INFINITY;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=64);
        let a: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        if a.iter().all(|&x| x == 0.0 || x == 1.0) && a.iter().filter(|&&x| x == 1.0).count() == 1 {
            continue;
        }
        let q = q_penalty_vec(&a);
        min_random = min_random.min(q);
        if !(q > 0.0) {
            fails.push(format!("random {a:?}"));
        }
    }
    let half = q_penalty_vec(&[0.5, 0.5]);
    if (half - 0.375).abs() > 1e-12 {
        fails.push(format!("Q([.5,.5]) = {half}"));
    }
    let mut perturbed = 0;
    for n in 1..=16 {
        for k in 0..n {
            for i in 0..n {
                for j in 0..40 {
                    // ε log-spaced over [1e-15, 0.1], endpoint included.
                    let eps = 10f64.powf(-15.0 + 14.0 * j as f64 / 39.0);
                    for sign in [-1.0, 1.0] {
                        let mut a = vec![0.0; n];
                        a[k] = 1.0;
                        let before = a[i];
                        a[i] += sign * eps;
                        if a[i] == before {
                            continue;
                        }
                        perturbed += 1;
                        if !(q_penalty_vec(&a) > 0.0) {
                            fails.push(format!("n={n} k={k} i={i} eps={eps:e}"));
                        }
                    }
                }
            }
        }
    }
    Verdict::new(
        fails.is_empty(),
        format!(
            "Q([.5,.5]) = {half}, min Q over random = {min_random:.2e}, {perturbed} perturbations, {} violations{}",
            fails.len(),
            fails.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

fn random_samples(rng: &mut ChaCha8Rng, count: usize, len: usize, d_word: usize, labels: usize) -> Vec<Sample> {
    (0..count)
        .map(|_| Sample {
            inputs: (0..len)
                .map(|_| Vector::new((0..d_word).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
                .collect(),
            target: Target::Tokens((0..len).map(|_| rng.gen_range(0..labels)).collect()),
        })
        .collect()
}

// 3. Analytic gradients against central differences, every group.
fn gradient_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = (0.0f64, String::new());
    let mut checks = 0;
    for (ns, nr, ds, dr, dw) in [(5, 4, 3, 3, 6), (8, 5, 4, 4, 10)] {
        for len in 1..=6 {
            for (gate, feedback) in [(false, false), (true, false), (true, true)] {
                let h = Hyper { gate_enabled: gate, gated_feedback: feedback, ..hyper(ns, nr, ds, dr, dw) };
                let model = TprModel::init(h, TaskKind::TokenClassification, 3, &mut rng).unwrap();
                let batch = random_samples(&mut rng, 2, len, dw, 3);
                for c_q in [0.0, 1e-5, 1e-2] {
                    let cfg = ObjectiveConfig { c_q, ..Default::default() };
                    let r = train::fd_check(&model, &batch, &cfg, &FdOptions { seed: checks, ..Default::default() })
                        .unwrap();
                    checks += 1;
                    if r.max_rel_err >= worst.0 {
                        worst = (
                            r.max_rel_err,
                            format!("{} (dims {ns}/{nr}/{ds}/{dr}/{dw}, len {len}, gate {gate}/{feedback}, cQ {c_q})", r.worst_param),
                        );
                    }
                }
            }
        }
    }
    Verdict::new(worst.0 < 1e-5, format!("{checks} checks, h = 1e-5, max rel err {:.2e} at {}", worst.0, worst.1))
}

// Frozen from tests/tools/adadelta_oracle.py.
const ADADELTA_FIRST_STEP: [f64; 10] = [
    -0.0044676705160877012,
    0.004471212246231075,
    -0.0044717909227146059,
    0.0044719705745304272,
    -0.0044720446897126885,
    0.0044720807444669922,
    -0.0044721003038318613,
    0.0044721117762599209,
    -0.0044721189144935796,
    0.0044721235668628108,
];
const ADADELTA_INITIAL_LOSS: f64 = 0.72050000000000014;

// 4. AdaDelta on f(x) = ½ Σ λᵢ xᵢ², λ = 1..10.
fn adadelta_sanity() -> Verdict {
    let lam: Vec<f64> = (0..10).map(|i| 1.0 + i as f64).collect();
    let loss = |x: &[f64]| 0.5 * x.iter().zip(&lam).map(|(x, l)| l * x * x).sum::<f64>();
    let mut x: Vec<f64> = (0..10).map(|i| 0.1 * if i % 2 == 0 { 1.0 } else { -1.0 } * (1.0 + i as f64 / 10.0)).collect();
    let f0 = loss(&x);
    let mut opt = AdaDelta::new(&[10], 0.95, 1e-6).unwrap();
    let mut first_err = 0.0f64;
    for step in 0..200 {
        let g: Vec<f64> = x.iter().zip(&lam).map(|(x, l)| l * x).collect();
        let before = x.clone();
        opt.update(&mut [&mut x[..]], &[&g]).unwrap();
        if step == 0 {
            for i in 0..10 {
                first_err = first_err.max((x[i] - before[i] - ADADELTA_FIRST_STEP[i]).abs());
            }
        }
    }
    let ratio = loss(&x) / f0;

    let mut zero = AdaDelta::new(&[10], 0.95, 1e-6).unwrap();
    zero.acc_grad[0] = vec![0.3; 10];
    zero.acc_update[0] = vec![0.2; 10];
    let mut p: Vec<f64> = (0..10).map(|i| i as f64 - 4.5).collect();
    let orig = p.clone();
    zero.update(&mut [&mut p[..]], &[&[0.0; 10]]).unwrap();
    let zero_exact = p.iter().zip(&orig).all(|(a, b)| a.to_bits() == b.to_bits());

    Verdict::new(
        ratio < 1e-3 && zero_exact && first_err < 1e-12 && (f0 - ADADELTA_INITIAL_LOSS).abs() < 1e-12,
        format!("loss ratio after 200 steps {ratio:.2e}, first-step error {first_err:.1e}, zero-gradient update exact: {zero_exact}"),
    )
}

/// Shared run for criteria 5 to 7.
struct Run {
    grammar: SyntheticGrammar,
    table: data::EmbeddingTable,
    train_corpus: Vec<Example>,
    heldout: Vec<Example>,
    objective: ObjectiveConfig,
    train_cfg: TrainConfig,
    state: TrainState,
    log: Vec<EpochMetrics>,
    control: Vec<EpochMetrics>,
    elapsed: Duration,
}

const SEED: u64 = 2024;

fn run_hyper() -> Hyper {
    hyper(20, 8, 8, 8, GrammarParams::default().d_word)
}

fn train(samples: &[Sample], objective: &ObjectiveConfig, cfg: &TrainConfig, n_labels: usize) -> (TrainState, Vec<EpochMetrics>) {
    let model = TprModel::init(run_hyper(), objective.task, n_labels, &mut ChaCha8Rng::seed_from_u64(SEED + 2)).unwrap();
    train::train_loop(TrainState::fresh(model, cfg).unwrap(), samples, cfg, objective).unwrap()
}

fn shared_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let t0 = Instant::now();
        let params = GrammarParams { seed: SEED, ..Default::default() };
        let grammar = data::gen_grammar(&params).unwrap();
        let table = grammar.embeddings().unwrap();
        let train_corpus = data::gen_corpus(&grammar, 5000, SEED + 1).unwrap();
        let heldout = data::gen_corpus(&grammar, 1000, SEED + 3).unwrap();
        let objective = ObjectiveConfig { c_q: 1e-3, ..Default::default() };
        let train_cfg = TrainConfig { epochs: 12, seed: SEED, ..Default::default() };
        let n_labels = data::n_labels(objective.target, params.n_classes, params.n_roles);
        let samples = data::to_samples(&train_corpus, &table, objective.task, objective.target, params.n_roles).unwrap();
        let (state, log) = train(&samples, &objective, &train_cfg, n_labels);
        let (_, control) = train(&samples, &ObjectiveConfig { c_q: 0.0, ..objective }, &train_cfg, n_labels);
        Run { grammar, table, train_corpus, heldout, objective, train_cfg, state, log, control, elapsed: t0.elapsed() }
    })
}

// 5. Role attention becomes nearly 1-hot under the quantization penalty.
fn discreteness() -> Verdict {
    let run = shared_run();
    let (first, last) = (run.log.first().unwrap(), run.log.last().unwrap());
    let control = run.control.last().unwrap();
    let q_ratio = last.quantization / first.quantization;
    let pass = last.mean_max_component >= 0.8 && q_ratio < 0.25 && control.mean_max_component < last.mean_max_component;
    Verdict::new(
        pass,
        format!(
            "vocab {}, {} sequences, meanMaxComponent {:.3} (control cQ=0: {:.3}, meanQ {:.2}), meanQ {:.4} -> {:.4} (ratio {:.3}), accuracy {:.3}, two runs in {:.1} s",
            run.table.len(),
            run.train_corpus.len(),
            last.mean_max_component,
            control.mean_max_component,
            control.quantization,
            first.quantization,
            last.quantization,
            q_ratio,
            last.accuracy,
            run.elapsed.as_secs_f64()
        ),
    )
}

const POPULATED: usize = 20;

fn worst_majority(t: &ContingencyTable) -> (usize, f64, String) {
    let maj = t.majorities(POPULATED);
    let worst = maj
        .iter()
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .map(|(c, l, p, n)| (*p, format!("cluster {c} -> {l} ({n} occurrences)")))
        .unwrap_or((f64::NAN, "no populated cluster".into()));
    (maj.len(), worst.0, worst.1)
}

// 6. Clusters recover gold roles and classes; the planted word splits.
fn interpretation() -> Verdict {
    let run = shared_run();
    let poly = run.grammar.polysemous.as_ref().map(|p| run.table.token(p.token).to_string()).unwrap();
    let cfg = InterpretConfig { polysemy_words: vec![poly.clone()], ..Default::default() };
    let dump = interpret::dump_traces(&run.state.model, &run.heldout, &run.table).unwrap();
    let res = interpret::interpret(&run.state.model, &dump, &run.heldout, None, &cfg).unwrap();
    let roles = res.report.table("role-vs-gold-role").unwrap();
    let symbols = res.report.table("symbol-vs-gold-class").unwrap();
    let poly_table = res.report.table(&format!("polysemy:{poly}")).unwrap();

    let (nr, role_worst, role_where) = worst_majority(roles);
    let (ns, sym_worst, sym_where) = worst_majority(symbols);
    let majority_symbol = |ctx: &str| {
        poly_table
            .cells
            .iter()
            .filter(|c| c.label == ctx)
            .max_by_key(|c| c.count)
            .map(|c| c.cluster.clone())
    };
    let (a, b) = (majority_symbol("initial"), majority_symbol("non-initial"));
    let poly_split = a.is_some() && b.is_some() && a != b;

    let role_ok = nr > 0 && role_worst >= 0.85;
    let sym_ok = ns > 0 && sym_worst >= 0.85;
    Verdict::new(
        role_ok && sym_ok && poly_split,
        format!(
            "roles: {nr} populated, worst purity {role_worst:.3} at {role_where} [{}]; symbols: {ns} populated, worst purity {sym_worst:.3} at {sym_where} [{}]; '{poly}' majority symbols {} / {} [{}]",
            if role_ok { "ok" } else { "below 0.85" },
            if sym_ok { "ok" } else { "below 0.85" },
            a.unwrap_or_default(),
            b.unwrap_or_default(),
            if poly_split { "distinct" } else { "same" },
        ),
    )
}

fn strip_created_at(bytes: &[u8]) -> String {
    String::from_utf8(bytes.to_vec()).unwrap().lines().filter(|l| !l.contains("\"createdAt\"")).collect::<Vec<_>>().join("\n")
}

// 7. Same seed, same bytes; checkpoints replay exactly.
fn determinism() -> Verdict {
    let run = shared_run();
    let mut notes = Vec::new();
    let mut pass = true;

    let small_cfg = TrainConfig { epochs: 2, ..run.train_cfg };
    let n_labels = run.state.model.head.n_labels().unwrap();
    let samples =
        data::to_samples(&run.train_corpus[..1000], &run.table, run.objective.task, run.objective.target, 6).unwrap();
    let csv = || {
        let (_, log) = train(&samples, &run.objective, &small_cfg, n_labels);
        let mut buf = Vec::new();
        train::write_metrics_csv(&log, &mut buf).unwrap();
        buf
    };
    let same_csv = csv() == csv();
    pass &= same_csv;
    notes.push(format!("metrics CSV identical: {same_csv}"));

    let ck = Checkpoint::from_state(&run.state, SEED);
    let bytes = ck.to_bytes().unwrap();
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    let resaved = loaded.to_bytes().unwrap();
    let mut later = loaded.clone();
    later.created_at = "2099-01-01T00:00:00Z".into();
    let same_ckpt = resaved == bytes && strip_created_at(&later.to_bytes().unwrap()) == strip_created_at(&bytes);
    pass &= same_ckpt;
    notes.push(format!("save/load/save identical: {same_ckpt}"));

    let batch =
        data::to_samples(&run.heldout[..64], &run.table, run.objective.task, run.objective.target, 6).unwrap();
    let before = train::objective(&run.state.model, &batch, &run.objective).unwrap().total;
    let after = train::objective(&loaded.model, &batch, &run.objective).unwrap().total;
    let same_loss = before.to_bits() == after.to_bits();
    pass &= same_loss;
    notes.push(format!("replayed loss {after:.17e} bitwise equal: {same_loss}"));

    let dump_bytes = |m: &TprModel| {
        let d = interpret::dump_traces(m, &run.heldout[..200], &run.table).unwrap();
        let mut buf = Vec::new();
        interpret::write_dump(&d, &mut buf).unwrap();
        buf
    };
    let same_dump = dump_bytes(&run.state.model) == dump_bytes(&loaded.model);
    pass &= same_dump;
    notes.push(format!("trace dump identical: {same_dump}"));
    Verdict::new(pass, notes.join(", "))
}

fn main() {
    // Honors `cargo test -- --list` and name filters enough to stay out of the way.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let criteria: [(u32, &str, Duration, fn() -> Verdict); 7] = [
        (1, "bilinear binding identity", Duration::from_secs(10), bilinear_identity),
        (2, "quantization minimum", Duration::from_secs(5), quantization_minimum),
        (3, "gradient correctness", Duration::from_secs(120), gradient_correctness),
        (4, "AdaDelta sanity", Duration::from_secs(1), adadelta_sanity),
        (5, "discreteness emerges", Duration::from_secs(600), discreteness),
        (6, "interpretation recovers ground truth", Duration::from_secs(600), interpretation),
        (7, "determinism and persistence", Duration::from_secs(600), determinism),
    ];
    let filter: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, name, budget, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str()) || n.to_string() == **p) {
            continue;
        }
        let t0 = Instant::now();
        let v = f();
        let took = t0.elapsed();
        let in_time = took <= budget;
        let pass = v.pass && in_time;
        failed += usize::from(!pass);
        println!(
            "criterion {n} {}: {name}: {} ({:.2} s{})",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64(),
            if in_time { String::new() } else { format!(", over the {} s budget", budget.as_secs()) }
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
