//! The `tprn` command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, EmbeddingTable, Example, SyntheticGrammar};
use crate::error::{Error, IoContext, Result};
use crate::interpret::{self, ReportFormat};
use crate::jsonfmt;
use crate::model::TprModel;
use crate::train::{self, EpochMetrics, TrainError, TrainState};

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    VerificationFailed = 1,
    Config = 2,
    Io = 3,
}

impl Error {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Error::Config(_) => ExitCode::Config,
            Error::Numerical(_) => ExitCode::VerificationFailed,
            Error::Degenerate(_)
            | Error::Input(_)
            | Error::Parse { .. }
            | Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::Json(_) => ExitCode::Io,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tprn", version, about = "Train and interpret tensor product recurrent networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML). Defaults apply to anything it omits.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write grammar.json, embeddings.txt and corpus.jsonl to the data directory.
    GenData(Common),
    /// Train on the generated corpus; writes checkpoint.json and metrics.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Check this model instead of a freshly initialized one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides gradcheck.tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Perturb the analytic gradient before checking.
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Dump traces and write role, symbol and polysemy reports.
    Interpret {
        #[command(flatten)]
        common: Common,
        /// Defaults to checkpoint.json in the run directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// POS tags (TSV) to tabulate roles against.
        #[arg(long)]
        pos: Option<PathBuf>,
    },
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(d) = &self.data_dir {
            cfg.paths.data_dir = d.clone();
        }
        if let Some(d) = &self.run_dir {
            cfg.paths.run_dir = d.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(c) => gen_data(&c.resolve()?).map(|_| ExitCode::Ok),
        Command::Train { common, resume } => train_cmd(&common.resolve()?, resume.as_deref()),
        Command::Gradcheck { common, checkpoint, tolerance, corrupt_gradient } => {
            let mut cfg = common.resolve()?;
            if let Some(t) = tolerance {
                cfg.gradcheck.tolerance = t;
                cfg.validate()?;
            }
            gradcheck(&cfg, checkpoint.as_deref(), corrupt_gradient)
        }
        Command::Interpret { common, checkpoint, pos } => {
            let mut cfg = common.resolve()?;
            if pos.is_some() {
                cfg.paths.pos = pos;
            }
            let ckpt = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint());
            interpret_cmd(&cfg, &ckpt).map(|_| ExitCode::Ok)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).io_context(|| format!("creating {}", dir.display()))
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let grammar = data::gen_grammar(&cfg.grammar)?;
    let table = grammar.embeddings()?;
    let corpus = data::gen_corpus(&grammar, cfg.corpus.size, cfg.corpus_seed())?;
    let p = &cfg.paths;
    create_dir(&p.data_dir)?;
    grammar.save(&p.grammar())?;
    table.save(&p.embeddings())?;
    data::save_corpus(&corpus, &p.corpus())?;
    log::info!("wrote {} sequences over {} words to {}", corpus.len(), table.len(), p.data_dir.display());
    Ok(())
}

/// Embeddings and corpus from the data directory, checked against the config.
pub fn load_data(cfg: &RunConfig) -> Result<(EmbeddingTable, Vec<Example>)> {
    let table = EmbeddingTable::load(&cfg.paths.embeddings())?;
    if table.d_word() != cfg.model.d_word {
        return Err(Error::Config(format!(
            "embeddings are {}-dimensional, model.d_word is {}",
            table.d_word(),
            cfg.model.d_word
        )));
    }
    let corpus = data::load_corpus(&cfg.paths.corpus())?;
    for (i, ex) in corpus.iter().enumerate() {
        ex.validate(table.len(), cfg.grammar.n_classes, cfg.grammar.n_roles)
            .map_err(|e| Error::Input(format!("corpus line {}: {e}", i + 1)))?;
    }
    if corpus.len() <= cfg.corpus.heldout {
        return Err(Error::Input(format!(
            "corpus has {} sequences, {} are held out",
            corpus.len(),
            cfg.corpus.heldout
        )));
    }
    Ok((table, corpus))
}

pub fn fresh_model(cfg: &RunConfig) -> Result<TprModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed());
    TprModel::init(cfg.model, cfg.objective.task, cfg.n_labels(), &mut rng)
}

fn check_compatible(model: &TprModel, cfg: &RunConfig) -> Result<()> {
    if model.hyper != cfg.model {
        return Err(Error::Config("checkpoint hyperparameters differ from the configuration".into()));
    }
    if model.head.kind() != cfg.objective.task {
        return Err(Error::Config("checkpoint task head differs from objective.task".into()));
    }
    if let Some(n) = model.head.n_labels() {
        if n != cfg.n_labels() {
            return Err(Error::Config(format!("checkpoint head has {n} labels, configuration implies {}", cfg.n_labels())));
        }
    }
    Ok(())
}

fn write_metrics(path: &Path, log: &[EpochMetrics], append: bool) -> Result<()> {
    if append && path.exists() {
        let mut buf = Vec::new();
        train::write_metrics_csv(log, &mut buf)?;
        let body = buf.splitn(2, |&b| b == b'\n').nth(1).unwrap_or_default();
        let mut f = fs::OpenOptions::new().append(true).open(path).io_context(|| format!("opening {}", path.display()))?;
        f.write_all(body).io_context(|| format!("writing {}", path.display()))
    } else {
        let f = fs::File::create(path).io_context(|| format!("creating {}", path.display()))?;
        train::write_metrics_csv(log, std::io::BufWriter::new(f))
    }
}

pub fn train_cmd(cfg: &RunConfig, resume: Option<&Path>) -> Result<ExitCode> {
    let (table, corpus) = load_data(cfg)?;
    let split = corpus.len() - cfg.corpus.heldout;
    let to_samples = |exs: &[Example]| {
        data::to_samples(exs, &table, cfg.objective.task, cfg.objective.target, cfg.grammar.n_roles)
    };
    let samples = to_samples(&corpus[..split])?;
    let state = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            check_compatible(&ck.model, cfg)?;
            if ck.seed != cfg.seed {
                log::warn!("checkpoint seed {} differs from configured seed {}", ck.seed, cfg.seed);
            }
            ck.into_state()?
        }
        None => TrainState::fresh(fresh_model(cfg)?, &cfg.train)?,
    };
    let start = state.epoch;
    create_dir(&cfg.paths.run_dir)?;
    log::info!("training {} parameters on {} sequences", state.model.param_count(), samples.len());
    match train::train_loop(state, &samples, &cfg.train, &cfg.objective) {
        Ok((state, log)) => {
            Checkpoint::from_state(&state, cfg.seed).save(&cfg.paths.checkpoint())?;
            write_metrics(&cfg.paths.metrics(), &log, resume.is_some() && start > 0)?;
            if split < corpus.len() {
                let held = to_samples(&corpus[split..])?;
                let stats = train::evaluate(&state.model, &held, &cfg.objective)?;
                log::info!("held-out accuracy {:.4}", stats.accuracy());
            }
            Ok(ExitCode::Ok)
        }
        Err(TrainError::Diverged { epoch, reason, last_good }) => {
            Checkpoint::from_state(&last_good, cfg.seed).save(&cfg.paths.checkpoint())?;
            log::error!("diverged in epoch {epoch}: {reason}; saved the state after epoch {}", last_good.epoch);
            Ok(ExitCode::VerificationFailed)
        }
        Err(TrainError::Core(e)) => Err(e),
    }
}

/// Checks gradients on the leading sequences of an in-memory corpus built
/// from the configured grammar and seed.
pub fn gradcheck(cfg: &RunConfig, checkpoint: Option<&Path>, corrupt: bool) -> Result<ExitCode> {
    let model = match checkpoint {
        Some(p) => {
            let m = Checkpoint::load(p)?.model;
            check_compatible(&m, cfg)?;
            m
        }
        None => fresh_model(cfg)?,
    };
    let grammar = data::gen_grammar(&cfg.grammar)?;
    let table = grammar.embeddings()?;
    let corpus = data::gen_corpus(&grammar, cfg.gradcheck.sequences, cfg.corpus_seed())?;
    let batch = data::to_samples(&corpus, &table, cfg.objective.task, cfg.objective.target, cfg.grammar.n_roles)?;
    let (_, mut grads) = train::backward(&model, &batch, &cfg.objective)?;
    if corrupt {
        train::corrupt_gradients(&mut grads, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    }
    let report = train::fd_check_against(&model, &batch, &cfg.objective, &grads, &cfg.fd_options())?;
    let tol = cfg.gradcheck.tolerance;
    let mut out = std::io::stdout().lock();
    let mut emit = |line: String| out.write_all(line.as_bytes()).io_context(|| "writing to stdout".into());
    for g in &report.groups {
        let verdict = if g.max_rel_err < tol { "ok" } else { "FAIL" };
        emit(format!("{:<22} {:>6} checked  max rel err {:.3e}  {verdict}\n", g.name, g.checked, g.max_rel_err))?;
    }
    let pass = report.max_rel_err < tol;
    emit(format!(
        "max rel err {:.3e} at {} (tolerance {tol:.1e}): {}\n",
        report.max_rel_err,
        report.worst_param,
        if pass { "pass" } else { "fail" }
    ))?;
    Ok(if pass { ExitCode::Ok } else { ExitCode::VerificationFailed })
}

fn polysemous_text(grammar: &SyntheticGrammar, table: &EmbeddingTable) -> Option<String> {
    let p = grammar.polysemous.as_ref()?;
    (p.token < table.len()).then(|| table.token(p.token).to_string())
}

pub fn interpret_cmd(cfg: &RunConfig, checkpoint: &Path) -> Result<interpret::Interpretation> {
    let ck = Checkpoint::load(checkpoint)?;
    check_compatible(&ck.model, cfg)?;
    let (table, corpus) = load_data(cfg)?;
    let grammar = SyntheticGrammar::load(&cfg.paths.grammar())?;
    let pos = match &cfg.paths.pos {
        Some(p) => Some(data::load_pos(p, &corpus.iter().map(Example::len).collect::<Vec<_>>())?),
        None => None,
    };
    let mut icfg = cfg.interpret.clone();
    if icfg.polysemy_words.is_empty() {
        icfg.polysemy_words.extend(polysemous_text(&grammar, &table));
    }

    let dump = interpret::dump_traces(&ck.model, &corpus, &table)?;
    let result = interpret::interpret(&ck.model, &dump, &corpus, pos.as_ref(), &icfg)?;
    let p = &cfg.paths;
    create_dir(&p.run_dir)?;
    interpret::save_dump(&dump, &p.traces())?;
    interpret::save_report(&result.report, ReportFormat::Csv, &p.report_csv())?;
    interpret::save_report(&result.report, ReportFormat::Json, &p.report_json())?;
    let symbols = serde_json::json!({
        "counts": result.symbols.counts,
        "topTokens": result.symbols.top_tokens,
        "roleSizes": result.roles.iter().map(|r| r.members.len()).collect::<Vec<_>>(),
    });
    let mut text = jsonfmt::to_string_pretty(&symbols)?;
    text.push('\n');
    fs::write(p.symbols(), text).io_context(|| format!("writing {}", p.symbols().display()))?;
    for t in &result.report.tables {
        for (cluster, label, purity, size) in t.majorities(1) {
            log::info!("{}: cluster {cluster} ({size}) -> {label} {purity:.3}", t.name);
        }
    }
    Ok(result)
}
