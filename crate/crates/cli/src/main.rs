use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ctcatt::checkpoint::Checkpoint;
use ctcatt::data::{read_transcripts, save_corpora, ErrorCounts, Utterance};
use ctcatt::decode::LmScorer;
use ctcatt::experiment::{
    decode_set, format_hypotheses, parse_hypotheses, run_sweep, ExperimentConfig, SuiteData, HYPOTHESIS_HEADER,
};
use ctcatt::lm::{lm_train, CharRnnLm};
use ctcatt::model::HybridModel;
use ctcatt::train::{train_stage, Stage};
use ctcatt::Error;
use log::info;

#[derive(Parser)]
#[command(name = "ctcatt", version, about = "Hybrid CTC/attention recognizer with multilingual transfer")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multilingual corpus.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one stage, writing a checkpoint per epoch and a JSON-lines log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=2))]
        stage: u8,
        /// Checkpoint file, or a stage output directory.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Epoch checkpoint to start from when --init is a directory.
        #[arg(long)]
        prior_epoch: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Languages to train on. Stage 0 defaults to every training
        /// language, stages 1 and 2 to the target.
        #[arg(long = "lang")]
        langs: Vec<String>,
        /// Use only the first N training utterances.
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a split with joint CTC/attention beam search.
    Decode {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        ctc_weight: Option<f64>,
        #[arg(long)]
        lm_weight: Option<f64>,
        #[arg(long)]
        max_len_ratio: Option<f64>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to the target language.
        #[arg(long)]
        lang: Option<String>,
        #[arg(long, default_value = "eval")]
        split: String,
        /// Hypothesis file (tab-separated, with a header).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a hypothesis file against references.
    Score {
        #[arg(long)]
        hyp: PathBuf,
        /// Transcript file (`id<TAB>text`) or hypothesis file.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, value_enum, default_value_t = Metric::Cer)]
        metric: Metric,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the subset-size transfer sweep and write a results table.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        subset_sizes: Option<Vec<usize>>,
        #[arg(long)]
        with_lm: bool,
        #[arg(long)]
        prior_epoch: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the character language model on one language's transcripts.
    LmTrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to the target language.
        #[arg(long)]
        lang: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Cer,
    Wer,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_)
        | Error::Io(_)
        | Error::Vocabulary(_)
        | Error::UnknownSymbol(_)
        | Error::ArchMismatch(_)
        | Error::Checkpoint(_)
        | Error::Empty(_) => 3,
        Error::Divergence(_) => 4,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>, data: Option<PathBuf>) -> ctcatt::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if data.is_some() {
        cfg.data_dir = data;
    }
    cfg.validate()?;
    Ok(cfg.resolved())
}

/// Writes the resolved configuration next to an output.
fn write_config(cfg: &ExperimentConfig, path: &Path) -> ctcatt::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, cfg.to_toml()?)?;
    Ok(())
}

/// `<dir>/<stem>.config.toml` for a file output.
fn config_beside(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    out.with_file_name(format!("{stem}.config.toml"))
}

fn select_languages<'a>(data: &'a SuiteData, langs: &[String], stage: Stage) -> ctcatt::Result<Vec<&'a ctcatt::data::Corpus>> {
    if langs.is_empty() {
        return Ok(match stage {
            Stage::Stage0 => data.training.iter().collect(),
            _ => vec![&data.target],
        });
    }
    langs
        .iter()
        .map(|l| {
            data.training
                .iter()
                .chain(std::iter::once(&data.target))
                .find(|c| &c.lang == l)
                .ok_or_else(|| Error::Config(format!("unknown language {l}")))
        })
        .collect()
}

fn resolve_init(init: &Path, prior_epoch: Option<usize>) -> ctcatt::Result<PathBuf> {
    if init.is_dir() {
        let name = match prior_epoch {
            Some(k) => format!("epoch-{k}.ckpt"),
            None => "best.ckpt".into(),
        };
        let p = init.join(name);
        if !p.exists() {
            return Err(Error::Config(format!("{} does not exist", p.display())));
        }
        Ok(p)
    } else if prior_epoch.is_some() {
        Err(Error::Config("--prior-epoch needs --init to be a stage output directory".into()))
    } else {
        Ok(init.to_path_buf())
    }
}

fn cmd_gen(config: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> ctcatt::Result<()> {
    let cfg = load_config(config.as_deref(), seed, None)?;
    let data = SuiteData::generate(&cfg.suite)?;
    let mut corpora = data.training.clone();
    corpora.push(data.target.clone());
    let m = save_corpora(&out, cfg.seed, &data.vocab, &corpora, &data.target.lang)?;
    write_config(&cfg, &out.join("config.toml"))?;
    for l in &m.languages {
        println!("{}\t{}/{}/{}", l.name, l.train, l.dev, l.eval);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: Option<PathBuf>,
    stage: u8,
    init: Option<PathBuf>,
    prior_epoch: Option<usize>,
    data: Option<PathBuf>,
    langs: Vec<String>,
    subset: Option<usize>,
    epochs: Option<usize>,
    seed: Option<u64>,
    out: PathBuf,
) -> ctcatt::Result<()> {
    let stage = Stage::from_index(stage)?;
    let mut cfg = load_config(config.as_deref(), seed, data)?;
    if let Some(e) = epochs {
        match stage {
            Stage::Stage0 => cfg.stage0.epochs = e,
            Stage::Stage1 => cfg.stage1.epochs = e,
            Stage::Stage2 => cfg.stage2.epochs = e,
        }
    }
    let tc = cfg.train_config(stage).clone();
    tc.validate()?;
    let suite = SuiteData::for_config(&cfg)?;
    let model = match (stage.needs_init(), &init) {
        (true, None) => return Err(Error::Config(format!("stage {} needs --init", stage.index()))),
        (false, Some(_)) => return Err(Error::Config("stage 0 trains from scratch; drop --init".into())),
        (true, Some(p)) => HybridModel::from_checkpoint(&Checkpoint::load(&resolve_init(p, prior_epoch)?)?)?,
        (false, None) => HybridModel::new(cfg.model.clone(), suite.vocab.clone(), cfg.init_seed())?,
    };
    let corpora = select_languages(&suite, &langs, stage)?;
    let mut train: Vec<&Utterance> = corpora.iter().flat_map(|c| c.train.iter()).collect();
    if let Some(n) = subset {
        if n == 0 || n > train.len() {
            return Err(Error::Config(format!("--subset {n} outside 1..={}", train.len())));
        }
        train.truncate(n);
    }
    let dev: Vec<&Utterance> = corpora.iter().flat_map(|c| c.dev.iter()).collect();

    fs::create_dir_all(&out)?;
    write_config(&cfg, &out.join("config.toml"))?;
    let initial = model.params.clone();
    let mut log = fs::File::create(out.join("train.log.jsonl"))?;
    let outcome = train_stage(model, stage, &tc, &train, &dev, |report, m| {
        for r in &report.records {
            writeln!(log, "{}", r.to_json())?;
        }
        m.to_checkpoint()?.save(&out.join(format!("epoch-{}.ckpt", report.epoch)))?;
        info!("epoch {}: dev accuracy {:.4}", report.epoch, report.dev_accuracy);
        Ok(())
    })?;
    outcome.best.to_checkpoint()?.save(&out.join("best.ckpt"))?;
    outcome.last.to_checkpoint()?.save(&out.join("last.ckpt"))?;

    // how far each parameter moved over the stage
    let mut diff = String::from("param\tmax_abs_change\n");
    for ((_, name, before), (_, _, after)) in initial.iter().zip(outcome.last.params.iter()) {
        let d = before.data().iter().zip(after.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        diff.push_str(&format!("{name}\t{d:e}\n"));
    }
    fs::write(out.join("param_diff.tsv"), diff)?;
    println!("best epoch {} of {}", outcome.best_epoch, tc.epochs);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_decode(
    config: Option<PathBuf>,
    model: PathBuf,
    lm: Option<PathBuf>,
    beam: Option<usize>,
    ctc_weight: Option<f64>,
    lm_weight: Option<f64>,
    max_len_ratio: Option<f64>,
    data: Option<PathBuf>,
    lang: Option<String>,
    split: String,
    out: PathBuf,
) -> ctcatt::Result<()> {
    let mut cfg = load_config(config.as_deref(), None, data)?;
    if let Some(b) = beam {
        cfg.decode.beam = b;
    }
    if let Some(a) = ctc_weight {
        cfg.decode.alpha = a;
    }
    if let Some(b) = lm_weight {
        cfg.decode.beta = b;
    }
    if let Some(r) = max_len_ratio {
        cfg.decode.max_len_ratio = r;
    }
    cfg.decode.validate()?;
    if cfg.decode.beta > 0.0 && lm.is_none() {
        return Err(Error::Config("--lm-weight > 0 needs --lm".into()));
    }
    let model = HybridModel::from_checkpoint(&Checkpoint::load(&model)?)?;
    let lm = lm.map(|p| Checkpoint::load(&p).and_then(|c| CharRnnLm::from_checkpoint(&c))).transpose()?;
    let suite = SuiteData::for_config(&cfg)?;
    let corpus = match &lang {
        Some(l) => select_languages(&suite, std::slice::from_ref(l), Stage::Stage0)?[0],
        None => &suite.target,
    };
    let utts: Vec<&Utterance> = corpus
        .split(&split)
        .ok_or_else(|| Error::Config(format!("unknown split {split}, expected train, dev or eval")))?
        .iter()
        .collect();
    let decoded = decode_set(&model, lm.as_ref().map(|l| l as &dyn LmScorer), &utts, &cfg.decode)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&out, format_hypotheses(&decoded))?;
    write_config(&cfg, &config_beside(&out))?;
    let unfinished = decoded.iter().filter(|d| d.unfinished).count();
    println!("decoded {} utterances ({unfinished} unfinished)", decoded.len());
    Ok(())
}

fn read_references(path: &Path) -> ctcatt::Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    if text.lines().next() == Some(HYPOTHESIS_HEADER) {
        parse_hypotheses(&text)
    } else {
        read_transcripts(path)
    }
}

fn cmd_score(hyp: PathBuf, reference: PathBuf, metric: Metric, out: Option<PathBuf>) -> ctcatt::Result<()> {
    let hyps = parse_hypotheses(&fs::read_to_string(&hyp)?)?;
    let refs: std::collections::BTreeMap<String, String> = read_references(&reference)?.into_iter().collect();
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    let mut report = String::from("id\terrors\tref_len\trate\n");
    let mut total = ErrorCounts::default();
    for (id, text) in &hyps {
        let r = refs.get(id).ok_or_else(|| Error::Data(format!("no reference for {id}")))?;
        let counts = match metric {
            Metric::Cer => ErrorCounts::chars(text, r),
            Metric::Wer => ErrorCounts::words(text, r),
        };
        let rate = counts.rate().map_or("-".to_string(), |v| format!("{v:.2}"));
        report.push_str(&format!("{id}\t{}\t{}\t{rate}\n", counts.edits, counts.ref_len));
        total += counts;
    }
    let name = match metric {
        Metric::Cer => "cer",
        Metric::Wer => "wer",
    };
    report.push_str(&format!("total\t{}\t{}\t{:.2}\n", total.edits, total.ref_len, total.rate()?));
    print!("{report}");
    if let Some(o) = out {
        fs::write(o, &report)?;
    }
    eprintln!("corpus {name}: {:.2}", total.rate()?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    config: Option<PathBuf>,
    subset_sizes: Option<Vec<usize>>,
    with_lm: bool,
    prior_epoch: Option<usize>,
    data: Option<PathBuf>,
    seed: Option<u64>,
    out: PathBuf,
) -> ctcatt::Result<()> {
    let mut cfg = load_config(config.as_deref(), seed, data)?;
    if let Some(s) = subset_sizes {
        cfg.sweep.subset_sizes = s;
    }
    cfg.sweep.with_lm |= with_lm;
    if prior_epoch.is_some() {
        cfg.sweep.prior_epoch = prior_epoch;
    }
    cfg.validate()?;
    fs::create_dir_all(&out)?;
    write_config(&cfg, &out.join("config.toml"))?;
    let suite = SuiteData::for_config(&cfg)?;
    let result = run_sweep(&cfg, &suite, |m| info!("{m}"))?;
    let tsv = result.to_tsv();
    fs::write(out.join("results.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

fn cmd_lm_train(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    lang: Option<String>,
    epochs: Option<usize>,
    seed: Option<u64>,
    out: PathBuf,
) -> ctcatt::Result<()> {
    let mut cfg = load_config(config.as_deref(), seed, data)?;
    if let Some(e) = epochs {
        cfg.lm.epochs = e;
    }
    let suite = SuiteData::for_config(&cfg)?;
    let corpus = match &lang {
        Some(l) => select_languages(&suite, std::slice::from_ref(l), Stage::Stage0)?[0],
        None => &suite.target,
    };
    let texts = |u: &[Utterance]| u.iter().map(|u| u.transcript.clone()).collect::<Vec<_>>();
    fs::create_dir_all(&out)?;
    write_config(&cfg, &out.join("config.toml"))?;
    let (lm, history) = lm_train(&texts(&corpus.train), &texts(&corpus.dev), &suite.vocab, &cfg.lm)?;
    let mut log = fs::File::create(out.join("lm.log.jsonl"))?;
    for h in &history {
        writeln!(log, "{}", serde_json::to_string(h).map_err(|e| Error::Data(e.to_string()))?)?;
    }
    lm.to_checkpoint()?.save(&out.join("lm.ckpt"))?;
    if let Some(h) = history.last() {
        println!("dev perplexity {:.4}", h.dev_perplexity);
    }
    Ok(())
}

fn run(cli: Cli) -> ctcatt::Result<()> {
    match cli.cmd {
        Command::Gen { config, out, seed } => cmd_gen(config, out, seed),
        Command::Train { config, stage, init, prior_epoch, data, langs, subset, epochs, seed, out } => {
            cmd_train(config, stage, init, prior_epoch, data, langs, subset, epochs, seed, out)
        }
        Command::Decode { config, model, lm, beam, ctc_weight, lm_weight, max_len_ratio, data, lang, split, out } => {
            cmd_decode(config, model, lm, beam, ctc_weight, lm_weight, max_len_ratio, data, lang, split, out)
        }
        Command::Score { hyp, reference, metric, out } => cmd_score(hyp, reference, metric, out),
        Command::Sweep { config, subset_sizes, with_lm, prior_epoch, data, seed, out } => {
            cmd_sweep(config, subset_sizes, with_lm, prior_epoch, data, seed, out)
        }
        Command::LmTrain { config, data, lang, epochs, seed, out } => cmd_lm_train(config, data, lang, epochs, seed, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
