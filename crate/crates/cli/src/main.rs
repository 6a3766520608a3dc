//! `iat`: corpus generation, training, evaluation and inspection.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;

use iat_core::corpus::{
    examples_from, filter_min_response_len, gen_synthetic, load_dialogues, read_pos_entries, write_pos_entries,
    write_text_dialogues, SurfaceDialogue,
};
use iat_core::eval::{decode_responses, full_report, AuxModels, EvalConfig, ReportContext};
use iat_core::trainer::{pretrain_mle, train_auxiliary, train_iat};
use iat_core::{
    derive_seed, DecodeMode, Error, Example, Model, ModelConfig, ModelRole, PerturbationKind, Perturber, PosLexicon,
    StopwordList, SynthConfig, TrainConfig, TrainLog, Utterance, Vocabulary,
};

#[derive(Parser, Debug)]
#[command(name = "iat", version, about = "Inverse adversarial training for dialogue models")]
struct Cli {
    /// Worker threads; 1 keeps every result bitwise reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus with train/valid/test splits, vocab and POS lexicon.
    GenCorpus(GenCorpusArgs),
    /// MLE pretraining of the forward model.
    Pretrain(TrainArgs),
    /// MLE training of a backward model or response language model.
    TrainAux(TrainAuxArgs),
    /// IAT fine-tuning from a pretrained checkpoint.
    TrainIat(TrainIatArgs),
    /// Compute the metrics report of a checkpoint.
    Evaluate(EvaluateArgs),
    /// Apply one history perturbation to every dialogue of a file.
    Perturb(PerturbArgs),
    /// Decode one response for a history given on the command line.
    Decode(DecodeArgs),
}

#[derive(clap::Args, Debug)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    dialogues: usize,
    #[arg(long, default_value_t = 6)]
    turns: usize,
    #[arg(long, default_value_t = 30)]
    entities: usize,
    #[arg(long, default_value_t = 0.3)]
    generic_rate: f64,
    /// Largest vocabulary, reserved tokens included.
    #[arg(long, default_value_t = 300)]
    max_vocab: usize,
}

#[derive(clap::Args, Debug)]
struct CorpusArgs {
    /// Directory written by gen-corpus (train/valid/test.jsonl, vocab.txt, pos.txt).
    #[arg(long)]
    corpus: PathBuf,
    /// Number of preceding utterances used as history; the full history when omitted.
    #[arg(long)]
    history_window: Option<usize>,
    /// Drop examples whose response has fewer tokens.
    #[arg(long, default_value_t = 0)]
    min_response_len: usize,
}

#[derive(clap::Args, Debug)]
struct ModelArgs {
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value_t = 64)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 20)]
    max_decode_len: usize,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// JSON training config; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AuxRole {
    Backward,
    ResponseLm,
}

#[derive(clap::Args, Debug)]
struct TrainAuxArgs {
    #[arg(long, value_enum)]
    role: AuxRole,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(clap::Args, Debug)]
struct TrainIatArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pretrained forward checkpoint.
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Split to evaluate: train, valid or test.
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "greedy")]
    mode: DecodeMode,
    #[arg(long)]
    aux_lm: Option<PathBuf>,
    #[arg(long)]
    aux_bwd: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 10)]
    nbest: usize,
    #[arg(long, default_value_t = 10)]
    beam_width: usize,
    /// Comma-separated perturbation seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Evaluate only the first N examples of the split.
    #[arg(long)]
    max_examples: Option<usize>,
    /// Stop-word file, one surface per line; the bundled list otherwise.
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// JSON report path; a CSV row is written next to it.
    #[arg(long)]
    report: PathBuf,
}

#[derive(clap::Args, Debug)]
struct PerturbArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    op: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dialogue file whose utterances feed `repl`.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// POS lexicon for `noun-drop` and `verb-drop`.
    #[arg(long)]
    pos: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DecodeChoice {
    Greedy,
    Beam,
    Sample,
    MmiAnti,
    MmiBidi,
}

#[derive(clap::Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Utterances separated by " || ", oldest first.
    #[arg(long)]
    history: String,
    #[arg(long, value_enum, default_value_t = DecodeChoice::Greedy)]
    mode: DecodeChoice,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    beam_width: usize,
    #[arg(long, default_value_t = 10)]
    nbest: usize,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long)]
    aux_lm: Option<PathBuf>,
    #[arg(long)]
    aux_bwd: Option<PathBuf>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: cannot start worker pool: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Pretrain(a) => pretrain(a),
        Command::TrainAux(a) => train_aux(a),
        Command::TrainIat(a) => train_iat_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Perturb(a) => perturb(a),
        Command::Decode(a) => decode(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn gen_corpus(a: GenCorpusArgs) -> CliResult {
    let config = SynthConfig {
        num_dialogues: a.dialogues,
        turns_per_dialogue: a.turns,
        entity_count: a.entities,
        generic_rate: a.generic_rate,
        seed: a.seed,
    };
    let corpus = gen_synthetic(&config)?;
    if config.num_dialogues < 10 {
        return Err(usage("at least 10 dialogues are needed for an 80/10/10 split"));
    }
    fs::create_dir_all(&a.out).map_err(|e| usage(format!("cannot create {}: {e}", a.out.display())))?;

    let mut order: Vec<usize> = (0..corpus.dialogues.len()).collect();
    order.shuffle(&mut rng(derive_seed(a.seed, &[SPLIT_STREAM])));
    let n = order.len();
    let (n_train, n_valid) = (n * 8 / 10, n / 10);
    let pick = |idx: &[usize]| -> Vec<Vec<String>> {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.iter().map(|&i| corpus.dialogues[i].clone()).collect()
    };
    let train = pick(&order[..n_train]);
    let valid = pick(&order[n_train..n_train + n_valid]);
    let test = pick(&order[n_train + n_valid..]);
    write_text_dialogues(&a.out.join("train.jsonl"), &train)?;
    write_text_dialogues(&a.out.join("valid.jsonl"), &valid)?;
    write_text_dialogues(&a.out.join("test.jsonl"), &test)?;

    let tokenized: Vec<SurfaceDialogue> = train
        .iter()
        .map(|d| d.iter().map(|u| iat_core::corpus::tokenize(u)).collect())
        .collect();
    let vocab = Vocabulary::build(&tokenized, a.max_vocab, 1)?;
    vocab.save(&a.out.join("vocab.txt"))?;
    write_pos_entries(&a.out.join("pos.txt"), &corpus.pos)?;
    println!(
        "wrote {} train, {} valid, {} test dialogues and a {}-entry vocabulary to {}",
        train.len(),
        valid.len(),
        test.len(),
        vocab.len(),
        a.out.display()
    );
    Ok(())
}

const SPLIT_STREAM: u64 = 0x5911;

fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Vocabulary, POS lexicon and encoded splits of a corpus directory.
struct Corpus {
    vocab: Vocabulary,
    lexicon: PosLexicon,
    train: Vec<Example>,
    valid: Vec<Example>,
    test: Vec<Example>,
    /// Every training utterance, the replacement pool for `repl`.
    pool: Vec<Utterance>,
}

fn load_corpus(args: &CorpusArgs) -> CliResult<Corpus> {
    let dir = &args.corpus;
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
    let pos_path = dir.join("pos.txt");
    let lexicon = if pos_path.exists() {
        PosLexicon::load(&pos_path, &vocab)?
    } else {
        PosLexicon::empty(vocab.len())
    };
    let window = args.history_window.unwrap_or(usize::MAX);
    let mut pool = Vec::new();
    let mut split = |name: &str, keep_pool: bool| -> CliResult<Vec<Example>> {
        let loaded = load_dialogues(&dir.join(format!("{name}.jsonl")))?;
        let dialogues: Vec<_> = loaded.dialogues.iter().map(|d| vocab.encode_dialogue(d)).collect();
        if keep_pool {
            pool.extend(dialogues.iter().flatten().cloned());
        }
        Ok(filter_min_response_len(examples_from(&dialogues, window)?, args.min_response_len))
    };
    let train = split("train", true)?;
    let valid = split("valid", false)?;
    let test = split("test", false)?;
    Ok(Corpus {
        vocab,
        lexicon,
        train,
        valid,
        test,
        pool,
    })
}

fn load_train_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    let config = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("log.csv")
}

fn finish_training(model: &Model, log: &TrainLog, out: &Path) -> CliResult {
    model.save(out)?;
    log.write_csv(&log_path(out))?;
    println!(
        "initial valid ppl {:.4}, best valid ppl {:.4} at epoch {} of {}; saved {}",
        log.initial_valid_ppl,
        log.best_valid_ppl(),
        log.best_epoch,
        log.records.len(),
        out.display()
    );
    Ok(())
}

fn fresh_model(corpus: &Corpus, m: &ModelArgs, role: ModelRole, seed: u64) -> CliResult<Model> {
    let config = ModelConfig::new(corpus.vocab.len(), m.embed_dim, m.hidden_dim)
        .with_max_decode_len(m.max_decode_len)
        .with_role(role);
    Ok(Model::random(config, seed)?)
}

fn require_examples(corpus: &Corpus) -> CliResult {
    if corpus.train.is_empty() || corpus.valid.is_empty() {
        return Err(usage("training and validation splits must contain examples"));
    }
    Ok(())
}

fn pretrain(a: TrainArgs) -> CliResult {
    let config = load_train_config(a.config.as_deref())?;
    let corpus = load_corpus(&a.corpus)?;
    require_examples(&corpus)?;
    let model = fresh_model(&corpus, &a.model, ModelRole::Forward, config.seed)?;
    let (params, log) = pretrain_mle(&model, &corpus.train, &corpus.valid, &config)?;
    let (cfg, _) = model.into_parts();
    finish_training(&Model::new(cfg, params)?, &log, &a.out)
}

fn train_aux(a: TrainAuxArgs) -> CliResult {
    let role = match a.role {
        AuxRole::Backward => ModelRole::Backward,
        AuxRole::ResponseLm => ModelRole::ResponseLm,
    };
    let t = a.train;
    let config = load_train_config(t.config.as_deref())?;
    let corpus = load_corpus(&t.corpus)?;
    require_examples(&corpus)?;
    let model = fresh_model(&corpus, &t.model, role, config.seed)?;
    let (params, log) = train_auxiliary(&model, &corpus.train, &corpus.valid, &config)?;
    let (cfg, _) = model.into_parts();
    finish_training(&Model::new(cfg, params)?, &log, &t.out)
}

fn load_model_for(path: &Path, vocab: &Vocabulary, role: ModelRole) -> CliResult<Model> {
    let model = Model::load(path)?;
    if model.config().vocab_size != vocab.len() {
        return Err(usage(format!(
            "{} was trained with vocabulary size {}, corpus has {}",
            path.display(),
            model.config().vocab_size,
            vocab.len()
        )));
    }
    if model.role() != role {
        return Err(usage(format!(
            "{} holds a {:?} model, expected {:?}",
            path.display(),
            model.role(),
            role
        )));
    }
    Ok(model)
}

fn train_iat_cmd(a: TrainIatArgs) -> CliResult {
    let config = load_train_config(a.config.as_deref())?;
    let corpus = load_corpus(&a.corpus)?;
    require_examples(&corpus)?;
    let model = load_model_for(&a.init, &corpus.vocab, ModelRole::Forward)?;
    let (params, log) = train_iat(&model, &corpus.train, &corpus.valid, &corpus.pool, &corpus.lexicon, &config)?;
    let (cfg, _) = model.into_parts();
    finish_training(&Model::new(cfg, params)?, &log, &a.out)
}

fn evaluate(a: EvaluateArgs) -> CliResult {
    let corpus = load_corpus(&a.corpus)?;
    let mut examples = match a.split.as_str() {
        "train" => corpus.train.clone(),
        "valid" => corpus.valid.clone(),
        "test" => corpus.test.clone(),
        other => return Err(usage(format!("unknown split {other:?}; expected train, valid or test"))),
    };
    if let Some(n) = a.max_examples {
        examples.truncate(n);
    }
    if examples.is_empty() {
        return Err(usage(format!("split {} has no examples", a.split)));
    }
    if a.seeds.is_empty() {
        return Err(usage("--seeds needs at least one seed"));
    }
    let eval_config = EvalConfig {
        beam_width: a.beam_width,
        n_best: a.nbest,
        mmi_lambda: a.lambda,
        seeds: a.seeds.clone(),
    };
    validate_eval(&eval_config)?;
    let model = load_model_for(&a.ckpt, &corpus.vocab, ModelRole::Forward)?;
    let (lm, bwd) = load_aux(a.mode_needs(), a.aux_lm.as_deref(), a.aux_bwd.as_deref(), &corpus.vocab)?;
    let stopwords = match &a.stopwords {
        Some(p) => StopwordList::load(p)?,
        None => StopwordList::bundled(),
    };
    let perturber = Perturber::new(&corpus.pool, &corpus.lexicon, corpus.vocab.len())?;
    let ctx = ReportContext {
        perturber: &perturber,
        vocab: &corpus.vocab,
        stopwords: &stopwords,
    };
    let aux = AuxModels {
        response_lm: lm.as_ref(),
        backward: bwd.as_ref(),
    };
    let report = full_report(&model, &examples, a.mode, aux, &eval_config, &ctx)?;
    write_file(&a.report, report.to_json()? + "\n")?;
    write_file(&a.report.with_extension("csv"), report.to_csv())?;
    print!("{}", report.summary());
    Ok(())
}

fn validate_eval(c: &EvalConfig) -> CliResult {
    if c.beam_width == 0 || c.n_best == 0 {
        return Err(usage("--beam-width and --nbest must be at least 1"));
    }
    if !(c.mmi_lambda >= 0.0) {
        return Err(usage("--lambda must be non-negative"));
    }
    Ok(())
}

/// Which auxiliary checkpoints a decoding mode requires.
#[derive(Clone, Copy, PartialEq, Eq)]
enum AuxNeed {
    None,
    Lm,
    Backward,
}

impl EvaluateArgs {
    fn mode_needs(&self) -> AuxNeed {
        match self.mode {
            DecodeMode::MmiAnti => AuxNeed::Lm,
            DecodeMode::MmiBidi => AuxNeed::Backward,
            _ => AuxNeed::None,
        }
    }
}

fn load_aux(
    need: AuxNeed,
    lm: Option<&Path>,
    bwd: Option<&Path>,
    vocab: &Vocabulary,
) -> CliResult<(Option<Model>, Option<Model>)> {
    let lm = match (need, lm) {
        (AuxNeed::Lm, None) => return Err(usage("mmi-anti needs --aux-lm")),
        (AuxNeed::Lm, Some(p)) => Some(load_model_for(p, vocab, ModelRole::ResponseLm)?),
        _ => None,
    };
    let bwd = match (need, bwd) {
        (AuxNeed::Backward, None) => return Err(usage("mmi-bidi needs --aux-bwd")),
        (AuxNeed::Backward, Some(p)) => Some(load_model_for(p, vocab, ModelRole::Backward)?),
        _ => None,
    };
    Ok((lm, bwd))
}

fn perturb(a: PerturbArgs) -> CliResult {
    let kind: PerturbationKind = a.op.parse().map_err(|_| {
        usage(format!(
            "unknown perturbation {:?}; valid names: {}",
            a.op,
            PerturbationKind::valid_names().join(", ")
        ))
    })?;
    if kind == PerturbationKind::Repl && a.pool.is_none() {
        return Err(usage("repl needs --pool"));
    }
    let input = load_dialogues(&a.input)?.dialogues;
    let pool_text = match &a.pool {
        Some(p) => load_dialogues(p)?.dialogues,
        None => Vec::new(),
    };
    // A vocabulary over every surface involved, so nothing maps to UNK.
    let mut surfaces: Vec<String> = input
        .iter()
        .chain(&pool_text)
        .flatten()
        .flatten()
        .filter(|s| !iat_core::corpus::RESERVED_SURFACES.contains(&s.as_str()))
        .cloned()
        .collect();
    surfaces.sort_unstable();
    surfaces.dedup();
    let vocab = Vocabulary::from_surfaces(surfaces)?;
    let lexicon = match &a.pos {
        Some(p) => PosLexicon::resolve(&vocab, &read_pos_entries(p)?),
        None => PosLexicon::empty(vocab.len()),
    };
    let pool: Vec<Utterance> = pool_text.iter().flatten().map(|u| vocab.encode(u)).collect();
    let perturber = Perturber::new(&pool, &lexicon, vocab.len().max(iat_core::corpus::NUM_RESERVED + 1))?;
    let mut out = Vec::with_capacity(input.len());
    for (i, d) in input.iter().enumerate() {
        let encoded = vocab.encode_dialogue(d);
        let (last, history) = encoded.split_last().expect("loaded dialogues have at least two utterances");
        let mut rng = rng(derive_seed(a.seed, &[i as u64]));
        let mut new = perturber.perturb_history(&history.to_vec(), kind, &mut rng)?;
        new.push(last.clone());
        out.push(
            new.iter()
                .map(|u| vocab.decode_text(u))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    write_text_dialogues(&a.out, &out).map_err(|e| match e {
        Error::Io { .. } => usage(e.to_string()),
        other => other.into(),
    })?;
    Ok(())
}

fn decode(a: DecodeArgs) -> CliResult {
    let vocab = Vocabulary::load(&a.vocab)?;
    let history: Vec<Utterance> = a
        .history
        .split(" || ")
        .map(|u| vocab.encode(&iat_core::corpus::tokenize(u)))
        .filter(|u| !u.is_empty())
        .collect();
    if history.is_empty() {
        return Err(usage("--history is empty"));
    }
    let model = load_model_for(&a.ckpt, &vocab, ModelRole::Forward)?;
    let hyp = match a.mode {
        DecodeChoice::Sample => {
            if !(a.temperature > 0.0) {
                return Err(usage("--temperature must be positive"));
            }
            model.sample_decode(&history, a.temperature, &mut rng(a.seed))?
        }
        other => {
            let mode = match other {
                DecodeChoice::Greedy => DecodeMode::Greedy,
                DecodeChoice::Beam => DecodeMode::Beam,
                DecodeChoice::MmiAnti => DecodeMode::MmiAnti,
                _ => DecodeMode::MmiBidi,
            };
            let config = EvalConfig {
                beam_width: a.beam_width,
                n_best: a.nbest,
                mmi_lambda: a.lambda,
                seeds: vec![],
            };
            validate_eval(&config)?;
            let need = match mode {
                DecodeMode::MmiAnti => AuxNeed::Lm,
                DecodeMode::MmiBidi => AuxNeed::Backward,
                _ => AuxNeed::None,
            };
            let (lm, bwd) = load_aux(need, a.aux_lm.as_deref(), a.aux_bwd.as_deref(), &vocab)?;
            let aux = AuxModels {
                response_lm: lm.as_ref(),
                backward: bwd.as_ref(),
            };
            decode_responses(&model, std::slice::from_ref(&history), mode, aux, &config)?.remove(0)
        }
    };
    println!("{}\t{:.6}", vocab.decode_text(&hyp.response())?, hyp.score);
    Ok(())
}
