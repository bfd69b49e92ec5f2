use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use xtune_core::augment::{self, load_dictionary, BilingualDictionary, Resources, StrategyKind, StrategyParams};
use xtune_core::data::{self, LabelRule, SyntheticSpec, Task, TranslationStore};
use xtune_core::eval::{evaluate_languages, transfer_gap, Report};
use xtune_core::model::{ModelParams, Pooling};
use xtune_core::presets::{self, Benchmark, Setting};
use xtune_core::tokenizer::{build_vocab, UnigramVocab, VocabBuilder, DEFAULT_MARKER};
use xtune_core::trainer::{stream_rng, train, Mode, Stream, TrainConfig, TrainData};

#[derive(Parser)]
#[command(name = "xtune", version, about = "Two-stage consistency-regularized cross-lingual fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cipher benchmark (corpora, dictionaries, translations, vocabulary).
    Synth(SynthArgs),
    /// Learn a unigram vocabulary from a text file, one sentence per line.
    Vocab(VocabArgs),
    /// Segment text read from a file or stdin, one sentence per line.
    Tokenize(TokenizeArgs),
    /// Materialize an augmented corpus D ∪ A(D) as JSONL.
    Augment(AugmentArgs),
    /// Fine-tune (baseline, r1-only, r2-only or the full two-stage procedure).
    Train(TrainArgs),
    /// Score a checkpoint on per-language test sets.
    Eval(EvalArgs),
    /// Transfer gap from an eval report or from `lang=score` pairs.
    Gap(GapArgs),
    /// Published strategies and loss weights; all of them when no benchmark is given.
    Presets(PresetsArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    task: Task,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "train", default_value_t = 500)]
    train_examples: usize,
    #[arg(long = "test", default_value_t = 200)]
    test_examples: usize,
    #[arg(long, default_value_t = 40)]
    lemmas: usize,
    /// Comma-separated; the first is the source language.
    #[arg(long, value_delimiter = ',', default_value = "en,xa,xb")]
    languages: Vec<String>,
    /// plurality | even-parity (classification only).
    #[arg(long, default_value = "plurality", value_parser = parse_rule)]
    rule: LabelRule,
    #[arg(long)]
    n_labels: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    dictionary_coverage: f64,
    #[arg(long, default_value_t = 200)]
    vocab_size: usize,
}

#[derive(Args)]
struct VocabArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 200)]
    size: usize,
    #[arg(long, default_value_t = 8)]
    max_piece_len: usize,
    #[arg(long, default_value_t = 3)]
    em_iters: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TokenizeArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Defaults to stdin.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Draw segmentations instead of taking the most probable one.
    #[arg(long)]
    sample: bool,
    #[arg(long, default_value_t = xtune_core::tokenizer::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print piece ids instead of pieces.
    #[arg(long)]
    ids: bool,
}

#[derive(Args, Clone)]
struct Resources_ {
    #[arg(long)]
    vocab: PathBuf,
    /// Source language of the dictionaries.
    #[arg(long, default_value = "en")]
    source: String,
    /// Bilingual dictionary for one target language, `LANG=PATH`; repeatable.
    #[arg(long = "dict", value_parser = parse_pair)]
    dicts: Vec<(String, String)>,
    #[arg(long)]
    translations: Option<PathBuf>,
    /// Target languages requested from the translation store (default: all in the store).
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    task: Task,
    #[arg(long)]
    input: PathBuf,
    /// SS | GN | CS | MT | ID
    #[arg(long)]
    strategy: StrategyKind,
    #[command(flatten)]
    resources: Resources_,
    #[arg(long, default_value_t = StrategyParams::default().alpha)]
    alpha: f64,
    #[arg(long, default_value_t = StrategyParams::default().sigma)]
    sigma: f64,
    #[arg(long, default_value_t = StrategyParams::default().word_ratio)]
    word_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Task of the training corpus; implied by --preset when omitted.
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    train: PathBuf,
    #[command(flatten)]
    resources: Resources_,
    /// TOML file with any training configuration keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a benchmark's published strategies and loss weights.
    #[arg(long)]
    preset: Option<Benchmark>,
    #[arg(long)]
    setting: Option<Setting>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    a_star: Option<StrategyKind>,
    #[arg(long)]
    a: Option<StrategyKind>,
    #[arg(long)]
    a_prime: Option<StrategyKind>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pooling: Option<Pooling>,
    /// Also evaluate on `LANG=PATH` test sets and record metrics in the manifest.
    #[arg(long = "test", value_parser = parse_pair)]
    tests: Vec<(String, String)>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// `LANG=PATH`; repeatable.
    #[arg(long = "test", value_parser = parse_pair, required = true)]
    tests: Vec<(String, String)>,
    #[arg(long, default_value = "en")]
    source: String,
    /// Tag id excluded from positive counts in tag F1.
    #[arg(long)]
    ignore_tag: Option<usize>,
    /// Write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct GapArgs {
    /// Report written by `eval --json`.
    #[arg(long, conflicts_with = "scores")]
    report: Option<PathBuf>,
    /// `LANG=SCORE` pairs.
    #[arg(long = "score", value_parser = parse_pair)]
    scores: Vec<(String, String)>,
    #[arg(long, default_value = "en")]
    source: String,
}

#[derive(Args)]
struct PresetsArgs {
    benchmark: Option<Benchmark>,
    setting: Option<Setting>,
}

fn parse_pair(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    if k.is_empty() || v.is_empty() {
        return Err(format!("expected KEY=VALUE, got {s:?}"));
    }
    Ok((k.to_string(), v.to_string()))
}

fn parse_rule(s: &str) -> std::result::Result<LabelRule, String> {
    match s {
        "plurality" => Ok(LabelRule::Plurality),
        "even-parity" | "parity" => Ok(LabelRule::EvenParity),
        other => Err(format!("unknown rule {other:?}")),
    }
}

fn write(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_vocab(path: &Path) -> Result<UnigramVocab> {
    UnigramVocab::parse(&read(path)?, DEFAULT_MARKER).with_context(|| format!("vocabulary {}", path.display()))
}

fn load_corpus(path: &Path, task: Task) -> Result<data::Corpus> {
    let (corpus, warnings) = data::parse_jsonl(&read(path)?, task).with_context(|| format!("corpus {}", path.display()))?;
    for w in warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(corpus)
}

struct LoadedResources {
    vocab: UnigramVocab,
    dictionaries: Vec<BilingualDictionary>,
    store: TranslationStore,
    targets: Vec<String>,
}

impl LoadedResources {
    fn load(args: &Resources_) -> Result<Self> {
        let vocab = load_vocab(&args.vocab)?;
        let dictionaries = args
            .dicts
            .iter()
            .map(|(lang, path)| {
                load_dictionary(path, &args.source, lang).with_context(|| format!("dictionary {path}"))
            })
            .collect::<Result<Vec<_>>>()?;
        let store = match &args.translations {
            Some(p) => TranslationStore::parse(&read(p)?).with_context(|| format!("translations {}", p.display()))?,
            None => TranslationStore::default(),
        };
        let targets = if args.targets.is_empty() {
            let mut langs: Vec<String> = store.languages();
            for d in &dictionaries {
                if !langs.contains(&d.tgt_lang) {
                    langs.push(d.tgt_lang.clone());
                }
            }
            langs.sort();
            langs
        } else {
            args.targets.clone()
        };
        Ok(Self {
            vocab,
            dictionaries,
            store,
            targets,
        })
    }

    fn resources(&self) -> Resources<'_> {
        Resources {
            vocab: &self.vocab,
            dictionaries: &self.dictionaries,
            store: &self.store,
            targets: &self.targets,
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec {
        seed: a.seed,
        train_examples: a.train_examples,
        test_examples: a.test_examples,
        lemma_count: a.lemmas,
        languages: a.languages,
        rule: a.rule,
        dictionary_coverage: a.dictionary_coverage,
        ..SyntheticSpec::new(a.task)
    };
    if let Some(n) = a.n_labels {
        spec.n_labels = n;
    }
    let syn = data::generate_cipher_corpus(&spec, &mut stream_rng(a.seed, Stream::Synthesis))?;
    let out = &a.out;
    write(&out.join("train.jsonl"), &data::to_jsonl(&syn.train))?;
    for (lang, corpus) in &syn.test {
        write(&out.join(format!("test.{lang}.jsonl")), &data::to_jsonl(corpus))?;
    }
    for d in &syn.dictionaries {
        write(&out.join(format!("dict.{}-{}.txt", d.src_lang, d.tgt_lang)), &d.to_file_string())?;
    }
    write(&out.join("translations.jsonl"), &syn.translations.to_jsonl())?;
    let text: String = syn.unigram_corpus.iter().map(|l| format!("{l}\n")).collect();
    write(&out.join("unigram.txt"), &text)?;
    let (vocab, report) = build_vocab(&VocabBuilder::new(a.vocab_size, 8, 3), &syn.unigram_corpus)?;
    log::info!("vocabulary: {report:?}");
    write(&out.join("vocab.tsv"), &vocab.to_file_string())?;
    write(&out.join("synth.json"), &(serde_json::to_string_pretty(&spec)? + "\n"))?;
    println!(
        "wrote {} train examples, {} test languages, {} dictionaries, {} translations, {} vocabulary pieces to {}",
        syn.train.len(),
        syn.test.len(),
        syn.dictionaries.len(),
        syn.translations.len(),
        vocab.len(),
        out.display()
    );
    Ok(())
}

/// Every word occurrence prefixed with the word marker, as the vocabulary
/// builder expects.
fn marked_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| format!("{DEFAULT_MARKER}{}", w.trim_start_matches(DEFAULT_MARKER)))
        .filter(|w| w.chars().count() > 1)
        .collect()
}

fn vocab(a: VocabArgs) -> Result<()> {
    let lines = marked_words(&read(&a.corpus)?);
    if lines.is_empty() {
        bail!("{} contains no text", a.corpus.display());
    }
    let (vocab, report) = build_vocab(&VocabBuilder::new(a.size, a.max_piece_len, a.em_iters), &lines)?;
    log::info!("vocabulary: {report:?}");
    write(&a.out, &vocab.to_file_string())?;
    println!("wrote {} pieces to {}", vocab.len(), a.out.display());
    Ok(())
}

fn tokenize(a: TokenizeArgs) -> Result<()> {
    let vocab = load_vocab(&a.vocab)?;
    let input: Box<dyn BufRead> = match &a.input {
        Some(p) => Box::new(io::BufReader::new(fs::File::open(p).with_context(|| format!("opening {}", p.display()))?)),
        None => Box::new(io::stdin().lock()),
    };
    let mut rng = stream_rng(a.seed, Stream::Sampling);
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let words: Vec<&str> = line
            .split_whitespace()
            .map(|w| w.trim_start_matches(DEFAULT_MARKER))
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            writeln!(out)?;
            continue;
        }
        let seg = if a.sample {
            vocab.sample_words(&words, a.alpha, &mut rng)
        } else {
            vocab.segment_words(&words)
        }
        .with_context(|| format!("line {}", n + 1))?;
        let rendered: Vec<String> = if a.ids {
            seg.ids.iter().map(|i| i.to_string()).collect()
        } else {
            seg.ids.iter().map(|&i| vocab.piece(i).to_string()).collect()
        };
        writeln!(out, "{}", rendered.join(" "))?;
    }
    Ok(())
}

fn augment_cmd(a: AugmentArgs) -> Result<()> {
    let corpus = load_corpus(&a.input, a.task)?;
    let res = LoadedResources::load(&a.resources)?;
    let params = StrategyParams {
        alpha: a.alpha,
        sigma: a.sigma,
        word_ratio: a.word_ratio,
    };
    let mut rng = stream_rng(a.seed, Stream::Augmentation);
    let da = augment::build_augmented_corpus(&corpus, a.strategy, &params, &res.resources(), &mut rng)?;
    for w in &da.warnings {
        log::warn!("{w}");
    }
    write(&a.out, &data::to_jsonl(&da.to_corpus()))?;
    println!(
        "wrote {} examples ({} original, {} {} views) to {}",
        da.len(),
        da.originals.len(),
        da.augmented.len(),
        a.strategy,
        a.out.display()
    );
    Ok(())
}

/// Defaults, then the preset, then the config file, then flags.
fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    let base = match a.preset {
        Some(b) => TrainConfig::from_preset(b, a.setting.unwrap_or(Setting::CrossLingualTransfer)),
        None => TrainConfig::default(),
    };
    let mut cfg = match &a.config {
        Some(path) => {
            let file: toml::Table = toml::from_str(&read(path)?).with_context(|| format!("config {}", path.display()))?;
            let mut merged = toml::Table::try_from(&base)?;
            merged.extend(file);
            merged.try_into::<TrainConfig>().with_context(|| format!("config {}", path.display()))?
        }
        None => base,
    };
    macro_rules! apply {
        ($($field:ident),*) => {$(if let Some(v) = a.$field.clone() { cfg.$field = v; })*};
    }
    apply!(setting, mode, lambda1, lambda2, a_star, a, a_prime, lr, batch_size, epochs, seed, pooling);
    Ok(cfg)
}

fn load_tests(pairs: &[(String, String)], task: Task) -> Result<BTreeMap<String, data::Corpus>> {
    pairs
        .iter()
        .map(|(lang, path)| Ok((lang.clone(), load_corpus(Path::new(path), task)?)))
        .collect()
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let task = a
        .task
        .or(a.preset.map(Benchmark::task))
        .ok_or_else(|| anyhow!("--task is required unless --preset names a benchmark"))?;
    let cfg = resolve_config(&a)?;
    let corpus = load_corpus(&a.train, task)?;
    let res = LoadedResources::load(&a.resources)?;
    let data = TrainData {
        train: &corpus,
        vocab: &res.vocab,
        dictionaries: &res.dictionaries,
        store: &res.store,
        targets: &res.targets,
    };
    let mut out = train(data, &cfg)?;
    let tests = load_tests(&a.tests, task)?;
    let mut report = None;
    if !tests.is_empty() {
        let r = evaluate_languages(&out.model, &res.vocab, &tests, &a.resources.source, None)?;
        out.manifest.metrics = serde_json::from_str(&r.to_json())?;
        report = Some(r);
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("model.ckpt"), &out.model.to_checkpoint_string())?;
    if let Some(t) = &out.teacher {
        write(&a.out.join("teacher.ckpt"), &t.to_checkpoint_string())?;
    }
    write(&a.out.join("manifest.json"), &out.manifest.to_json())?;
    if let Some(r) = &report {
        write(&a.out.join("metrics.json"), &r.to_json())?;
    }
    for stage in &out.manifest.stages {
        let last = stage.steps.last().map(|s| s.total).unwrap_or(f64::NAN);
        println!("{}: {} items, {} steps, final loss {last:.6}", stage.name, stage.n_items, stage.steps.len());
    }
    if let Some(r) = report {
        print!("{}", r.to_table());
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let params = ModelParams::parse_checkpoint(&read(&a.checkpoint)?)
        .with_context(|| format!("checkpoint {}", a.checkpoint.display()))?;
    let vocab = load_vocab(&a.vocab)?;
    if vocab.len() != params.config.vocab_size {
        bail!("vocabulary has {} pieces but the checkpoint expects {}", vocab.len(), params.config.vocab_size);
    }
    let tests = load_tests(&a.tests, params.config.task)?;
    let report = evaluate_languages(&params, &vocab, &tests, &a.source, a.ignore_tag)?;
    print!("{}", report.to_table());
    if let Some(p) = &a.json {
        write(p, &report.to_json())?;
    }
    Ok(())
}

fn gap_cmd(a: GapArgs) -> Result<()> {
    let (scores, source) = match &a.report {
        Some(path) => {
            let r: Report = serde_json::from_str(&read(path)?).with_context(|| format!("report {}", path.display()))?;
            (r.languages.iter().map(|(l, s)| (l.clone(), s.score)).collect::<BTreeMap<_, _>>(), r.source)
        }
        None => {
            let scores = a
                .scores
                .iter()
                .map(|(l, v)| Ok((l.clone(), v.parse::<f64>().with_context(|| format!("score {v:?} for {l}"))?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            (scores, a.source.clone())
        }
    };
    let gap = transfer_gap(&scores, &source)?;
    println!("{}", serde_json::to_string(&serde_json::json!({ "source": source, "scores": scores, "gap": gap }))?);
    println!("gap {gap:+.6}");
    Ok(())
}

fn presets_cmd(a: PresetsArgs) -> Result<()> {
    match (a.benchmark, a.setting) {
        (None, _) => print!("{}", presets::render_tables()),
        (Some(b), Some(s)) => println!("{}", presets::render_row(b, s)),
        (Some(b), None) => {
            for s in Setting::ALL {
                println!("{s}: {}", presets::render_row(b, s));
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Vocab(a) => vocab(a),
        Command::Tokenize(a) => tokenize(a),
        Command::Augment(a) => augment_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gap(a) => gap_cmd(a),
        Command::Presets(a) => presets_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
