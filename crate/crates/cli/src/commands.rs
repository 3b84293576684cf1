use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use retag::checkpoint::Checkpoint;
use retag::config::RunConfig;
use retag::corpus::{classify_heuristic, heuristic_table_text, split, synth_generate, HeuristicStyle, HeuristicVerdict};
use retag::experiment::{corpus_vocab, longest_sequence, run_arm, ArmResult, ArmSpec, Variant};
use retag::metrics::EvalReport;
use retag::model::{beam_search, input_text};
use retag::tables::{build_question, read_jsonl, write_jsonl, CategorySet, Instance, Strategy, Vocab};
use retag::trainer::{ci_accuracy, evaluate, examples, finetune, pretrain, EvalOptions, Session, TrainReport};
use retag::verify::gradcheck_suite;
use retag::{Error, Result};

#[derive(Parser)]
#[command(name = "retag", version, about = "Reasoning-aware table-to-text generation")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus synthesis, filtering and splitting.
    #[command(subcommand)]
    Data(DataCommand),
    /// Two-stage codebook pretraining from random initialization.
    Pretrain(TrainArgs),
    /// Fine-tuning, optionally from a pretrained checkpoint.
    Train(TrainArgs),
    /// Generate sentences for a JSONL file of instances.
    Generate(GenerateArgs),
    /// Generate and score against gold references.
    Eval(EvalArgs),
    /// Train and evaluate a grid of variants.
    Ablate(AblateArgs),
    /// Finite-difference check of every op and a tiny end-to-end model.
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    Filter {
        #[arg(long, value_enum)]
        style: StyleArg,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Split {
        /// Train, valid, test fractions.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        fractions: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        /// Writes `<prefix>train.jsonl`, `<prefix>valid.jsonl`, `<prefix>test.jsonl`.
        #[arg(long)]
        out_prefix: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Totto,
    Infotabs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Starting checkpoint (its vocabulary and model config are kept).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss log (JSONL).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    codebooks: Option<usize>,
    #[arg(long, value_enum)]
    ci: Option<OnOff>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    strategy: Option<String>,
    /// Comma-separated tags applied to every instance (gold tags otherwise).
    #[arg(long)]
    tags: Option<String>,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    random_tags: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "notags,tags,retag2,retag6")]
    variants: String,
    /// Comma-separated subset of on,off.
    #[arg(long, default_value = "on")]
    ci: String,
    /// Comma-separated subset of on,off.
    #[arg(long, default_value = "on")]
    pretrain: String,
    /// Training corpus.
    #[arg(long)]
    data: PathBuf,
    /// Held-out corpus.
    #[arg(long)]
    test: PathBuf,
    /// Pretraining corpus (defaults to the training corpus).
    #[arg(long)]
    pretrain_data: Option<PathBuf>,
    #[arg(long, default_value = "0")]
    seeds: String,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Full report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Data(d) => data(d),
        Command::Pretrain(a) => train_cmd(a, true),
        Command::Train(a) => train_cmd(a, false),
        Command::Generate(a) => generate_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn read_data(path: &Path) -> Result<Vec<Instance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    read_jsonl(&text)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text)
        }
        None => Ok(RunConfig::default()),
    }
}

fn on_off_list(s: &str) -> Result<Vec<bool>> {
    s.split(',')
        .map(|v| match v.trim() {
            "on" => Ok(true),
            "off" => Ok(false),
            other => Err(Error::Config(format!("expected on/off, got `{other}`"))),
        })
        .collect()
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("bad {what} `{v}`"))))
        .collect()
}

fn data(cmd: DataCommand) -> Result<()> {
    match cmd {
        DataCommand::Synth { config, n, seed, out } => {
            let mut spec = load_config(config.as_deref())?.data;
            if let Some(s) = seed {
                spec.seed = s;
            }
            fs::write(out, write_jsonl(&synth_generate(&spec, n)?))?;
        }
        DataCommand::Filter { style, input, out } => {
            let style = match style {
                StyleArg::Totto => HeuristicStyle::Totto,
                StyleArg::Infotabs => HeuristicStyle::Infotabs,
            };
            #[derive(Serialize)]
            struct Line<'a> {
                id: &'a str,
                #[serde(flatten)]
                verdict: HeuristicVerdict,
            }
            let mut text = String::new();
            for inst in read_data(&input)? {
                let verdict = classify_heuristic(&inst.reference, &heuristic_table_text(&inst), style);
                text += &serde_json::to_string(&Line { id: inst.id(), verdict })?;
                text.push('\n');
            }
            fs::write(out, text)?;
        }
        DataCommand::Split {
            fractions,
            seed,
            input,
            out_prefix,
        } => {
            let f: Vec<f64> = parse_list(&fractions, "fraction")?;
            if f.len() != 3 {
                return Err(Error::Config("--fractions needs three values".into()));
            }
            let (train, valid, test) = split(read_data(&input)?, (f[0], f[1], f[2]), seed)?;
            for (name, part) in [("train", train), ("valid", valid), ("test", test)] {
                let mut path = out_prefix.clone().into_os_string();
                path.push(format!("{name}.jsonl"));
                fs::write(PathBuf::from(path), write_jsonl(&part))?;
            }
        }
    }
    Ok(())
}

fn apply_train_flags(run: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        run.train.lr = lr;
    }
    if let Some(s) = &a.strategy {
        run.train.strategy = s.parse()?;
    }
    if let Some(c) = a.codebooks {
        run.train.codebook_count = c;
    }
    if let Some(ci) = a.ci {
        run.train.ci_enabled = ci == OnOff::On;
    }
    run.validate()
}

fn write_report(path: Option<&Path>, report: &TrainReport) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, report.to_jsonl())?;
    }
    Ok(())
}

fn train_cmd(a: TrainArgs, pretraining: bool) -> Result<()> {
    let mut run = load_config(a.config.as_deref())?;
    apply_train_flags(&mut run, &a)?;
    let data = read_data(&a.data)?;
    let (vocab, model, mut params) = match &a.init {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.model.strategy != run.train.strategy || ck.model.codebook_count != run.train.codebook_count {
                return Err(Error::Config(format!(
                    "checkpoint was built for {:?} with {} codebooks; config asks for {:?} with {}",
                    ck.model.strategy, ck.model.codebook_count, run.train.strategy, run.train.codebook_count
                )));
            }
            (ck.vocab, ck.model, ck.params)
        }
        None => {
            let vocab = corpus_vocab(&[&data])?;
            let mut model = run.resolved_model(vocab.len());
            let longest = longest_sequence(&vocab, &data)?;
            if longest > model.max_len {
                return Err(Error::Length {
                    len: longest,
                    max_len: model.max_len,
                });
            }
            model.vocab_size = vocab.len();
            let params = retag::model::init_params(&model, run.train.seed)?;
            (vocab, model, params)
        }
    };
    let report = {
        let mut s = Session::new(&model, &mut params, &run.train)?;
        let ex = examples(&vocab, &data, run.train.strategy, model.max_len)?;
        if pretraining {
            pretrain(&mut s, &ex)?;
        } else {
            finetune(&mut s, &ex)?;
        }
        s.report
    };
    let ck = Checkpoint {
        model,
        train_digest: run.train.digest(),
        vocab,
        params,
    };
    ck.save(&a.out)?;
    let mut report = report;
    report.checkpoint = Some(a.out.display().to_string());
    write_report(a.report.as_deref(), &report)?;
    let last = report.steps.last();
    eprintln!(
        "{} steps in {:.1}s; final loss {}",
        report.steps.len(),
        report.wall_time_s,
        last.map_or("n/a".into(), |s| format!("{:.4}", s.total))
    );
    Ok(())
}

fn strategy_or(ck: &Checkpoint, s: Option<&str>) -> Result<Strategy> {
    match s {
        Some(s) => {
            let st: Strategy = s.parse()?;
            if (st == Strategy::ReTag) != (ck.model.strategy == Strategy::ReTag) {
                return Err(Error::Config(format!(
                    "strategy {st:?} is incompatible with a checkpoint trained for {:?}",
                    ck.model.strategy
                )));
            }
            Ok(st)
        }
        None => Ok(ck.model.strategy),
    }
}

fn generate_cmd(a: GenerateArgs) -> Result<()> {
    let tags = a.tags.as_deref().map(CategorySet::parse_list).transpose()?;
    if a.beam == 0 {
        return Err(Error::Config("--beam must be at least 1".into()));
    }
    let ck = Checkpoint::load(&a.ckpt)?;
    let strategy = strategy_or(&ck, a.strategy.as_deref())?;
    let data = read_data(&a.input)?;
    #[derive(Serialize)]
    struct Line {
        id: String,
        tags: CategorySet,
        question: String,
        text: String,
        log_prob: f64,
    }
    use rayon::prelude::*;
    let lines: Vec<Line> = data
        .par_iter()
        .map(|inst| {
            let t = tags.unwrap_or(inst.categories);
            let ids = ck.vocab.encode(&input_text(inst, strategy, Some(t))?);
            let hyp = beam_search(&ck.model, &ck.params, &ids, strategy, t, a.beam, a.max_len)?;
            Ok(Line {
                id: inst.id().to_string(),
                tags: t,
                question: build_question(strategy, t),
                text: ck.vocab.decode(&hyp.ids)?,
                log_prob: hyp.log_prob,
            })
        })
        .collect::<Result<_>>()?;
    let mut out = String::new();
    for l in &lines {
        out += &serde_json::to_string(l)?;
        out.push('\n');
    }
    fs::write(a.out, out)?;
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    metadata: EvalMetadata,
    #[serde(flatten)]
    report: EvalReport,
}

#[derive(Serialize)]
struct EvalMetadata {
    strategy: Strategy,
    beam: usize,
    random_tags_seed: Option<u64>,
    ci_accuracy: f64,
    train_digest: String,
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let run = load_config(a.config.as_deref())?;
    let ck = Checkpoint::load(&a.ckpt)?;
    let strategy = strategy_or(&ck, a.strategy.as_deref())?;
    let data = read_data(&a.data)?;
    let opts = EvalOptions {
        strategy,
        beam: a.beam,
        max_gen_len: a.max_len,
        random_tags: a.random_tags.then_some(a.seed),
        metric: run.metrics,
    };
    let report = evaluate(&ck.model, &ck.params, &ck.vocab, &data, &opts)?;
    let out = EvalOutput {
        metadata: EvalMetadata {
            strategy,
            beam: a.beam,
            random_tags_seed: opts.random_tags,
            ci_accuracy: ci_accuracy(&ck.model, &ck.params, &ck.vocab, &data, strategy)?,
            train_digest: ck.train_digest.clone(),
        },
        report,
    };
    write_json(&a.report, &out)?;
    if let Some(o) = &out.report.aggregates.overall {
        eprintln!(
            "bleu1 {:.2} bleu4 {:.2} rougeL {:.4} parent {:.4}",
            o.bleu1, o.bleu4, o.rouge_l, o.parent
        );
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let run = load_config(a.config.as_deref())?;
    let variants = Variant::parse_list(&a.variants)?;
    let cis = on_off_list(&a.ci)?;
    let pres = on_off_list(&a.pretrain)?;
    let seeds: Vec<u64> = parse_list(&a.seeds, "seed")?;
    let train = read_data(&a.data)?;
    let test = read_data(&a.test)?;
    let pre = match &a.pretrain_data {
        Some(p) => read_data(p)?,
        None => train.clone(),
    };
    let vocab: Vocab = corpus_vocab(&[&pre, &train, &test])?;
    let mut results: Vec<ArmResult> = Vec::new();
    for &variant in &variants {
        for &ci in &cis {
            for &pretrain in &pres {
                for &seed in &seeds {
                    let arm = ArmSpec {
                        variant,
                        ci,
                        pretrain,
                        seed,
                        random_tags: false,
                        keep_reports: false,
                    };
                    let r = run_arm(&run, &vocab, &pre, &train, &test, &arm)?;
                    eprintln!(
                        "{variant:?} ci={ci} pretrain={pretrain} seed={seed}: bleu1 {:.2}",
                        r.overall.as_ref().map_or(0.0, |o| o.bleu1)
                    );
                    results.push(r);
                }
            }
        }
    }
    write_json(&a.report, &results)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let report = gradcheck_suite(a.tol)?;
    for c in &report.cases {
        println!(
            "{:<20} {} max_rel_err {:.3e}",
            c.name,
            if c.report.passed { "ok  " } else { "FAIL" },
            c.report.max_rel_err()
        );
    }
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "gradient check failed: max relative error {:.3e} > {:.1e}",
            report.max_rel_err, a.tol
        )))
    }
}
