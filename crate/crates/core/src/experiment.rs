//! End-to-end runs shared by the command line and the test suites:
//! vocabulary construction, training a variant from scratch, ablation grids.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, GroupScores};
use crate::model::{init_params, input_text, ModelConfig};
use crate::numerics::ParamStore;
use crate::tables::{build_question, Category, CategorySet, Instance, Strategy, Vocab};
use crate::trainer::{ci_accuracy, evaluate, examples, finetune, pretrain, EvalOptions, Session, TrainReport};

/// Vocabulary over every model input and reference in `corpora`, plus every
/// question wording, so any strategy/tag choice stays in-vocabulary.
pub fn corpus_vocab(corpora: &[&[Instance]]) -> Result<Vocab> {
    let mut texts = vec![
        build_question(Strategy::NoTags, CategorySet::descriptive()),
        build_question(Strategy::Tags, CategorySet::descriptive()),
        build_question(Strategy::Tags, CategorySet::new(Category::ANALYTICAL)?),
    ];
    for data in corpora {
        for inst in data.iter() {
            texts.push(input_text(inst, Strategy::ReTag, None)?);
            texts.push(inst.reference.clone());
        }
    }
    Ok(Vocab::build(&texts, 1))
}

/// Longest model input or target over `data` under any strategy.
pub fn longest_sequence(vocab: &Vocab, data: &[Instance]) -> Result<usize> {
    let mut longest = 0;
    for inst in data {
        let all = CategorySet::new(Category::ANALYTICAL)?;
        for tags in [inst.categories, all] {
            longest = longest.max(vocab.encode(&input_text(inst, Strategy::ReTag, Some(tags))?).len());
        }
        longest = longest.max(vocab.encode(&inst.reference).len());
    }
    Ok(longest)
}

/// A trained model with its training log.
pub struct Trained {
    pub model: ModelConfig,
    pub params: ParamStore,
    pub report: TrainReport,
}

/// Initializes from `run.train.seed`, optionally pretrains on `pre`
/// (two stages), then fine-tunes on `train`.
pub fn train_from_scratch(run: &RunConfig, vocab: &Vocab, pre: Option<&[Instance]>, train: &[Instance]) -> Result<Trained> {
    run.validate()?;
    let model = run.resolved_model(vocab.len());
    let mut params = init_params(&model, run.train.seed)?;
    let report = {
        let mut s = Session::new(&model, &mut params, &run.train)?;
        if let Some(pre) = pre {
            pretrain(&mut s, &examples(vocab, pre, run.train.strategy, model.max_len)?)?;
            s.reset_optimizer();
        }
        finetune(&mut s, &examples(vocab, train, run.train.strategy, model.max_len)?)?;
        s.report
    };
    Ok(Trained { model, params, report })
}

/// Ablation arm: strategy plus codebook layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    NoTags,
    Tags,
    ReTag2,
    ReTag6,
}

impl Variant {
    pub fn strategy(self) -> Strategy {
        match self {
            Variant::NoTags => Strategy::NoTags,
            Variant::Tags => Strategy::Tags,
            Variant::ReTag2 | Variant::ReTag6 => Strategy::ReTag,
        }
    }

    pub fn codebook_count(self) -> usize {
        if self == Variant::ReTag2 {
            2
        } else {
            6
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Variant>> {
        s.split(',').map(|v| v.trim().parse()).collect()
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "notags" => Ok(Variant::NoTags),
            "tags" => Ok(Variant::Tags),
            "retag2" => Ok(Variant::ReTag2),
            "retag6" | "retag" => Ok(Variant::ReTag6),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// One cell of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub variant: Variant,
    pub ci: bool,
    pub pretrain: bool,
    pub seed: u64,
    pub overall: Option<GroupScores>,
    /// Instances with two or more categories.
    pub multi_category: Option<GroupScores>,
    pub ci_accuracy: f64,
    /// Gold-tag report when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
    /// Same checkpoint with random analytical tags, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random_tags: Option<EvalReport>,
}

#[derive(Clone, Debug)]
pub struct ArmSpec {
    pub variant: Variant,
    pub ci: bool,
    pub pretrain: bool,
    pub seed: u64,
    /// Also evaluate with random tags (seeded by `seed`).
    pub random_tags: bool,
    /// Keep the gold-tag per-instance report in the result.
    pub keep_reports: bool,
}

/// Trains and evaluates one arm.
pub fn run_arm(
    base: &RunConfig,
    vocab: &Vocab,
    pre: &[Instance],
    train: &[Instance],
    test: &[Instance],
    arm: &ArmSpec,
) -> Result<ArmResult> {
    let mut run = base.clone();
    run.train.strategy = arm.variant.strategy();
    run.train.codebook_count = arm.variant.codebook_count();
    run.train.ci_enabled = arm.ci;
    run.train.seed = arm.seed;
    let trained = train_from_scratch(&run, vocab, arm.pretrain.then_some(pre), train)?;
    let opts = EvalOptions {
        strategy: run.train.strategy,
        beam: run.train.beam,
        max_gen_len: run.train.max_gen_len,
        random_tags: None,
        metric: run.metrics.clone(),
    };
    let eval = evaluate(&trained.model, &trained.params, vocab, test, &opts)?;
    let random = if arm.random_tags {
        let o = EvalOptions {
            random_tags: Some(arm.seed),
            ..opts.clone()
        };
        Some(evaluate(&trained.model, &trained.params, vocab, test, &o)?)
    } else {
        None
    };
    let ci_acc = ci_accuracy(&trained.model, &trained.params, vocab, test, run.train.strategy)?;
    Ok(ArmResult {
        variant: arm.variant,
        ci: arm.ci,
        pretrain: arm.pretrain,
        seed: arm.seed,
        overall: eval.aggregates.overall.clone(),
        multi_category: GroupScores::of(eval.records.iter().filter(|r| r.categories.len() >= 2)),
        ci_accuracy: ci_acc,
        eval: arm.keep_reports.then_some(eval),
        random_tags: random,
    })
}
