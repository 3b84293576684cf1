//! Loss assembly, two-stage codebook pretraining, fine-tuning and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{EvalReport, InstanceRecord, MetricConfig};
use crate::model::{beam_search, Example, ForwardOptions, ForwardOutput, ModelConfig, Net, ParamGroup};
use crate::numerics::{adamw_step, clip_global_norm, AdamWConfig, Graph, OptimState, ParamStore, SeedStreams, Tensor, Var};
use crate::tables::{Category, CategorySet, Instance, Kind, Strategy, Vocab, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Commitment weight.
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub strategy: Strategy,
    pub codebook_count: usize,
    pub ci_enabled: bool,
    /// Also apply the CI term when no codebooks are active.
    pub ci_on_baselines: bool,
    pub clip_norm: f64,
    /// Beam width and generated-token cap used by evaluation.
    pub beam: usize,
    pub max_gen_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            beta: 0.25,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            stage1_steps: 500,
            stage2_steps: 1500,
            strategy: Strategy::ReTag,
            codebook_count: 6,
            ci_enabled: true,
            ci_on_baselines: false,
            clip_norm: 1.0,
            beam: 10,
            max_gen_len: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adamw().validate()?;
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm {} must be positive", self.clip_norm)));
        }
        if self.codebook_count != 2 && self.codebook_count != 6 {
            return Err(Error::Config(format!("codebook_count {} not in {{2, 6}}", self.codebook_count)));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Whether the CI term contributes under this configuration.
    pub fn ci_active(&self) -> bool {
        self.ci_enabled && (self.strategy == Strategy::ReTag || self.ci_on_baselines)
    }

    /// Stable FNV-1a digest of the serialized config.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("serializable config");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// Graph handles of the four loss terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub generative: Var,
    pub ci: Var,
    pub codebook: Var,
    pub commitment: Var,
}

/// `CE_gen + [ci]·CE_ci + codebook + commitment`. The commitment term in
/// `fwd` already carries β. Padding targets are ignored.
pub fn total_loss(g: &mut Graph, fwd: &ForwardOutput, targets: &[usize], kind: Kind, ci: bool) -> Result<LossTerms> {
    let generative = match fwd.logits {
        Some(l) => g.cross_entropy(l, targets, PAD)?,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let ci_term = if ci {
        g.cross_entropy(fwd.ci_logits, &[kind as usize], usize::MAX)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let t = g.add(generative, ci_term)?;
    let t = g.add(t, fwd.codebook_loss)?;
    let total = g.add(t, fwd.commitment_loss)?;
    Ok(LossTerms {
        total,
        generative,
        ci: ci_term,
        codebook: fwd.codebook_loss,
        commitment: fwd.commitment_loss,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Codebook + commitment only.
    Stage1,
    /// Generative + codebook + commitment.
    Stage2,
    Finetune,
}

impl Stage {
    /// Parameters a stage updates.
    pub fn trains(self, group: ParamGroup, cfg: &TrainConfig) -> bool {
        let retag = cfg.strategy == Strategy::ReTag;
        match (self, group) {
            (_, ParamGroup::Classifier) => self == Stage::Finetune && cfg.ci_active(),
            (_, ParamGroup::Codebook | ParamGroup::WeightHead) => retag,
            (Stage::Stage1, ParamGroup::Decoder) => false,
            _ => true,
        }
    }
}

/// One logged optimizer step; `total` is the sum of the four components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: usize,
    pub total: f64,
    pub generative: f64,
    pub ci: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub wall_time_s: f64,
    pub steps: Vec<StepRecord>,
    /// Where the resulting parameters were written, when they were.
    pub checkpoint: Option<String>,
}

impl TrainReport {
    fn new(seed: u64) -> Self {
        TrainReport {
            seed,
            wall_time_s: 0.0,
            steps: Vec::new(),
            checkpoint: None,
        }
    }

    pub fn to_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("serializable record") + "\n")
            .collect()
    }
}

struct Sample {
    grads: ParamStore,
    parts: [f64; 4],
}

fn example_grads(
    model: &ModelConfig,
    params: &ParamStore,
    ex: &Example,
    stage: Stage,
    cfg: &TrainConfig,
    dropout_seed: Option<(u64, u64)>,
) -> Result<Sample> {
    let mut g = Graph::new();
    let net = Net::bind(&mut g, model, params);
    let mut rng = dropout_seed.map(|(s, i)| SeedStreams::new(s).substream("dropout", i));
    let opts = ForwardOptions {
        run_decoder: stage != Stage::Stage1,
        dropout_rng: rng.as_mut(),
    };
    let fwd = net.forward(&mut g, ex, cfg.strategy, cfg.beta, opts)?;
    let ci = stage == Stage::Finetune && cfg.ci_active();
    let terms = total_loss(&mut g, &fwd, &ex.target_out, ex.kind, ci)?;
    let parts = [
        g.value(terms.generative).item(),
        g.value(terms.ci).item(),
        g.value(terms.codebook).item(),
        g.value(terms.commitment).item(),
    ];
    if parts.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss terms {parts:?}")));
    }
    let mut grads = g.backward(terms.total)?;
    Ok(Sample {
        grads: net.params().gradients(&mut grads),
        parts,
    })
}

/// Mean gradients and loss components over a batch.
pub fn batch_gradients(
    model: &ModelConfig,
    params: &ParamStore,
    batch: &[&Example],
    stage: Stage,
    cfg: &TrainConfig,
    step_id: u64,
) -> Result<(ParamStore, [f64; 4])> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let dropout = model.dropout > 0.0;
    let samples: Vec<Sample> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let seed = dropout.then_some((cfg.seed, step_id * batch.len() as u64 + i as u64));
            example_grads(model, params, ex, stage, cfg, seed)
        })
        .collect::<Result<_>>()?;
    let w = 1.0 / batch.len() as f64;
    let mut sum = params.zeros_like();
    let mut parts = [0.0; 4];
    for s in &samples {
        sum.axpy(w, &s.grads)?;
        for (p, v) in parts.iter_mut().zip(s.parts) {
            *p += w * v;
        }
    }
    Ok((sum, parts))
}

/// Mutable optimization state threaded through the stages.
pub struct Session<'a> {
    pub model: &'a ModelConfig,
    pub params: &'a mut ParamStore,
    pub cfg: &'a TrainConfig,
    pub report: TrainReport,
    opt: OptimState,
    step: u64,
}

impl<'a> Session<'a> {
    pub fn new(model: &'a ModelConfig, params: &'a mut ParamStore, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        crate::model::check_params(model, params)?;
        Ok(Session {
            model,
            params,
            cfg,
            report: TrainReport::new(cfg.seed),
            opt: OptimState::default(),
            step: 0,
        })
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &[&Example], stage: Stage) -> Result<StepRecord> {
        let (mut grads, parts) = batch_gradients(self.model, self.params, batch, stage, self.cfg, self.step)?;
        let cfg = self.cfg;
        let trainable = |name: &str| stage.trains(ParamGroup::of(name), cfg);
        for (name, t) in grads.iter_mut() {
            if !trainable(name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at step {}", self.step)));
        }
        adamw_step(self.params, &grads, &mut self.opt, &cfg.adamw(), Some(&trainable))?;
        self.step += 1;
        let rec = StepRecord {
            stage,
            step: self.step as usize,
            total: parts.iter().sum(),
            generative: parts[0],
            ci: parts[1],
            codebook: parts[2],
            commitment: parts[3],
            grad_norm,
        };
        self.report.steps.push(rec.clone());
        Ok(rec)
    }

    /// Fresh optimizer moments (used between pretraining and fine-tuning).
    pub fn reset_optimizer(&mut self) {
        self.opt = OptimState::default();
    }
}

/// Tokenizes a corpus under `strategy` with gold tags.
pub fn examples(vocab: &Vocab, data: &[Instance], strategy: Strategy, max_len: usize) -> Result<Vec<Example>> {
    data.iter()
        .map(|i| {
            let ex = Example::new(vocab, i, strategy, None)?;
            let longest = ex.input_ids.len().max(ex.target_in.len());
            if longest > max_len {
                return Err(Error::Length { len: longest, max_len });
            }
            Ok(ex)
        })
        .collect()
}

/// Batches of a shuffled corpus, cycled across epochs until `steps` batches exist.
fn cyclic_batches(n: usize, batch: usize, steps: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(steps);
    let mut order: Vec<usize> = Vec::new();
    while out.len() < steps {
        if order.len() < batch.min(n) {
            let mut fresh: Vec<usize> = (0..n).collect();
            fresh.shuffle(rng);
            order.extend(fresh);
        }
        let take = batch.min(n);
        out.push(order.drain(..take).collect());
    }
    out
}

/// One epoch of batches where each batch holds at least one example of
/// each kind whenever both kinds have at least as many members as there
/// are batches.
pub fn stratified_batches(kinds: &[Kind], batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut an: Vec<usize> = (0..kinds.len()).filter(|&i| kinds[i] == Kind::Analytical).collect();
    let mut de: Vec<usize> = (0..kinds.len()).filter(|&i| kinds[i] == Kind::Descriptive).collect();
    an.shuffle(rng);
    de.shuffle(rng);
    let n = kinds.len();
    if n == 0 {
        return Vec::new();
    }
    let nb = n.div_ceil(batch);
    let cut = |len: usize, b: usize| (b * len) / nb;
    let mut out = Vec::with_capacity(nb);
    for b in 0..nb {
        let mut v: Vec<usize> = an[cut(an.len(), b)..cut(an.len(), b + 1)].to_vec();
        v.extend(&de[cut(de.len(), b)..cut(de.len(), b + 1)]);
        v.shuffle(rng);
        out.push(v);
    }
    out
}

/// Two-stage codebook pretraining. The CI term is never used.
pub fn pretrain(session: &mut Session<'_>, data: &[Example]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    let t0 = Instant::now();
    let mut rng = SeedStreams::new(session.cfg.seed).stream("pretrain-batches");
    let cfg = session.cfg;
    for (stage, steps) in [(Stage::Stage1, cfg.stage1_steps), (Stage::Stage2, cfg.stage2_steps)] {
        if stage == Stage::Stage1 && cfg.strategy != Strategy::ReTag {
            continue;
        }
        for idx in cyclic_batches(data.len(), cfg.batch_size, steps, &mut rng) {
            let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
            session.step(&batch, stage)?;
        }
    }
    session.report.wall_time_s += t0.elapsed().as_secs_f64();
    Ok(())
}

/// Fine-tuning for `cfg.epochs` epochs of kind-stratified batches.
/// A single-kind corpus falls back to plain shuffled batches.
pub fn finetune(session: &mut Session<'_>, data: &[Example]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("empty training corpus".into()));
    }
    let t0 = Instant::now();
    let cfg = session.cfg;
    let mut rng = SeedStreams::new(cfg.seed).stream("finetune-batches");
    let kinds: Vec<Kind> = data.iter().map(|e| e.kind).collect();
    for _ in 0..cfg.epochs {
        let batches = stratified_batches(&kinds, cfg.batch_size, &mut rng);
        for idx in batches {
            let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
            session.step(&batch, Stage::Finetune)?;
        }
    }
    session.report.wall_time_s += t0.elapsed().as_secs_f64();
    Ok(())
}

/// A uniformly random non-empty subset of the analytical categories.
pub fn random_analytical_tags(rng: &mut impl Rng) -> CategorySet {
    let bits: u8 = rng.random_range(1..32);
    CategorySet::new(
        Category::ANALYTICAL
            .iter()
            .enumerate()
            .filter(|(i, _)| bits & (1 << i) != 0)
            .map(|(_, c)| *c),
    )
    .expect("analytical subset is valid")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub strategy: Strategy,
    pub beam: usize,
    pub max_gen_len: usize,
    /// Replace analytical tags by random ones drawn from this seed.
    pub random_tags: Option<u64>,
    pub metric: MetricConfig,
}

/// Tags actually fed to the model for instance `i`.
pub fn eval_tags(inst: &Instance, i: usize, random_tags: Option<u64>) -> CategorySet {
    match random_tags {
        Some(seed) if inst.kind() == Kind::Analytical => {
            random_analytical_tags(&mut SeedStreams::new(seed).substream("random-tags", i as u64))
        }
        _ => inst.categories,
    }
}

/// Generates every instance and scores it against its gold reference;
/// records and groups use the gold categories.
pub fn evaluate(
    model: &ModelConfig,
    params: &ParamStore,
    vocab: &Vocab,
    data: &[Instance],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    opts.metric.validate()?;
    let records: Vec<InstanceRecord> = data
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let tags = eval_tags(inst, i, opts.random_tags);
            let ex = Example::new(vocab, inst, opts.strategy, Some(tags))?;
            let hyp = beam_search(model, params, &ex.input_ids, opts.strategy, tags, opts.beam, opts.max_gen_len)?;
            let text = vocab.decode(&hyp.ids)?;
            InstanceRecord::score(
                inst.id(),
                &text,
                &inst.reference,
                &inst.table,
                &inst.highlights,
                inst.categories,
                &opts.metric,
            )
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport::new(records))
}

/// Fraction of instances whose CI prediction matches their kind.
pub fn ci_accuracy(model: &ModelConfig, params: &ParamStore, vocab: &Vocab, data: &[Instance], strategy: Strategy) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation corpus".into()));
    }
    let hits: Vec<bool> = data
        .par_iter()
        .map(|inst| {
            let ex = Example::new(vocab, inst, strategy, None)?;
            let mut g = Graph::new();
            let net = Net::bind_frozen(&mut g, model, params);
            let pad = vec![false; ex.input_ids.len()];
            let out = net.encode_bridge(&mut g, &ex.input_ids, &pad, ex.categories, strategy, 0.0, &mut None)?;
            let l = g.value(out.ci_logits).data();
            let pred = if l[1] > l[0] { Kind::Analytical } else { Kind::Descriptive };
            Ok(pred == inst.kind())
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_generate, GeneratorSpec};
    use crate::model::{init_params, input_text};

    fn setup(strategy: Strategy, n: usize) -> (ModelConfig, ParamStore, Vocab, Vec<Instance>, TrainConfig) {
        let data = synth_generate(&GeneratorSpec::default(), n).unwrap();
        let texts: Vec<String> = data
            .iter()
            .flat_map(|i| [input_text(i, Strategy::ReTag, None).unwrap(), i.reference.clone()])
            .collect();
        let vocab = Vocab::build(&texts, 1);
        let model = ModelConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            ffn: 12,
            vocab_size: vocab.len(),
            max_len: 160,
            codebook_size: 4,
            strategy,
            ..ModelConfig::default()
        };
        let params = init_params(&model, 5).unwrap();
        let cfg = TrainConfig {
            strategy,
            batch_size: 4,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        (model, params, vocab, data, cfg)
    }

    #[test]
    fn stage_groups() {
        let cfg = TrainConfig::default();
        assert!(!Stage::Stage1.trains(ParamGroup::Decoder, &cfg));
        assert!(!Stage::Stage2.trains(ParamGroup::Classifier, &cfg));
        assert!(Stage::Finetune.trains(ParamGroup::Classifier, &cfg));
        let tags = TrainConfig {
            strategy: Strategy::Tags,
            ..cfg
        };
        assert!(!Stage::Finetune.trains(ParamGroup::Codebook, &tags));
        assert!(!Stage::Finetune.trains(ParamGroup::Classifier, &tags));
    }

    #[test]
    fn ce_of_uniform_two_way_is_ln2() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(&[vec![0.3, 0.3], vec![-1.0, -1.0]]).unwrap());
        let ci = g.constant(Tensor::matrix(&[vec![0.0, 0.0]]).unwrap());
        let zero = g.constant(Tensor::scalar(0.0));
        let fwd = ForwardOutput {
            logits: Some(logits),
            ci_logits: ci,
            codebook_loss: zero,
            commitment_loss: zero,
            weights: None,
            enc: zero,
            fused: zero,
            indices: Vec::new(),
        };
        let t = total_loss(&mut g, &fwd, &[1, 0], Kind::Analytical, false).unwrap();
        assert!((g.value(t.generative).item() - 2f64.ln()).abs() < 1e-12);
        let t = total_loss(&mut g, &fwd, &[1, 0], Kind::Analytical, true).unwrap();
        assert!((g.value(t.total).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn logged_total_is_sum_of_parts_and_runs_are_deterministic() {
        let run = || {
            let (model, mut params, vocab, data, cfg) = setup(Strategy::ReTag, 12);
            let cfg = TrainConfig { epochs: 2, ..cfg };
            let ex = examples(&vocab, &data, Strategy::ReTag, model.max_len).unwrap();
            let mut s = Session::new(&model, &mut params, &cfg).unwrap();
            finetune(&mut s, &ex).unwrap();
            s.report.steps
        };
        let a = run();
        for r in &a {
            let sum = r.generative + r.ci + r.codebook + r.commitment;
            assert!((r.total - sum).abs() < 1e-12);
            assert!(r.total >= 0.0);
        }
        assert_eq!(a, run());
    }

    #[test]
    fn stratified_batches_mix_kinds() {
        let kinds: Vec<Kind> = (0..40)
            .map(|i| if i % 3 == 0 { Kind::Descriptive } else { Kind::Analytical })
            .collect();
        let mut rng = SeedStreams::new(1).stream("t");
        let batches = stratified_batches(&kinds, 4, &mut rng);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
        for b in &batches {
            assert!(b.iter().any(|&i| kinds[i] == Kind::Analytical));
            assert!(b.iter().any(|&i| kinds[i] == Kind::Descriptive));
        }
    }

    #[test]
    fn random_tags_are_analytical_and_seeded() {
        let mut rng = SeedStreams::new(3).stream("t");
        for _ in 0..200 {
            let t = random_analytical_tags(&mut rng);
            assert!(!t.is_empty() && !t.contains(Category::Descriptive));
        }
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let (_, _, _, data, _) = setup(Strategy::ReTag, 20);
        let records: Vec<InstanceRecord> = data
            .iter()
            .map(|i| {
                InstanceRecord::score(
                    i.id(),
                    &i.reference,
                    &i.reference,
                    &i.table,
                    &i.highlights,
                    i.categories,
                    &MetricConfig::default(),
                )
                .unwrap()
            })
            .collect();
        let rep = EvalReport::new(records);
        let overall = rep.aggregates.overall.as_ref().unwrap();
        assert!((overall.bleu4 - 100.0).abs() < 1e-9);
        let a = rep.aggregates.analytical.as_ref().map_or(0, |g| g.count);
        let d = rep.aggregates.descriptive.as_ref().map_or(0, |g| g.count);
        assert_eq!(overall.count, a + d);
    }
}
