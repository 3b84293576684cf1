use retag::config::RunConfig;
use retag::corpus::{synth_generate, GeneratorSpec};
use retag::experiment::{corpus_vocab, train_from_scratch};
use retag::model::{init_params, Example, ModelConfig, ParamGroup};
use retag::numerics::ParamStore;
use retag::tables::{Strategy, Vocab};
use retag::trainer::{batch_gradients, examples, pretrain, Session, Stage, TrainConfig};

fn setup(strategy: Strategy) -> (ModelConfig, ParamStore, Vec<Example>, TrainConfig) {
    let data = synth_generate(&GeneratorSpec::default(), 24).unwrap();
    let vocab: Vocab = corpus_vocab(&[&data]).unwrap();
    let model = ModelConfig {
        layers: 1,
        heads: 2,
        hidden: 16,
        ffn: 32,
        vocab_size: vocab.len(),
        max_len: 160,
        codebook_size: 8,
        strategy,
        ..ModelConfig::default()
    };
    let params = init_params(&model, 8).unwrap();
    let cfg = TrainConfig {
        strategy,
        lr: 5e-3,
        batch_size: 8,
        stage1_steps: 6,
        stage2_steps: 6,
        ..TrainConfig::default()
    };
    let ex = examples(&vocab, &data, strategy, model.max_len).unwrap();
    (model, params, ex, cfg)
}

fn group_norm(grads: &ParamStore, group: ParamGroup) -> f64 {
    grads
        .iter()
        .filter(|(n, _)| ParamGroup::of(n) == group)
        .map(|(_, t)| t.sq_norm())
        .sum()
}

fn group_equal(a: &ParamStore, b: &ParamStore, group: ParamGroup) -> bool {
    a.iter()
        .filter(|(n, _)| ParamGroup::of(n) == group)
        .all(|(n, t)| b.get(n).unwrap() == t)
}

#[test]
fn stage_gradients_follow_the_loss_terms() {
    let (model, params, ex, cfg) = setup(Strategy::ReTag);
    let batch: Vec<&Example> = ex.iter().take(8).collect();

    let (g1, parts) = batch_gradients(&model, &params, &batch, Stage::Stage1, &cfg, 0).unwrap();
    assert_eq!(parts[0], 0.0);
    assert_eq!(parts[1], 0.0);
    assert_eq!(group_norm(&g1, ParamGroup::Decoder), 0.0);
    assert_eq!(group_norm(&g1, ParamGroup::Classifier), 0.0);
    assert!(group_norm(&g1, ParamGroup::Codebook) > 0.0);
    assert!(group_norm(&g1, ParamGroup::Encoder) > 0.0);

    let (g2, parts) = batch_gradients(&model, &params, &batch, Stage::Stage2, &cfg, 0).unwrap();
    assert_eq!(parts[1], 0.0);
    assert_eq!(group_norm(&g2, ParamGroup::Classifier), 0.0);
    assert!(group_norm(&g2, ParamGroup::Decoder) > 0.0);

    let (gf, parts) = batch_gradients(&model, &params, &batch, Stage::Finetune, &cfg, 0).unwrap();
    assert!(parts[1] > 0.0);
    assert!(group_norm(&gf, ParamGroup::Classifier) > 0.0);
}

#[test]
fn baseline_strategies_never_touch_codebooks() {
    for strategy in [Strategy::NoTags, Strategy::Tags] {
        let (model, mut params, ex, cfg) = setup(strategy);
        let batch: Vec<&Example> = ex.iter().take(8).collect();
        let (g, parts) = batch_gradients(&model, &params, &batch, Stage::Finetune, &cfg, 0).unwrap();
        assert_eq!(parts[2] + parts[3], 0.0);
        assert_eq!(group_norm(&g, ParamGroup::Codebook), 0.0);
        assert_eq!(group_norm(&g, ParamGroup::WeightHead), 0.0);
        let before = params.clone();
        let mut s = Session::new(&model, &mut params, &cfg).unwrap();
        s.step(&batch, Stage::Finetune).unwrap();
        assert!(group_equal(&before, &params, ParamGroup::Codebook));
        assert!(group_equal(&before, &params, ParamGroup::Classifier));
    }
}

#[test]
fn stage_one_leaves_the_decoder_and_pretraining_leaves_the_classifier() {
    let (model, mut params, ex, cfg) = setup(Strategy::ReTag);
    let before = params.clone();
    {
        let mut s = Session::new(&model, &mut params, &cfg).unwrap();
        let batch: Vec<&Example> = ex.iter().take(8).collect();
        for _ in 0..3 {
            s.step(&batch, Stage::Stage1).unwrap();
        }
    }
    assert!(group_equal(&before, &params, ParamGroup::Decoder));
    assert!(!group_equal(&before, &params, ParamGroup::Codebook));

    {
        let mut s = Session::new(&model, &mut params, &cfg).unwrap();
        pretrain(&mut s, &ex).unwrap();
        assert_eq!(s.report.steps.len(), cfg.stage1_steps + cfg.stage2_steps);
    }
    assert!(group_equal(&before, &params, ParamGroup::Classifier));
    assert!(!group_equal(&before, &params, ParamGroup::Decoder));
}

#[test]
fn codebook_loss_falls_during_stage_one() {
    let (model, mut params, ex, cfg) = setup(Strategy::ReTag);
    let batch: Vec<&Example> = ex.iter().take(8).collect();
    let mut s = Session::new(&model, &mut params, &cfg).unwrap();
    let losses: Vec<f64> = (0..50).map(|_| s.step(&batch, Stage::Stage1).unwrap().codebook).collect();
    assert!(losses[49] < 0.5 * losses[0], "{} -> {}", losses[0], losses[49]);
}

#[test]
fn generative_loss_falls_during_finetuning() {
    let (model, mut params, ex, cfg) = setup(Strategy::ReTag);
    let batch: Vec<&Example> = ex.iter().take(8).collect();
    let mut s = Session::new(&model, &mut params, &cfg).unwrap();
    let losses: Vec<f64> = (0..200).map(|_| s.step(&batch, Stage::Finetune).unwrap().generative).collect();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[190..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

#[test]
fn training_is_a_function_of_corpus_config_and_seed() {
    let data = synth_generate(&GeneratorSpec::default(), 16).unwrap();
    let vocab = corpus_vocab(&[&data]).unwrap();
    let mut run = RunConfig::default();
    run.model = ModelConfig {
        layers: 1,
        heads: 2,
        hidden: 8,
        ffn: 16,
        codebook_size: 4,
        max_len: 160,
        ..ModelConfig::default()
    };
    run.train.epochs = 1;
    run.train.batch_size = 8;
    run.train.stage1_steps = 2;
    run.train.stage2_steps = 2;
    let a = train_from_scratch(&run, &vocab, Some(&data), &data).unwrap();
    let b = train_from_scratch(&run, &vocab, Some(&data), &data).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.report.steps, b.report.steps);
    run.train.seed = 1;
    let c = train_from_scratch(&run, &vocab, Some(&data), &data).unwrap();
    assert_ne!(a.params, c.params);
}
