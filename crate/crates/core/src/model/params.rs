//! Parameter manifest and initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::codebook::{BankLayout, Codebook, CodebookBank};
use crate::error::Result;
use crate::numerics::{ParamStore, SeedStreams, Tensor};

/// Which training terms a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Token embeddings, shared by encoder input and decoder input/output.
    Embedding,
    Encoder,
    Decoder,
    WeightHead,
    Classifier,
    Codebook,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        match name.split('.').next().unwrap_or("") {
            "embed" => ParamGroup::Embedding,
            "encoder" => ParamGroup::Encoder,
            "decoder" => ParamGroup::Decoder,
            "weight_head" => ParamGroup::WeightHead,
            "ci" => ParamGroup::Classifier,
            "codebook" => ParamGroup::Codebook,
            other => panic!("parameter `{name}` has unknown group prefix `{other}`"),
        }
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Xavier,
    Zeros,
    Ones,
    Codes,
}

/// Names and shapes of every tensor in a model, in construction order.
fn manifest(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (h, f, v, l) = (cfg.hidden, cfg.ffn, cfg.vocab_size, cfg.max_len);
    let mut m: Vec<(String, Vec<usize>, Init)> = vec![
        ("embed.tok".into(), vec![v, h], Init::Normal),
        ("encoder.pos".into(), vec![l, h], Init::Normal),
        ("decoder.pos".into(), vec![l, h], Init::Normal),
    ];
    let ln = |m: &mut Vec<_>, p: &str| {
        m.push((format!("{p}.g"), vec![h], Init::Ones));
        m.push((format!("{p}.b"), vec![h], Init::Zeros));
    };
    let attn = |m: &mut Vec<(String, Vec<usize>, Init)>, p: &str| {
        for w in ["q", "k", "v", "o"] {
            m.push((format!("{p}.w{w}"), vec![h, h], Init::Xavier));
            m.push((format!("{p}.b{w}"), vec![h], Init::Zeros));
        }
    };
    let ffn = |m: &mut Vec<(String, Vec<usize>, Init)>, p: &str| {
        m.push((format!("{p}.w1"), vec![h, f], Init::Xavier));
        m.push((format!("{p}.b1"), vec![f], Init::Zeros));
        m.push((format!("{p}.w2"), vec![f, h], Init::Xavier));
        m.push((format!("{p}.b2"), vec![h], Init::Zeros));
    };
    for i in 0..cfg.layers {
        let p = format!("encoder.layer{i}");
        ln(&mut m, &format!("{p}.ln1"));
        attn(&mut m, &format!("{p}.attn"));
        ln(&mut m, &format!("{p}.ln2"));
        ffn(&mut m, &format!("{p}.ffn"));
    }
    ln(&mut m, "encoder.ln_f");
    for i in 0..cfg.layers {
        let p = format!("decoder.layer{i}");
        ln(&mut m, &format!("{p}.ln1"));
        attn(&mut m, &format!("{p}.self"));
        ln(&mut m, &format!("{p}.ln2"));
        attn(&mut m, &format!("{p}.cross"));
        ln(&mut m, &format!("{p}.ln3"));
        ffn(&mut m, &format!("{p}.ffn"));
    }
    ln(&mut m, "decoder.ln_f");
    m.push(("decoder.out_bias".into(), vec![v], Init::Zeros));
    m.push(("weight_head.w".into(), vec![h, 6], Init::Xavier));
    m.push(("weight_head.b".into(), vec![6], Init::Zeros));
    m.push(("ci.w".into(), vec![h, 2], Init::Xavier));
    m.push(("ci.b".into(), vec![2], Init::Zeros));
    for name in cfg.layout().param_names() {
        m.push((name, vec![cfg.codebook_size, h], Init::Codes));
    }
    m
}

/// Expected tensor names and shapes for `cfg`.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    manifest(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Randomly initialized parameters: embeddings `N(0, 0.02)`, weight
/// matrices Xavier-uniform, biases zero, layer-norm gains one, codes
/// `U(−1/K, 1/K)`. Uses the `init` stream of `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = SeedStreams::new(seed).stream("init");
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let mut store = ParamStore::new();
    for (name, shape, init) in manifest(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
            Init::Xavier => {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Codes => {
                let b = 1.0 / shape[0] as f64;
                (0..n).map(|_| rng.random_range(-b..b)).collect()
            }
        };
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

/// Checks that `params` holds exactly the tensors `cfg` needs.
pub fn check_params(cfg: &ModelConfig, params: &ParamStore) -> Result<()> {
    let expected = param_shapes(cfg);
    if expected.len() != params.len() {
        return Err(crate::Error::Data(format!(
            "parameter count {} does not match config ({})",
            params.len(),
            expected.len()
        )));
    }
    for (name, shape) in expected {
        let t = params.get(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(crate::Error::dim("check_params", t.shape(), &shape));
        }
    }
    Ok(())
}

/// The bank's code tables as standalone values.
pub fn codebook_bank(cfg: &ModelConfig, params: &ParamStore) -> Result<CodebookBank> {
    let layout: BankLayout = cfg.layout();
    let books = layout
        .slot_names()
        .into_iter()
        .zip(layout.param_names())
        .map(|(slot, name)| Codebook::new(slot, params.get(&name)?.clone()))
        .collect::<Result<_>>()?;
    CodebookBank::new(layout, books)
}

pub(crate) fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random::<f64>() >= rate).collect()
}
