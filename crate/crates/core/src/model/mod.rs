//! Transformer encoder–decoder with the quantized reasoning path between
//! encoder and decoder.
//!
//! Everything runs on one sequence at a time (no batch axis); batches are
//! formed by summing per-example gradients from independent tapes.

mod config;
mod generate;
mod params;

use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
pub use generate::{beam_search, generate, Hypothesis};
pub use params::{check_params, codebook_bank, init_params, param_shapes, ParamGroup};

use crate::codebook::{mix_var, straight_through, vq_losses, CategoryMask};
use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Graph, ParamStore, Tensor, Var, NEG_LARGE};
use crate::tables::{build_input, build_question, linearize, CategorySet, Instance, Kind, Strategy, Vocab};

/// Model input text for `inst` under `strategy`, optionally with overridden tags.
pub fn input_text(inst: &Instance, strategy: Strategy, tags: Option<CategorySet>) -> Result<String> {
    let cats = tags.unwrap_or(inst.categories);
    let question = build_question(strategy, cats);
    Ok(build_input(&question, &linearize(&inst.table, &inst.highlights)?))
}

/// A tokenized training/evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input_ids: Vec<usize>,
    /// `<bos> y…` (teacher-forcing input).
    pub target_in: Vec<usize>,
    /// `y… <eos>`.
    pub target_out: Vec<usize>,
    /// Tags driving the question and the codebook mask.
    pub categories: CategorySet,
    /// Gold analytical/descriptive label of the reference.
    pub kind: Kind,
}

impl Example {
    pub fn new(vocab: &Vocab, inst: &Instance, strategy: Strategy, tags: Option<CategorySet>) -> Result<Self> {
        let input_ids = vocab.encode(&input_text(inst, strategy, tags)?);
        let target = vocab.encode(&inst.reference);
        Ok(Example {
            input_ids,
            target_in: target[..target.len() - 1].to_vec(),
            target_out: target[1..].to_vec(),
            categories: tags.unwrap_or(inst.categories),
            kind: inst.kind(),
        })
    }
}

/// Per-call switches for [`Net::forward`].
pub struct ForwardOptions<'r> {
    /// Skip the decoder (codebook pretraining stage 1 never needs it).
    pub run_decoder: bool,
    /// Dropout stream; dropout is off when `None` or the rate is 0.
    pub dropout_rng: Option<&'r mut ChaCha8Rng>,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        ForwardOptions {
            run_decoder: true,
            dropout_rng: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `T_out × V`, absent when the decoder was skipped.
    pub logits: Option<Var>,
    /// `1 × 2`: [descriptive, analytical].
    pub ci_logits: Var,
    pub codebook_loss: Var,
    pub commitment_loss: Var,
    /// `1 × 6` masked category weights (quantized strategy only).
    pub weights: Option<Var>,
    pub enc: Var,
    /// Decoder memory: `u = ST(mixed) + enc` for the quantized strategy, `enc` otherwise.
    pub fused: Var,
    /// Selected code indices per active codebook slot.
    pub indices: Vec<(usize, Vec<usize>)>,
}

/// Parameters bound to one tape.
pub struct Net<'c> {
    pub cfg: &'c ModelConfig,
    p: BoundParams,
}

fn pool_row(pad: &[bool]) -> Result<Tensor> {
    let live = pad.iter().filter(|&&p| !p).count();
    if live == 0 {
        return Err(Error::Contract("sequence has no non-pad positions".into()));
    }
    let w = 1.0 / live as f64;
    Tensor::new(vec![1, pad.len()], pad.iter().map(|&p| if p { 0.0 } else { w }).collect())
}

/// `u = st_quantized + enc`.
pub fn fuse(g: &mut Graph, enc: Var, st_quantized: Var) -> Result<Var> {
    if g.shape(enc) != g.shape(st_quantized) {
        return Err(Error::dim("fuse", g.shape(enc), g.shape(st_quantized)));
    }
    g.add(st_quantized, enc)
}

impl<'c> Net<'c> {
    /// Binds `params` as trainable leaves.
    pub fn bind(g: &mut Graph, cfg: &'c ModelConfig, params: &ParamStore) -> Self {
        Net {
            cfg,
            p: params.bind(g),
        }
    }

    /// Binds `params` as constants (no gradient bookkeeping).
    pub fn bind_frozen(g: &mut Graph, cfg: &'c ModelConfig, params: &ParamStore) -> Self {
        let p = params.bind_frozen(g);
        Net { cfg, p }
    }

    /// Wraps handles already bound to `g`.
    pub fn from_bound(cfg: &'c ModelConfig, p: BoundParams) -> Self {
        Net { cfg, p }
    }

    pub fn params(&self) -> &BoundParams {
        &self.p
    }

    fn v(&self, name: &str) -> Result<Var> {
        self.p.var(name)
    }

    fn linear(&self, g: &mut Graph, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = g.matmul(x, self.v(w)?)?;
        g.add(y, self.v(b)?)
    }

    fn norm(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let y = g.layer_norm(x, self.cfg.ln_eps);
        let y = g.mul(y, self.v(&format!("{prefix}.g"))?)?;
        g.add(y, self.v(&format!("{prefix}.b"))?)
    }

    fn drop(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        match rng {
            Some(r) if self.cfg.dropout > 0.0 => {
                let keep = params::dropout_mask(r, g.value(x).numel(), self.cfg.dropout);
                g.dropout(x, &keep, self.cfg.dropout)
            }
            _ => Ok(x),
        }
    }

    /// Multi-head attention of `q_in` over `kv_in`. `key_pad` masks keys;
    /// `causal` additionally masks keys after each query position.
    fn attention(
        &self,
        g: &mut Graph,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        key_pad: &[bool],
        causal: bool,
    ) -> Result<Var> {
        let q = self.linear(g, q_in, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(g, kv_in, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(g, kv_in, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let (tq, tk) = (g.shape(q)[0], g.shape(k)[0]);
        let mask: Vec<bool> = (0..tq)
            .flat_map(|i| (0..tk).map(move |j| key_pad[j] || (causal && j > i)))
            .collect();
        let masked = mask.iter().any(|&m| m);
        let d = self.cfg.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (qh, kh, vh) = if self.cfg.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice(q, 1, h * d, d)?,
                    g.slice(k, 1, h * d, d)?,
                    g.slice(v, 1, h * d, d)?,
                )
            };
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let s = if masked { g.masked_fill(s, &mask, NEG_LARGE)? } else { s };
            let a = g.softmax(s, 1)?;
            heads.push(g.matmul(a, vh)?);
        }
        let ctx = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
        self.linear(g, ctx, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn ffn(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(g, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = g.gelu(h);
        self.linear(g, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn embed(&self, g: &mut Graph, ids: &[usize], pos_name: &str) -> Result<Var> {
        if ids.len() > self.cfg.max_len {
            return Err(Error::Length {
                len: ids.len(),
                max_len: self.cfg.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::range("embed", format!("token id {bad} >= vocab {}", self.cfg.vocab_size)));
        }
        let tok = g.gather(self.v("embed.tok")?, ids)?;
        let pos = g.slice(self.v(pos_name)?, 0, 0, ids.len())?;
        g.add(tok, pos)
    }

    fn encode_inner(&self, g: &mut Graph, ids: &[usize], pad: &[bool], rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        if pad.len() != ids.len() {
            return Err(Error::dim("encode", &[ids.len()], &[pad.len()]));
        }
        let mut x = self.embed(g, ids, "encoder.pos")?;
        for i in 0..self.cfg.layers {
            let p = format!("encoder.layer{i}");
            let h = self.norm(g, x, &format!("{p}.ln1"))?;
            let h = self.attention(g, &format!("{p}.attn"), h, h, pad, false)?;
            let h = self.drop(g, h, rng)?;
            x = g.add(x, h)?;
            let h = self.norm(g, x, &format!("{p}.ln2"))?;
            let h = self.ffn(g, h, &format!("{p}.ffn"))?;
            let h = self.drop(g, h, rng)?;
            x = g.add(x, h)?;
        }
        self.norm(g, x, "encoder.ln_f")
    }

    /// `E(x)`: `N × H` encoder states; `pad[i]` marks padding positions.
    pub fn encode(&self, g: &mut Graph, ids: &[usize], pad: &[bool]) -> Result<Var> {
        self.encode_inner(g, ids, pad, &mut None)
    }

    /// Masked softmax over category scores of the mean-pooled encoder
    /// states. The head reads `sg(enc)`, so its gradient (from the codebook
    /// term) never reaches the encoder.
    pub fn predict_weights(&self, g: &mut Graph, enc: Var, pad: &[bool], mask: CategoryMask) -> Result<Var> {
        if !mask.any() {
            return Err(Error::Contract("predict_weights needs an active category".into()));
        }
        let pool = g.constant(pool_row(pad)?);
        let enc_sg = g.stop_gradient(enc);
        let pooled = g.matmul(pool, enc_sg)?;
        let scores = self.linear(g, pooled, "weight_head.w", "weight_head.b")?;
        let inactive: Vec<bool> = mask.0.iter().map(|&on| !on).collect();
        let scores = g.masked_fill(scores, &inactive, NEG_LARGE)?;
        g.softmax(scores, 1)
    }

    /// `1 × 2` logits `[descriptive, analytical]` from mean-pooled `u`.
    pub fn classify_ci(&self, g: &mut Graph, u: Var, pad: &[bool]) -> Result<Var> {
        let pool = g.constant(pool_row(pad)?);
        let pooled = g.matmul(pool, u)?;
        self.linear(g, pooled, "ci.w", "ci.b")
    }

    fn decode_inner(
        &self,
        g: &mut Graph,
        memory: Var,
        mem_pad: &[bool],
        tgt_in: &[usize],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let no_pad = vec![false; tgt_in.len()];
        let mut y = self.embed(g, tgt_in, "decoder.pos")?;
        for i in 0..self.cfg.layers {
            let p = format!("decoder.layer{i}");
            let h = self.norm(g, y, &format!("{p}.ln1"))?;
            let h = self.attention(g, &format!("{p}.self"), h, h, &no_pad, true)?;
            let h = self.drop(g, h, rng)?;
            y = g.add(y, h)?;
            let h = self.norm(g, y, &format!("{p}.ln2"))?;
            let h = self.attention(g, &format!("{p}.cross"), h, memory, mem_pad, false)?;
            let h = self.drop(g, h, rng)?;
            y = g.add(y, h)?;
            let h = self.norm(g, y, &format!("{p}.ln3"))?;
            let h = self.ffn(g, h, &format!("{p}.ffn"))?;
            let h = self.drop(g, h, rng)?;
            y = g.add(y, h)?;
        }
        let y = self.norm(g, y, "decoder.ln_f")?;
        let tok_t = g.transpose(self.v("embed.tok")?)?;
        let logits = g.matmul(y, tok_t)?;
        g.add(logits, self.v("decoder.out_bias")?)
    }

    /// `T × V` next-token logits given decoder memory and `<bos>`-prefixed inputs.
    pub fn decode(&self, g: &mut Graph, memory: Var, mem_pad: &[bool], tgt_in: &[usize]) -> Result<Var> {
        self.decode_inner(g, memory, mem_pad, tgt_in, &mut None)
    }

    /// Encoder plus the strategy-specific bridge to the decoder memory.
    /// Returns everything except logits.
    pub fn encode_bridge(
        &self,
        g: &mut Graph,
        input_ids: &[usize],
        pad: &[bool],
        categories: CategorySet,
        strategy: Strategy,
        beta: f64,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        let enc = self.encode_inner(g, input_ids, pad, rng)?;
        let (fused, weights, cb_loss, commit, indices) = match strategy {
            Strategy::ReTag => {
                let mask = CategoryMask::from(categories);
                let weights = self.predict_weights(g, enc, pad, mask)?;
                let layout = self.cfg.layout();
                let books = layout
                    .param_names()
                    .iter()
                    .map(|n| self.v(n))
                    .collect::<Result<Vec<_>>>()?;
                let (mixed, indices) = mix_var(g, layout, &books, enc, mask, weights)?;
                let (cb, cm) = vq_losses(g, enc, mixed, beta)?;
                let st = straight_through(g, enc, mixed)?;
                let u = fuse(g, enc, st)?;
                (u, Some(weights), cb, cm, indices)
            }
            Strategy::NoTags | Strategy::Tags => {
                let zero_a = g.constant(Tensor::scalar(0.0));
                let zero_b = g.constant(Tensor::scalar(0.0));
                (enc, None, zero_a, zero_b, Vec::new())
            }
        };
        let ci_logits = self.classify_ci(g, fused, pad)?;
        Ok(ForwardOutput {
            logits: None,
            ci_logits,
            codebook_loss: cb_loss,
            commitment_loss: commit,
            weights,
            enc,
            fused,
            indices,
        })
    }

    /// Full teacher-forced forward pass for one example.
    pub fn forward(
        &self,
        g: &mut Graph,
        ex: &Example,
        strategy: Strategy,
        beta: f64,
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let mut rng = opts.dropout_rng;
        let pad = vec![false; ex.input_ids.len()];
        let mut out = self.encode_bridge(g, &ex.input_ids, &pad, ex.categories, strategy, beta, &mut rng)?;
        if opts.run_decoder {
            out.logits = Some(self.decode_inner(g, out.fused, &pad, &ex.target_in, &mut rng)?);
        }
        Ok(out)
    }
}

/// Convenience: forward on a fresh tape with frozen parameters, returning
/// the logits tensor.
pub fn forward_logits(
    cfg: &ModelConfig,
    params: &ParamStore,
    ex: &Example,
    strategy: Strategy,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let net = Net::bind_frozen(&mut g, cfg, params);
    let out = net.forward(&mut g, ex, strategy, 0.25, ForwardOptions::default())?;
    Ok(g.value(out.logits.expect("decoder ran")).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_generate, GeneratorSpec};
    use crate::tables::{Category, EOS};

    fn setup(strategy: Strategy) -> (ModelConfig, ParamStore, Vocab, Vec<Instance>) {
        let data = synth_generate(&GeneratorSpec::default(), 6).unwrap();
        let texts: Vec<String> = data
            .iter()
            .flat_map(|i| [input_text(i, Strategy::ReTag, None).unwrap(), i.reference.clone()])
            .collect();
        let vocab = Vocab::build(&texts, 1);
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            ffn: 12,
            vocab_size: vocab.len(),
            max_len: 128,
            codebook_size: 4,
            strategy,
            ..ModelConfig::default()
        };
        let params = init_params(&cfg, 3).unwrap();
        (cfg, params, vocab, data)
    }

    #[test]
    fn init_matches_manifest() {
        let (cfg, params, _, _) = setup(Strategy::ReTag);
        check_params(&cfg, &params).unwrap();
        assert_eq!(params.get("codebook.numerical").unwrap().shape(), &[4, 8]);
        let again = init_params(&cfg, 3).unwrap();
        assert_eq!(params.get("embed.tok").unwrap(), again.get("embed.tok").unwrap());
    }

    #[test]
    fn forward_shapes_and_weights() {
        let (cfg, params, vocab, data) = setup(Strategy::ReTag);
        let ex = Example::new(&vocab, &data[0], Strategy::ReTag, None).unwrap();
        let mut g = Graph::new();
        let net = Net::bind(&mut g, &cfg, &params);
        let out = net.forward(&mut g, &ex, Strategy::ReTag, 0.25, ForwardOptions::default()).unwrap();
        assert_eq!(g.shape(out.logits.unwrap()), &[ex.target_in.len(), vocab.len()]);
        assert_eq!(g.shape(out.ci_logits), &[1, 2]);
        let w = g.value(out.weights.unwrap()).data().to_vec();
        let mask = ex.categories.mask();
        for c in 0..6 {
            if !mask[c] {
                assert_eq!(w[c], 0.0);
            }
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_long_input_is_length_error() {
        let (cfg, params, _, _) = setup(Strategy::Tags);
        let mut g = Graph::new();
        let net = Net::bind(&mut g, &cfg, &params);
        let ids = vec![7; cfg.max_len + 1];
        let err = net.encode(&mut g, &ids, &vec![false; ids.len()]).unwrap_err();
        assert!(matches!(err, Error::Length { .. }));
    }

    #[test]
    fn baselines_leave_codebooks_untouched() {
        let (cfg, params, vocab, data) = setup(Strategy::Tags);
        let ex = Example::new(&vocab, &data[0], Strategy::Tags, None).unwrap();
        let mut g = Graph::new();
        let net = Net::bind(&mut g, &cfg, &params);
        let out = net.forward(&mut g, &ex, Strategy::Tags, 0.25, ForwardOptions::default()).unwrap();
        let loss = g.cross_entropy(out.logits.unwrap(), &ex.target_out, crate::tables::PAD).unwrap();
        let grads = g.backward(loss).unwrap();
        for name in cfg.layout().param_names() {
            assert!(!grads.reached(net.params().var(&name).unwrap()));
        }
    }

    #[test]
    fn codebook_loss_skips_encoder_and_commitment_skips_codes() {
        let (cfg, params, vocab, data) = setup(Strategy::ReTag);
        let inst = data.iter().find(|i| i.categories.contains(Category::Numerical)).unwrap();
        let ex = Example::new(&vocab, inst, Strategy::ReTag, None).unwrap();
        let opts = || ForwardOptions {
            run_decoder: false,
            dropout_rng: None,
        };

        let mut g = Graph::new();
        let net = Net::bind(&mut g, &cfg, &params);
        let out = net.forward(&mut g, &ex, Strategy::ReTag, 0.25, opts()).unwrap();
        let grads = g.backward(out.codebook_loss).unwrap();
        let enc_w = net.params().var("encoder.layer0.ffn.w1").unwrap();
        assert_eq!(grads.wrt(enc_w).sq_norm(), 0.0);
        let cb = net.params().var("codebook.numerical").unwrap();
        assert!(grads.wrt(cb).sq_norm() > 0.0);

        let mut g = Graph::new();
        let net = Net::bind(&mut g, &cfg, &params);
        let out = net.forward(&mut g, &ex, Strategy::ReTag, 0.25, opts()).unwrap();
        let grads = g.backward(out.commitment_loss).unwrap();
        assert!(grads.wrt(net.params().var("encoder.layer0.ffn.w1").unwrap()).sq_norm() > 0.0);
        assert_eq!(grads.wrt(net.params().var("codebook.numerical").unwrap()).sq_norm(), 0.0);
    }

    #[test]
    fn cached_decoder_matches_teacher_forcing() {
        let (cfg, params, vocab, data) = setup(Strategy::ReTag);
        let ex = Example::new(&vocab, &data[1], Strategy::ReTag, None).unwrap();
        let logits = forward_logits(&cfg, &params, &ex, Strategy::ReTag).unwrap();
        // Greedy decode with beam 1 must pick the argmax at every step of
        // its own prefix; check the first step against teacher forcing.
        let first_row = logits.row(0);
        let argmax = (0..first_row.len())
            .filter(|&v| v != crate::tables::PAD && v != crate::tables::BOS)
            .max_by(|&a, &b| first_row[a].partial_cmp(&first_row[b]).unwrap().then(b.cmp(&a)))
            .unwrap();
        let hyp = beam_search(&cfg, &params, &ex.input_ids, Strategy::ReTag, ex.categories, 1, 1).unwrap();
        assert_eq!(hyp.ids, vec![argmax]);
        let lse = {
            let m = first_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + first_row.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
        };
        assert!((hyp.log_prob - (first_row[argmax] - lse)).abs() < 1e-9);
    }

    #[test]
    fn decoded_log_prob_matches_teacher_forced_score() {
        let (cfg, params, vocab, data) = setup(Strategy::ReTag);
        let ex = Example::new(&vocab, &data[2], Strategy::ReTag, None).unwrap();
        let hyp = beam_search(&cfg, &params, &ex.input_ids, Strategy::ReTag, ex.categories, 3, 6).unwrap();
        let mut tgt_in = vec![crate::tables::BOS];
        tgt_in.extend(&hyp.ids[..hyp.ids.len() - 1]);
        let forced = Example {
            target_in: tgt_in,
            target_out: hyp.ids.clone(),
            ..ex.clone()
        };
        let logits = forward_logits(&cfg, &params, &forced, Strategy::ReTag).unwrap();
        let mut score = 0.0;
        for (t, &y) in hyp.ids.iter().enumerate() {
            let row = logits.row(t);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            score += row[y] - m - row.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        }
        assert!((score - hyp.log_prob).abs() < 1e-9, "{score} vs {}", hyp.log_prob);
    }

    #[test]
    fn beam_dominates_greedy_and_rejects_zero() {
        let (cfg, params, vocab, data) = setup(Strategy::Tags);
        for inst in &data {
            let ex = Example::new(&vocab, inst, Strategy::Tags, None).unwrap();
            let b1 = beam_search(&cfg, &params, &ex.input_ids, Strategy::Tags, ex.categories, 1, 8).unwrap();
            let b4 = beam_search(&cfg, &params, &ex.input_ids, Strategy::Tags, ex.categories, 4, 8).unwrap();
            assert!(b4.log_prob >= b1.log_prob);
            assert!(b1.ids.len() <= 8);
            assert!(b1.ids.last() == Some(&EOS) || b1.ids.len() == 8);
        }
        let ex = Example::new(&vocab, &data[0], Strategy::Tags, None).unwrap();
        let err = beam_search(&cfg, &params, &ex.input_ids, Strategy::Tags, ex.categories, 0, 8).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
