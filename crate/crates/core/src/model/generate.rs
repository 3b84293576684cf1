//! Beam-search decoding with an incremental (key/value cached) decoder.

use std::cmp::Ordering;

use super::{ModelConfig, Net};
use crate::error::{Error, Result};
use crate::numerics::{gelu_fwd, gemm_nn, Graph, ParamStore, Tensor};
use crate::tables::{CategorySet, Strategy, Vocab, BOS, EOS, PAD};

/// A finished hypothesis: generated ids (without `<bos>`, with a final
/// `<eos>` unless truncated) and its summed token log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    pub log_prob: f64,
}

struct Linear<'p> {
    w: &'p Tensor,
    b: &'p Tensor,
}

impl<'p> Linear<'p> {
    fn load(p: &'p ParamStore, w: &str, b: &str) -> Result<Self> {
        Ok(Linear {
            w: p.get(w)?,
            b: p.get(b)?,
        })
    }

    fn rows(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (k, m) = (self.w.rows(), self.w.cols());
        let mut out: Vec<f64> = (0..n).flat_map(|_| self.b.data().iter().copied()).collect();
        let mut prod = vec![0.0; n * m];
        gemm_nn(x, self.w.data(), &mut prod, n, k, m);
        // Bias is added after the product to match the graph's rounding order.
        for (o, p) in out.iter_mut().zip(&prod) {
            *o += p;
        }
        out
    }
}

struct Norm<'p> {
    g: &'p Tensor,
    b: &'p Tensor,
}

impl<'p> Norm<'p> {
    fn load(p: &'p ParamStore, prefix: &str) -> Result<Self> {
        Ok(Norm {
            g: p.get(&format!("{prefix}.g"))?,
            b: p.get(&format!("{prefix}.b"))?,
        })
    }

    fn apply(&self, x: &[f64], eps: f64) -> Vec<f64> {
        let cols = self.g.numel();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (c, v) in row.iter().enumerate() {
                out.push((v - mean) * is * self.g.data()[c] + self.b.data()[c]);
            }
        }
        out
    }
}

struct Attn<'p> {
    q: Linear<'p>,
    k: Linear<'p>,
    v: Linear<'p>,
    o: Linear<'p>,
}

impl<'p> Attn<'p> {
    fn load(p: &'p ParamStore, prefix: &str) -> Result<Self> {
        let l = |w: &str| Linear::load(p, &format!("{prefix}.w{w}"), &format!("{prefix}.b{w}"));
        Ok(Attn {
            q: l("q")?,
            k: l("k")?,
            v: l("v")?,
            o: l("o")?,
        })
    }
}

struct Layer<'p> {
    ln1: Norm<'p>,
    self_attn: Attn<'p>,
    ln2: Norm<'p>,
    cross: Attn<'p>,
    ln3: Norm<'p>,
    w1: Linear<'p>,
    w2: Linear<'p>,
    /// Cross-attention keys/values of the memory, `N × H` each.
    mem_k: Vec<f64>,
    mem_v: Vec<f64>,
}

/// Decoder state shared by all hypotheses of one input.
struct Decoder<'p> {
    cfg: &'p ModelConfig,
    tok: &'p Tensor,
    pos: &'p Tensor,
    out_bias: &'p Tensor,
    ln_f: Norm<'p>,
    layers: Vec<Layer<'p>>,
    mem_len: usize,
}

/// Per-hypothesis self-attention cache: `(keys, values)` per layer.
#[derive(Clone)]
struct Cache {
    kv: Vec<(Vec<f64>, Vec<f64>)>,
    len: usize,
}

fn attend(q: &[f64], keys: &[f64], values: &[f64], n: usize, heads: usize, d: usize) -> Vec<f64> {
    let h = heads * d;
    let scale = 1.0 / (d as f64).sqrt();
    let mut ctx = vec![0.0; h];
    let mut scores = vec![0.0; n];
    for head in 0..heads {
        let qh = &q[head * d..(head + 1) * d];
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &keys[j * h + head * d..j * h + (head + 1) * d];
            let dot: f64 = qh.iter().zip(kh).map(|(a, b)| a * b).sum();
            *s = dot * scale;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        for (j, s) in scores.iter().enumerate() {
            let a = (s - max).exp() / z;
            let vh = &values[j * h + head * d..j * h + (head + 1) * d];
            for (c, v) in ctx[head * d..(head + 1) * d].iter_mut().zip(vh) {
                *c += a * v;
            }
        }
    }
    ctx
}

impl<'p> Decoder<'p> {
    fn new(cfg: &'p ModelConfig, p: &'p ParamStore, memory: &Tensor) -> Result<Self> {
        let n = memory.rows();
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let pre = format!("decoder.layer{i}");
            let cross = Attn::load(p, &format!("{pre}.cross"))?;
            let mem_k = cross.k.rows(memory.data(), n);
            let mem_v = cross.v.rows(memory.data(), n);
            layers.push(Layer {
                ln1: Norm::load(p, &format!("{pre}.ln1"))?,
                self_attn: Attn::load(p, &format!("{pre}.self"))?,
                ln2: Norm::load(p, &format!("{pre}.ln2"))?,
                cross,
                ln3: Norm::load(p, &format!("{pre}.ln3"))?,
                w1: Linear::load(p, &format!("{pre}.ffn.w1"), &format!("{pre}.ffn.b1"))?,
                w2: Linear::load(p, &format!("{pre}.ffn.w2"), &format!("{pre}.ffn.b2"))?,
                mem_k,
                mem_v,
            });
        }
        Ok(Decoder {
            cfg,
            tok: p.get("embed.tok")?,
            pos: p.get("decoder.pos")?,
            out_bias: p.get("decoder.out_bias")?,
            ln_f: Norm::load(p, "decoder.ln_f")?,
            layers,
            mem_len: n,
        })
    }

    fn empty_cache(&self) -> Cache {
        Cache {
            kv: vec![(Vec::new(), Vec::new()); self.layers.len()],
            len: 0,
        }
    }

    /// Feeds `token` at the next position and returns next-token log-probabilities.
    fn step(&self, cache: &mut Cache, token: usize) -> Vec<f64> {
        let (heads, d, eps) = (self.cfg.heads, self.cfg.head_dim(), self.cfg.ln_eps);
        let t = cache.len;
        let mut y: Vec<f64> = self
            .tok
            .row(token)
            .iter()
            .zip(self.pos.row(t))
            .map(|(a, b)| a + b)
            .collect();
        for (layer, (keys, values)) in self.layers.iter().zip(cache.kv.iter_mut()) {
            let h = layer.ln1.apply(&y, eps);
            let q = layer.self_attn.q.rows(&h, 1);
            keys.extend(layer.self_attn.k.rows(&h, 1));
            values.extend(layer.self_attn.v.rows(&h, 1));
            let ctx = attend(&q, keys, values, t + 1, heads, d);
            let a = layer.self_attn.o.rows(&ctx, 1);
            y.iter_mut().zip(&a).for_each(|(y, a)| *y += a);

            let h = layer.ln2.apply(&y, eps);
            let q = layer.cross.q.rows(&h, 1);
            let ctx = attend(&q, &layer.mem_k, &layer.mem_v, self.mem_len, heads, d);
            let a = layer.cross.o.rows(&ctx, 1);
            y.iter_mut().zip(&a).for_each(|(y, a)| *y += a);

            let h = layer.ln3.apply(&y, eps);
            let f: Vec<f64> = layer.w1.rows(&h, 1).into_iter().map(|v| gelu_fwd(v).0).collect();
            let a = layer.w2.rows(&f, 1);
            y.iter_mut().zip(&a).for_each(|(y, a)| *y += a);
        }
        cache.len += 1;
        let y = self.ln_f.apply(&y, eps);
        let mut logits: Vec<f64> = (0..self.tok.rows())
            .map(|v| {
                let dot: f64 = y.iter().zip(self.tok.row(v)).map(|(a, b)| a * b).sum();
                dot + self.out_bias.data()[v]
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lz = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits.iter_mut().for_each(|l| *l = *l - max - lz);
        logits
    }
}

/// Decoder memory (`u` or `enc`, depending on strategy) for one input.
pub(crate) fn memory(
    cfg: &ModelConfig,
    params: &ParamStore,
    input_ids: &[usize],
    categories: CategorySet,
    strategy: Strategy,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let net = Net::bind_frozen(&mut g, cfg, params);
    let pad = vec![false; input_ids.len()];
    let out = net.encode_bridge(&mut g, input_ids, &pad, categories, strategy, 0.0, &mut None)?;
    Ok(g.value(out.fused).clone())
}

struct Live {
    ids: Vec<usize>,
    log_prob: f64,
    cache: Cache,
}

fn better(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

fn search(dec: &Decoder<'_>, beam: usize, max_new: usize) -> Hypothesis {
    let mut live = vec![Live {
        ids: Vec::new(),
        log_prob: 0.0,
        cache: dec.empty_cache(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_new {
        // (parent, token, log_prob)
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        let mut step_caches = Vec::with_capacity(live.len());
        for (i, hyp) in live.iter().enumerate() {
            let mut cache = hyp.cache.clone();
            let last = hyp.ids.last().copied().unwrap_or(BOS);
            let lp = dec.step(&mut cache, last);
            step_caches.push(cache);
            let mut toks: Vec<usize> = (0..lp.len()).filter(|&v| v != PAD && v != BOS).collect();
            toks.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
            toks.truncate(beam);
            cands.extend(toks.into_iter().map(|v| (i, v, hyp.log_prob + lp[v])));
        }
        let mut cand_ids: Vec<(Vec<usize>, f64, usize)> = cands
            .into_iter()
            .map(|(i, v, lp)| {
                let mut ids = live[i].ids.clone();
                ids.push(v);
                (ids, lp, i)
            })
            .collect();
        cand_ids.sort_by(|a, b| better((a.1, &a.0), (b.1, &b.0)));
        cand_ids.truncate(beam);
        let last_step = step + 1 == max_new;
        let mut next = Vec::with_capacity(beam);
        for (ids, log_prob, parent) in cand_ids {
            if ids.last() == Some(&EOS) || last_step {
                finished.push(Hypothesis { ids, log_prob });
            } else {
                next.push(Live {
                    ids,
                    log_prob,
                    cache: step_caches[parent].clone(),
                });
            }
        }
        live = next;
        let best_finished = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best_finished >= best_live {
            break;
        }
    }
    finished.sort_by(|a, b| better((a.log_prob, &a.ids), (b.log_prob, &b.ids)));
    finished.into_iter().next().unwrap_or(Hypothesis {
        ids: Vec::new(),
        log_prob: 0.0,
    })
}

/// Beam search over summed token log-probabilities (no length
/// normalization). Each hypothesis ends at `<eos>` or after `max_len`
/// generated tokens. The result is never worse than greedy decoding.
pub fn beam_search(
    cfg: &ModelConfig,
    params: &ParamStore,
    input_ids: &[usize],
    strategy: Strategy,
    categories: CategorySet,
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam < 1 {
        return Err(Error::Config(format!("beam must be at least 1, got {beam}")));
    }
    if max_len < 1 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mem = memory(cfg, params, input_ids, categories, strategy)?;
    let dec = Decoder::new(cfg, params, &mem)?;
    let max_new = max_len.min(cfg.max_len);
    let greedy = search(&dec, 1, max_new);
    if beam == 1 {
        return Ok(greedy);
    }
    let wide = search(&dec, beam, max_new);
    Ok(if wide.log_prob >= greedy.log_prob { wide } else { greedy })
}

/// Decodes to text; see [`beam_search`].
#[allow(clippy::too_many_arguments)]
pub fn generate(
    cfg: &ModelConfig,
    params: &ParamStore,
    vocab: &Vocab,
    input_ids: &[usize],
    strategy: Strategy,
    categories: CategorySet,
    beam: usize,
    max_len: usize,
) -> Result<(String, f64)> {
    let hyp = beam_search(cfg, params, input_ids, strategy, categories, beam, max_len)?;
    Ok((vocab.decode(&hyp.ids)?, hyp.log_prob))
}
