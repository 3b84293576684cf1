//! Per-category code tables, nearest-code quantization, masked weighted
//! mixing, VQ losses and the straight-through estimator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::tables::{Category, CategorySet};

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub name: String,
    /// `K × H`.
    pub codes: Tensor,
}

impl Codebook {
    pub fn new(name: impl Into<String>, codes: Tensor) -> Result<Self> {
        if codes.shape().len() != 2 || codes.shape()[0] < 2 {
            return Err(Error::Contract(format!(
                "codebook needs a K×H matrix with K ≥ 2, got {:?}",
                codes.shape()
            )));
        }
        if !codes.is_finite() {
            return Err(Error::Numeric("codebook contains non-finite codes".into()));
        }
        Ok(Codebook {
            name: name.into(),
            codes,
        })
    }

    /// Codes drawn from `uniform(−1/K, 1/K)`.
    pub fn random(name: impl Into<String>, k: usize, h: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bound = 1.0 / k as f64;
        let data = (0..k * h).map(|_| rng.random_range(-bound..bound)).collect();
        Codebook::new(name, Tensor::new(vec![k, h], data)?)
    }

    pub fn size(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.codes.shape()[1]
    }
}

/// How categories map onto code tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BankLayout {
    /// One table per category (six).
    PerCategory,
    /// A descriptive table plus one table shared by all five analytical
    /// categories.
    SharedAnalytical,
}

impl BankLayout {
    pub fn from_count(count: usize) -> Result<Self> {
        match count {
            6 => Ok(BankLayout::PerCategory),
            2 => Ok(BankLayout::SharedAnalytical),
            n => Err(Error::Config(format!("codebook_count must be 2 or 6, got {n}"))),
        }
    }

    pub fn count(self) -> usize {
        match self {
            BankLayout::PerCategory => 6,
            BankLayout::SharedAnalytical => 2,
        }
    }

    pub fn slot(self, c: Category) -> usize {
        match self {
            BankLayout::PerCategory => c.index(),
            BankLayout::SharedAnalytical => usize::from(c != Category::Descriptive),
        }
    }

    pub fn slot_names(self) -> Vec<&'static str> {
        match self {
            BankLayout::PerCategory => Category::ALL.iter().map(|c| c.as_str()).collect(),
            BankLayout::SharedAnalytical => vec!["descriptive", "analytical"],
        }
    }

    /// Checkpoint tensor names, `codebook.<slot>`.
    pub fn param_names(self) -> Vec<String> {
        self.slot_names().into_iter().map(|s| format!("codebook.{s}")).collect()
    }
}

/// All code tables of a model, sharing width `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookBank {
    pub layout: BankLayout,
    pub books: Vec<Codebook>,
}

impl CodebookBank {
    pub fn new(layout: BankLayout, books: Vec<Codebook>) -> Result<Self> {
        if books.len() != layout.count() {
            return Err(Error::Contract(format!(
                "{layout:?} bank needs {} codebooks, got {}",
                layout.count(),
                books.len()
            )));
        }
        let h = books[0].width();
        if books.iter().any(|b| b.width() != h) {
            return Err(Error::Contract("codebooks disagree on width H".into()));
        }
        Ok(CodebookBank { layout, books })
    }

    pub fn random(layout: BankLayout, k: usize, h: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let books = layout
            .slot_names()
            .into_iter()
            .map(|n| Codebook::random(n, k, h, rng))
            .collect::<Result<_>>()?;
        CodebookBank::new(layout, books)
    }

    pub fn for_category(&self, c: Category) -> &Codebook {
        &self.books[self.layout.slot(c)]
    }
}

/// Six activation bits in [`Category::index`] order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CategoryMask(pub [bool; 6]);

impl CategoryMask {
    pub fn active(&self) -> impl Iterator<Item = Category> + '_ {
        Category::ALL.into_iter().filter(|c| self.0[c.index()])
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.any() {
            return Err(Error::Contract("category mask has no active category".into()));
        }
        if self.0[Category::Descriptive.index()] && self.0.iter().filter(|&&b| b).count() > 1 {
            return Err(Error::Contract("descriptive must be the only active category".into()));
        }
        Ok(())
    }

    /// Slot-level weights: summed category weights per code table, and which
    /// slots are active.
    pub fn slot_weights(&self, layout: BankLayout, weights: &[f64; 6]) -> (Vec<f64>, Vec<bool>) {
        let mut w = vec![0.0; layout.count()];
        let mut on = vec![false; layout.count()];
        for c in self.active() {
            w[layout.slot(c)] += weights[c.index()];
            on[layout.slot(c)] = true;
        }
        (w, on)
    }
}

impl From<CategorySet> for CategoryMask {
    fn from(set: CategorySet) -> Self {
        CategoryMask(set.mask())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeResult {
    /// `N × H` copies of the selected codes.
    pub quantized: Tensor,
    pub indices: Vec<usize>,
    /// Euclidean distance from each row to its code.
    pub distances: Vec<f64>,
}

/// Index of the nearest code per row; ties go to the lowest index.
pub fn nearest_codes(codes: &Tensor, enc: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    let h = codes.cols();
    if enc.cols() != h || codes.shape().len() != 2 {
        return Err(Error::dim("quantize", enc.shape(), codes.shape()));
    }
    let k = codes.shape()[0];
    let mut indices = Vec::with_capacity(enc.rows());
    let mut dists = Vec::with_capacity(enc.rows());
    for n in 0..enc.rows() {
        let row = enc.row(n);
        let mut best = (0, f64::INFINITY);
        for j in 0..k {
            let d: f64 = row.iter().zip(codes.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        indices.push(best.0);
        dists.push(best.1.sqrt());
    }
    Ok((indices, dists))
}

pub fn quantize(cb: &Codebook, enc: &Tensor) -> Result<QuantizeResult> {
    let (indices, distances) = nearest_codes(&cb.codes, enc)?;
    let h = cb.width();
    let mut data = Vec::with_capacity(indices.len() * h);
    for &i in &indices {
        data.extend_from_slice(cb.codes.row(i));
    }
    Ok(QuantizeResult {
        quantized: Tensor::new(vec![indices.len(), h], data)?,
        indices,
        distances,
    })
}

fn check_weights(mask: &CategoryMask, weights: &[f64; 6]) -> Result<()> {
    mask.validate()?;
    let mut total = 0.0;
    for c in Category::ALL {
        let w = weights[c.index()];
        if mask.0[c.index()] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Contract(format!("weight {w} for {c} is not a probability")));
            }
            total += w;
        } else if w != 0.0 {
            return Err(Error::Contract(format!("inactive category {c} has weight {w}")));
        }
    }
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("active weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// `Σ_active w_i · quantize(bank_i, enc)`.
pub fn mix(bank: &CodebookBank, enc: &Tensor, mask: CategoryMask, weights: &[f64; 6]) -> Result<Tensor> {
    check_weights(&mask, weights)?;
    let (slot_w, on) = mask.slot_weights(bank.layout, weights);
    let mut out = vec![0.0; enc.numel()];
    for (s, book) in bank.books.iter().enumerate() {
        if !on[s] {
            continue;
        }
        let q = quantize(book, enc)?;
        for (o, v) in out.iter_mut().zip(q.quantized.data()) {
            *o += slot_w[s] * v;
        }
    }
    Tensor::new(enc.shape().to_vec(), out)
}

/// Quantization on the tape: selects code rows of `codes` by nearest index,
/// so gradients reaching the result flow into the selected codes.
pub fn quantize_var(g: &mut Graph, codes: Var, enc: Var) -> Result<(Var, Vec<usize>)> {
    let (indices, _) = nearest_codes(g.value(codes), g.value(enc))?;
    let q = g.gather(codes, &indices)?;
    Ok((q, indices))
}

/// Masked weighted mixing on the tape. `weights` is a `[1, 6]` node holding
/// a masked distribution; `books` are the bank's code-table nodes by slot.
/// Returns the mixed `N × H` node and the chosen indices per active slot.
pub fn mix_var(
    g: &mut Graph,
    layout: BankLayout,
    books: &[Var],
    enc: Var,
    mask: CategoryMask,
    weights: Var,
) -> Result<(Var, Vec<(usize, Vec<usize>)>)> {
    mask.validate()?;
    if g.shape(weights) != [1, 6] {
        return Err(Error::dim("mix", g.shape(weights), &[1, 6]));
    }
    let mut slot_weight: Vec<Option<Var>> = vec![None; layout.count()];
    for c in mask.active() {
        let w = g.slice(weights, 1, c.index(), 1)?;
        let s = layout.slot(c);
        slot_weight[s] = Some(match slot_weight[s] {
            Some(prev) => g.add(prev, w)?,
            None => w,
        });
    }
    let mut acc: Option<Var> = None;
    let mut chosen = Vec::new();
    for (s, w) in slot_weight.into_iter().enumerate() {
        let Some(w) = w else { continue };
        let (q, idx) = quantize_var(g, books[s], enc)?;
        let term = g.mul(q, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
        chosen.push((s, idx));
    }
    let mixed = acc.expect("validated mask has an active slot");
    Ok((mixed, chosen))
}

/// `(mean((sg(enc) − mixed)²), β · mean((enc − sg(mixed))²))`.
pub fn vq_losses(g: &mut Graph, enc: Var, mixed: Var, beta: f64) -> Result<(Var, Var)> {
    if g.shape(enc) != g.shape(mixed) {
        return Err(Error::dim("vq_losses", g.shape(enc), g.shape(mixed)));
    }
    let enc_sg = g.stop_gradient(enc);
    let d = g.sub(enc_sg, mixed)?;
    let sq = g.mul(d, d)?;
    let codebook = g.mean(sq);

    let mixed_sg = g.stop_gradient(mixed);
    let d = g.sub(enc, mixed_sg)?;
    let sq = g.mul(d, d)?;
    let commit = g.mean(sq);
    let commit = g.scale(commit, beta);
    Ok((codebook, commit))
}

/// `enc + sg(mixed − enc)`: forward equals `mixed`, backward is the identity
/// onto `enc` and nothing onto `mixed`.
pub fn straight_through(g: &mut Graph, enc: Var, mixed: Var) -> Result<Var> {
    let delta = g.sub(mixed, enc)?;
    let delta = g.stop_gradient(delta);
    g.add(enc, delta)
}

/// Code usage counts, for spotting dead codes.
pub fn usage_histogram(indices: &[usize], k: usize) -> Vec<usize> {
    let mut h = vec![0; k];
    for &i in indices {
        if i < k {
            h[i] += 1;
        }
    }
    h
}
