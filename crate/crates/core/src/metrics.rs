//! Corpus BLEU, ROUGE-L, a table-aware PARENT variant and grouped reports.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tables::{tokenize, Category, CategorySet, HighlightSet, Kind, Table};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Weight of table recall in PARENT.
    pub parent_lambda: f64,
    pub bleu_order: usize,
}

fn default_lambda() -> f64 {
    0.1
}

fn default_order() -> usize {
    4
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            parent_lambda: default_lambda(),
            bleu_order: default_order(),
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.parent_lambda) {
            return Err(Error::Config(format!("parent_lambda {} outside [0,1]", self.parent_lambda)));
        }
        if !(1..=4).contains(&self.bleu_order) {
            return Err(Error::Config(format!("bleu_order {} outside 1..=4", self.bleu_order)));
        }
        Ok(())
    }
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU in `[0, 100]` over pre-tokenized pairs.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], order: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::dim("bleu", &[candidates.len()], &[references.len()]));
    }
    if candidates.is_empty() {
        return Err(Error::Contract("bleu of an empty corpus".into()));
    }
    if !(1..=4).contains(&order) {
        return Err(Error::range("bleu", format!("order {order} outside 1..=4")));
    }
    let mut matched = vec![0usize; order];
    let mut total = vec![0usize; order];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, reference) in candidates.iter().zip(references) {
        c += cand.len();
        r += reference.len();
        for n in 1..=order {
            let ref_counts = ngrams(reference, n);
            for (g, k) in ngrams(cand, n) {
                matched[n - 1] += k.min(ref_counts.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / order as f64;
    let bp = if c <= r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * log_p.exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS-based F1 in `[0, 1]`.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    let l = lcs(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Tokens of the highlighted cell values, or of every cell when nothing is highlighted.
pub fn table_tokens(table: &Table, highlights: &HighlightSet) -> HashSet<String> {
    let values: Vec<&str> = if highlights.is_empty() {
        table.rows.iter().flatten().map(String::as_str).collect()
    } else {
        highlights.values(table)
    };
    values.iter().flat_map(|v| tokenize(v)).collect()
}

/// Geometric mean of the given factors; 0 when there are none or any is 0.
fn geo_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() || xs.iter().any(|&x| x <= 0.0) {
        return 0.0;
    }
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

/// PARENT-style F-score in `[0, 1]`. Orders longer than a sequence are
/// left out of that side's geometric mean.
pub fn parent(candidate: &[String], reference: &[String], omega: &HashSet<String>, lambda: f64) -> f64 {
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    for n in 1..=4 {
        let cand = ngrams(candidate, n);
        let refs = ngrams(reference, n);
        let cand_total: usize = cand.values().sum();
        if cand_total > 0 {
            let entailed: f64 = cand
                .iter()
                .map(|(g, &k)| {
                    let w = g.iter().filter(|t| omega.contains(*t)).count() as f64 / n as f64;
                    let in_ref = if refs.contains_key(g) { 1.0 } else { 0.0 };
                    k as f64 * f64::max(in_ref, w)
                })
                .sum();
            precisions.push(entailed / cand_total as f64);
        }
        let ref_total: usize = refs.values().sum();
        if ref_total > 0 {
            let hit: usize = refs
                .iter()
                .map(|(g, &k)| k.min(cand.get(g).copied().unwrap_or(0)))
                .sum();
            recalls.push(hit as f64 / ref_total as f64);
        }
    }
    let p = geo_mean(&precisions);
    let r_ref = geo_mean(&recalls);
    let r_tab = if omega.is_empty() {
        1.0
    } else {
        let present: HashSet<&String> = candidate.iter().collect();
        omega.iter().filter(|t| present.contains(t)).count() as f64 / omega.len() as f64
    };
    let r = r_ref.powf(1.0 - lambda) * r_tab.powf(lambda);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Scores of one generated sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub candidate: String,
    pub reference: String,
    /// Sentence-level BLEU-1.
    pub bleu1: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub parent: f64,
    pub categories: CategorySet,
    pub kind: Kind,
}

impl InstanceRecord {
    pub fn score(
        id: &str,
        candidate: &str,
        reference: &str,
        table: &Table,
        highlights: &HighlightSet,
        categories: CategorySet,
        cfg: &MetricConfig,
    ) -> Result<Self> {
        let c = tokenize(candidate);
        let r = tokenize(reference);
        let omega = table_tokens(table, highlights);
        Ok(InstanceRecord {
            id: id.to_string(),
            candidate: candidate.to_string(),
            reference: reference.to_string(),
            bleu1: bleu(std::slice::from_ref(&c), std::slice::from_ref(&r), 1)?,
            rouge_l: rouge_l(&c, &r),
            parent: parent(&c, &r, &omega, cfg.parent_lambda),
            categories,
            kind: categories.kind(),
        })
    }
}

/// Scores pooled over a group of records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub count: usize,
    pub bleu1: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub parent: f64,
}

impl GroupScores {
    /// `None` for an empty group.
    pub fn of<'a>(records: impl IntoIterator<Item = &'a InstanceRecord>) -> Option<GroupScores> {
        let records: Vec<&InstanceRecord> = records.into_iter().collect();
        if records.is_empty() {
            return None;
        }
        let cands: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.candidate)).collect();
        let refs: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.reference)).collect();
        let n = records.len() as f64;
        Some(GroupScores {
            count: records.len(),
            bleu1: bleu(&cands, &refs, 1).expect("non-empty aligned corpus"),
            bleu4: bleu(&cands, &refs, 4).expect("non-empty aligned corpus"),
            rouge_l: records.iter().map(|r| r.rouge_l).sum::<f64>() / n,
            parent: records.iter().map(|r| r.parent).sum::<f64>() / n,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub overall: Option<GroupScores>,
    pub analytical: Option<GroupScores>,
    pub descriptive: Option<GroupScores>,
    /// Single-category instances, keyed by category name.
    #[serde(rename = "per-category")]
    pub per_category: BTreeMap<String, GroupScores>,
    /// Analytical instances keyed by number of categories.
    #[serde(rename = "per-cardinality")]
    pub per_cardinality: BTreeMap<String, GroupScores>,
}

/// Groups records as overall / analytical / descriptive, per single
/// category and per category count.
pub fn category_report(records: &[InstanceRecord]) -> Aggregates {
    let mut per_category = BTreeMap::new();
    for c in Category::ALL {
        let group = records.iter().filter(|r| r.categories == CategorySet::single(c));
        if let Some(s) = GroupScores::of(group) {
            per_category.insert(c.as_str().to_string(), s);
        }
    }
    let mut per_cardinality = BTreeMap::new();
    for k in 1..=5 {
        let group = records
            .iter()
            .filter(|r| r.kind == Kind::Analytical && r.categories.len() == k);
        if let Some(s) = GroupScores::of(group) {
            per_cardinality.insert(k.to_string(), s);
        }
    }
    Aggregates {
        overall: GroupScores::of(records),
        analytical: GroupScores::of(records.iter().filter(|r| r.kind == Kind::Analytical)),
        descriptive: GroupScores::of(records.iter().filter(|r| r.kind == Kind::Descriptive)),
        per_category,
        per_cardinality,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<InstanceRecord>,
    pub aggregates: Aggregates,
}

impl EvalReport {
    pub fn new(records: Vec<InstanceRecord>) -> Self {
        let aggregates = category_report(&records);
        EvalReport { records, aggregates }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn bleu_brevity_case() {
        let b = bleu(&[t("a b c d")], &[t("a b c d e")], 1).unwrap();
        assert!((b - 100.0 * (-0.25f64).exp()).abs() < 1e-9);
        assert!((b - 77.880).abs() < 1e-3);
    }

    #[test]
    fn bleu_identity_disjoint_empty() {
        let s = vec![t("the highest goals is 12 by ann"), t("x played for the owls")];
        for n in 1..=4 {
            assert!((bleu(&s, &s, n).unwrap() - 100.0).abs() < 1e-9);
        }
        assert_eq!(bleu(&[t("a b")], &[t("c d")], 1).unwrap(), 0.0);
        assert!(matches!(bleu(&[], &[], 4), Err(Error::Contract(_))));
        assert!(bleu(&[t("a")], &[t("a")], 5).is_err());
    }

    #[test]
    fn rouge_cases() {
        assert!((rouge_l(&t("a x c"), &t("a b c")) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l(&t("a b"), &t("a b")), 1.0);
        assert_eq!(rouge_l(&[], &t("a b")), 0.0);
    }

    #[test]
    fn parent_cases() {
        let omega: HashSet<String> = ["a".to_string()].into();
        assert!((parent(&t("a b"), &t("a b"), &omega, 0.1) - 1.0).abs() < 1e-12);
        let omega2: HashSet<String> = ["a".to_string(), "z".to_string()].into();
        let r = 0.5f64.powf(0.1);
        let expected = 2.0 * r / (1.0 + r);
        let got = parent(&t("a b"), &t("a b"), &omega2, 0.1);
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.9653).abs() < 1e-4);
        assert!((parent(&t("a b"), &t("a b"), &omega2, 0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn parent_table_entailment_lifts_precision() {
        let omega: HashSet<String> = ["12".to_string()].into();
        let plain = parent(&t("x y 12"), &t("x y"), &HashSet::new(), 0.0);
        let lifted = parent(&t("x y 12"), &t("x y"), &omega, 0.0);
        assert!(lifted > plain);
    }

    #[test]
    fn metric_config_validation() {
        assert!(MetricConfig::default().validate().is_ok());
        let bad = MetricConfig {
            parent_lambda: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
