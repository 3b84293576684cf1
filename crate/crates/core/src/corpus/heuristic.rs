//! Fuzzy-match filter that flags references as analytical or descriptive
//! candidates before annotation.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::tables::{tokenize, Instance};

const STOPWORDS: [&str; 50] = [
    "a", "an", "the", "and", "or", "but", "of", "in", "on", "at", "to", "for", "with", "by",
    "from", "as", "is", "was", "are", "were", "be", "been", "being", "has", "have", "had", "it",
    "its", "this", "that", "these", "those", "he", "she", "they", "his", "her", "their", "which",
    "who", "whom", "not", "no", "into", "than", "then", "there", "also", "after", "before",
];

const COMPARATIVE_WORDS: [&str; 11] = [
    "most", "least", "first", "second", "third", "best", "worst", "more", "fewer", "over", "under",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeuristicStyle {
    Totto,
    Infotabs,
}

impl std::str::FromStr for HeuristicStyle {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "totto" => Ok(HeuristicStyle::Totto),
            "infotabs" => Ok(HeuristicStyle::Infotabs),
            other => Err(crate::Error::Config(format!("unknown filter style `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeuristicLabel {
    AnalyticalCandidate,
    DescriptiveCandidate,
    Unlabeled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// A non-stopword of the reference is absent from the table text.
    UnseenContentWord,
    RatioBelow80,
    RatioBelow85WithComparative,
    RatioBelow75,
    RatioAbove80,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeuristicVerdict {
    pub label: HeuristicLabel,
    pub ratio: u32,
    pub triggers: Vec<Trigger>,
}

fn content_tokens(s: &str) -> Vec<String> {
    tokenize(s)
        .into_iter()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .collect()
}

fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `100·(1 − d/max(|a|,|b|))` rounded half-up, where `d` is the token-level
/// Levenshtein distance over lowercased, punctuation-free tokens.
pub fn fuzzy_ratio(a: &str, b: &str) -> u32 {
    let (ta, tb) = (content_tokens(a), content_tokens(b));
    let max = ta.len().max(tb.len());
    if max == 0 {
        return 100;
    }
    let same = max - levenshtein(&ta, &tb);
    // round(100·same/max) with halves going up, in integers
    ((200 * same + max) / (2 * max)) as u32
}

/// Superlative/comparative or numeric token present.
pub fn has_comparative_signal(text: &str) -> bool {
    content_tokens(text).iter().any(|t| {
        t.chars().any(|c| c.is_ascii_digit())
            || COMPARATIVE_WORDS.contains(&t.as_str())
            || (t.chars().count() >= 4
                && t.chars().all(char::is_alphabetic)
                && (t.ends_with("est") || t.ends_with("er")))
    })
}

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token)
}

pub fn classify_heuristic(reference: &str, table_text: &str, style: HeuristicStyle) -> HeuristicVerdict {
    let ratio = fuzzy_ratio(reference, table_text);
    let mut triggers = Vec::new();
    let label = match style {
        HeuristicStyle::Totto => {
            let table_tokens: HashSet<String> = content_tokens(table_text).into_iter().collect();
            if content_tokens(reference)
                .iter()
                .any(|t| !is_stopword(t) && !table_tokens.contains(t))
            {
                triggers.push(Trigger::UnseenContentWord);
            }
            if ratio < 80 {
                triggers.push(Trigger::RatioBelow80);
            }
            if ratio < 85 && has_comparative_signal(reference) {
                triggers.push(Trigger::RatioBelow85WithComparative);
            }
            if triggers.is_empty() {
                HeuristicLabel::DescriptiveCandidate
            } else {
                HeuristicLabel::AnalyticalCandidate
            }
        }
        HeuristicStyle::Infotabs => {
            if ratio < 75 {
                triggers.push(Trigger::RatioBelow75);
                HeuristicLabel::AnalyticalCandidate
            } else if ratio > 80 {
                triggers.push(Trigger::RatioAbove80);
                HeuristicLabel::DescriptiveCandidate
            } else {
                HeuristicLabel::Unlabeled
            }
        }
    };
    HeuristicVerdict {
        label,
        ratio,
        triggers,
    }
}

/// Highlighted cell values plus title metadata, the text the filter
/// compares references against.
pub fn heuristic_table_text(inst: &Instance) -> String {
    let mut parts = vec![inst.table.title.as_str(), inst.table.section_title.as_str()];
    parts.extend(inst.highlights.values(&inst.table));
    parts.join(" ")
}
