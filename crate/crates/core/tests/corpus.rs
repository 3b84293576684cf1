use std::collections::BTreeMap;

use proptest::prelude::*;
use regex::Regex;

use retag::corpus::lexicon::alias_of;
use retag::corpus::{
    classify_heuristic, fuzzy_ratio, synth_generate, GeneratorSpec, HeuristicLabel,
    HeuristicStyle,
};
use retag::tables::{tokenize, Category, CategorySet, Instance, Table};

const LABEL: &str = r"[A-Z][a-z]+(?: [A-Z][a-z]+)?";
const PHRASE: &str = r"goals|high temperature|rainfall";

struct Checker {
    patterns: Vec<(Category, &'static str, Regex)>,
}

fn col(t: &Table, name: &str) -> usize {
    t.headers.iter().position(|h| h == name).expect("known header")
}

fn int(t: &Table, r: usize, c: usize) -> i64 {
    t.rows[r][c].parse().expect("numeric cell")
}

fn row_of(t: &Table, label: &str) -> Option<usize> {
    t.rows.iter().position(|row| row[0] == label)
}

fn phrase_col(t: &Table, phrase: &str) -> usize {
    col(
        t,
        match phrase {
            "goals" => "goals",
            "high temperature" => "high",
            _ => "rain",
        },
    )
}

impl Checker {
    fn new() -> Self {
        let p = |cat, name, re: String| (cat, name, Regex::new(&format!("^(?:{re})")).unwrap());
        Checker {
            patterns: vec![
                p(Category::Descriptive, "roster", format!(r"({LABEL}) played for the ([A-Z][a-z]+) from (\d+) to (\d+)")),
                p(Category::Descriptive, "climate", format!(r"({LABEL}) had a high of (-?\d+) and a low of (-?\d+)")),
                p(Category::Numerical, "extreme", format!(r"the (highest|lowest) ({PHRASE}) is (-?\d+) by ({LABEL})")),
                p(Category::Numerical, "total", format!(r"the total ({PHRASE}) is (-?\d+)")),
                p(Category::Numerical, "difference", format!(r"the difference in ({PHRASE}) between ({LABEL}) and ({LABEL}) is (\d+)")),
                p(Category::Temporal, "duration", format!(r"({LABEL}) was active for (\d+) years")),
                p(Category::Commonsense, "warmth", format!(r"({LABEL}) was the (warmest|coolest) month")),
                p(Category::Tabular, "players", r"(\d+) of the (\d+) players played for the ([A-Z][a-z]+)".into()),
                p(Category::Tabular, "months", r"(\d+) of the (\d+) months had more than (\d+) mm of rain".into()),
                p(Category::Entity, "alias", format!(r"({LABEL}) played for the ([A-Z][a-z]+)")),
            ],
        }
    }

    /// Splits the reference into clauses, re-derives each claim from the
    /// table by brute force, and returns the categories the clauses express.
    fn check(&self, inst: &Instance) -> Result<CategorySet, String> {
        let t = &inst.table;
        let mut rest = inst.reference.as_str();
        let mut cats = Vec::new();
        while !rest.is_empty() {
            let (cat, name, caps) = self
                .patterns
                .iter()
                .find_map(|(cat, name, re)| {
                    let caps = re.captures(rest)?;
                    let after = &rest[caps[0].len()..];
                    (after.is_empty() || after.starts_with(" and ")).then_some((*cat, *name, caps))
                })
                .ok_or_else(|| format!("unparsed clause `{rest}`"))?;
            let g = |i: usize| caps[i].to_string();
            let n = |i: usize| caps[i].parse::<i64>().unwrap();
            let ok = match name {
                "roster" => t.rows.iter().any(|r| r[0] == g(1) && r[1] == g(2) && r[2] == g(3) && r[3] == g(4)),
                "climate" => t.rows.iter().any(|r| r[0] == g(1) && r[1] == g(2) && r[2] == g(3)),
                "extreme" => {
                    let c = phrase_col(t, &caps[2]);
                    let vals = (0..t.rows.len()).map(|r| int(t, r, c));
                    let want = if &caps[1] == "highest" { vals.max() } else { vals.min() };
                    Some(n(3)) == want && row_of(t, &caps[4]).is_some_and(|r| int(t, r, c) == n(3))
                }
                "total" => {
                    let c = phrase_col(t, &caps[1]);
                    (0..t.rows.len()).map(|r| int(t, r, c)).sum::<i64>() == n(2)
                }
                "difference" => {
                    let c = phrase_col(t, &caps[1]);
                    match (row_of(t, &caps[2]), row_of(t, &caps[3])) {
                        (Some(a), Some(b)) => a != b && (int(t, a, c) - int(t, b, c)).abs() == n(4),
                        _ => false,
                    }
                }
                "duration" => row_of(t, &caps[1]).is_some_and(|r| int(t, r, col(t, "end")) - int(t, r, col(t, "start")) == n(2)),
                "warmth" => {
                    let c = col(t, "high");
                    let highs = (0..t.rows.len()).map(|r| int(t, r, c));
                    let want = if &caps[2] == "warmest" { highs.max() } else { highs.min() };
                    row_of(t, &caps[1]).is_some_and(|r| Some(int(t, r, c)) == want)
                }
                "players" => {
                    let team = col(t, "team");
                    let k = t.rows.iter().filter(|r| r[team] == caps[3]).count() as i64;
                    k >= 1 && k == n(1) && t.rows.len() as i64 == n(2)
                }
                "months" => {
                    let rain = col(t, "rain");
                    let k = (0..t.rows.len()).filter(|&r| int(t, r, rain) > n(3)).count() as i64;
                    k == n(1) && t.rows.len() as i64 == n(2)
                }
                "alias" => t.rows.iter().any(|r| {
                    r[0] != caps[1] && alias_of(&r[0]).as_deref() == Some(&caps[1]) && r[col(t, "team")] == caps[2]
                }),
                _ => unreachable!(),
            };
            if !ok {
                return Err(format!("unfaithful {name} clause `{}`", &caps[0]));
            }
            cats.push(cat);
            rest = rest[caps[0].len()..].strip_prefix(" and ").unwrap_or("");
        }
        CategorySet::new(cats).map_err(|e| e.to_string())
    }
}

#[test]
fn generated_references_are_faithful_to_their_tables() {
    let checker = Checker::new();
    for seed in 0..4 {
        let spec = GeneratorSpec {
            seed,
            ..GeneratorSpec::default()
        };
        for inst in synth_generate(&spec, 600).unwrap() {
            let cats = checker.check(&inst).unwrap_or_else(|e| panic!("{}: {e}", inst.id()));
            assert_eq!(cats, inst.categories, "{}: {}", inst.id(), inst.reference);
            assert!(!inst.highlights.is_empty());
        }
    }
}

#[test]
fn category_mix_frequencies_follow_the_spec() {
    let spec = GeneratorSpec::default();
    let n = 10_000;
    let data = synth_generate(&spec, n).unwrap();
    let mut counts: BTreeMap<CategorySet, usize> = BTreeMap::new();
    for inst in &data {
        *counts.entry(inst.categories).or_default() += 1;
    }
    for (set, p) in spec.parsed_mix().unwrap() {
        let freq = counts.get(&set).copied().unwrap_or(0) as f64 / n as f64;
        assert!((freq - p).abs() < 0.01, "{set:?}: {freq} vs {p}");
    }
}

/// A reference/table-text pair of 100 tokens whose fuzzy ratio is exactly
/// `ratio`: the first `100 − ratio` reference tokens become a stopword.
/// With `superlative`, both sides end in "largest".
fn pair_with_ratio(ratio: usize, superlative: bool) -> (String, String) {
    let mut table: Vec<String> = (0..100)
        .map(|i| format!("q{}{}", (b'a' + (i / 26) as u8) as char, (b'a' + (i % 26) as u8) as char))
        .collect();
    if superlative {
        table[99] = "largest".into();
    }
    let mut reference = table.clone();
    for tok in reference.iter_mut().take(100 - ratio) {
        *tok = "the".into();
    }
    (reference.join(" "), table.join(" "))
}

#[test]
fn infotabs_thresholds() {
    use HeuristicLabel::*;
    for (ratio, want) in [
        (74, AnalyticalCandidate),
        (75, Unlabeled),
        (78, Unlabeled),
        (80, Unlabeled),
        (81, DescriptiveCandidate),
    ] {
        let (r, t) = pair_with_ratio(ratio, false);
        let v = classify_heuristic(&r, &t, HeuristicStyle::Infotabs);
        assert_eq!(v.ratio as usize, ratio);
        assert_eq!(v.label, want, "ratio {ratio}");
    }
}

#[test]
fn totto_thresholds() {
    use HeuristicLabel::*;
    for (ratio, plain, with_superlative) in [
        (79, AnalyticalCandidate, AnalyticalCandidate),
        (80, DescriptiveCandidate, AnalyticalCandidate),
        (84, DescriptiveCandidate, AnalyticalCandidate),
        (85, DescriptiveCandidate, DescriptiveCandidate),
    ] {
        for (sup, want) in [(false, plain), (true, with_superlative)] {
            let (r, t) = pair_with_ratio(ratio, sup);
            let v = classify_heuristic(&r, &t, HeuristicStyle::Totto);
            assert_eq!(v.ratio as usize, ratio);
            assert_eq!(v.label, want, "ratio {ratio}, superlative {sup}");
        }
    }
}

#[test]
fn totto_flags_unseen_content_words_at_any_ratio() {
    let (mut r, t) = pair_with_ratio(99, false);
    r = r.replacen("the", "zebra", 1);
    let v = classify_heuristic(&r, &t, HeuristicStyle::Totto);
    assert_eq!(v.ratio, 99);
    assert_eq!(v.label, HeuristicLabel::AnalyticalCandidate);
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "the", "7", "x,", "B"]), 0..8).prop_map(|w| w.join(" "))
}

fn content(s: &str) -> Vec<String> {
    tokenize(s)
        .into_iter()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .collect()
}

proptest! {
    // sequences stay far below 200 tokens, where half-up rounding would
    // lift a single edit to 100
    #[test]
    fn fuzzy_ratio_is_symmetric_bounded_and_exact_at_100(a in sentence(), b in sentence()) {
        let r = fuzzy_ratio(&a, &b);
        prop_assert_eq!(r, fuzzy_ratio(&b, &a));
        prop_assert!(r <= 100);
        prop_assert_eq!(r == 100, content(&a) == content(&b));
        prop_assert_eq!(fuzzy_ratio(&a, &a), 100);
    }
}
