//! Synthetic reasoning-tagged corpus, data splits, and the fuzzy-match
//! analytical/descriptive filter.
//!
//! References are produced from templates over the generated table, so the
//! category labels are exact by construction. Two table themes exist: a
//! player roster (names, teams, active years, goals) and a monthly climate
//! table (month, high/low temperature, rainfall). Each category generator
//! needs a theme that has the columns it reasons over.

mod heuristic;
pub mod lexicon;

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use heuristic::{
    classify_heuristic, fuzzy_ratio, has_comparative_signal, heuristic_table_text, is_stopword,
    HeuristicLabel, HeuristicStyle, HeuristicVerdict, Trigger,
};

use crate::error::{Error, Result};
use crate::numerics::SeedStreams;
use crate::tables::{Category, CategorySet, HighlightSet, Instance, Split, Table};
use lexicon::{alias_lexicon, CITIES, MONTHS, TEAMS};

/// Sampling recipe for [`synth_generate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    /// Category set (comma-joined, e.g. `numerical,temporal`) → probability.
    pub mix: BTreeMap<String, f64>,
    /// Inclusive row-count range.
    pub rows: (usize, usize),
    /// Inclusive range for goal counts.
    pub goals: (i64, i64),
    /// Inclusive range for career start years.
    pub years: (i64, i64),
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        let mix = [
            ("descriptive", 0.25),
            ("tabular", 0.07),
            ("numerical", 0.08),
            ("temporal", 0.07),
            ("commonsense", 0.07),
            ("entity", 0.07),
            ("numerical,temporal", 0.08),
            ("temporal,entity", 0.07),
            ("numerical,commonsense", 0.07),
            ("tabular,numerical", 0.06),
            ("numerical,temporal,entity", 0.06),
            ("tabular,numerical,commonsense", 0.05),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        GeneratorSpec {
            mix,
            rows: (3, 5),
            goals: (1, 60),
            years: (1980, 2010),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Theme {
    Roster,
    Climate,
}

impl Theme {
    fn supports(self, c: Category) -> bool {
        match self {
            Theme::Roster => !matches!(c, Category::Commonsense),
            Theme::Climate => !matches!(c, Category::Temporal | Category::Entity),
        }
    }

    fn for_set(set: CategorySet) -> Vec<Theme> {
        [Theme::Roster, Theme::Climate]
            .into_iter()
            .filter(|t| set.iter().all(|c| t.supports(c)))
            .collect()
    }
}

impl GeneratorSpec {
    /// Parsed mix entries in key order.
    pub fn parsed_mix(&self) -> Result<Vec<(CategorySet, f64)>> {
        let mut out = Vec::with_capacity(self.mix.len());
        for (k, &p) in &self.mix {
            let set = CategorySet::parse_list(k)?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("mix probability {p} for `{k}` outside [0,1]")));
            }
            if Theme::for_set(set).is_empty() {
                return Err(Error::Config(format!(
                    "no table theme supports the category set `{k}` together"
                )));
            }
            out.push((set, p));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let mix = self.parsed_mix()?;
        let total: f64 = mix.iter().map(|(_, p)| p).sum();
        if mix.is_empty() || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mix probabilities sum to {total}, expected 1")));
        }
        if self.rows.0 < 3 || self.rows.0 > self.rows.1 || self.rows.1 > MONTHS.len() {
            return Err(Error::Config(format!("row range {:?} must lie in 3..=12", self.rows)));
        }
        if self.goals.0 >= self.goals.1 || self.goals.1 - self.goals.0 + 1 < self.rows.1 as i64 {
            return Err(Error::Config(format!(
                "goal range {:?} too narrow for distinct values",
                self.goals
            )));
        }
        if self.years.0 >= self.years.1 {
            return Err(Error::Config(format!("degenerate year range {:?}", self.years)));
        }
        Ok(())
    }
}

/// `n` instances drawn from the spec's mix; deterministic in `spec.seed`.
pub fn synth_generate(spec: &GeneratorSpec, n: usize) -> Result<Vec<Instance>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("synth_generate needs n > 0".into()));
    }
    let mix = spec.parsed_mix()?;
    let mut rng = SeedStreams::new(spec.seed).stream("data");
    (0..n)
        .map(|i| {
            let set = sample_set(&mix, &mut rng);
            let themes = Theme::for_set(set);
            let theme = *themes.choose(&mut rng).expect("validated non-empty");
            let id = format!("synth-{}-{i:06}", spec.seed);
            generate_one(spec, theme, set, id, &mut rng)
        })
        .collect()
}

fn sample_set(mix: &[(CategorySet, f64)], rng: &mut ChaCha8Rng) -> CategorySet {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(set, p) in mix {
        acc += p;
        if u < acc {
            return set;
        }
    }
    mix.last().expect("non-empty mix").0
}

/// `k` distinct integers from `lo..=hi`.
fn distinct(rng: &mut ChaCha8Rng, lo: i64, hi: i64, k: usize) -> Vec<i64> {
    let mut pool: Vec<i64> = (lo..=hi).collect();
    pool.shuffle(rng);
    pool.truncate(k);
    pool
}

struct Draft {
    table: Table,
    label_col: usize,
}

fn roster_table(spec: &GeneratorSpec, id: String, rng: &mut ChaCha8Rng) -> Draft {
    let n = rng.random_range(spec.rows.0..=spec.rows.1);
    let mut people = alias_lexicon();
    people.shuffle(rng);
    let goals = distinct(rng, spec.goals.0, spec.goals.1, n);
    let rows = (0..n)
        .map(|r| {
            let start = rng.random_range(spec.years.0..=spec.years.1);
            let end = start + rng.random_range(2..=15);
            vec![
                people[r].full_name(),
                TEAMS[rng.random_range(0..3)].to_string(),
                start.to_string(),
                end.to_string(),
                goals[r].to_string(),
            ]
        })
        .collect();
    Draft {
        table: Table {
            id,
            title: format!("{} sports club", CITIES.choose(rng).expect("non-empty")),
            section_title: "players".into(),
            headers: ["name", "team", "start", "end", "goals"].map(String::from).to_vec(),
            rows,
        },
        label_col: 0,
    }
}

fn climate_table(spec: &GeneratorSpec, id: String, rng: &mut ChaCha8Rng) -> Draft {
    let n = rng.random_range(spec.rows.0..=spec.rows.1);
    let mut months: Vec<usize> = (0..MONTHS.len()).collect();
    months.shuffle(rng);
    months.truncate(n);
    months.sort_unstable();
    let highs = distinct(rng, 5, 40, n);
    let rains = distinct(rng, 10, 200, n);
    let rows = (0..n)
        .map(|r| {
            let low = highs[r] - rng.random_range(3..=10);
            vec![
                MONTHS[months[r]].to_string(),
                highs[r].to_string(),
                low.to_string(),
                rains[r].to_string(),
            ]
        })
        .collect();
    Draft {
        table: Table {
            id,
            title: format!("climate of {}", CITIES.choose(rng).expect("non-empty")),
            section_title: "monthly weather".into(),
            headers: ["month", "high", "low", "rain"].map(String::from).to_vec(),
            rows,
        },
        label_col: 0,
    }
}

fn num(t: &Table, r: usize, c: usize) -> i64 {
    t.rows[r][c].parse().expect("generated numeric cell")
}

fn argmax_by(t: &Table, col: usize, max: bool) -> usize {
    let cmp = |a: &usize, b: &usize| num(t, *a, col).cmp(&num(t, *b, col));
    let rows = 0..t.rows.len();
    if max {
        rows.max_by(cmp).expect("non-empty")
    } else {
        rows.min_by(cmp).expect("non-empty")
    }
}

/// Numeric column reasoned over and its phrase in references.
fn numeric_column(theme: Theme, rng: &mut ChaCha8Rng) -> (usize, &'static str) {
    match theme {
        Theme::Roster => (4, "goals"),
        Theme::Climate => *[(1, "high temperature"), (3, "rainfall")]
            .choose(rng)
            .expect("non-empty"),
    }
}

fn clause(
    cat: Category,
    theme: Theme,
    d: &Draft,
    target: usize,
    rng: &mut ChaCha8Rng,
    hl: &mut Vec<(usize, usize)>,
) -> String {
    let t = &d.table;
    let label = |r: usize| t.rows[r][d.label_col].clone();
    match (cat, theme) {
        (Category::Descriptive, Theme::Roster) => {
            hl.extend([(target, 0), (target, 1), (target, 2), (target, 3)]);
            format!(
                "{} played for the {} from {} to {}",
                label(target),
                t.rows[target][1],
                t.rows[target][2],
                t.rows[target][3]
            )
        }
        (Category::Descriptive, Theme::Climate) => {
            hl.extend([(target, 0), (target, 1), (target, 2)]);
            format!(
                "{} had a high of {} and a low of {}",
                label(target),
                t.rows[target][1],
                t.rows[target][2]
            )
        }
        (Category::Numerical, _) => {
            let (col, phrase) = numeric_column(theme, rng);
            match rng.random_range(0..4) {
                op @ (0 | 1) => {
                    let r = argmax_by(t, col, op == 0);
                    hl.extend([(r, 0), (r, col)]);
                    let word = if op == 0 { "highest" } else { "lowest" };
                    format!("the {word} {phrase} is {} by {}", t.rows[r][col], label(r))
                }
                2 => {
                    hl.extend((0..t.rows.len()).map(|r| (r, col)));
                    let total: i64 = (0..t.rows.len()).map(|r| num(t, r, col)).sum();
                    format!("the total {phrase} is {total}")
                }
                _ => {
                    let mut pair = [target, (target + 1) % t.rows.len()];
                    pair.sort_unstable();
                    let [a, b] = pair;
                    hl.extend([(a, 0), (a, col), (b, 0), (b, col)]);
                    let diff = (num(t, a, col) - num(t, b, col)).abs();
                    format!(
                        "the difference in {phrase} between {} and {} is {diff}",
                        label(a),
                        label(b)
                    )
                }
            }
        }
        (Category::Temporal, _) => {
            hl.extend([(target, 0), (target, 2), (target, 3)]);
            let years = num(t, target, 3) - num(t, target, 2);
            format!("{} was active for {years} years", label(target))
        }
        (Category::Entity, _) => {
            hl.extend([(target, 0), (target, 1)]);
            let alias = lexicon::alias_of(&label(target)).expect("roster names come from the lexicon");
            format!("{alias} played for the {}", t.rows[target][1])
        }
        (Category::Commonsense, _) => {
            let warm = rng.random_bool(0.5);
            let r = argmax_by(t, 1, warm);
            hl.extend([(r, 0), (r, 1)]);
            let word = if warm { "warmest" } else { "coolest" };
            format!("{} was the {word} month", label(r))
        }
        (Category::Tabular, Theme::Roster) => {
            hl.push((target, 1));
            let team = &t.rows[target][1];
            let k = t.rows.iter().filter(|row| &row[1] == team).count();
            format!("{k} of the {} players played for the {team}", t.rows.len())
        }
        (Category::Tabular, Theme::Climate) => {
            let threshold = *[50, 100, 150].choose(rng).expect("non-empty");
            hl.push((target, 0));
            let k = (0..t.rows.len()).filter(|&r| num(t, r, 3) > threshold).count();
            format!(
                "{k} of the {} months had more than {threshold} mm of rain",
                t.rows.len()
            )
        }
    }
}

fn generate_one(
    spec: &GeneratorSpec,
    theme: Theme,
    set: CategorySet,
    id: String,
    rng: &mut ChaCha8Rng,
) -> Result<Instance> {
    let draft = match theme {
        Theme::Roster => roster_table(spec, id, rng),
        Theme::Climate => climate_table(spec, id, rng),
    };
    let target = rng.random_range(0..draft.table.rows.len());
    let mut hl = Vec::new();
    let clauses: Vec<String> = set
        .iter()
        .map(|c| clause(c, theme, &draft, target, rng, &mut hl))
        .collect();
    let mut seen = std::collections::HashSet::new();
    hl.retain(|cell| seen.insert(*cell));
    let inst = Instance {
        table: draft.table,
        highlights: HighlightSet(hl),
        reference: clauses.join(" and "),
        categories: set,
        split: Split::Train,
    };
    inst.validate()?;
    Ok(inst)
}

/// Seeded shuffle then contiguous split. Valid and test take
/// `⌊n·f⌋` instances; the remainder goes to train.
pub fn split(
    instances: Vec<Instance>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<Instance>, Vec<Instance>, Vec<Instance>)> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must sum to 1")));
    }
    let mut all = instances;
    all.shuffle(&mut SeedStreams::new(seed).stream("split"));
    let n = all.len();
    let n_valid = (n as f64 * fv).floor() as usize;
    let n_test = (n as f64 * fs).floor() as usize;
    let n_train = n - n_valid - n_test;
    let mut test = all.split_off(n_train + n_valid);
    let mut valid = all.split_off(n_train);
    let mut train = all;
    for (part, tag) in [(&mut train, Split::Train), (&mut valid, Split::Valid), (&mut test, Split::Test)] {
        part.iter_mut().for_each(|i| i.split = tag);
    }
    Ok((train, valid, test))
}
