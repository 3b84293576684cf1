//! Table data model, linearization, question templates and the word-level
//! vocabulary.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reasoning categories. Discriminants double as codebook slot indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Descriptive = 0,
    Tabular = 1,
    Numerical = 2,
    Temporal = 3,
    Commonsense = 4,
    Entity = 5,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Descriptive,
        Category::Tabular,
        Category::Numerical,
        Category::Temporal,
        Category::Commonsense,
        Category::Entity,
    ];

    /// The five analytical categories in canonical template order.
    pub const ANALYTICAL: [Category; 5] = [
        Category::Tabular,
        Category::Numerical,
        Category::Temporal,
        Category::Commonsense,
        Category::Entity,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Descriptive => "descriptive",
            Category::Tabular => "tabular",
            Category::Numerical => "numerical",
            Category::Temporal => "temporal",
            Category::Commonsense => "commonsense",
            Category::Entity => "entity",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown reasoning category `{}`", s.trim())))
    }
}

/// Non-empty set of categories; `descriptive` never mixes with the others.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CategorySet(u8);

impl CategorySet {
    pub fn new(cats: impl IntoIterator<Item = Category>) -> Result<Self> {
        let bits = cats.into_iter().fold(0u8, |acc, c| acc | (1 << c.index()));
        CategorySet::from_bits(bits)
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        let set = CategorySet(bits);
        if bits == 0 || bits >= 1 << 6 {
            return Err(Error::Data(format!("invalid category bits {bits:#b}")));
        }
        if set.contains(Category::Descriptive) && bits != 1 {
            return Err(Error::Data(
                "descriptive cannot be combined with analytical categories".into(),
            ));
        }
        Ok(set)
    }

    pub fn single(c: Category) -> Self {
        CategorySet(1 << c.index())
    }

    pub fn descriptive() -> Self {
        CategorySet::single(Category::Descriptive)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, c: Category) -> bool {
        self.0 & (1 << c.index()) != 0
    }

    pub fn is_descriptive(self) -> bool {
        self.contains(Category::Descriptive)
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Members in index order (descriptive first, then canonical analytical order).
    pub fn iter(self) -> impl Iterator<Item = Category> {
        Category::ALL.into_iter().filter(move |c| self.contains(*c))
    }

    pub fn kind(self) -> Kind {
        if self.is_descriptive() {
            Kind::Descriptive
        } else {
            Kind::Analytical
        }
    }

    /// Six-slot activation mask in [`Category::index`] order.
    pub fn mask(self) -> [bool; 6] {
        let mut m = [false; 6];
        for c in self.iter() {
            m[c.index()] = true;
        }
        m
    }

    /// Parses a comma-separated tag list such as `numerical,temporal`.
    pub fn parse_list(s: &str) -> Result<Self> {
        let cats = s
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(Category::from_str)
            .collect::<Result<Vec<_>>>()?;
        CategorySet::new(cats).map_err(|e| Error::Config(e.to_string()))
    }
}

impl fmt::Debug for CategorySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl fmt::Display for CategorySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(Category::as_str).collect();
        f.write_str(&names.join(","))
    }
}

impl Serialize for CategorySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for CategorySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let cats = Vec::<Category>::deserialize(d)?;
        CategorySet::new(cats).map_err(serde::de::Error::custom)
    }
}

/// Analytical vs descriptive, the binary label of the CI classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Descriptive = 0,
    Analytical = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub id: String,
    pub title: String,
    pub section_title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn validate(&self) -> Result<()> {
        if self.headers.is_empty() {
            return Err(Error::Data(format!("table {}: no headers", self.id)));
        }
        if let Some((i, r)) = self
            .rows
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != self.headers.len())
        {
            return Err(Error::Data(format!(
                "table {}: row {i} has {} cells, expected {}",
                self.id,
                r.len(),
                self.headers.len()
            )));
        }
        Ok(())
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<&str> {
        self.rows.get(row)?.get(col).map(String::as_str)
    }

    pub fn column_index(&self, header: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == header)
    }
}

/// Highlighted data cells as 0-based (row, col).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighlightSet(pub Vec<(usize, usize)>);

impl HighlightSet {
    pub fn validate(&self, table: &Table) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for &(r, c) in &self.0 {
            if r >= table.rows.len() || c >= table.headers.len() {
                return Err(Error::Data(format!(
                    "highlight ({r},{c}) outside {}x{} table {}",
                    table.rows.len(),
                    table.headers.len(),
                    table.id
                )));
            }
            if !seen.insert((r, c)) {
                return Err(Error::Data(format!("duplicate highlight ({r},{c})")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.0.contains(&(r, c))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Cell values in highlight order.
    pub fn values<'t>(&self, table: &'t Table) -> Vec<&'t str> {
        self.0.iter().filter_map(|&(r, c)| table.cell(r, c)).collect()
    }
}

/// One table-to-text example: (table, highlights, categories, reference).
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub table: Table,
    pub highlights: HighlightSet,
    pub reference: String,
    pub categories: CategorySet,
    pub split: Split,
}

/// Flat JSONL layout of an [`Instance`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    id: String,
    title: String,
    section_title: String,
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
    highlighted: Vec<[usize; 2]>,
    reference: String,
    categories: CategorySet,
    split: Split,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        self.table.validate()?;
        self.highlights.validate(&self.table)?;
        if self.reference.trim().is_empty() {
            return Err(Error::Data(format!("instance {}: empty reference", self.table.id)));
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.table.id
    }

    pub fn kind(&self) -> Kind {
        self.categories.kind()
    }

    pub fn to_json_line(&self) -> String {
        let rec = InstanceRecord {
            id: self.table.id.clone(),
            title: self.table.title.clone(),
            section_title: self.table.section_title.clone(),
            headers: self.table.headers.clone(),
            rows: self.table.rows.clone(),
            highlighted: self.highlights.0.iter().map(|&(r, c)| [r, c]).collect(),
            reference: self.reference.clone(),
            categories: self.categories,
            split: self.split,
        };
        serde_json::to_string(&rec).expect("instance records always serialize")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let rec: InstanceRecord =
            serde_json::from_str(line).map_err(|e| Error::Data(format!("bad instance record: {e}")))?;
        let inst = Instance {
            table: Table {
                id: rec.id,
                title: rec.title,
                section_title: rec.section_title,
                headers: rec.headers,
                rows: rec.rows,
            },
            highlights: HighlightSet(rec.highlighted.into_iter().map(|[r, c]| (r, c)).collect()),
            reference: rec.reference,
            categories: rec.categories,
            split: rec.split,
        };
        inst.validate()?;
        Ok(inst)
    }
}

pub fn read_jsonl(text: &str) -> Result<Vec<Instance>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            Instance::from_json_line(l).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn write_jsonl(instances: &[Instance]) -> String {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&inst.to_json_line());
        out.push('\n');
    }
    out
}

const RESERVED: [&str; 7] = ["TITLE :", "SECTION :", "HEAD :", "ROW", "|", "<hl>", "</hl>"];

/// Prefixes every reserved atom inside a cell value with `\`.
pub fn escape_value(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    let mut i = 0;
    'outer: while i < value.len() {
        for atom in RESERVED {
            if value[i..].starts_with(atom) {
                out.push('\\');
                out.push_str(atom);
                i += atom.len();
                continue 'outer;
            }
        }
        let ch = value[i..].chars().next().expect("in bounds");
        out.push(ch);
        i += ch.len_utf8();
    }
    out
}

/// Renders a table in the TaPEx style:
/// `TITLE : t SECTION : s HEAD : h1 | h2 ROW 1 : c11 | <hl> c12 </hl> ...`
pub fn linearize(table: &Table, highlights: &HighlightSet) -> Result<String> {
    table.validate()?;
    highlights.validate(table)?;
    let mut parts: Vec<String> = vec![
        "TITLE :".into(),
        escape_value(&table.title),
        "SECTION :".into(),
        escape_value(&table.section_title),
        "HEAD :".into(),
    ];
    let head: Vec<String> = table.headers.iter().map(|h| escape_value(h)).collect();
    parts.push(head.join(" | "));
    for (r, row) in table.rows.iter().enumerate() {
        parts.push(format!("ROW {} :", r + 1));
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| {
                let v = escape_value(v);
                if highlights.contains(r, c) {
                    format!("<hl> {v} </hl>")
                } else {
                    v
                }
            })
            .collect();
        parts.push(cells.join(" | "));
    }
    Ok(parts
        .into_iter()
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(" "))
}

/// How the question carries (or omits) reasoning tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    NoTags,
    Tags,
    ReTag,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "notags" => Ok(Strategy::NoTags),
            "tags" => Ok(Strategy::Tags),
            "retag" => Ok(Strategy::ReTag),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

pub fn build_question(strategy: Strategy, categories: CategorySet) -> String {
    match strategy {
        Strategy::NoTags => "Generate a sentence based on the following table?".to_string(),
        Strategy::Tags | Strategy::ReTag if categories.is_descriptive() => {
            "Generate a descriptive sentence based on the following table?".to_string()
        }
        Strategy::Tags | Strategy::ReTag => {
            let list: Vec<&str> = Category::ANALYTICAL
                .into_iter()
                .filter(|c| categories.contains(*c))
                .map(Category::as_str)
                .collect();
            format!(
                "Generate a sentence with {} reasoning based on the following table?",
                list.join(", ")
            )
        }
    }
}

pub fn build_input(question: &str, linearized: &str) -> String {
    format!("{question} {linearized}")
}

/// Lowercases and splits on whitespace; within a word, runs of
/// alphanumerics stay together and every other character is its own token.
/// `<hl>` and `</hl>` are kept whole.
pub fn tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in s.split_whitespace() {
        if word == "<hl>" || word == "</hl>" {
            out.push(word.to_string());
            continue;
        }
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                cur.extend(ch.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const HL_OPEN: usize = 4;
pub const HL_CLOSE: usize = 5;
const SPECIALS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<unk>", "<hl>", "</hl>"];

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build(corpus: &[String], min_count: usize) -> Vocab {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in corpus {
            for t in tokenize(s) {
                if !SPECIALS.contains(&t.as_str()) {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, n)| *n >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Vocab::from_tokens(tokens).expect("specials and counted tokens are distinct")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS.map(String::from) {
            return Err(Error::Format("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::range("decode_text", format!("token id {id} >= {}", self.len())))
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// `<bos> tokens… <eos>`.
    pub fn encode(&self, s: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(tokenize(s).iter().map(|t| self.id(t)));
        ids.push(EOS);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            let tok = self.token(id)?;
            if !Vocab::is_special(id) {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(headers: &[&str], rows: &[&[&str]]) -> Table {
        Table {
            id: "t0".into(),
            title: "t".into(),
            section_title: "s".into(),
            headers: headers.iter().map(|s| s.to_string()).collect(),
            rows: rows
                .iter()
                .map(|r| r.iter().map(|s| s.to_string()).collect())
                .collect(),
        }
    }

    #[test]
    fn linearize_single_highlight() {
        let t = table(&["Month"], &[&["June"]]);
        let s = linearize(&t, &HighlightSet(vec![(0, 0)])).unwrap();
        assert_eq!(s, "TITLE : t SECTION : s HEAD : Month ROW 1 : <hl> June </hl>");
    }

    #[test]
    fn linearize_two_rows_no_highlight() {
        let t = table(&["a", "b"], &[&["1", "2"], &["3", "4"]]);
        let s = linearize(&t, &HighlightSet::default()).unwrap();
        assert!(!s.contains("<hl>"));
        assert_eq!(s.matches("ROW ").count(), 2);
        assert!(s.ends_with("ROW 1 : 1 | 2 ROW 2 : 3 | 4"));
    }

    #[test]
    fn linearize_rejects_out_of_range() {
        let t = table(&["a"], &[&["1"]]);
        assert!(matches!(
            linearize(&t, &HighlightSet(vec![(1, 0)])),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn escaping_prefixes_reserved_atoms() {
        assert_eq!(escape_value("a | b"), "a \\| b");
        assert_eq!(escape_value("ROWS <hl>"), "\\ROWS \\<hl>");
        assert_eq!(escape_value("plain"), "plain");
    }

    #[test]
    fn question_templates() {
        let num = CategorySet::single(Category::Numerical);
        assert_eq!(
            build_question(Strategy::Tags, num),
            "Generate a sentence with numerical reasoning based on the following table?"
        );
        assert_eq!(
            build_question(Strategy::Tags, CategorySet::descriptive()),
            "Generate a descriptive sentence based on the following table?"
        );
        let two = CategorySet::new([Category::Temporal, Category::Numerical]).unwrap();
        assert!(build_question(Strategy::ReTag, two).contains("with numerical, temporal reasoning"));
        assert_eq!(
            build_question(Strategy::NoTags, two),
            "Generate a sentence based on the following table?"
        );
    }

    #[test]
    fn build_input_concatenates() {
        let s = build_input("Q?", "HEAD : a ROW 1 : b");
        assert_eq!(s, "Q? HEAD : a ROW 1 : b");
        assert_eq!(s.len(), 2 + 1 + 18);
    }

    #[test]
    fn category_set_rules() {
        assert!(CategorySet::new([]).is_err());
        assert!(CategorySet::new([Category::Descriptive, Category::Entity]).is_err());
        assert_eq!(
            CategorySet::parse_list("temporal,numerical").unwrap().to_string(),
            "numerical,temporal"
        );
        let err = CategorySet::parse_list("numerical,bogus").unwrap_err().to_string();
        assert!(err.contains("bogus"));
    }

    #[test]
    fn vocab_ordering_and_min_count() {
        let v = Vocab::build(&["a a b".to_string()], 1);
        assert_eq!(&v.tokens()[6..], &["a", "b"]);
        let v2 = Vocab::build(&["a a b".to_string()], 2);
        assert_eq!(&v2.tokens()[6..], &["a"]);
        assert_eq!(v2.id("b"), UNK);
        assert_eq!(v, Vocab::build(&["a a b".to_string()], 1));
    }

    #[test]
    fn encode_decode() {
        let v = Vocab::build(&["a b".to_string()], 1);
        assert_eq!(v.decode(&v.encode("a b")).unwrap(), "a b");
        assert_eq!(v.encode(""), vec![BOS, EOS]);
        assert_eq!(v.encode("zzz")[1], 3);
        assert!(matches!(v.decode(&[999]), Err(Error::Range { .. })));
    }

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(tokenize("Hello, World!"), vec!["hello", ",", "world", "!"]);
        assert_eq!(tokenize("<hl> 3.5 </hl>"), vec!["<hl>", "3", ".", "5", "</hl>"]);
    }

    #[test]
    fn jsonl_roundtrip_and_validation() {
        let inst = Instance {
            table: table(&["a", "b"], &[&["1", "2"]]),
            highlights: HighlightSet(vec![(0, 1)]),
            reference: "b is 2".into(),
            categories: CategorySet::single(Category::Numerical),
            split: Split::Train,
        };
        let line = inst.to_json_line();
        assert!(line.contains("\"highlighted\":[[0,1]]"));
        assert!(line.contains("\"categories\":[\"numerical\"]"));
        assert_eq!(Instance::from_json_line(&line).unwrap(), inst);
        let bad = line.replace("[[0,1]]", "[[3,1]]");
        assert!(Instance::from_json_line(&bad).is_err());
        let bad = line.replace("\"numerical\"", "\"descriptive\",\"numerical\"");
        assert!(Instance::from_json_line(&bad).is_err());
    }
}
