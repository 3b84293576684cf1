//! Built-in word lists for the synthetic generator.

/// Formal first name and its common short form.
const NICKNAMES: [(&str, &str); 20] = [
    ("Robert", "Bob"),
    ("William", "Bill"),
    ("Richard", "Rick"),
    ("James", "Jim"),
    ("Thomas", "Tom"),
    ("Michael", "Mike"),
    ("Joseph", "Joe"),
    ("Charles", "Chuck"),
    ("Edward", "Ed"),
    ("Daniel", "Dan"),
    ("Anthony", "Tony"),
    ("Matthew", "Matt"),
    ("Christopher", "Chris"),
    ("Nicholas", "Nick"),
    ("Benjamin", "Ben"),
    ("Samuel", "Sam"),
    ("Alexander", "Alex"),
    ("Jonathan", "Jon"),
    ("Elizabeth", "Liz"),
    ("Katherine", "Kate"),
];

const SURNAMES: [&str; 5] = ["Smith", "Garcia", "Nakamura", "Okafor", "Novak"];

/// One full-name ↔ alias pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AliasEntry {
    pub first: &'static str,
    pub alias_first: &'static str,
    pub surname: &'static str,
}

impl AliasEntry {
    pub fn full_name(&self) -> String {
        format!("{} {}", self.first, self.surname)
    }

    pub fn alias(&self) -> String {
        format!("{} {}", self.alias_first, self.surname)
    }
}

/// All 100 alias entries (every nickname pair crossed with every surname).
pub fn alias_lexicon() -> Vec<AliasEntry> {
    NICKNAMES
        .iter()
        .flat_map(|&(first, alias_first)| {
            SURNAMES.iter().map(move |&surname| AliasEntry {
                first,
                alias_first,
                surname,
            })
        })
        .collect()
}

/// Alias for a full name, if it is in the lexicon.
pub fn alias_of(full_name: &str) -> Option<String> {
    alias_lexicon()
        .into_iter()
        .find(|e| e.full_name() == full_name)
        .map(|e| e.alias())
}

pub const TEAMS: [&str; 6] = ["Eagles", "Lions", "Rovers", "Falcons", "Wolves", "Comets"];

pub const CITIES: [&str; 10] = [
    "Lyon", "Porto", "Osaka", "Lagos", "Denver", "Krakow", "Quito", "Perth", "Tunis", "Oslo",
];

pub const MONTHS: [&str; 12] = [
    "January",
    "February",
    "March",
    "April",
    "May",
    "June",
    "July",
    "August",
    "September",
    "October",
    "November",
    "December",
];
