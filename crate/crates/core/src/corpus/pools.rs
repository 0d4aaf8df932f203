// SPDX-License-Identifier: MIT OR Apache-2.0

//! Entity pools with globally unique leading tokens.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};

/// Letters of a synthetic word that form its leading token.
pub const HEAD_LEN: usize = 2;

/// Largest count accepted for any pool.
pub const MAX_POOL: usize = 10_000;

/// An occupational field linking majors to company types.
pub struct Field {
    pub name: &'static str,
    pub majors: &'static [&'static str],
    pub postfixes: &'static [&'static str],
}

pub const FIELDS: [Field; 6] = [
    Field {
        name: "finance",
        majors: &["Economics", "Finance", "Accounting"],
        postfixes: &["Capital", "Financial Group"],
    },
    Field {
        name: "technology",
        majors: &["Computer Science", "Software Engineering", "Mathematics"],
        postfixes: &["Technologies", "Software Inc."],
    },
    Field {
        name: "science",
        majors: &["Physics", "Chemistry", "Biology"],
        postfixes: &["Research Lab", "Laboratories"],
    },
    Field {
        name: "engineering",
        majors: &["Mechanical Engineering", "Electrical Engineering", "Civil Engineering"],
        postfixes: &["Electric Inc.", "Engineering Works"],
    },
    Field {
        name: "media",
        majors: &["Journalism", "Communications", "Film Studies"],
        postfixes: &["Media", "Studios"],
    },
    Field {
        name: "health",
        majors: &["Medicine", "Nursing", "Pharmacology"],
        postfixes: &["Health", "Pharmaceuticals"],
    },
];

pub const WORK_PLACES: [&str; 12] = [
    "Palo Alto, California, USA",
    "Austin, Texas, USA",
    "Seattle, Washington, USA",
    "Boston, Massachusetts, USA",
    "Chicago, Illinois, USA",
    "Toronto, Ontario, Canada",
    "London, England, UK",
    "Berlin, Germany",
    "Paris, France",
    "Tokyo, Japan",
    "Sydney, Australia",
    "Zurich, Switzerland",
];

pub const FIRST_NAMES: [&str; 50] = [
    "Niels", "Amara", "Bruno", "Clara", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Ingrid",
    "Jonas", "Kira", "Lorenzo", "Maren", "Nikolai", "Olga", "Pavel", "Quinn", "Rosa", "Stefan",
    "Tamsin", "Ulrich", "Vera", "Wendell", "Xenia", "Yusuf", "Zelda", "Anselm", "Beatrix", "Cyril",
    "Delphine", "Emil", "Fiona", "Gideon", "Hedda", "Ivo", "Johanna", "Kasimir", "Leona", "Matthias",
    "Nadia", "Oskar", "Petra", "Rafael", "Sabine", "Tobias", "Ursula", "Viktor", "Wilma", "Yannick",
];

pub const LAST_NAMES: [&str; 50] = [
    "Cavalli", "Brandt", "Okafor", "Lindqvist", "Moreau", "Novak", "Petrov", "Quintero", "Rossi", "Sato",
    "Tanaka", "Varga", "Weber", "Yilmaz", "Zimmer", "Abbott", "Bianchi", "Castell", "Delacroix", "Engel",
    "Fischer", "Gallo", "Hartmann", "Ivanova", "Jansen", "Keller", "Larsen", "Marchetti", "Nilsson", "Olsen",
    "Pereira", "Ricci", "Schmidt", "Torres", "Ulloa", "Vogel", "Walsh", "Xavier", "Young", "Zorn",
    "Albrecht", "Borg", "Costa", "Dietrich", "Eriksen", "Ferrari", "Grimaldi", "Holm", "Ibsen", "Jensen",
];

/// Requested pool sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolCounts {
    pub birth_places: usize,
    pub universities: usize,
    pub companies: usize,
    pub names: usize,
}

impl Default for PoolCounts {
    fn default() -> Self {
        Self {
            birth_places: 50,
            universities: 25,
            companies: 32,
            names: FIRST_NAMES.len() * LAST_NAMES.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityPools {
    pub birth_places: Vec<String>,
    pub universities: Vec<String>,
    pub companies: Vec<String>,
    pub majors: Vec<String>,
    pub work_places: Vec<String>,
    pub names: Vec<String>,
    /// Every randomly generated word, in generation order. Each contributes
    /// a distinct leading token.
    pub synthetic_words: Vec<String>,
}

/// Words that appear in the fixed parts of the corpus; synthetic words must
/// avoid them.
pub(crate) fn fixed_words() -> HashSet<String> {
    let mut words = HashSet::new();
    let mut add = |s: &str| {
        for w in s.split(|c: char| !c.is_ascii_alphabetic()).filter(|w| !w.is_empty()) {
            words.insert(w.to_ascii_lowercase());
        }
    };
    add(super::template::TEMPLATE_WORDS);
    for f in &FIELDS {
        f.majors.iter().for_each(|m| add(m));
        f.postfixes.iter().for_each(|p| add(p));
    }
    WORK_PLACES.iter().for_each(|w| add(w));
    FIRST_NAMES.iter().chain(LAST_NAMES.iter()).for_each(|n| add(n));
    super::template::MONTHS.iter().for_each(|m| add(m));
    add("University of");
    words
}

/// The field a company belongs to, read off its postfix.
pub fn company_field(company: &str) -> Option<usize> {
    FIELDS
        .iter()
        .position(|f| f.postfixes.iter().any(|p| company.ends_with(&format!(" {p}"))))
}

pub fn major_field(major: &str) -> Option<usize> {
    FIELDS.iter().position(|f| f.majors.contains(&major))
}

/// The word inside an attribute value whose leading token identifies it.
pub fn distinctive_word(value: &str) -> &str {
    let rest = value.strip_prefix("University of ").unwrap_or(value);
    rest.split([' ', ',']).next().unwrap_or(rest)
}

/// Byte offset of [`distinctive_word`] within `value`.
pub fn distinctive_offset(value: &str) -> usize {
    if value.starts_with("University of ") {
        "University of ".len()
    } else {
        0
    }
}

struct WordFactory {
    rng: ChaCha8Rng,
    heads: BTreeSet<String>,
    forbidden: HashSet<String>,
    words: Vec<String>,
    attempts: usize,
    budget: usize,
}

impl WordFactory {
    fn next(&mut self, requested: usize) -> Result<String> {
        loop {
            if self.attempts >= self.budget {
                return Err(ProbeError::UnsatisfiableUniqueness {
                    requested,
                    generated: self.words.len(),
                    attempts: self.attempts,
                });
            }
            self.attempts += 1;
            let len = self.rng.gen_range(4..=7);
            let mut w: String = (0..len).map(|_| self.rng.gen_range(b'a'..=b'z') as char).collect();
            w[..1].make_ascii_uppercase();
            let head = w[..HEAD_LEN].to_string();
            if self.heads.contains(&head) || self.forbidden.contains(&w.to_ascii_lowercase()) {
                continue;
            }
            self.heads.insert(head);
            self.words.push(w.clone());
            return Ok(w);
        }
    }
}

/// Generates the three synthetic entity pools plus the fixed pools.
///
/// Every synthetic word (city, country, university name, company name) has a
/// leading token shared with no other synthetic word, so each entity's first
/// distinctive token maps back to exactly one entity and one attribute.
pub fn build_entity_pools(seed: u64, counts: &PoolCounts) -> Result<EntityPools> {
    for (name, n) in [
        ("birth_places", counts.birth_places),
        ("universities", counts.universities),
        ("companies", counts.companies),
        ("names", counts.names),
    ] {
        if n == 0 || n > MAX_POOL {
            return Err(ProbeError::InvalidInput(format!("pool count {name} = {n} must be in 1..={MAX_POOL}")));
        }
    }
    let max_names = FIRST_NAMES.len() * LAST_NAMES.len();
    if counts.names > max_names {
        return Err(ProbeError::PoolExhausted(format!(
            "{} names requested, only {max_names} combinations exist",
            counts.names
        )));
    }

    let n_countries = counts.birth_places.div_ceil(5);
    let total = counts.birth_places + n_countries + counts.universities + counts.companies;
    let mut factory = WordFactory {
        rng: ChaCha8Rng::seed_from_u64(seed),
        heads: BTreeSet::new(),
        forbidden: fixed_words(),
        words: Vec::new(),
        attempts: 0,
        budget: 100 * total + 1000,
    };

    let countries = (0..n_countries)
        .map(|_| factory.next(total))
        .collect::<Result<Vec<_>>>()?;
    let mut birth_places = Vec::with_capacity(counts.birth_places);
    for _ in 0..counts.birth_places {
        let city = factory.next(total)?;
        let country = &countries[factory.rng.gen_range(0..countries.len())];
        birth_places.push(format!("{city}, {country}"));
    }
    let mut universities = Vec::with_capacity(counts.universities);
    for _ in 0..counts.universities {
        universities.push(format!("University of {}", factory.next(total)?));
    }
    let mut companies = Vec::with_capacity(counts.companies);
    for i in 0..counts.companies {
        let word = factory.next(total)?;
        let field = &FIELDS[i % FIELDS.len()];
        let postfix = field.postfixes[factory.rng.gen_range(0..field.postfixes.len())];
        companies.push(format!("{word} {postfix}"));
    }

    let mut names: Vec<String> = FIRST_NAMES
        .iter()
        .flat_map(|f| LAST_NAMES.iter().map(move |l| format!("{f} {l}")))
        .collect();
    names.shuffle(&mut factory.rng);
    names.truncate(counts.names);

    Ok(EntityPools {
        birth_places,
        universities,
        companies,
        majors: FIELDS.iter().flat_map(|f| f.majors.iter().map(|m| m.to_string())).collect(),
        work_places: WORK_PLACES.iter().map(|w| w.to_string()).collect(),
        names,
        synthetic_words: factory.words,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes() {
        let pools = build_entity_pools(7, &PoolCounts::default()).unwrap();
        assert_eq!(pools.birth_places.len(), 50);
        assert_eq!(pools.universities.len(), 25);
        assert_eq!(pools.companies.len(), 32);
    }

    #[test]
    fn singleton_university_pool() {
        let counts = PoolCounts { universities: 1, ..PoolCounts::default() };
        let pools = build_entity_pools(7, &counts).unwrap();
        assert_eq!(pools.universities.len(), 1);
    }

    #[test]
    fn formats() {
        let pools = build_entity_pools(7, &PoolCounts::default()).unwrap();
        assert!(pools.universities.iter().all(|u| u.starts_with("University of ")));
        assert!(pools.companies.iter().all(|c| company_field(c).is_some()));
        assert!(pools.birth_places.iter().all(|b| b.split(", ").count() == 2));
    }

    #[test]
    fn too_many_entities_is_unsatisfiable() {
        let counts = PoolCounts { birth_places: 10_000, ..PoolCounts::default() };
        assert!(matches!(
            build_entity_pools(1, &counts),
            Err(ProbeError::UnsatisfiableUniqueness { .. })
        ));
    }

    #[test]
    fn zero_count_rejected() {
        let counts = PoolCounts { companies: 0, ..PoolCounts::default() };
        assert!(build_entity_pools(1, &counts).is_err());
    }

    #[test]
    fn deterministic() {
        let a = build_entity_pools(11, &PoolCounts::default()).unwrap();
        let b = build_entity_pools(11, &PoolCounts::default()).unwrap();
        assert_eq!(a, b);
        let c = build_entity_pools(12, &PoolCounts::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn distinctive_word_of_values() {
        assert_eq!(distinctive_word("University of Ukopnwm"), "Ukopnwm");
        assert_eq!(distinctive_word("Ivlpfv Capital"), "Ivlpfv");
        assert_eq!(distinctive_offset("University of Ukopnwm"), 14);
    }
}
