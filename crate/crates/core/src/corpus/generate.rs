// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pools::{company_field, major_field, EntityPools, FIELDS};
use super::template::MONTHS;
use super::{AttributeType, Attributes, BiographyRecord, CorpusPair, Variant};
use crate::error::{ProbeError, Result};

const RESAMPLE_BUDGET: usize = 10_000;

struct Sampler<'a> {
    pools: &'a EntityPools,
    /// Companies per field, as pool indices.
    by_field: Vec<Vec<usize>>,
    /// Majors whose field has at least one company.
    majors: Vec<usize>,
}

impl<'a> Sampler<'a> {
    fn new(pools: &'a EntityPools) -> Result<Self> {
        for (name, len) in [
            ("birth_places", pools.birth_places.len()),
            ("universities", pools.universities.len()),
            ("companies", pools.companies.len()),
            ("majors", pools.majors.len()),
            ("work_places", pools.work_places.len()),
        ] {
            if len == 0 {
                return Err(ProbeError::PoolExhausted(format!("pool {name} is empty")));
            }
        }
        let mut by_field = vec![Vec::new(); FIELDS.len()];
        for (i, c) in pools.companies.iter().enumerate() {
            let f = company_field(c)
                .ok_or_else(|| ProbeError::InvalidInput(format!("company {c:?} has no known postfix")))?;
            by_field[f].push(i);
        }
        let majors: Vec<usize> = pools
            .majors
            .iter()
            .enumerate()
            .filter(|(_, m)| major_field(m).is_some_and(|f| !by_field[f].is_empty()))
            .map(|(i, _)| i)
            .collect();
        if majors.is_empty() {
            return Err(ProbeError::PoolExhausted("no major has a company in its field".into()));
        }
        Ok(Self { pools, by_field, majors })
    }

    fn attributes(&self, rng: &mut ChaCha8Rng) -> Attributes {
        let p = self.pools;
        let month = MONTHS[rng.gen_range(0..12)];
        let day = rng.gen_range(1..=28);
        let year = rng.gen_range(1940..=1999);
        let major = &p.majors[self.majors[rng.gen_range(0..self.majors.len())]];
        let field = major_field(major).expect("filtered majors have fields");
        let companies = &self.by_field[field];
        Attributes {
            birth_date: format!("{month} {day}, {year}"),
            birth_place: p.birth_places[rng.gen_range(0..p.birth_places.len())].clone(),
            university: p.universities[rng.gen_range(0..p.universities.len())].clone(),
            major: major.clone(),
            company: p.companies[companies[rng.gen_range(0..companies.len())]].clone(),
            work_place: p.work_places[rng.gen_range(0..p.work_places.len())].clone(),
        }
    }
}

fn pick<T: Clone>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    items[rng.gen_range(0..items.len())].clone()
}

/// Builds the mixed and clean corpora.
///
/// Persons `0..n_conflicted` get a contradiction; the rest form the clean
/// subset. Whenever the clean subset is nonempty, every value taking part in
/// a conflict (on either side) is also carried by some clean-subset person,
/// so same-model patching always finds a donor.
pub fn generate_corpus(pools: &EntityPools, n_persons: usize, n_conflicted: usize, seed: u64) -> Result<CorpusPair> {
    if n_conflicted > n_persons {
        return Err(ProbeError::InvalidInput(format!(
            "n_conflicted {n_conflicted} exceeds n_persons {n_persons}"
        )));
    }
    if n_persons > pools.names.len() {
        return Err(ProbeError::PoolExhausted(format!(
            "{n_persons} persons requested, name pool has {}",
            pools.names.len()
        )));
    }
    let sampler = Sampler::new(pools)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut attrs: Vec<Attributes> = (0..n_persons).map(|_| sampler.attributes(&mut rng)).collect();

    let clean_subset = &attrs[n_conflicted..];
    let donors_exist = !clean_subset.is_empty();
    let covered_universities: BTreeSet<String> = clean_subset.iter().map(|a| a.university.clone()).collect();
    let covered_companies: BTreeSet<String> = clean_subset.iter().map(|a| a.company.clone()).collect();
    let university_ok = |u: &str| !donors_exist || covered_universities.contains(u);
    let company_ok = |c: &str| !donors_exist || covered_companies.contains(c);

    let mut contradictions = Vec::with_capacity(n_conflicted);
    #[allow(clippy::needless_range_loop)]
    for person in 0..n_conflicted {
        let attribute = if rng.gen_bool(0.5) {
            AttributeType::University
        } else {
            AttributeType::Company
        };
        let mut budget = RESAMPLE_BUDGET;
        loop {
            let gt = &attrs[person];
            let alternatives: Vec<String> = match attribute {
                AttributeType::University if university_ok(&gt.university) => pools
                    .universities
                    .iter()
                    .filter(|u| **u != gt.university && university_ok(u))
                    .cloned()
                    .collect(),
                AttributeType::Company if company_ok(&gt.company) => {
                    let field = company_field(&gt.company).expect("pool companies have fields");
                    sampler.by_field[field]
                        .iter()
                        .map(|&i| &pools.companies[i])
                        .filter(|c| **c != gt.company && company_ok(c))
                        .cloned()
                        .collect()
                }
                _ => Vec::new(),
            };
            if !alternatives.is_empty() {
                let mut alt = gt.clone();
                match attribute {
                    AttributeType::University => {
                        alt.university = pick(&mut rng, &alternatives);
                        let field = &FIELDS[major_field(&gt.major).expect("major has a field")];
                        let majors: Vec<&str> = field.majors.iter().copied().filter(|m| *m != gt.major).collect();
                        alt.major = pick(&mut rng, &majors).to_string();
                    }
                    AttributeType::Company => {
                        alt.company = pick(&mut rng, &alternatives);
                        let places: Vec<&String> = pools.work_places.iter().filter(|w| **w != gt.work_place).collect();
                        if let Some(w) = (!places.is_empty()).then(|| pick(&mut rng, &places)) {
                            alt.work_place = w.clone();
                        }
                    }
                }
                contradictions.push((attribute, alt));
                break;
            }
            budget -= 1;
            if budget == 0 {
                return Err(ProbeError::PoolExhausted(format!(
                    "no realizable {attribute} conflict for person {person} after {RESAMPLE_BUDGET} resamples"
                )));
            }
            attrs[person] = sampler.attributes(&mut rng);
        }
    }

    let clean: Vec<BiographyRecord> = attrs
        .into_iter()
        .enumerate()
        .map(|(i, a)| BiographyRecord {
            person_id: i,
            person_name: pools.names[i].clone(),
            attributes: a,
            variant: Variant::GroundTruth,
            conflict_attribute: None,
        })
        .collect();
    let mut mix = clean.clone();
    for (i, (attribute, a)) in contradictions.into_iter().enumerate() {
        mix.push(BiographyRecord {
            person_id: i,
            person_name: pools.names[i].clone(),
            attributes: a,
            variant: Variant::Contradiction,
            conflict_attribute: Some(attribute),
        });
    }
    Ok(CorpusPair {
        mix,
        clean,
        n_persons,
        n_conflicted,
        seed,
    })
}
