// SPDX-License-Identifier: MIT OR Apache-2.0

//! Brute-force reference implementations and synthetic data shared by the
//! integration tests. Nothing here calls the library's own metric code.

#![allow(dead_code)]

use conflict_probe::analysis::{ImpactEntry, Sign, TokenImpactRow};
use conflict_probe::corpus::AttributeType;
use conflict_probe::model::{Component, ModelConfig, TransformerParams};
use conflict_probe::patching::{ComponentRef, PatchMode, PatchOutcome, SourceRole};
use rand::Rng;

pub fn tiny_params(seed: u64, vocab: usize) -> TransformerParams {
    TransformerParams::init(ModelConfig {
        n_layers: 3,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: vocab,
        max_seq_len: 24,
        seed,
    })
    .unwrap()
}

/// A probability shift that often lands exactly on a bin threshold.
pub fn random_delta(rng: &mut impl Rng) -> f64 {
    const EDGES: [f64; 8] = [0.075, 0.10, 0.13, 0.20, 0.0, 0.074, 0.199, 0.9];
    let mag = match rng.gen_range(0..3) {
        0 => EDGES[rng.gen_range(0..EDGES.len())],
        1 => f64::from(rng.gen_range(0..40u32)) * 0.01,
        _ => rng.gen::<f64>() * 0.5,
    };
    if rng.gen_bool(0.5) {
        -mag
    } else {
        mag
    }
}

pub fn random_outcome(rng: &mut impl Rng) -> PatchOutcome {
    let d1 = random_delta(rng);
    let d2 = random_delta(rng);
    let role = if rng.gen_bool(0.5) { SourceRole::T1 } else { SourceRole::T2 };
    PatchOutcome {
        person_id: rng.gen_range(0..30),
        attribute_type: if rng.gen_bool(0.5) { AttributeType::University } else { AttributeType::Company },
        mode: PatchMode::SameModel,
        source_role: role,
        source_token: rng.gen_range(0..9),
        donor_person_id: rng.gen_range(30..60),
        component_ref: ComponentRef::new(rng.gen_range(1..=4), if rng.gen_bool(0.5) { Component::Attn } else { Component::Mlp }),
        prob_t1_before: 0.5,
        prob_t1_after: 0.5 + d1,
        prob_t2_before: 0.5,
        prob_t2_after: 0.5 + d2,
        delta_t1: d1,
        delta_t2: d2,
        steered: false,
        top1_before: 0,
        top1_after: 0,
    }
}

pub fn oracle_bin(thresholds: &[f64; 4], delta: f64) -> u8 {
    let m = delta.abs();
    if m < thresholds[0] {
        1
    } else if m < thresholds[1] {
        2
    } else if m < thresholds[2] {
        3
    } else if m < thresholds[3] {
        4
    } else {
        5
    }
}

pub fn oracle_sign(delta: f64) -> Sign {
    if delta >= 0.0 {
        Sign::Plus
    } else {
        Sign::Minus
    }
}

/// First index holding the maximum.
pub fn oracle_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub fn oracle_steering(before: &[f64], after: &[f64], t_s: usize) -> bool {
    oracle_argmax(after) == t_s && oracle_argmax(before) != t_s
}

/// Means of the top quarter, half, three quarters and all of `|Δ|`,
/// summed from the largest value down. `None` when they do not form four
/// strictly increasing values inside (0, 1).
pub fn oracle_derive(deltas: &[f64]) -> Option<[f64; 4]> {
    let mut mags: Vec<f64> = deltas.iter().map(|d| d.abs()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
    mags.reverse();
    let n = mags.len();
    let mut out = [0.0; 4];
    for (slot, quarters) in [(3usize, 1usize), (2, 2), (1, 3), (0, 4)] {
        let mut take = n * quarters / 4;
        if take * 4 < n * quarters {
            take += 1;
        }
        let mut sum = 0.0;
        for m in &mags[..take] {
            sum += m;
        }
        out[slot] = sum / take as f64;
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ok = (0..3).all(|i| out[i] < out[i + 1]) && out[0] > 0.0 && out[3] < 1.0;
    ok.then_some(out)
}

fn comp_rank(c: Component) -> u8 {
    match c {
        Component::Attn => 0,
        Component::Mlp => 1,
    }
}

pub fn oracle_impact(outcomes: &[PatchOutcome], k: usize) -> Vec<TokenImpactRow> {
    let mut keys: Vec<(AttributeType, u32)> = Vec::new();
    for o in outcomes {
        if !keys.contains(&(o.attribute_type, o.source_token)) {
            keys.push((o.attribute_type, o.source_token));
        }
    }
    let attr_rank = |a: AttributeType| if a == AttributeType::University { 0 } else { 1 };
    keys.sort_by_key(|&(a, t)| (attr_rank(a), t));

    let persons_of = |key: (AttributeType, u32)| {
        let mut p: Vec<usize> = outcomes
            .iter()
            .filter(|o| (o.attribute_type, o.source_token) == key)
            .map(|o| o.person_id)
            .collect();
        p.sort_unstable();
        p.dedup();
        p.len()
    };

    let mut frequent: Vec<(AttributeType, u32)> = Vec::new();
    for attr in [AttributeType::University, AttributeType::Company] {
        let mut pool: Vec<(AttributeType, u32)> = keys.iter().copied().filter(|k| k.0 == attr).collect();
        for _ in 0..5 {
            if pool.is_empty() {
                break;
            }
            let mut best = 0;
            for i in 1..pool.len() {
                let (a, b) = (persons_of(pool[i]), persons_of(pool[best]));
                if a > b || (a == b && pool[i].1 < pool[best].1) {
                    best = i;
                }
            }
            frequent.push(pool.remove(best));
        }
    }

    keys.iter()
        .map(|&key| {
            let group: Vec<&PatchOutcome> =
                outcomes.iter().filter(|o| (o.attribute_type, o.source_token) == key).collect();
            let mut comps: Vec<(usize, Component)> = Vec::new();
            for o in &group {
                let c = (o.component_ref.layer, o.component_ref.component);
                if !comps.contains(&c) {
                    comps.push(c);
                }
            }
            let mut entries: Vec<ImpactEntry> = comps
                .iter()
                .map(|&(layer, component)| {
                    let mut sum = 0.0;
                    let mut n = 0usize;
                    for o in &group {
                        if (o.component_ref.layer, o.component_ref.component) == (layer, component) {
                            sum += match o.source_role {
                                SourceRole::T1 => o.delta_t1,
                                SourceRole::T2 => o.delta_t2,
                            };
                            n += 1;
                        }
                    }
                    ImpactEntry { layer, component, effect: sum / n as f64 }
                })
                .collect();
            let mut ranking = Vec::new();
            while !entries.is_empty() && ranking.len() < k {
                let mut best = 0;
                for i in 1..entries.len() {
                    let (e, b) = (&entries[i], &entries[best]);
                    let better = e.effect > b.effect
                        || (e.effect == b.effect && (e.layer, comp_rank(e.component)) < (b.layer, comp_rank(b.component)));
                    if better {
                        best = i;
                    }
                }
                ranking.push(entries.remove(best));
            }
            TokenImpactRow {
                attribute_type: key.0,
                source_token: key.1,
                n_cases: persons_of(key),
                ranking,
                frequent: frequent.contains(&key),
            }
        })
        .collect()
}

/// Softmax written out directly, for comparing against library outputs.
pub fn oracle_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}
