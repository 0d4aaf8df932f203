// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{oracle_argmax, oracle_softmax, tiny_params};
use conflict_probe::corpus::{
    build_entity_pools, build_prompt_cases, generate_corpus, AttributeType, CorpusPair, DonorChoice, PoolCounts,
    PromptCase, Tokenizer,
};
use conflict_probe::logitlens::{
    aggregate_population, case_contributions, control_set, project_layers, token_contributions, Strata, TokenRole,
};
use conflict_probe::model::{forward, forward_cached, Component, ModelConfig, TransformerParams};
use conflict_probe::nn::Tensor;
use conflict_probe::patching::{
    capture_activation, clean_run, cmap_effect, patched_forward, strategy, sweep, ComponentFilter, ComponentRef,
    PatchMode, SourceActivation, SourceProvenance, SourceRole, SweepContext, SweepSpec, TsSelection,
};
use conflict_probe::ProbeError;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn contributions_telescope(
        seed in 0u64..300,
        tokens in prop::collection::vec(0usize..20, 1..16),
        probe in 0usize..20,
        final_ln in any::<bool>(),
    ) {
        let p = tiny_params(seed, 20);
        let cache = forward_cached(&p, &tokens).unwrap();
        let pos = tokens.len() - 1;
        let dists = project_layers(&cache, &p, pos, final_ln).unwrap();
        prop_assert_eq!(dists.all().len(), 2 * p.config.n_layers + 1);
        for d in dists.all() {
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let c = token_contributions(&dists, probe).unwrap();
        let total: f64 = c.attn.iter().chain(&c.mlp).sum();
        let span = dists.final_dist()[probe] - dists.pre(0)[probe];
        prop_assert!((total - span).abs() <= 1e-12);
        if final_ln {
            // The last site is the model's own next-token distribution.
            let direct = oracle_softmax(forward(&p, &tokens).unwrap().row(pos));
            for (a, b) in direct.iter().zip(dists.final_dist()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn control_set_is_the_top_five_of_the_rest(probs in prop::collection::vec(0u8..6, 7..30), t1 in 0usize..30, t2 in 0usize..30) {
        let v: Vec<f64> = probs.iter().map(|&x| f64::from(x)).collect();
        let (t1, t2) = (t1 % v.len(), t2 % v.len());
        let got = control_set(&v, t1, t2).unwrap();
        let mut rest: Vec<usize> = (0..v.len()).filter(|&i| i != t1 && i != t2).collect();
        let mut want = Vec::new();
        for _ in 0..5 {
            let vals: Vec<f64> = rest.iter().map(|&i| v[i]).collect();
            want.push(rest.remove(oracle_argmax(&vals)));
        }
        prop_assert_eq!(got, want);
    }

    #[test]
    fn self_patch_is_exact(seed in 0u64..300, tokens in prop::collection::vec(0u32..20, 1..16), layer in 1usize..=3, mlp in any::<bool>()) {
        let p = tiny_params(seed, 20);
        let comp = if mlp { Component::Mlp } else { Component::Attn };
        let a = capture_activation(&p, &tokens, ComponentRef::new(layer, comp), PatchMode::SameModel, 0, 0).unwrap();
        prop_assert_eq!(clean_run(&p, &tokens).unwrap(), patched_forward(&p, &tokens, &a).unwrap());
    }
}

fn activation(layer: usize, component: Component, vector: Vec<f64>) -> SourceActivation {
    SourceActivation {
        component_ref: ComponentRef::new(layer, component),
        vector,
        provenance: SourceProvenance {
            mode: PatchMode::SameModel,
            donor_person_id: 0,
            source_token: 0,
            source_prompt_hash: String::new(),
            position: 0,
        },
    }
}

#[test]
fn last_mlp_splice_matches_a_hand_computed_readout() {
    let p = tiny_params(21, 20);
    let tokens = [3usize, 8, 1, 17, 4];
    let ids: Vec<u32> = tokens.iter().map(|&t| t as u32).collect();
    let cache = forward_cached(&p, &tokens).unwrap();
    let last = p.config.n_layers - 1;
    let pos = tokens.len() - 1;
    let v: Vec<f64> = (0..p.config.d_model).map(|i| (i as f64 * 0.37).sin()).collect();
    // The spliced vector replaces the MLP update, so the final residual is
    // x_mid + v at the last position and unchanged elsewhere.
    let resid: Vec<f64> = cache.x_mid(last).row(pos).iter().zip(&v).map(|(a, b)| a + b).collect();
    let want = p.unembed_rows(&Tensor::matrix(1, p.config.d_model, resid).unwrap(), true).unwrap();
    let run = patched_forward(&p, &ids, &activation(p.config.n_layers, Component::Mlp, v)).unwrap();
    for (a, b) in run.logits.row(pos).iter().zip(want.row(0)) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    for r in 0..pos {
        assert_eq!(run.logits.row(r), cache.logits.row(r));
    }
    assert_eq!(run.final_probs, oracle_softmax(run.logits.row(pos)));
}

#[test]
fn patch_inputs_are_validated() {
    let p = tiny_params(1, 20);
    let ids = [1u32, 2, 3];
    let short = activation(1, Component::Attn, vec![0.0; 3]);
    assert!(matches!(patched_forward(&p, &ids, &short), Err(ProbeError::DimMismatch { got: 3, expected: 16 })));
    let deep = activation(9, Component::Attn, vec![0.0; 16]);
    assert!(patched_forward(&p, &ids, &deep).is_err());
    assert!(patched_forward(&p, &[], &activation(1, Component::Attn, vec![0.0; 16])).is_err());
}

fn real_setup() -> (CorpusPair, Tokenizer, Vec<PromptCase>, TransformerParams, TransformerParams) {
    let pools = build_entity_pools(5, &PoolCounts::default()).unwrap();
    let corpus = generate_corpus(&pools, 24, 8, 5).unwrap();
    let texts: Vec<String> = corpus.mix.iter().map(|r| r.text()).collect();
    let tok = Tokenizer::build(texts.iter().map(String::as_str), &pools.synthetic_words).unwrap();
    let cases = build_prompt_cases(&corpus, &tok).unwrap();
    let config = |seed| ModelConfig {
        n_layers: 3,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: tok.vocab_size(),
        max_seq_len: 96,
        seed,
    };
    let mix = TransformerParams::init(config(1)).unwrap();
    let clean = TransformerParams::init(config(2)).unwrap();
    (corpus, tok, cases, mix, clean)
}

#[test]
fn sweep_visits_every_combination_in_order() {
    let (corpus, tok, cases, mix, clean) = real_setup();
    let ctx = SweepContext {
        mix: &mix,
        clean: Some(&clean),
        corpus: &corpus,
        tokenizer: &tok,
        donor_choice: DonorChoice::SmallestId,
    };
    let two = &cases[..2];
    let spec = SweepSpec {
        components: ComponentFilter::Both,
        layers: (1, 3),
        ts: TsSelection::T1,
    };
    let same = sweep(strategy("same_model").unwrap().as_ref(), &ctx, two, &spec).unwrap();
    assert_eq!(same.len(), 12);
    let keys: Vec<_> = same.iter().map(|o| (o.person_id, o.component_ref)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    for o in &same {
        assert!(!corpus.is_conflicted(o.donor_person_id));
        assert_eq!(o.source_token, cases[o.person_id].t1);
    }

    let both = SweepSpec { ts: TsSelection::Both, ..spec.clone() };
    assert_eq!(sweep(strategy("same_model").unwrap().as_ref(), &ctx, two, &both).unwrap().len(), 24);
    let cross = sweep(strategy("cross_model").unwrap().as_ref(), &ctx, two, &both).unwrap();
    assert_eq!(cross.len(), 12);
    assert!(cross.iter().all(|o| o.source_role == SourceRole::T1 && o.mode == PatchMode::CrossModel));
    for o in &cross {
        let direct = cmap_effect(&mix, &clean, &cases[o.person_id], o.component_ref).unwrap();
        assert_eq!(&direct, o);
    }

    let self_ctx = SweepContext { clean: Some(&mix), ..ctx };
    let degenerate = sweep(strategy("cmap").unwrap().as_ref(), &self_ctx, &cases, &spec).unwrap();
    assert!(degenerate.iter().all(|o| o.delta_t1 == 0.0 && o.delta_t2 == 0.0 && !o.steered));
}

#[test]
fn outcome_fields_follow_the_runs() {
    let (_, _, cases, mix, clean) = real_setup();
    let case = &cases[0];
    let o = cmap_effect(&mix, &clean, case, ComponentRef::new(2, Component::Attn)).unwrap();
    let before = clean_run(&mix, &case.prompt_tokens).unwrap().final_probs;
    let (t1, t2) = (case.t1 as usize, case.t2 as usize);
    assert_eq!(o.prob_t1_before, before[t1]);
    assert_eq!(o.prob_t2_before, before[t2]);
    assert_eq!(o.delta_t1, o.prob_t1_after - o.prob_t1_before);
    assert_eq!(o.delta_t2, o.prob_t2_after - o.prob_t2_before);
    assert_eq!(o.top1_before as usize, oracle_argmax(&before));
}

#[test]
fn lens_records_cover_three_roles_and_aggregate_by_type() {
    let (_, _, cases, mix, _) = real_setup();
    let mut records = Vec::new();
    for c in &cases {
        let r = case_contributions(&mix, c, true).unwrap();
        assert_eq!(r.iter().map(|x| x.token_role).collect::<Vec<_>>(), [TokenRole::T1, TokenRole::T2, TokenRole::Control]);
        assert_eq!(r[2].control_tokens.len(), 5);
        assert!(!r[2].control_tokens.contains(&c.t1) && !r[2].control_tokens.contains(&c.t2));
        records.extend(r);
    }
    let agg = aggregate_population(&records, Strata::AttributeType);
    for row in &agg.rows {
        let attr: AttributeType = row.stratum.trim_start_matches("attribute_type=").parse().unwrap();
        let members: Vec<_> = records
            .iter()
            .filter(|r| r.attribute_type == attr && r.token_role == row.token_role)
            .collect();
        assert_eq!(row.n, members.len());
        for l in 0..3 {
            let mean = members.iter().map(|r| r.contributions.attn[l]).sum::<f64>() / members.len() as f64;
            assert!((row.mean.attn[l] - mean).abs() <= 1e-15);
        }
    }
    assert_eq!(agg.rows.len() + agg.empty.len(), 6);
}
