// SPDX-License-Identifier: MIT OR Apache-2.0

//! Post-run checks over the artifacts of a pipeline.

use std::fmt;

use crate::analysis::{confidence_report, paper_bins};
use crate::corpus::PromptCase;
use crate::error::Result;
use crate::fsutil::sha256_file;
use crate::logitlens::{project_layers, token_contributions};
use crate::model::{forward_cached, grad_check, Batch, Component, TransformerParams};
use crate::patching::{capture_activation, clean_run, cmap_effect, patched_forward, ComponentRef, PatchMode};
use crate::pipeline::{Pipeline, RunManifest, Stage, BUNDLE_FILES};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    fn record(&mut self, name: &'static str, outcome: Result<(bool, String)>) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, e.to_string()));
        self.checks.push(Check { name, passed, detail });
    }
}

fn tokens(case: &PromptCase) -> Vec<usize> {
    case.prompt_tokens.iter().map(|&t| t as usize).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn residual_algebra(p: &TransformerParams, cases: &[PromptCase]) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for c in cases {
        let cache = forward_cached(p, &tokens(c))?;
        for l in 0..cache.n_layers() {
            for pos in 0..cache.seq_len() {
                let pre = cache.x_pre(l).row(pos);
                let mid = cache.x_mid(l).row(pos);
                let post = cache.x_post(l).row(pos);
                for d in 0..pre.len() {
                    worst = worst.max((mid[d] - pre[d] - cache.attn_out(l).row(pos)[d]).abs());
                    worst = worst.max((post[d] - mid[d] - cache.mlp_out(l).row(pos)[d]).abs());
                }
            }
        }
    }
    Ok((worst <= 1e-10, format!("max residual error {worst:e} over {} prompts", cases.len())))
}

fn telescoping(p: &TransformerParams, cases: &[PromptCase], final_ln: bool) -> Result<(bool, String)> {
    let (mut tele, mut norm): (f64, f64) = (0.0, 0.0);
    for c in cases {
        let t = tokens(c);
        let cache = forward_cached(p, &t)?;
        let dists = project_layers(&cache, p, t.len() - 1, final_ln)?;
        for d in dists.all() {
            norm = norm.max((d.iter().sum::<f64>() - 1.0).abs());
        }
        for tok in [c.t1 as usize, c.t2 as usize] {
            let contrib = token_contributions(&dists, tok)?;
            let total: f64 = contrib.attn.iter().chain(&contrib.mlp).sum();
            tele = tele.max((total - (dists.final_dist()[tok] - dists.pre(0)[tok])).abs());
        }
    }
    Ok((
        tele <= 1e-9 && norm <= 1e-9,
        format!("telescoping error {tele:e}, normalization error {norm:e}"),
    ))
}

fn self_patch(p: &TransformerParams, cases: &[PromptCase]) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for c in cases {
        let base = clean_run(p, &c.prompt_tokens)?;
        for layer in 1..=p.config.n_layers {
            for comp in [Component::Attn, Component::Mlp] {
                let a = capture_activation(p, &c.prompt_tokens, ComponentRef::new(layer, comp), PatchMode::SameModel, c.person_id, c.t1)?;
                let run = patched_forward(p, &c.prompt_tokens, &a)?;
                worst = worst.max(max_abs_diff(run.logits.data(), base.logits.data()));
            }
        }
    }
    Ok((worst <= 1e-12, format!("max logit difference {worst:e}")))
}

fn cmap_degenerate(p: &TransformerParams, cases: &[PromptCase]) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for c in cases {
        for layer in 1..=p.config.n_layers {
            let o = cmap_effect(p, p, c, ComponentRef::new(layer, Component::Attn))?;
            worst = worst.max(o.delta_t1.abs()).max(o.delta_t2.abs());
        }
    }
    Ok((worst <= 1e-12, format!("max |delta| {worst:e} with identical models")))
}

fn gradient(p: &TransformerParams, cases: &[PromptCase]) -> Result<(bool, String)> {
    let Some(case) = cases.iter().find(|c| c.prompt_tokens.len() >= 2) else {
        return Ok((false, "no prompt long enough".into()));
    };
    let t = tokens(case);
    let batch = Batch::from_sequences(&[&t[..t.len().min(8)]]);
    let r = grad_check(p, &batch, 200, 0)?;
    Ok((r.max_rel_error < 1e-4, format!("max relative error {:e} over 200 coordinates", r.max_rel_error)))
}

fn bundle(pipeline: &Pipeline) -> Result<(bool, String)> {
    let manifest_path = pipeline.path(Stage::Report, "run_manifest.json");
    let manifest: RunManifest = serde_json::from_slice(&std::fs::read(&manifest_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => crate::ProbeError::MissingArtifact(manifest_path.clone()),
        _ => e.into(),
    })?)?;
    let mut bad = Vec::new();
    for name in &BUNDLE_FILES[..BUNDLE_FILES.len() - 1] {
        let found = sha256_file(&pipeline.path(Stage::Report, name))?;
        if manifest.files.get(*name) != Some(&found) {
            bad.push(*name);
        }
    }
    Ok((bad.is_empty(), if bad.is_empty() { "bundle matches run manifest".into() } else { format!("mismatched: {bad:?}") }))
}

/// Runs every check; a check whose inputs are missing fails with the reason.
pub fn verify_run(pipeline: &Pipeline) -> VerifyReport {
    let mut report = VerifyReport::default();
    let manifest_results = pipeline.check_manifests();
    let stale: Vec<String> = manifest_results
        .iter()
        .filter_map(|(k, r)| r.as_ref().err().map(|e| format!("{k}: {e}")))
        .collect();
    let present = Stage::ALL
        .iter()
        .filter(|s| pipeline.path(**s, crate::pipeline::MANIFEST).exists())
        .count();
    report.record(
        "manifests",
        Ok((
            stale.is_empty() && present > 0,
            if stale.is_empty() {
                format!("{} recorded files across {present} stages match", manifest_results.len())
            } else {
                stale.join("; ")
            },
        )),
    );

    let bins = paper_bins();
    let inputs = [0.05, 0.074, 0.075, 0.099, 0.10, 0.129, 0.13, 0.199, 0.20, 0.9];
    let got: Vec<u8> = inputs.iter().map(|&d| bins.bin(d)).collect();
    report.record("fixed_bins", Ok((got == [1, 1, 2, 2, 3, 3, 4, 4, 5, 5], format!("{got:?}"))));

    let loaded = pipeline.load_corpus().and_then(|(_, _, cases)| {
        Ok((cases, pipeline.load_checkpoint("mix.ckpt")?, pipeline.load_checkpoint("clean.ckpt")?))
    });
    let (cases, mix, clean) = match loaded {
        Ok(x) => x,
        Err(e) => {
            for name in [
                "gradient", "residual_algebra", "telescoping", "self_patch", "cmap_degeneracy", "memorization",
                "confidence_reduction", "conflict_encoding",
            ] {
                report.record(name, Err(crate::ProbeError::InvalidInput(format!("artifacts unavailable: {e}"))));
            }
            report.record("report_bundle", bundle(pipeline));
            return report;
        }
    };
    let sample: Vec<PromptCase> = cases.iter().filter(|c| !c.prompt_tokens.is_empty()).take(50).cloned().collect();
    let few = &sample[..sample.len().min(10)];
    report.record("gradient", gradient(&mix, &sample));
    report.record("residual_algebra", residual_algebra(&mix, &sample));
    report.record("telescoping", telescoping(&mix, &sample, pipeline.config.probe.final_ln));
    report.record("self_patch", self_patch(&mix, few));
    report.record("cmap_degeneracy", cmap_degenerate(&mix, few));
    match confidence_report(&mix, &clean, &cases) {
        Ok(c) => {
            report.record(
                "memorization",
                Ok((c.clean_top1_accuracy >= 0.95, format!("clean top-1 accuracy {}", c.clean_top1_accuracy))),
            );
            report.record(
                "confidence_reduction",
                Ok((
                    c.mean_max_mix < c.mean_p_clean_t1,
                    format!("mean max mix {} vs mean clean {}", c.mean_max_mix, c.mean_p_clean_t1),
                )),
            );
            report.record(
                "conflict_encoding",
                Ok((c.mix_top5_both_rate >= 0.6, format!("both in top-5 for {}", c.mix_top5_both_rate))),
            );
        }
        Err(e) => {
            for name in ["memorization", "confidence_reduction", "conflict_encoding"] {
                report.record(name, Err(crate::ProbeError::InvalidInput(e.to_string())));
            }
        }
    }
    report.record("report_bundle", bundle(pipeline));
    report
}
