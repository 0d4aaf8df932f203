// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pipeline stages. Each stage reads its inputs from the output directory,
//! checks them against the manifest of the stage that wrote them, and writes
//! its own files plus a manifest of input and output hashes.
//!
//! ```text
//! <out>/corpus/   mix.jsonl clean.jsonl tokenizer.jsonl prompts.jsonl
//! <out>/models/   base.ckpt mix.ckpt clean.ckpt
//! <out>/lens/     contributions.csv contributions_aggregate.csv
//! <out>/patch/    outcomes.csv
//! <out>/cmap/     outcomes.csv
//! <out>/report/   the report bundle and run_manifest.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::report::{bins_csv, confidence_csv, impact_csv, steering_csv};
use crate::analysis::{bin_strategy, confidence_report, steering_stats, token_impact_table, MagnitudeBins};
use crate::config::RunConfig;
use crate::corpus::io::{corpus_bytes, prompts_bytes, read_corpus, read_prompts, read_tokenizer, tokenizer_bytes};
use crate::corpus::{build_entity_pools, build_prompt_cases, generate_corpus, CorpusPair, PromptCase, Tokenizer};
use crate::error::{ProbeError, Result};
use crate::fsutil::{sha256_file, sha256_hex, write_atomic};
use crate::logitlens::{aggregate_csv, aggregate_population, contributions_csv, population_contributions, EmptyStratum, Strata};
use crate::model::{checkpoint_bytes, parse_checkpoint, train_triplet, Provenance, TransformerParams};
use crate::patching::{outcomes_csv, read_outcomes_csv, strategy, sweep, PatchMode, PatchOutcome, SweepContext, SweepSpec};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

/// Names of the files in a report bundle, in write order.
pub const BUNDLE_FILES: [&str; 8] = [
    "contributions.csv",
    "contributions_aggregate.csv",
    "outcomes.csv",
    "bins.csv",
    "steering.csv",
    "impact.csv",
    "confidence.csv",
    "run_manifest.json",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenCorpus,
    Train,
    Lens,
    Patch,
    Cmap,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::GenCorpus, Stage::Train, Stage::Lens, Stage::Patch, Stage::Cmap, Stage::Report];

    pub fn dir(self) -> &'static str {
        match self {
            Self::GenCorpus => "corpus",
            Self::Train => "models",
            Self::Lens => "lens",
            Self::Patch => "patch",
            Self::Cmap => "cmap",
            Self::Report => "report",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::GenCorpus => "gen-corpus",
            Self::Train => "train",
            Self::Lens => "lens",
            Self::Patch => "patch",
            Self::Cmap => "cmap",
            Self::Report => "report",
        }
    }
}

/// Hashes of the files a stage consumed and produced, keyed by path
/// relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub format_version: u32,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Run-level metadata written into the report bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub seed: u64,
    /// The run configuration without its output directory.
    pub config: RunConfig,
    pub corpus_hash: String,
    pub clean_corpus_hash: String,
    pub tokenizer_hash: String,
    pub checkpoints: BTreeMap<String, String>,
    pub final_ln: bool,
    pub bins_mode: String,
    pub bins: MagnitudeBins,
    pub bins_fallback: Option<String>,
    pub empty_strata: Vec<EmptyStratum>,
    pub files: BTreeMap<String, String>,
}

fn rel(stage: Stage, file: &str) -> String {
    format!("{}/{file}", stage.dir())
}

/// A configured run rooted at `config.out_dir`.
pub struct Pipeline {
    pub config: RunConfig,
}

/// Outputs of a stage before they are written.
struct StageWriter<'a> {
    root: &'a Path,
    stage: Stage,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl<'a> StageWriter<'a> {
    fn new(root: &'a Path, stage: Stage) -> Self {
        Self {
            root,
            stage,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    fn write(&mut self, file: &str, bytes: &[u8]) -> Result<()> {
        let key = rel(self.stage, file);
        write_atomic(&self.root.join(&key), bytes)?;
        self.outputs.insert(key, sha256_hex(bytes));
        Ok(())
    }

    fn finish(self) -> Result<StageManifest> {
        let m = StageManifest {
            stage: self.stage,
            format_version: MANIFEST_VERSION,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        write_atomic(&self.root.join(rel(self.stage, MANIFEST)), &serde_json::to_vec_pretty(&m)?)?;
        log::info!("stage {} wrote {} files", self.stage.name(), m.outputs.len());
        Ok(m)
    }
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn root(&self) -> &Path {
        &self.config.out_dir
    }

    pub fn path(&self, stage: Stage, file: &str) -> PathBuf {
        self.root().join(rel(stage, file))
    }

    pub fn read_manifest(&self, stage: Stage) -> Result<StageManifest> {
        let path = self.path(stage, MANIFEST);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(ProbeError::MissingArtifact(path)),
            Err(e) => return Err(e.into()),
        };
        serde_json::from_slice(&bytes).map_err(|e| ProbeError::Format {
            path,
            reason: e.to_string(),
        })
    }

    /// Checks `file` of `stage` against that stage's manifest and records it
    /// as an input of `w`. Returns the file's path.
    fn input(&self, w: &mut StageWriter<'_>, stage: Stage, file: &str) -> Result<PathBuf> {
        let manifest = self.read_manifest(stage)?;
        let key = rel(stage, file);
        let path = self.root().join(&key);
        let found = sha256_file(&path)?;
        let recorded = manifest.outputs.get(&key).cloned().ok_or_else(|| ProbeError::MissingArtifact(path.clone()))?;
        if recorded != found {
            return Err(ProbeError::StaleArtifact { path, recorded, found });
        }
        w.inputs.insert(key, found);
        Ok(path)
    }

    fn corpus_inputs(&self, w: &mut StageWriter<'_>) -> Result<(CorpusPair, Tokenizer, Vec<PromptCase>)> {
        self.input(w, Stage::GenCorpus, "mix.jsonl")?;
        self.input(w, Stage::GenCorpus, "clean.jsonl")?;
        let corpus = read_corpus(&self.root().join(Stage::GenCorpus.dir()))?;
        let tokenizer = read_tokenizer(&self.input(w, Stage::GenCorpus, "tokenizer.jsonl")?)?;
        let prompts = read_prompts(&self.input(w, Stage::GenCorpus, "prompts.jsonl")?)?;
        Ok((corpus, tokenizer, prompts))
    }

    fn checkpoint_input(&self, w: &mut StageWriter<'_>, name: &str) -> Result<TransformerParams> {
        let path = self.input(w, Stage::Train, name)?;
        Ok(parse_checkpoint(&std::fs::read(path)?)?.0)
    }

    pub fn cmd_gen_corpus(&self) -> Result<StageManifest> {
        let c = &self.config;
        let pools = build_entity_pools(c.seed, &c.corpus.pools)?;
        let corpus = generate_corpus(&pools, c.corpus.n_persons, c.corpus.n_conflicted, c.seed)?;
        let texts: Vec<String> = corpus.mix.iter().map(|r| r.text()).collect();
        let tokenizer = Tokenizer::build(texts.iter().map(String::as_str), &pools.synthetic_words)?;
        let prompts = build_prompt_cases(&corpus, &tokenizer)?;
        let mut w = StageWriter::new(self.root(), Stage::GenCorpus);
        w.write("mix.jsonl", &corpus_bytes("mix", &corpus, &corpus.mix)?)?;
        w.write("clean.jsonl", &corpus_bytes("clean", &corpus, &corpus.clean)?)?;
        w.write("tokenizer.jsonl", &tokenizer_bytes(&tokenizer, c.seed)?)?;
        w.write("prompts.jsonl", &prompts_bytes(&prompts, c.seed)?)?;
        w.finish()
    }

    pub fn cmd_train(&self) -> Result<StageManifest> {
        let mut w = StageWriter::new(self.root(), Stage::Train);
        let (corpus, tokenizer, _) = self.corpus_inputs(&mut w)?;
        let encode = |records: Vec<&crate::corpus::BiographyRecord>| -> Result<Vec<Vec<usize>>> {
            records
                .into_iter()
                .map(|r| Ok(tokenizer.tokenize(&r.text())?.into_iter().map(|t| t as usize).collect()))
                .collect()
        };
        let base_data = encode(corpus.clean_subset().collect())?;
        let mix_data = encode(corpus.mix.iter().collect())?;
        let clean_data = encode(corpus.clean.iter().collect())?;
        let init = TransformerParams::init(self.config.model_config(tokenizer.vocab_size()))?;
        let hypers = self.config.phase_hypers();
        log::info!(
            "training {} parameters on {} / {} / {} sequences",
            init.n_params(),
            base_data.len(),
            mix_data.len(),
            clean_data.len()
        );
        let triplet = train_triplet(&init, &base_data, &mix_data, &clean_data, &hypers)?;
        let mix_hash = w.inputs[&rel(Stage::GenCorpus, "mix.jsonl")].clone();
        let clean_hash = w.inputs[&rel(Stage::GenCorpus, "clean.jsonl")].clone();
        let base_bytes = checkpoint_bytes(
            &triplet.base,
            &Provenance {
                phase: "base".into(),
                corpus_hash: clean_hash.clone(),
                hyper: hypers.base.clone(),
                parent: None,
                epoch_losses: triplet.base_report.epoch_losses.clone(),
            },
        )?;
        let parent = Some(sha256_hex(&base_bytes));
        let mix_bytes = checkpoint_bytes(
            &triplet.mix,
            &Provenance {
                phase: "mix".into(),
                corpus_hash: mix_hash,
                hyper: hypers.mix.clone(),
                parent: parent.clone(),
                epoch_losses: triplet.mix_report.epoch_losses.clone(),
            },
        )?;
        let clean_bytes = checkpoint_bytes(
            &triplet.clean,
            &Provenance {
                phase: "clean".into(),
                corpus_hash: clean_hash,
                hyper: hypers.clean.clone(),
                parent,
                epoch_losses: triplet.clean_report.epoch_losses.clone(),
            },
        )?;
        w.write("base.ckpt", &base_bytes)?;
        w.write("mix.ckpt", &mix_bytes)?;
        w.write("clean.ckpt", &clean_bytes)?;
        w.finish()
    }

    pub fn cmd_lens(&self) -> Result<StageManifest> {
        let mut w = StageWriter::new(self.root(), Stage::Lens);
        let (_, _, prompts) = self.corpus_inputs(&mut w)?;
        let mix = self.checkpoint_input(&mut w, "mix.ckpt")?;
        let records = population_contributions(&mix, &prompts, self.config.probe.final_ln)?;
        let mut rows = Vec::new();
        let mut empty = Vec::new();
        for strata in [Strata::All, Strata::AttributeType, Strata::AttributeValue] {
            let agg = aggregate_population(&records, strata);
            rows.extend(agg.rows);
            empty.extend(agg.empty);
        }
        w.write("contributions.csv", &contributions_csv(&records)?)?;
        w.write("contributions_aggregate.csv", &aggregate_csv(&rows)?)?;
        w.write("empty_strata.json", &serde_json::to_vec_pretty(&empty)?)?;
        w.finish()
    }

    fn sweep_spec(&self) -> Result<SweepSpec> {
        Ok(SweepSpec {
            components: self.config.probe.component,
            layers: self.config.layer_range()?,
            ts: self.config.probe.ts,
        })
    }

    fn cmd_sweep(&self, stage: Stage, strategy_name: &str) -> Result<StageManifest> {
        let mut w = StageWriter::new(self.root(), stage);
        let (corpus, tokenizer, prompts) = self.corpus_inputs(&mut w)?;
        let mix = self.checkpoint_input(&mut w, "mix.ckpt")?;
        let clean = match stage {
            Stage::Cmap => Some(self.checkpoint_input(&mut w, "clean.ckpt")?),
            _ => None,
        };
        let ctx = SweepContext {
            mix: &mix,
            clean: clean.as_ref(),
            corpus: &corpus,
            tokenizer: &tokenizer,
            donor_choice: self.config.probe.donor,
        };
        let strat = strategy(strategy_name)?;
        let outcomes = sweep(strat.as_ref(), &ctx, &prompts, &self.sweep_spec()?)?;
        w.write("outcomes.csv", &outcomes_csv(&outcomes)?)?;
        w.finish()
    }

    pub fn cmd_patch(&self) -> Result<StageManifest> {
        self.cmd_sweep(Stage::Patch, "same_model")
    }

    pub fn cmd_cmap(&self) -> Result<StageManifest> {
        self.cmd_sweep(Stage::Cmap, "cross_model")
    }

    fn outcomes_input(&self, w: &mut StageWriter<'_>, stage: Stage) -> Result<Vec<PatchOutcome>> {
        let path = self.input(w, stage, "outcomes.csv")?;
        read_outcomes_csv(&std::fs::read(path)?)
    }

    pub fn cmd_report(&self) -> Result<StageManifest> {
        let c = &self.config;
        let mut w = StageWriter::new(self.root(), Stage::Report);
        let (_, tokenizer, prompts) = self.corpus_inputs(&mut w)?;
        let mix = self.checkpoint_input(&mut w, "mix.ckpt")?;
        let clean = self.checkpoint_input(&mut w, "clean.ckpt")?;
        let contributions = std::fs::read(self.input(&mut w, Stage::Lens, "contributions.csv")?)?;
        let aggregate = std::fs::read(self.input(&mut w, Stage::Lens, "contributions_aggregate.csv")?)?;
        let empty_strata: Vec<EmptyStratum> =
            serde_json::from_slice(&std::fs::read(self.input(&mut w, Stage::Lens, "empty_strata.json")?)?)?;
        let same = self.outcomes_input(&mut w, Stage::Patch)?;
        let cross = if c.probe.cmap {
            self.outcomes_input(&mut w, Stage::Cmap)?
        } else {
            Vec::new()
        };

        let deltas: Vec<f64> = same.iter().flat_map(|o| [o.delta_t1, o.delta_t2]).collect();
        let choice = bin_strategy(&c.probe.bins)?.choose(&deltas);
        let mut all = same.clone();
        all.extend(cross.iter().cloned());

        let piece = |t: u32| tokenizer.display(t);
        let mut impact = impact_csv(PatchMode::SameModel, &token_impact_table(&same, c.probe.impact_k)?, &piece)?;
        if !cross.is_empty() {
            let extra = impact_csv(PatchMode::CrossModel, &token_impact_table(&cross, c.probe.impact_k)?, &piece)?;
            let body = extra.splitn(2, |&b| b == b'\n').nth(1).unwrap_or_default();
            impact.extend_from_slice(body);
        }
        let confidence = confidence_report(&mix, &clean, &prompts)?;

        let files: Vec<(&str, Vec<u8>)> = vec![
            ("contributions.csv", contributions),
            ("contributions_aggregate.csv", aggregate),
            ("outcomes.csv", outcomes_csv(&all)?),
            ("bins.csv", bins_csv(&all, &choice.bins)?),
            ("steering.csv", steering_csv(&steering_stats(&all))?),
            ("impact.csv", impact),
            ("confidence.csv", confidence_csv(&confidence)?),
        ];
        let mut hashes = BTreeMap::new();
        for (name, bytes) in &files {
            w.write(name, bytes)?;
            hashes.insert(name.to_string(), sha256_hex(bytes));
        }
        let input_hash = |stage, file| w.inputs[&rel(stage, file)].clone();
        let manifest = RunManifest {
            format_version: MANIFEST_VERSION,
            seed: c.seed,
            config: RunConfig {
                out_dir: PathBuf::new(),
                ..c.clone()
            },
            corpus_hash: input_hash(Stage::GenCorpus, "mix.jsonl"),
            clean_corpus_hash: input_hash(Stage::GenCorpus, "clean.jsonl"),
            tokenizer_hash: input_hash(Stage::GenCorpus, "tokenizer.jsonl"),
            checkpoints: ["mix.ckpt", "clean.ckpt"]
                .iter()
                .map(|f| (f.to_string(), input_hash(Stage::Train, f)))
                .collect(),
            final_ln: c.probe.final_ln,
            bins_mode: c.probe.bins.clone(),
            bins: choice.bins,
            bins_fallback: choice.fallback,
            empty_strata,
            files: hashes,
        };
        w.write("run_manifest.json", &serde_json::to_vec_pretty(&manifest)?)?;
        w.finish()
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<()> {
        self.cmd_gen_corpus()?;
        self.cmd_train()?;
        self.cmd_lens()?;
        self.cmd_patch()?;
        if self.config.probe.cmap {
            self.cmd_cmap()?;
        }
        self.cmd_report()?;
        Ok(())
    }

    /// Re-hashes every file listed by every existing stage manifest.
    pub fn check_manifests(&self) -> Vec<(String, Result<()>)> {
        let mut out = Vec::new();
        for stage in Stage::ALL {
            let manifest = match self.read_manifest(stage) {
                Ok(m) => m,
                Err(ProbeError::MissingArtifact(_)) => continue,
                Err(e) => {
                    out.push((stage.name().to_string(), Err(e)));
                    continue;
                }
            };
            for (key, recorded) in manifest.inputs.iter().chain(&manifest.outputs) {
                let path = self.root().join(key);
                let res = sha256_file(&path).and_then(|found| {
                    if &found == recorded {
                        Ok(())
                    } else {
                        Err(ProbeError::StaleArtifact {
                            path: path.clone(),
                            recorded: recorded.clone(),
                            found,
                        })
                    }
                });
                out.push((format!("{} {key}", stage.name()), res));
            }
        }
        out
    }

    pub fn load_corpus(&self) -> Result<(CorpusPair, Tokenizer, Vec<PromptCase>)> {
        let mut w = StageWriter::new(self.root(), Stage::Report);
        self.corpus_inputs(&mut w)
    }

    pub fn load_checkpoint(&self, name: &str) -> Result<TransformerParams> {
        let mut w = StageWriter::new(self.root(), Stage::Report);
        self.checkpoint_input(&mut w, name)
    }
}

/// Builds the global worker pool, capped by `CONFLICT_PROBE_THREADS` when set.
pub fn init_thread_pool() {
    if let Some(n) = std::env::var("CONFLICT_PROBE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().is_err() {
            log::debug!("worker pool already initialized");
        }
    }
}
