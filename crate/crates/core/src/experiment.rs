//! Experiment harnesses: strategy comparison, noise-variance sweep, and
//! caption-cache ablation, over seeded synthetic worlds.
//!
//! An [`ExperimentContext`] pins a world, its encoders, datasets, caches,
//! and test queries from a single seed tuple; every harness trains its arms
//! against these shared resources, so arm-to-arm differences come only from
//! the strategy under test. All outputs are pure functions of the spec:
//! rerunning writes byte-identical files.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::cache::EmbeddingCache;
use crate::condition::{Strategy, StrategyConfig};
use crate::embed::{
    build_reference_encoders, GapModel, ReferenceAudioEncoder, ReferenceTextEncoder, DEFAULT_DIM,
};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::rng::{derived_rng, fnv1a, stream};
use crate::signal::mix;
use crate::synth::{
    assign_clip_captions, label_captions, synth_dataset, test_captions, train_captions,
    world_classes, SynthClassSpec, SynthConfig, SynthDataset, WorldKind,
};
use crate::separator::Separator;
use crate::trainer::{evaluate, train, EvalExample, TrainConfig, TrainResources};

/// Default noise variance for the vanilla noise-injection arm.
pub const DEFAULT_NOISE_VAR: f64 = 1e-2;

/// Default noise variance for the retrieval noise-injection arm.
pub const DEFAULT_NOISE_VAR_RETRIEVAL: f64 = 1e-2;

/// Modality-gap magnitude used by the experiment worlds.
pub const DEFAULT_GAP_NORM: f64 = 0.5;

/// Per-caption jitter variance used by the experiment worlds.
pub const DEFAULT_JITTER: f64 = 0.01;

/// Paraphrase captions per class placed in the enriched cache.
pub const CACHE_CAPTIONS_PER_CLASS: usize = 20;

/// Held-out paraphrase captions per class used as test queries.
pub const TEST_QUERIES_PER_CLASS: usize = 5;

/// Seeded interference pairings per test clip.
pub const PAIRINGS_PER_CLIP: usize = 5;

/// A named experiment over one world.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub world: WorldKind,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub clips_per_class: usize,
    pub test_clips_per_class: usize,
    pub gap_norm: f64,
    pub jitter_var: f64,
    pub out_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn new(world: WorldKind, seed: u64, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentSpec {
            world,
            seed,
            steps: 3000,
            batch_size: 16,
            clips_per_class: 24,
            test_clips_per_class: 6,
            gap_norm: DEFAULT_GAP_NORM,
            jitter_var: DEFAULT_JITTER,
            out_dir: out_dir.into(),
        }
    }
}

/// Shared world state for all arms of an experiment.
pub struct ExperimentContext {
    pub spec: ExperimentSpec,
    pub classes: Vec<SynthClassSpec>,
    pub audio_encoder: ReferenceAudioEncoder,
    pub text_encoder: ReferenceTextEncoder,
    pub train_set: SynthDataset,
    pub clip_captions: Vec<String>,
    pub clip_labels: Vec<String>,
    /// Label captions plus paraphrases: the standard retrieval cache.
    pub enriched_cache: EmbeddingCache,
    /// One label caption per class.
    pub label_cache: EmbeddingCache,
    /// Text-queried test examples with held-out paraphrase captions.
    pub test_examples: Vec<EvalExample>,
    /// Validation examples from held-out clips with in-cache captions.
    pub validation_examples: Vec<EvalExample>,
}

impl ExperimentContext {
    pub fn build(spec: ExperimentSpec) -> Result<Self> {
        let classes = world_classes(spec.world);
        let gap = GapModel::with_offset_norm(
            DEFAULT_DIM,
            spec.gap_norm,
            spec.jitter_var,
            derive(spec.seed, 0x9a),
        );
        let (audio_encoder, text_encoder) =
            build_reference_encoders(&classes, 8000, DEFAULT_DIM, gap, derive(spec.seed, 0xe0))?;

        let train_set = synth_dataset(
            &classes,
            &SynthConfig::new(spec.clips_per_class, derive(spec.seed, 0xd5)),
        )?;
        let clip_captions = assign_clip_captions(
            &classes,
            &train_set,
            CACHE_CAPTIONS_PER_CLASS,
            derive(spec.seed, 0xcc),
        );
        let clip_labels = train_set
            .class_ids
            .iter()
            .map(|&c| classes[c].name.clone())
            .collect();

        let mut enriched = label_captions(&classes);
        enriched.extend(train_captions(&classes, CACHE_CAPTIONS_PER_CLASS));
        let enriched_cache = EmbeddingCache::build(&enriched, &text_encoder)?;
        let label_cache = EmbeddingCache::build(&label_captions(&classes), &text_encoder)?;

        let test_set = synth_dataset(
            &classes,
            &SynthConfig::new(spec.test_clips_per_class, derive(spec.seed, 0x7e)),
        )?;
        let queries = test_captions(&classes, TEST_QUERIES_PER_CLASS);
        let test_examples = build_eval_examples(
            &test_set,
            &queries,
            derive(spec.seed, 0xef),
            PAIRINGS_PER_CLIP,
        )?;

        // validation draws captions from the cache pool, never the test pool
        let val_set = synth_dataset(
            &classes,
            &SynthConfig::new(spec.test_clips_per_class.max(2), derive(spec.seed, 0x1a)),
        )?;
        let val_queries: Vec<(usize, String)> = classes
            .iter()
            .flat_map(|c| {
                c.paraphrases()
                    .iter()
                    .take(TEST_QUERIES_PER_CLASS)
                    .map(|q| (c.class_id, q.clone()))
                    .collect::<Vec<_>>()
            })
            .collect();
        let validation_examples =
            build_eval_examples(&val_set, &val_queries, derive(spec.seed, 0x1b), 2)?;

        Ok(ExperimentContext {
            spec,
            classes,
            audio_encoder,
            text_encoder,
            train_set,
            clip_captions,
            clip_labels,
            enriched_cache,
            label_cache,
            test_examples,
            validation_examples,
        })
    }

    fn train_config(&self, strategy: StrategyConfig) -> TrainConfig {
        TrainConfig {
            batch_size: self.spec.batch_size,
            ..TrainConfig::desk_default(strategy, self.spec.seed)
        }
        .with_steps(self.spec.steps)
    }

    /// Train one arm and evaluate it on the shared text-queried test set.
    pub fn run_arm(&self, strategy: StrategyConfig, cache: CacheChoice) -> Result<ArmResult> {
        let cache_ref = match cache {
            CacheChoice::None => None,
            CacheChoice::Enriched => Some(&self.enriched_cache),
            CacheChoice::LabelOnly => Some(&self.label_cache),
        };
        let cfg = self.train_config(strategy.clone());
        let res = TrainResources {
            clips: &self.train_set.clips,
            class_ids: &self.train_set.class_ids,
            clip_captions: Some(&self.clip_captions),
            clip_labels: Some(&self.clip_labels),
            audio_encoder: strategy
                .strategy
                .uses_audio_encoder()
                .then_some(&self.audio_encoder as &dyn crate::embed::AudioEncoder),
            text_encoder: Some(&self.text_encoder),
            cache: cache_ref,
            validation: None,
        };
        let outcome = train(&cfg, &res, None)?;
        let sep = Separator::new(outcome.params);
        let test = evaluate(&sep, &self.test_examples, &self.text_encoder)?;
        let validation = evaluate(&sep, &self.validation_examples, &self.text_encoder)?;
        Ok(ArmResult {
            strategy: strategy.strategy,
            noise_var: strategy.effective_variance(),
            cache_hash: cache_ref.map(cache_fingerprint),
            seed: self.spec.seed,
            steps: outcome.steps_run,
            test_sdri: test.mean_sdri,
            test_si_sdri: test.mean_si_sdri,
            val_sdri: validation.mean_sdri,
            val_si_sdri: validation.mean_si_sdri,
            failure: None,
        })
    }

    /// Like [`ExperimentContext::run_arm`] but converts a failure into a
    /// marked row instead of aborting the whole table.
    pub fn run_arm_tolerant(&self, strategy: StrategyConfig, cache: CacheChoice) -> ArmResult {
        let s = strategy.strategy;
        let noise = strategy.effective_variance();
        self.run_arm(strategy, cache).unwrap_or_else(|e| ArmResult {
            strategy: s,
            noise_var: noise,
            cache_hash: None,
            seed: self.spec.seed,
            steps: 0,
            test_sdri: f64::NAN,
            test_si_sdri: f64::NAN,
            val_sdri: f64::NAN,
            val_si_sdri: f64::NAN,
            failure: Some(e.to_string()),
        })
    }
}

fn derive(seed: u64, tag: u64) -> u64 {
    crate::rng::derive_seed(seed, &[tag])
}

/// Which cache an arm trains against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheChoice {
    None,
    Enriched,
    LabelOnly,
}

/// Stable fingerprint of a cache's contents.
pub fn cache_fingerprint(cache: &EmbeddingCache) -> String {
    let mut bytes = Vec::with_capacity(cache.len() * cache.dim() * 4);
    for i in 0..cache.len() {
        for v in cache.row(i) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(cache.caption(i).as_bytes());
    }
    format!("{:016x}", fnv1a(&bytes))
}

/// One trained-and-evaluated arm.
#[derive(Debug, Clone)]
pub struct ArmResult {
    pub strategy: Strategy,
    pub noise_var: f64,
    pub cache_hash: Option<String>,
    pub seed: u64,
    pub steps: u64,
    pub test_sdri: f64,
    pub test_si_sdri: f64,
    pub val_sdri: f64,
    pub val_si_sdri: f64,
    pub failure: Option<String>,
}

impl ArmResult {
    pub fn csv_header() -> &'static str {
        "strategy,noise_var,cache_hash,seed,steps,test_sdri,test_si_sdri,val_sdri,val_si_sdri,status"
    }

    pub fn csv_row(&self) -> String {
        let status = match &self.failure {
            None => "ok".to_string(),
            Some(e) => format!("failed: {}", e.replace(',', ";")),
        };
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            self.strategy.name(),
            self.noise_var,
            self.cache_hash.as_deref().unwrap_or("none"),
            self.seed,
            self.steps,
            self.test_sdri,
            self.test_si_sdri,
            self.val_sdri,
            self.val_si_sdri,
            status
        )
    }
}

/// Build text-queried eval examples: every test clip is paired with
/// `pairings` seeded interference clips drawn from other classes, queried
/// by a caption of its class from `queries`.
pub fn build_eval_examples(
    dataset: &SynthDataset,
    queries: &[(usize, String)],
    seed: u64,
    pairings: usize,
) -> Result<Vec<EvalExample>> {
    let mut out = Vec::new();
    for (i, (clip, &cid)) in dataset.clips.iter().zip(&dataset.class_ids).enumerate() {
        let others: Vec<usize> = dataset
            .class_ids
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != cid)
            .map(|(j, _)| j)
            .collect();
        if others.is_empty() {
            return Err(Error::InvalidConfig(
                "test set needs at least two classes".into(),
            ));
        }
        let class_queries: Vec<&String> = queries
            .iter()
            .filter(|(qc, _)| *qc == cid)
            .map(|(_, q)| q)
            .collect();
        if class_queries.is_empty() {
            return Err(Error::MissingCaption(i));
        }
        let mut rng = derived_rng(seed, &[stream::EVAL_PAIRING, i as u64]);
        for p in 0..pairings {
            let interf = others[rng.gen_range(0..others.len())];
            let caption = class_queries[rng.gen_range(0..class_queries.len())];
            let pair = mix(clip, &dataset.clips[interf])?;
            out.push(EvalExample {
                id: format!("clip{i:04}_p{p}"),
                mixture: pair.mixture,
                target: pair.target,
                caption: Some(caption.clone()),
                class_id: cid,
            });
        }
    }
    Ok(out)
}

/// Machine-readable run manifest; one entry per arm.
fn manifest_json(rows: &[ArmResult], spec: &ExperimentSpec, name: &str) -> String {
    use serde_json::json;
    let arms: Vec<_> = rows
        .iter()
        .map(|r| {
            json!({
                "strategy": r.strategy.name(),
                "noise_var": r.noise_var,
                "cache_hash": r.cache_hash,
                "seed": r.seed,
                "steps": r.steps,
                "status": r.failure.as_deref().unwrap_or("ok"),
            })
        })
        .collect();
    serde_json::to_string_pretty(&json!({
        "experiment": name,
        "world": spec.world.name(),
        "seed": spec.seed,
        "steps": spec.steps,
        "batch_size": spec.batch_size,
        "gap_norm": spec.gap_norm,
        "jitter_var": spec.jitter_var,
        "arms": arms,
    }))
    .expect("manifest serializes")
}

fn write_results(
    dir: &Path,
    name: &str,
    spec: &ExperimentSpec,
    header: &str,
    rows_csv: &[String],
    rows: &[ArmResult],
) -> Result<PathBuf> {
    let mut csv = String::from(header);
    csv.push('\n');
    for r in rows_csv {
        csv.push_str(r);
        csv.push('\n');
    }
    let csv_path = dir.join(format!("{name}.csv"));
    fsutil::atomic_write(&csv_path, csv.as_bytes())?;
    fsutil::atomic_write(
        &dir.join(format!("{name}_manifest.json")),
        manifest_json(rows, spec, name).as_bytes(),
    )?;
    Ok(csv_path)
}

/// Strategy comparison: one model per strategy from the same seeds and
/// dataset. Retrieval arms use the enriched cache.
pub fn run_strategy_comparison(
    ctx: &ExperimentContext,
    strategies: &[Strategy],
) -> Result<(Vec<ArmResult>, PathBuf)> {
    if strategies.is_empty() {
        return Err(Error::InvalidConfig("empty strategy grid".into()));
    }
    let mut rows = Vec::new();
    for &s in strategies {
        let cfg = StrategyConfig::new(s, DEFAULT_NOISE_VAR, DEFAULT_NOISE_VAR_RETRIEVAL)?;
        let cache = if s.uses_cache() {
            CacheChoice::Enriched
        } else {
            CacheChoice::None
        };
        rows.push(ctx.run_arm_tolerant(cfg, cache));
    }
    let csv_rows: Vec<String> = rows.iter().map(|r| r.csv_row()).collect();
    let path = write_results(
        &ctx.spec.out_dir,
        "strategy_comparison",
        &ctx.spec,
        ArmResult::csv_header(),
        &csv_rows,
        &rows,
    )?;
    Ok((rows, path))
}

/// Noise sweep: one trained model per (strategy, variance) grid point for
/// the vanilla and retrieval strategies.
pub fn run_noise_sweep(
    ctx: &ExperimentContext,
    variances: &[f64],
) -> Result<(Vec<ArmResult>, PathBuf)> {
    if variances.is_empty() {
        return Err(Error::InvalidConfig("empty variance grid".into()));
    }
    if variances.iter().any(|&v| !(0.0..=0.1).contains(&v)) {
        return Err(Error::InvalidConfig(
            "noise variances must lie in [0, 1e-1]".into(),
        ));
    }
    let mut rows = Vec::new();
    for &(strategy_base, strategy_ni) in &[
        (Strategy::Vanilla, Strategy::VanillaNi),
        (Strategy::Retrieval, Strategy::RetrievalNi),
    ] {
        for &v in variances {
            let s = if v == 0.0 { strategy_base } else { strategy_ni };
            let cfg = StrategyConfig::new(s, v, v)?;
            let cache = if s.uses_cache() {
                CacheChoice::Enriched
            } else {
                CacheChoice::None
            };
            rows.push(ctx.run_arm_tolerant(cfg, cache));
        }
    }
    let csv_rows: Vec<String> = rows.iter().map(|r| r.csv_row()).collect();
    let path = write_results(
        &ctx.spec.out_dir,
        "noise_sweep",
        &ctx.spec,
        ArmResult::csv_header(),
        &csv_rows,
        &rows,
    )?;
    Ok((rows, path))
}

/// Cache ablation: retrieval trained on the label-only cache versus the
/// enriched cache, both evaluated on paraphrase test queries.
pub fn run_cache_ablation(ctx: &ExperimentContext) -> Result<(Vec<ArmResult>, PathBuf)> {
    let cfg = StrategyConfig::new(Strategy::Retrieval, 0.0, 0.0)?;
    let rows = vec![
        ctx.run_arm_tolerant(cfg.clone(), CacheChoice::LabelOnly),
        ctx.run_arm_tolerant(cfg, CacheChoice::Enriched),
    ];
    let csv_rows: Vec<String> = rows
        .iter()
        .zip(["label_only", "enriched"])
        .map(|(r, arm)| format!("{arm},{}", r.csv_row()))
        .collect();
    let header = format!("cache_arm,{}", ArmResult::csv_header());
    let path = write_results(
        &ctx.spec.out_dir,
        "cache_ablation",
        &ctx.spec,
        &header,
        &csv_rows,
        &rows,
    )?;
    Ok((rows, path))
}
