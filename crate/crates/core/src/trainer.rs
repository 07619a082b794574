//! The end-to-end training loop: batch sampling, shuffle-mix, conditioning,
//! negative-SI-SDR loss, gradient step, LR schedule, logging — plus
//! text-queried evaluation.
//!
//! Every random draw derives statelessly from (seed, stream, step, slot),
//! so a run is a pure function of its config and resuming from a saved
//! state reproduces the uninterrupted trajectory bit-exactly.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::cache::EmbeddingCache;
use crate::condition::{
    condition_supervised, condition_weak_label, ConditionEmbedding, Provenance, Strategy,
    StrategyConfig,
};
use crate::embed::{AudioEncoder, Embedding, TextEncoder};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, loss_and_grad, MetricReport};
use crate::rng::{derived_rng, stream};
use crate::separator::{
    adam_step, AdamState, Separator, SeparatorDims, SeparatorGrads, SeparatorParams,
};
use crate::signal::{shuffle_mix, Waveform};

/// Training knobs. Everything else (data, encoders, cache) arrives through
/// [`TrainResources`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub milestones: Vec<u64>,
    pub strategy: StrategyConfig,
    pub seed: u64,
    pub checkpoint_every: Option<u64>,
    pub eval_every: u64,
    /// Early stop after this many evaluations without validation SI-SDRi
    /// improvement. `None` disables early stopping.
    pub early_stop_patience: Option<u32>,
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Desk-scale default recipe: B=16, 3000 steps, lr 1e-3 decaying by
    /// 0.32 at 60% and 85% of the budget.
    pub fn desk_default(strategy: StrategyConfig, seed: u64) -> Self {
        let steps = 3000;
        TrainConfig {
            batch_size: 16,
            steps,
            initial_lr: 1e-3,
            decay_factor: 0.32,
            milestones: vec![steps * 60 / 100, steps * 85 / 100],
            strategy,
            seed,
            checkpoint_every: None,
            eval_every: 200,
            early_stop_patience: None,
            out_dir: None,
        }
    }

    /// Change the step budget, moving the milestones to 60%/85% of it.
    pub fn with_steps(mut self, steps: u64) -> Self {
        self.steps = steps;
        self.milestones = if steps > 1 {
            vec![steps * 60 / 100, steps * 85 / 100]
        } else {
            vec![]
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.initial_lr > 0.0) {
            return Err(Error::InvalidConfig("initial lr must be > 0".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::InvalidConfig(
                "decay factor must be in (0, 1]".into(),
            ));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "milestones must be strictly ascending".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval cadence must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        lr_schedule(step, self.initial_lr, self.decay_factor, &self.milestones)
    }

    /// Serialize as line-oriented key=value text.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        push("batch_size", self.batch_size.to_string());
        push("steps", self.steps.to_string());
        push("initial_lr", format!("{}", self.initial_lr));
        push("decay_factor", format!("{}", self.decay_factor));
        push(
            "milestones",
            self.milestones
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        push("strategy", self.strategy.strategy.name().to_string());
        push("noise_var", format!("{}", self.strategy.noise_var));
        push(
            "noise_var_retrieval",
            format!("{}", self.strategy.noise_var_retrieval),
        );
        push("seed", self.seed.to_string());
        if let Some(c) = self.checkpoint_every {
            push("checkpoint_every", c.to_string());
        }
        push("eval_every", self.eval_every.to_string());
        if let Some(p) = self.early_stop_patience {
            push("early_stop_patience", p.to_string());
        }
        out
    }

    /// Parse the key=value format written by [`TrainConfig::to_kv`].
    /// Unknown keys are rejected; '#' starts a comment line.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::desk_default(
            StrategyConfig::new(Strategy::Supervised, 0.0, 0.0)?,
            0,
        );
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e| {
                Error::InvalidConfig(format!("key '{key}': cannot parse '{value}': {e}"))
            })
        }
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!(
                    "config line {}: expected key=value, got '{line}'",
                    i + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "batch_size" => cfg.batch_size = parse(key, value)?,
                "steps" => cfg.steps = parse(key, value)?,
                "initial_lr" => cfg.initial_lr = parse(key, value)?,
                "decay_factor" => cfg.decay_factor = parse(key, value)?,
                "milestones" => {
                    cfg.milestones = value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| parse(key, s.trim()))
                        .collect::<Result<_>>()?
                }
                "strategy" => cfg.strategy.strategy = value.parse()?,
                "noise_var" => cfg.strategy.noise_var = parse(key, value)?,
                "noise_var_retrieval" => cfg.strategy.noise_var_retrieval = parse(key, value)?,
                "seed" => cfg.seed = parse(key, value)?,
                "checkpoint_every" => cfg.checkpoint_every = Some(parse(key, value)?),
                "eval_every" => cfg.eval_every = parse(key, value)?,
                "early_stop_patience" => cfg.early_stop_patience = Some(parse(key, value)?),
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "config line {}: unknown key '{other}'",
                        i + 1
                    )));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Stepped exponential decay: lr = initial * factor^(#milestones <= step).
pub fn lr_schedule(step: u64, initial: f64, factor: f64, milestones: &[u64]) -> f64 {
    let hits = milestones.iter().filter(|&&m| m <= step).count() as i32;
    initial * factor.powi(hits)
}

/// Everything the loop needs besides the config. Clip-level inputs are
/// parallel arrays indexed by clip.
pub struct TrainResources<'a> {
    pub clips: &'a [Waveform],
    pub class_ids: &'a [usize],
    pub clip_captions: Option<&'a [String]>,
    pub clip_labels: Option<&'a [String]>,
    pub audio_encoder: Option<&'a dyn AudioEncoder>,
    pub text_encoder: Option<&'a dyn TextEncoder>,
    pub cache: Option<&'a EmbeddingCache>,
    /// Validation set for periodic evaluation / early stopping.
    pub validation: Option<&'a [EvalExample]>,
}

/// Per-clip condition source. Audio embeddings, cache hits, and caption
/// embeddings are deterministic per clip, so they are computed once; only
/// the injected noise is drawn per (step, slot).
struct Conditioner<'a> {
    strategy: Strategy,
    noise_var: f64,
    static_conds: Option<Vec<ConditionEmbedding>>,
    audio_emb: Option<Vec<Embedding>>,
    retrieval: Option<(&'a EmbeddingCache, Vec<(usize, f64)>)>,
}

impl<'a> Conditioner<'a> {
    fn build(cfg: &TrainConfig, res: &TrainResources<'a>) -> Result<Self> {
        let strategy = cfg.strategy.strategy;
        let noise_var = cfg.strategy.effective_variance();
        let missing = |what: &str| {
            Error::InvalidConfig(format!("strategy {} requires {what}", strategy.name()))
        };
        if res.cache.is_some() != strategy.uses_cache() {
            return Err(Error::InvalidConfig(format!(
                "embedding cache must be present exactly when the strategy \
                 is retrieval (strategy {}, cache given: {})",
                strategy.name(),
                res.cache.is_some()
            )));
        }
        match strategy {
            Strategy::Supervised => {
                let captions = res.clip_captions.ok_or_else(|| missing("clip captions"))?;
                let text = res.text_encoder.ok_or_else(|| missing("a text encoder"))?;
                if captions.len() != res.clips.len() {
                    return Err(Error::DimensionMismatch {
                        context: "clip captions",
                        expected: res.clips.len(),
                        got: captions.len(),
                    });
                }
                let conds = captions
                    .iter()
                    .map(|c| condition_supervised(c, text))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Conditioner {
                    strategy,
                    noise_var,
                    static_conds: Some(conds),
                    audio_emb: None,
                    retrieval: None,
                })
            }
            Strategy::Weak => {
                let labels = res.clip_labels.ok_or_else(|| missing("clip labels"))?;
                let text = res.text_encoder.ok_or_else(|| missing("a text encoder"))?;
                if labels.len() != res.clips.len() {
                    return Err(Error::DimensionMismatch {
                        context: "clip labels",
                        expected: res.clips.len(),
                        got: labels.len(),
                    });
                }
                let conds = labels
                    .iter()
                    .map(|l| condition_weak_label(l, text))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Conditioner {
                    strategy,
                    noise_var,
                    static_conds: Some(conds),
                    audio_emb: None,
                    retrieval: None,
                })
            }
            Strategy::Vanilla | Strategy::VanillaNi => {
                let audio = res
                    .audio_encoder
                    .ok_or_else(|| missing("an audio encoder"))?;
                let emb = res
                    .clips
                    .iter()
                    .map(|c| audio.encode_audio(c))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Conditioner {
                    strategy,
                    noise_var,
                    static_conds: None,
                    audio_emb: Some(emb),
                    retrieval: None,
                })
            }
            Strategy::Retrieval | Strategy::RetrievalNi => {
                let audio = res
                    .audio_encoder
                    .ok_or_else(|| missing("an audio encoder"))?;
                let cache = res.cache.ok_or_else(|| missing("an embedding cache"))?;
                let queries = res
                    .clips
                    .iter()
                    .map(|c| audio.encode_audio(c))
                    .collect::<Result<Vec<_>>>()?;
                let hits = cache.retrieve_batch(&queries)?;
                Ok(Conditioner {
                    strategy,
                    noise_var,
                    static_conds: None,
                    audio_emb: None,
                    retrieval: Some((cache, hits)),
                })
            }
        }
    }

    /// Condition for one batch slot. `rng` is the slot's derived noise
    /// stream; draws happen in the same order as in the corresponding
    /// `condition_*` operation.
    fn condition(&self, clip_idx: usize, rng: &mut rand_chacha::ChaCha8Rng) -> ConditionEmbedding {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut with_noise = |mut values: Vec<f64>, provenance: Provenance| {
            if self.noise_var > 0.0 {
                let std = self.noise_var.sqrt();
                for v in values.iter_mut() {
                    *v += std * rng.sample::<f64, _>(StandardNormal);
                }
            }
            ConditionEmbedding {
                values,
                provenance,
                noise_variance_applied: self.noise_var,
            }
        };
        match self.strategy {
            Strategy::Supervised | Strategy::Weak => {
                self.static_conds.as_ref().unwrap()[clip_idx].clone()
            }
            Strategy::Vanilla | Strategy::VanillaNi => with_noise(
                self.audio_emb.as_ref().unwrap()[clip_idx].values.clone(),
                Provenance::VanillaAudio,
            ),
            Strategy::Retrieval | Strategy::RetrievalNi => {
                let (cache, hits) = self.retrieval.as_ref().unwrap();
                let (index, similarity) = hits[clip_idx];
                with_noise(
                    cache.row_embedding(index).values,
                    Provenance::Retrieval { index, similarity },
                )
            }
        }
    }
}

/// One executed training step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub strategy: &'static str,
    /// Retrieved cache row per batch slot, empty for non-retrieval runs.
    pub retrieved: Vec<usize>,
    pub grad_norm: f64,
}

impl TrainRecord {
    pub fn csv_header() -> &'static str {
        "step,loss,lr,strategy,retrieved,grad_norm"
    }

    pub fn csv_row(&self) -> String {
        let retrieved = if self.retrieved.is_empty() {
            "none".to_string()
        } else {
            self.retrieved
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(";")
        };
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.lr, self.strategy, retrieved, self.grad_norm
        )
    }
}

/// Full log of a run.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TrainRecord::csv_header());
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub params: SeparatorParams,
    pub log: TrainLog,
    /// Steps actually executed (less than the budget if early-stopped).
    pub steps_run: u64,
}

const STATE_MAGIC: &[u8; 4] = b"TRS1";
const STATE_VERSION: u32 = 1;

/// Full-precision training state for bit-exact resume: parameters, Adam
/// moments, and the next step index. (The evaluation checkpoint format
/// stores f32 and cannot reproduce a trajectory.)
pub struct TrainState {
    pub params: SeparatorParams,
    pub adam: AdamState,
    pub next_step: u64,
}

fn read_bytes(file: &mut std::fs::File, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    file.read_exact(buf).map_err(|_| Error::CorruptCheckpoint {
        offset: *offset,
        reason: "unexpected end of file".into(),
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let dims = self.params.dims;
        let n = dims.param_count();
        let mut buf = Vec::with_capacity(40 + 3 * n * 8);
        buf.extend_from_slice(STATE_MAGIC);
        buf.extend_from_slice(&STATE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(dims.n_bins as u32).to_le_bytes());
        buf.extend_from_slice(&(dims.hidden as u32).to_le_bytes());
        buf.extend_from_slice(&(dims.cond as u32).to_le_bytes());
        buf.extend_from_slice(&self.next_step.to_le_bytes());
        buf.extend_from_slice(&self.adam.step_count().to_le_bytes());
        let mut write_block = |fields: [&[f64]; 8]| {
            for f in fields {
                for &v in f {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        write_block(param_fields(&self.params));
        let (m, v) = self.adam.moments();
        write_block(grad_fields(m));
        write_block(grad_fields(v));
        crate::fsutil::atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |offset: u64, reason: String| Error::CorruptCheckpoint { offset, reason };
        let mut offset = 0u64;

        let mut magic = [0u8; 4];
        read_bytes(&mut file, &mut magic, &mut offset)?;
        if &magic != STATE_MAGIC {
            return Err(corrupt(0, format!("bad magic {magic:?}")));
        }
        let mut u32b = [0u8; 4];
        read_bytes(&mut file, &mut u32b, &mut offset)?;
        if u32::from_le_bytes(u32b) != STATE_VERSION {
            return Err(corrupt(4, "unsupported version".into()));
        }
        let mut dims_raw = [0usize; 3];
        for d in dims_raw.iter_mut() {
            read_bytes(&mut file, &mut u32b, &mut offset)?;
            *d = u32::from_le_bytes(u32b) as usize;
        }
        let dims = SeparatorDims {
            n_bins: dims_raw[0],
            hidden: dims_raw[1],
            cond: dims_raw[2],
        };
        if dims.param_count() == 0 {
            return Err(corrupt(8, "zero dimension".into()));
        }
        let mut u64b = [0u8; 8];
        read_bytes(&mut file, &mut u64b, &mut offset)?;
        let next_step = u64::from_le_bytes(u64b);
        read_bytes(&mut file, &mut u64b, &mut offset)?;
        let adam_t = u64::from_le_bytes(u64b);

        let mut read_block = |file: &mut std::fs::File,
                              target: [&mut [f64]; 8],
                              offset: &mut u64|
         -> Result<()> {
            let mut f64b = [0u8; 8];
            for field in target {
                for v in field.iter_mut() {
                    read_bytes(file, &mut f64b, offset)?;
                    *v = f64::from_le_bytes(f64b);
                }
            }
            Ok(())
        };

        let mut params = SeparatorParams::init(dims, 0);
        read_block(&mut file, param_fields_mut(&mut params), &mut offset)?;
        let mut m = SeparatorGrads::zeros(dims);
        read_block(&mut file, grad_fields_mut(&mut m), &mut offset)?;
        let mut v = SeparatorGrads::zeros(dims);
        read_block(&mut file, grad_fields_mut(&mut v), &mut offset)?;
        Ok(TrainState {
            params,
            adam: AdamState::restore(dims, m, v, adam_t),
            next_step,
        })
    }
}

fn param_fields(p: &SeparatorParams) -> [&[f64]; 8] {
    [
        p.w1.as_slice().unwrap(),
        p.b1.as_slice().unwrap(),
        p.w_gamma.as_slice().unwrap(),
        p.b_gamma.as_slice().unwrap(),
        p.w_beta.as_slice().unwrap(),
        p.b_beta.as_slice().unwrap(),
        p.w2.as_slice().unwrap(),
        p.b2.as_slice().unwrap(),
    ]
}

fn param_fields_mut(p: &mut SeparatorParams) -> [&mut [f64]; 8] {
    [
        p.w1.as_slice_mut().unwrap(),
        p.b1.as_slice_mut().unwrap(),
        p.w_gamma.as_slice_mut().unwrap(),
        p.b_gamma.as_slice_mut().unwrap(),
        p.w_beta.as_slice_mut().unwrap(),
        p.b_beta.as_slice_mut().unwrap(),
        p.w2.as_slice_mut().unwrap(),
        p.b2.as_slice_mut().unwrap(),
    ]
}

fn grad_fields(g: &SeparatorGrads) -> [&[f64]; 8] {
    [
        g.w1.as_slice().unwrap(),
        g.b1.as_slice().unwrap(),
        g.w_gamma.as_slice().unwrap(),
        g.b_gamma.as_slice().unwrap(),
        g.w_beta.as_slice().unwrap(),
        g.b_beta.as_slice().unwrap(),
        g.w2.as_slice().unwrap(),
        g.b2.as_slice().unwrap(),
    ]
}

fn grad_fields_mut(g: &mut SeparatorGrads) -> [&mut [f64]; 8] {
    [
        g.w1.as_slice_mut().unwrap(),
        g.b1.as_slice_mut().unwrap(),
        g.w_gamma.as_slice_mut().unwrap(),
        g.b_gamma.as_slice_mut().unwrap(),
        g.w_beta.as_slice_mut().unwrap(),
        g.b_beta.as_slice_mut().unwrap(),
        g.w2.as_slice_mut().unwrap(),
        g.b2.as_slice_mut().unwrap(),
    ]
}

/// Run the training loop. `resume` continues from a saved [`TrainState`].
pub fn train(
    cfg: &TrainConfig,
    res: &TrainResources<'_>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if res.clips.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    if res.clips.len() < cfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} clips, batch size {} needs at least that many",
            res.clips.len(),
            cfg.batch_size
        )));
    }
    let conditioner = Conditioner::build(cfg, res)?;

    let dims = SeparatorDims::default();
    let (mut sep, mut adam, start_step) = match resume {
        Some(path) => {
            let state = TrainState::load(path)?;
            if state.params.dims != dims {
                return Err(Error::InvalidConfig(
                    "resume state has different model dimensions".into(),
                ));
            }
            (Separator::new(state.params), state.adam, state.next_step)
        }
        None => (
            Separator::init(dims, derive_model_seed(cfg.seed)),
            AdamState::new(dims),
            0,
        ),
    };

    let mut log = TrainLog::default();
    let mut best_val = f64::NEG_INFINITY;
    let mut evals_since_best = 0u32;
    let mut steps_run = start_step;

    for step in start_step..cfg.steps {
        let record = run_one_step(cfg, res, &conditioner, &mut sep, &mut adam, step)?;
        log.records.push(record);
        steps_run = step + 1;

        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, cfg.out_dir.as_ref()) {
            if (step + 1) % every == 0 {
                write_checkpoints(dir, &sep.params, &adam, step + 1)?;
            }
        }

        if let (Some(patience), Some(val)) = (cfg.early_stop_patience, res.validation) {
            if (step + 1) % cfg.eval_every == 0 {
                let text = res.text_encoder.ok_or_else(|| {
                    Error::InvalidConfig("validation needs a text encoder".into())
                })?;
                let report = evaluate(&sep, val, text)?;
                if report.mean_si_sdri > best_val + 1e-9 {
                    best_val = report.mean_si_sdri;
                    evals_since_best = 0;
                } else {
                    evals_since_best += 1;
                    if evals_since_best >= patience {
                        break;
                    }
                }
            }
        }
    }

    if let Some(dir) = cfg.out_dir.as_ref() {
        write_checkpoints(dir, &sep.params, &adam, steps_run)?;
        crate::fsutil::atomic_write(&dir.join("train_log.csv"), log.to_csv().as_bytes())?;
    }
    Ok(TrainOutcome {
        params: sep.params,
        log,
        steps_run,
    })
}

fn derive_model_seed(seed: u64) -> u64 {
    crate::rng::derive_seed(seed, &[stream::MODEL_INIT])
}

fn write_checkpoints(
    dir: &Path,
    params: &SeparatorParams,
    adam: &AdamState,
    next_step: u64,
) -> Result<()> {
    params.save_checkpoint(&dir.join("checkpoint.sep1"))?;
    let state = TrainState {
        params: params.clone(),
        adam: AdamState::restore(
            params.dims,
            adam.moments().0.clone(),
            adam.moments().1.clone(),
            adam.step_count(),
        ),
        next_step,
    };
    state.save(&dir.join("resume.trs1"))
}

/// Exactly one optimization step; pure given (config, resources, state,
/// step index).
fn run_one_step(
    cfg: &TrainConfig,
    res: &TrainResources<'_>,
    conditioner: &Conditioner<'_>,
    sep: &mut Separator,
    adam: &mut AdamState,
    step: u64,
) -> Result<TrainRecord> {
    use rand::Rng;
    let b = cfg.batch_size;
    let n = res.clips.len();

    let mut sample_rng = derived_rng(cfg.seed, &[stream::BATCH_SAMPLE, step]);
    let indices: Vec<usize> = (0..b).map(|_| sample_rng.gen_range(0..n)).collect();
    let batch: Vec<Waveform> = indices.iter().map(|&i| res.clips[i].clone()).collect();

    let mut mix_rng = derived_rng(cfg.seed, &[stream::SHUFFLE_MIX, step]);
    let pairs = shuffle_mix(&batch, &mut mix_rng)?;

    // Per-slot work runs in parallel; the reduction below is strictly in
    // batch order, so results are identical for any thread count.
    let sep_ref: &Separator = sep;
    let slot_results: Vec<Result<(f64, SeparatorGrads, Option<usize>)>> = {
        use rayon::prelude::*;
        pairs
            .par_iter()
            .enumerate()
            .map(|(slot, pair)| {
                let mut noise_rng =
                    derived_rng(cfg.seed, &[stream::CONDITION_NOISE, step, slot as u64]);
                let cond = conditioner.condition(indices[slot], &mut noise_rng);
                let retrieved_idx = cond.provenance.retrieved_index();
                let (est, trace) = sep_ref.forward(&pair.mixture, &cond)?;
                let (loss, grad_est) = loss_and_grad(&est.samples, &pair.target.samples)?;
                let (g, _) = sep_ref.backward(&trace, &grad_est)?;
                Ok((loss, g, retrieved_idx))
            })
            .collect()
    };
    let mut grads = SeparatorGrads::zeros(sep.params.dims);
    let mut loss_sum = 0.0;
    let mut retrieved = Vec::new();
    for r in slot_results {
        let (loss, g, retrieved_idx) = r?;
        grads.add_assign(&g);
        loss_sum += loss;
        if let Some(idx) = retrieved_idx {
            retrieved.push(idx);
        }
    }
    grads.scale(1.0 / b as f64);
    let loss = loss_sum / b as f64;
    if !loss.is_finite() {
        return Err(Error::NanLoss { step, loss });
    }
    let grad_norm = grads.l2_norm();
    let lr = cfg.lr_at(step);
    adam_step(&mut sep.params, &grads, adam, lr).map_err(|e| match e {
        Error::NanGradient { context, .. } => Error::NanGradient { step, context },
        other => other,
    })?;

    Ok(TrainRecord {
        step,
        loss,
        lr,
        strategy: cfg.strategy.strategy.name(),
        retrieved,
        grad_norm,
    })
}

// --- Evaluation -----------------------------------------------------------

/// A text-queried test example.
#[derive(Debug, Clone)]
pub struct EvalExample {
    pub id: String,
    pub mixture: Waveform,
    pub target: Waveform,
    pub caption: Option<String>,
    pub class_id: usize,
}

/// Anything that can extract a target estimate from a mixture given a
/// condition embedding.
pub trait Extractor {
    fn extract(&self, example: &EvalExample, cond: &ConditionEmbedding) -> Result<Waveform>;
}

impl Extractor for Separator {
    fn extract(&self, example: &EvalExample, cond: &ConditionEmbedding) -> Result<Waveform> {
        Ok(self.forward(&example.mixture, cond)?.0)
    }
}

/// Test double: returns the mixture unchanged, so improvement is zero by
/// construction.
pub struct MixturePassthrough;

impl Extractor for MixturePassthrough {
    fn extract(&self, example: &EvalExample, _cond: &ConditionEmbedding) -> Result<Waveform> {
        Ok(example.mixture.clone())
    }
}

/// Aggregate evaluation result.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<(String, MetricReport)>,
    pub skipped_missing_caption: usize,
    pub mean_sdri: f64,
    pub mean_si_sdri: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(MetricReport::csv_header());
        out.push('\n');
        for (id, r) in &self.rows {
            out.push_str(&r.csv_row(id));
            out.push('\n');
        }
        out
    }
}

/// Text-queried evaluation: the condition embedding always comes from
/// [`condition_supervised`] on the example caption, regardless of how the
/// model was trained. Audio embeddings and the cache are structurally out
/// of reach here — this function only receives a text encoder.
pub fn evaluate(
    extractor: &dyn Extractor,
    examples: &[EvalExample],
    text_encoder: &dyn TextEncoder,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(examples.len());
    let mut skipped = 0usize;
    let mut sum_sdri = 0.0;
    let mut sum_si_sdri = 0.0;
    for ex in examples {
        let Some(caption) = ex.caption.as_deref() else {
            skipped += 1;
            continue;
        };
        let cond = condition_supervised(caption, text_encoder)?;
        let est = extractor.extract(ex, &cond)?;
        let report = compute_metrics(&est, &ex.mixture, &ex.target)?;
        sum_sdri += report.sdri_db;
        sum_si_sdri += report.si_sdri_db;
        rows.push((ex.id.clone(), report));
    }
    let n = rows.len().max(1) as f64;
    Ok(EvalReport {
        rows,
        skipped_missing_caption: skipped,
        mean_sdri: sum_sdri / n,
        mean_si_sdri: sum_si_sdri / n,
    })
}
