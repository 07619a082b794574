//! Condition embedding construction for every training/testing strategy.
//!
//! The condition embedding tells the separator which source to extract.
//! During testing it always comes from the text encoder; during training it
//! can come from annotated captions (supervised), prefixed labels (weak),
//! the target audio embedding (vanilla), or the nearest cached text
//! embedding (retrieval), each optionally perturbed by zero-mean Gaussian
//! noise. Noise is parameterized by its VARIANCE: samples are drawn with
//! standard deviation sqrt(var). No renormalization happens after noise.

use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::cache::EmbeddingCache;
use crate::embed::{AudioEncoder, Embedding, TextEncoder};
use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Prefix applied to labels to form language-like queries.
pub const WEAK_LABEL_PREFIX: &str = "The sound of ";

/// Where a condition embedding came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    SupervisedText,
    WeakLabel,
    VanillaAudio,
    Retrieval { index: usize, similarity: f64 },
}

impl Provenance {
    /// Retrieved cache row, if any.
    pub fn retrieved_index(&self) -> Option<usize> {
        match self {
            Provenance::Retrieval { index, .. } => Some(*index),
            _ => None,
        }
    }
}

/// A condition embedding with full provenance, enough to reconstruct the
/// exact vector from the run's seeds.
#[derive(Debug, Clone)]
pub struct ConditionEmbedding {
    pub values: Vec<f64>,
    pub provenance: Provenance,
    pub noise_variance_applied: f64,
}

impl ConditionEmbedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_embedding(&self) -> Embedding {
        Embedding::new(self.values.clone())
    }
}

/// The six selectable strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Supervised,
    Weak,
    Vanilla,
    VanillaNi,
    Retrieval,
    RetrievalNi,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Supervised => "supervised",
            Strategy::Weak => "weak",
            Strategy::Vanilla => "vanilla",
            Strategy::VanillaNi => "vanilla-ni",
            Strategy::Retrieval => "retrieval",
            Strategy::RetrievalNi => "retrieval-ni",
        }
    }

    pub fn uses_cache(&self) -> bool {
        matches!(self, Strategy::Retrieval | Strategy::RetrievalNi)
    }

    pub fn uses_audio_encoder(&self) -> bool {
        matches!(
            self,
            Strategy::Vanilla | Strategy::VanillaNi | Strategy::Retrieval | Strategy::RetrievalNi
        )
    }

    pub fn injects_noise(&self) -> bool {
        matches!(self, Strategy::VanillaNi | Strategy::RetrievalNi)
    }

    pub fn all() -> [Strategy; 6] {
        [
            Strategy::Supervised,
            Strategy::Weak,
            Strategy::Vanilla,
            Strategy::VanillaNi,
            Strategy::Retrieval,
            Strategy::RetrievalNi,
        ]
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Strategy::Supervised),
            "weak" => Ok(Strategy::Weak),
            "vanilla" => Ok(Strategy::Vanilla),
            "vanilla-ni" => Ok(Strategy::VanillaNi),
            "retrieval" => Ok(Strategy::Retrieval),
            "retrieval-ni" => Ok(Strategy::RetrievalNi),
            other => Err(Error::InvalidConfig(format!(
                "unknown strategy '{other}' \
                 (expected supervised|weak|vanilla|vanilla-ni|retrieval|retrieval-ni)"
            ))),
        }
    }
}

/// Strategy plus its noise variances. `noise_var` applies to the vanilla
/// path, `noise_var_retrieval` to the retrieval path; the plain variants
/// ignore both.
#[derive(Debug, Clone)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub noise_var: f64,
    pub noise_var_retrieval: f64,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy, noise_var: f64, noise_var_retrieval: f64) -> Result<Self> {
        if noise_var < 0.0 || noise_var_retrieval < 0.0 {
            return Err(Error::InvalidConfig("noise variance must be >= 0".into()));
        }
        Ok(StrategyConfig {
            strategy,
            noise_var,
            noise_var_retrieval,
        })
    }

    /// The variance actually applied under this strategy.
    pub fn effective_variance(&self) -> f64 {
        match self.strategy {
            Strategy::VanillaNi => self.noise_var,
            Strategy::RetrievalNi => self.noise_var_retrieval,
            _ => 0.0,
        }
    }
}

fn add_noise(values: &mut [f64], variance: f64, rng: &mut impl Rng) {
    if variance > 0.0 {
        let std = variance.sqrt();
        for v in values.iter_mut() {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Supervised conditioning: encode the annotated caption. The test-time
/// query path uses this same operation.
pub fn condition_supervised(
    caption: &str,
    text_encoder: &dyn TextEncoder,
) -> Result<ConditionEmbedding> {
    let e = text_encoder.encode_text(caption)?;
    Ok(ConditionEmbedding {
        values: e.values,
        provenance: Provenance::SupervisedText,
        noise_variance_applied: 0.0,
    })
}

/// Prefix a label into a language-like caption. Labels that already carry
/// the prefix are left untouched (case-sensitive).
pub fn weak_label_caption(label: &str) -> String {
    if label.starts_with(WEAK_LABEL_PREFIX) {
        label.to_string()
    } else {
        format!("{WEAK_LABEL_PREFIX}{label}")
    }
}

/// Weak-label conditioning: encode "The sound of <label>".
pub fn condition_weak_label(
    label: &str,
    text_encoder: &dyn TextEncoder,
) -> Result<ConditionEmbedding> {
    if label.is_empty() {
        return Err(Error::InvalidCaption("empty label".into()));
    }
    let e = text_encoder.encode_text(&weak_label_caption(label))?;
    Ok(ConditionEmbedding {
        values: e.values,
        provenance: Provenance::WeakLabel,
        noise_variance_applied: 0.0,
    })
}

/// Vanilla conditioning: the target audio embedding, optionally perturbed
/// by N(0, variance * I).
pub fn condition_vanilla(
    target: &Waveform,
    audio_encoder: &dyn AudioEncoder,
    noise_var: f64,
    rng: &mut impl Rng,
) -> Result<ConditionEmbedding> {
    if noise_var < 0.0 {
        return Err(Error::InvalidConfig("noise variance must be >= 0".into()));
    }
    let mut values = audio_encoder.encode_audio(target)?.values;
    add_noise(&mut values, noise_var, rng);
    Ok(ConditionEmbedding {
        values,
        provenance: Provenance::VanillaAudio,
        noise_variance_applied: noise_var,
    })
}

/// Retrieval conditioning: the noise-free audio embedding queries the
/// cache; the retrieved row (an exact text embedding) is then perturbed.
pub fn condition_retrieval(
    target: &Waveform,
    audio_encoder: &dyn AudioEncoder,
    cache: &EmbeddingCache,
    noise_var: f64,
    rng: &mut impl Rng,
) -> Result<ConditionEmbedding> {
    if noise_var < 0.0 {
        return Err(Error::InvalidConfig("noise variance must be >= 0".into()));
    }
    let query = audio_encoder.encode_audio(target)?;
    let (index, similarity) = cache.retrieve_top1(&query)?;
    let mut values = cache.row_embedding(index).values;
    add_noise(&mut values, noise_var, rng);
    Ok(ConditionEmbedding {
        values,
        provenance: Provenance::Retrieval { index, similarity },
        noise_variance_applied: noise_var,
    })
}
