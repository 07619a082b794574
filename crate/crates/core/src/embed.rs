//! Dual-encoder contract and the deterministic reference implementation.
//!
//! The reference encoders stand in for a pre-trained contrastive
//! language-audio model. The audio tower is a fixed mel-feature extractor
//! followed by a seeded random projection; the text tower resolves captions
//! to known classes by exact template matching and places them at the class
//! audio centroid displaced by a configurable modality gap. This is a
//! stand-in, not NLP: it exists so desk-scale experiments can control the
//! gap exactly. Real encoders plug in through [`StoredTextEncoder`] and the
//! binary exchange format.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{derived_rng, fnv1a, stream};
use crate::signal::{Stft, Waveform};
use crate::synth::{synth_clip, SynthClassSpec};

/// Embedding dimension at desk scale.
pub const DEFAULT_DIM: usize = 64;

/// Number of mel bands in the reference audio features.
pub const N_MEL: usize = 32;

/// Floor inside the per-band log energies.
pub const LOG_FLOOR: f64 = 1e-8;

/// A vector in the shared audio/text space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        let n = self.norm() * other.norm();
        if n > 0.0 {
            self.dot(other) / n
        } else {
            0.0
        }
    }

    fn normalized(mut values: Vec<f64>) -> Self {
        let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            for v in &mut values {
                *v /= n;
            }
        } else {
            // Degenerate input (e.g. digital silence): a fixed unit vector.
            values.iter_mut().for_each(|v| *v = 0.0);
            values[0] = 1.0;
        }
        Embedding { values }
    }
}

/// Audio side of the encoder contract. Implementations must be
/// deterministic and produce unit-norm embeddings.
pub trait AudioEncoder: Sync {
    fn dim(&self) -> usize;
    fn encode_audio(&self, w: &Waveform) -> Result<Embedding>;
}

/// Text side of the encoder contract.
pub trait TextEncoder: Sync {
    fn dim(&self) -> usize;
    fn encode_text(&self, caption: &str) -> Result<Embedding>;
}

/// Systematic audio-to-text displacement plus per-caption isotropic jitter.
#[derive(Debug, Clone)]
pub struct GapModel {
    pub offset: Vec<f64>,
    pub jitter_var: f64,
}

/// Jitter variance giving same-class captions a cosine similarity around
/// 0.9 at D = 64.
pub const DEFAULT_JITTER_VAR: f64 = 0.002;

impl GapModel {
    /// No gap at all: text and audio embeddings of a class coincide.
    pub fn zero(dim: usize) -> Self {
        GapModel {
            offset: vec![0.0; dim],
            jitter_var: 0.0,
        }
    }

    /// Zero offset with the default per-caption jitter.
    pub fn default_jitter(dim: usize) -> Self {
        GapModel {
            offset: vec![0.0; dim],
            jitter_var: DEFAULT_JITTER_VAR,
        }
    }

    /// Random direction scaled to `offset_norm`, seeded.
    pub fn with_offset_norm(dim: usize, offset_norm: f64, jitter_var: f64, seed: u64) -> Self {
        assert!(jitter_var >= 0.0);
        let mut rng = derived_rng(seed, &[stream::GAP_OFFSET]);
        let mut offset: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = offset.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut offset {
            *v *= offset_norm / n;
        }
        GapModel { offset, jitter_var }
    }

    pub fn offset_norm(&self) -> f64 {
        self.offset.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Triangular mel filterbank on the one-sided STFT bin grid.
struct MelBank {
    // N_MEL x n_bins
    weights: Array2<f64>,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelBank {
    fn new(sample_rate: u32, win_len: usize) -> Self {
        let n_bins = win_len / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let points: Vec<f64> = (0..N_MEL + 2)
            .map(|i| {
                let m = mel_max * i as f64 / (N_MEL + 1) as f64;
                mel_to_hz(m) * win_len as f64 / sample_rate as f64
            })
            .collect();
        let mut weights = Array2::zeros((N_MEL, n_bins));
        for b in 0..N_MEL {
            let (lo, mid, hi) = (points[b], points[b + 1], points[b + 2]);
            for k in 0..n_bins {
                let k = k as f64;
                let w = if k >= lo && k <= mid && mid > lo {
                    (k - lo) / (mid - lo)
                } else if k > mid && k <= hi && hi > mid {
                    (hi - k) / (hi - mid)
                } else {
                    0.0
                };
                if w > 0.0 {
                    weights[[b, k as usize]] = w;
                }
            }
        }
        MelBank { weights }
    }
}

/// Reference audio tower: mel log-energy statistics projected into the
/// embedding space.
pub struct ReferenceAudioEncoder {
    dim: usize,
    sample_rate: u32,
    stft: Stft,
    mel: MelBank,
    // dim x (2 * N_MEL)
    projection: Array2<f64>,
}

impl ReferenceAudioEncoder {
    pub fn new(sample_rate: u32, dim: usize, seed: u64) -> Self {
        crate::blas_init::single_thread();
        let mut rng = derived_rng(seed, &[stream::ENCODER_PROJECTION]);
        let scale = 1.0 / (2.0 * N_MEL as f64).sqrt();
        let projection = Array2::from_shape_fn((dim, 2 * N_MEL), |_| {
            rng.sample::<f64, _>(StandardNormal) * scale
        });
        ReferenceAudioEncoder {
            dim,
            sample_rate,
            stft: Stft::default(),
            mel: MelBank::new(sample_rate, Stft::default().win_len()),
            projection,
        }
    }

    /// Raw features: per mel band, the mean and standard deviation over
    /// frames of the floored log energy. Silence yields the log-floor
    /// constant in the mean block and zeros in the std block.
    pub fn mel_log_features(&self, w: &Waveform) -> Result<Vec<f64>> {
        if w.sample_rate != self.sample_rate {
            return Err(Error::SampleRateMismatch(self.sample_rate, w.sample_rate));
        }
        let spec = self.stft.stft(w)?;
        let n_frames = spec.n_frames();
        let n_bins = spec.n_bins();
        let mut out = vec![0.0; 2 * N_MEL];
        let mut power = Array1::zeros(n_bins);
        let mut logs = vec![0.0; n_frames];
        for b in 0..N_MEL {
            for (t, lg) in logs.iter_mut().enumerate() {
                for k in 0..n_bins {
                    power[k] = spec.bins[[k, t]].norm_sqr();
                }
                let e: f64 = self
                    .mel
                    .weights
                    .row(b)
                    .iter()
                    .zip(power.iter())
                    .map(|(w, p)| w * p)
                    .sum();
                *lg = (e + LOG_FLOOR).ln();
            }
            let mean = logs.iter().sum::<f64>() / n_frames as f64;
            let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n_frames as f64;
            out[b] = mean;
            out[N_MEL + b] = var.sqrt();
        }
        Ok(out)
    }
}

/// The silence feature vector; subtracted before projection so cosine
/// similarity reflects band activity rather than the shared log floor.
fn silence_features() -> Vec<f64> {
    let mut f = vec![0.0; 2 * N_MEL];
    for v in f.iter_mut().take(N_MEL) {
        *v = LOG_FLOOR.ln();
    }
    f
}

impl AudioEncoder for ReferenceAudioEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_audio(&self, w: &Waveform) -> Result<Embedding> {
        let feats = self.mel_log_features(w)?;
        let base = silence_features();
        let centered = Array1::from_iter(feats.iter().zip(&base).map(|(f, s)| f - s));
        let projected = self.projection.dot(&centered);
        Ok(Embedding::normalized(projected.to_vec()))
    }
}

/// Reference text tower: exact template matching to a class, then the class
/// audio centroid displaced by the gap model.
pub struct ReferenceTextEncoder {
    dim: usize,
    template_to_class: HashMap<String, usize>,
    centroids: Vec<Vec<f64>>,
    gap: GapModel,
    seed: u64,
}

impl ReferenceTextEncoder {
    pub fn gap(&self) -> &GapModel {
        &self.gap
    }

    /// Centroid embedding of a class, unit norm.
    pub fn class_centroid(&self, class_id: usize) -> Option<Embedding> {
        self.centroids
            .get(class_id)
            .map(|c| Embedding::new(c.clone()))
    }
}

impl TextEncoder for ReferenceTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, caption: &str) -> Result<Embedding> {
        if caption.is_empty() {
            return Err(Error::InvalidCaption("empty caption".into()));
        }
        match self.template_to_class.get(caption) {
            Some(&class) => {
                let centroid = &self.centroids[class];
                let mut v = centroid.clone();
                for (x, g) in v.iter_mut().zip(&self.gap.offset) {
                    *x += g;
                }
                if self.gap.jitter_var > 0.0 {
                    let std = self.gap.jitter_var.sqrt();
                    let mut rng =
                        derived_rng(self.seed, &[stream::TEXT_JITTER, fnv1a(caption.as_bytes())]);
                    for x in v.iter_mut() {
                        *x += std * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                Ok(Embedding::normalized(v))
            }
            None => {
                let mut rng =
                    derived_rng(self.seed, &[stream::TEXT_UNKNOWN, fnv1a(caption.as_bytes())]);
                let v: Vec<f64> = (0..self.dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Ok(Embedding::normalized(v))
            }
        }
    }
}

/// Number of prototype clips averaged into each class centroid.
const CENTROID_CLIPS: usize = 16;

/// Build the paired reference encoders for a world. Both sides share the
/// same projection seed, so with a zero gap the text embedding of a class
/// caption coincides with the class audio centroid.
pub fn build_reference_encoders(
    specs: &[SynthClassSpec],
    sample_rate: u32,
    dim: usize,
    gap: GapModel,
    seed: u64,
) -> Result<(ReferenceAudioEncoder, ReferenceTextEncoder)> {
    if gap.offset.len() != dim {
        return Err(Error::DimensionMismatch {
            context: "gap offset dimension",
            expected: dim,
            got: gap.offset.len(),
        });
    }
    let audio = ReferenceAudioEncoder::new(sample_rate, dim, seed);

    let mut template_to_class = HashMap::new();
    for spec in specs {
        for t in &spec.caption_templates {
            if template_to_class.insert(t.clone(), spec.class_id).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "caption template '{t}' appears in more than one class"
                )));
            }
        }
    }

    let clip_len = 2 * sample_rate as usize;
    let mut centroids = vec![vec![0.0; dim]; specs.len()];
    for spec in specs {
        let mut acc = vec![0.0; dim];
        for j in 0..CENTROID_CLIPS {
            let mut rng = derived_rng(
                seed,
                &[stream::ENCODER_CENTROID, spec.class_id as u64, j as u64],
            );
            let clip = synth_clip(spec, sample_rate, clip_len, &mut rng)?;
            let e = audio.encode_audio(&clip)?;
            for (a, v) in acc.iter_mut().zip(&e.values) {
                *a += v;
            }
        }
        centroids[spec.class_id] = Embedding::normalized(acc).values;
    }

    let text = ReferenceTextEncoder {
        dim,
        template_to_class,
        centroids,
        gap,
        seed,
    };
    Ok((audio, text))
}

// --- Precomputed-embedding exchange format -------------------------------
//
// Binary layout: magic "EMB1", u32 D (LE), u64 count (LE), then `count`
// records of { u64 key-hash (LE), D little-endian f32 }. Keys for captions
// are FNV-1a over the UTF-8 bytes.

const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// Write an embedding exchange file.
pub fn write_embedding_file(path: &Path, dim: usize, entries: &[(u64, Vec<f32>)]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + entries.len() * (8 + dim * 4));
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (key, values) in entries {
        assert_eq!(values.len(), dim, "entry dimension mismatch");
        buf.extend_from_slice(&key.to_le_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::fsutil::atomic_write(path, &buf)
}

fn emb_err(offset: u64, reason: impl Into<String>) -> Error {
    Error::CorruptEmbeddingFile {
        offset,
        reason: reason.into(),
    }
}

/// Read an embedding exchange file.
pub fn read_embedding_file(path: &Path) -> Result<(usize, Vec<(u64, Vec<f32>)>)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0u64;
    let mut read_exact = |buf: &mut [u8], offset: &mut u64| -> Result<()> {
        f.read_exact(buf)
            .map_err(|_| emb_err(*offset, "unexpected end of file"))?;
        *offset += buf.len() as u64;
        Ok(())
    };
    let mut magic = [0u8; 4];
    read_exact(&mut magic, &mut offset)?;
    if &magic != EMB_MAGIC {
        return Err(emb_err(0, format!("bad magic {magic:?}")));
    }
    let mut u32b = [0u8; 4];
    read_exact(&mut u32b, &mut offset)?;
    let dim = u32::from_le_bytes(u32b) as usize;
    let mut u64b = [0u8; 8];
    read_exact(&mut u64b, &mut offset)?;
    let count = u64::from_le_bytes(u64b) as usize;
    let mut entries = Vec::with_capacity(count);
    let mut f32b = [0u8; 4];
    for _ in 0..count {
        read_exact(&mut u64b, &mut offset)?;
        let key = u64::from_le_bytes(u64b);
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            read_exact(&mut f32b, &mut offset)?;
            values.push(f32::from_le_bytes(f32b));
        }
        entries.push((key, values));
    }
    Ok((dim, entries))
}

/// Text encoder backed by precomputed embeddings keyed by caption hash.
pub struct StoredTextEncoder {
    dim: usize,
    map: HashMap<u64, Vec<f64>>,
}

impl StoredTextEncoder {
    pub fn from_file(path: &Path) -> Result<Self> {
        let (dim, entries) = read_embedding_file(path)?;
        let map = entries
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().map(f64::from).collect()))
            .collect();
        Ok(StoredTextEncoder { dim, map })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl TextEncoder for StoredTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, caption: &str) -> Result<Embedding> {
        if caption.is_empty() {
            return Err(Error::InvalidCaption("empty caption".into()));
        }
        self.map
            .get(&fnv1a(caption.as_bytes()))
            .map(|v| Embedding::new(v.clone()))
            .ok_or_else(|| Error::InvalidCaption(format!("no stored embedding for '{caption}'")))
    }
}

/// Key convention for audio entries in the exchange format: FNV-1a over the
/// clip's manifest-relative path.
pub fn audio_key(relative_path: &str) -> u64 {
    fnv1a(relative_path.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_dataset, world_classes, SynthConfig, WorldKind};

    fn world() -> (Vec<SynthClassSpec>, crate::synth::SynthDataset) {
        let specs = world_classes(WorldKind::Disjoint);
        let ds = synth_dataset(&specs, &SynthConfig::new(6, 31)).unwrap();
        (specs, ds)
    }

    #[test]
    fn encode_audio_is_deterministic_and_unit_norm() {
        let (_, ds) = world();
        let enc = ReferenceAudioEncoder::new(8000, DEFAULT_DIM, 5);
        let a = enc.encode_audio(&ds.clips[0]).unwrap();
        let b = enc.encode_audio(&ds.clips[0]).unwrap();
        assert_eq!(a.values, b.values);
        assert!((a.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn same_class_clips_are_close_cross_class_far() {
        let (_, ds) = world();
        let enc = ReferenceAudioEncoder::new(8000, DEFAULT_DIM, 5);
        let e: Vec<Embedding> = ds
            .clips
            .iter()
            .map(|c| enc.encode_audio(c).unwrap())
            .collect();
        let thunder = ds.class_indices(0);
        let flute = ds.class_indices(2);
        let same = e[thunder[0]].cosine(&e[thunder[1]]);
        assert!(same > 0.9, "same-class cosine {same}");
        let cross = e[thunder[0]].cosine(&e[flute[0]]);
        assert!(cross < 0.5, "cross-class cosine {cross}");
    }

    #[test]
    fn silence_features_equal_log_floor_vector() {
        let enc = ReferenceAudioEncoder::new(8000, DEFAULT_DIM, 5);
        let silence = Waveform::zeros(16000, 8000).unwrap();
        let feats = enc.mel_log_features(&silence).unwrap();
        for b in 0..N_MEL {
            assert!((feats[b] - LOG_FLOOR.ln()).abs() < 1e-12);
            assert!(feats[N_MEL + b].abs() < 1e-12);
        }
    }

    #[test]
    fn amplitude_scaling_barely_moves_the_embedding() {
        let (_, ds) = world();
        let enc = ReferenceAudioEncoder::new(8000, DEFAULT_DIM, 5);
        for clip in ds.clips.iter().step_by(5) {
            let half: Vec<f64> = clip.samples.iter().map(|s| 0.5 * s).collect();
            let scaled = Waveform::new(half, clip.sample_rate).unwrap();
            let a = enc.encode_audio(clip).unwrap();
            let b = enc.encode_audio(&scaled).unwrap();
            assert!(a.cosine(&b) > 0.99, "cosine {}", a.cosine(&b));
        }
    }

    #[test]
    fn projection_is_reproducible_from_seed() {
        let (_, ds) = world();
        let a = ReferenceAudioEncoder::new(8000, DEFAULT_DIM, 5);
        let b = ReferenceAudioEncoder::new(8000, DEFAULT_DIM, 5);
        assert_eq!(
            a.encode_audio(&ds.clips[3]).unwrap().values,
            b.encode_audio(&ds.clips[3]).unwrap().values
        );
        let c = ReferenceAudioEncoder::new(8000, DEFAULT_DIM, 6);
        assert_ne!(
            a.encode_audio(&ds.clips[3]).unwrap().values,
            c.encode_audio(&ds.clips[3]).unwrap().values
        );
    }

    #[test]
    fn zero_gap_text_embedding_equals_class_centroid() {
        let (specs, _) = world();
        let (_, text) =
            build_reference_encoders(&specs, 8000, DEFAULT_DIM, GapModel::zero(DEFAULT_DIM), 5)
                .unwrap();
        let e = text.encode_text(specs[1].label_caption()).unwrap();
        let centroid = text.class_centroid(1).unwrap();
        for (a, b) in e.values.iter().zip(&centroid.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn same_class_captions_stay_close_under_default_jitter() {
        let (specs, _) = world();
        let (_, text) = build_reference_encoders(
            &specs,
            8000,
            DEFAULT_DIM,
            GapModel::default_jitter(DEFAULT_DIM),
            5,
        )
        .unwrap();
        let caps = specs[0].paraphrases();
        let a = text.encode_text(&caps[0]).unwrap();
        let b = text.encode_text(&caps[1]).unwrap();
        assert_ne!(a.values, b.values);
        assert!(a.cosine(&b) > 0.8, "cosine {}", a.cosine(&b));
    }

    #[test]
    fn encode_text_is_deterministic() {
        let (specs, _) = world();
        let (_, text) = build_reference_encoders(
            &specs,
            8000,
            DEFAULT_DIM,
            GapModel::with_offset_norm(DEFAULT_DIM, 0.5, 0.01, 9),
            5,
        )
        .unwrap();
        let a = text.encode_text("A deep thunder rumbling outdoors").unwrap();
        let b = text.encode_text("A deep thunder rumbling outdoors").unwrap();
        assert_eq!(a.values, b.values);
        assert!((a.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unknown_caption_maps_to_seeded_unit_vector() {
        let (specs, _) = world();
        let (_, text) =
            build_reference_encoders(&specs, 8000, DEFAULT_DIM, GapModel::zero(DEFAULT_DIM), 5)
                .unwrap();
        let a = text.encode_text("a sound never described before").unwrap();
        let b = text.encode_text("a sound never described before").unwrap();
        assert_eq!(a.values, b.values);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        let c = text.encode_text("a different unseen phrase").unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn empty_caption_is_an_error() {
        let (specs, _) = world();
        let (_, text) =
            build_reference_encoders(&specs, 8000, DEFAULT_DIM, GapModel::zero(DEFAULT_DIM), 5)
                .unwrap();
        assert!(matches!(
            text.encode_text(""),
            Err(Error::InvalidCaption(_))
        ));
    }

    #[test]
    fn growing_gap_offset_lowers_audio_text_cosine() {
        let (specs, ds) = world();
        let mut means = Vec::new();
        for norm in [0.0, 0.5, 1.0] {
            let gap = GapModel::with_offset_norm(DEFAULT_DIM, norm, 0.0, 40);
            let (audio, text) =
                build_reference_encoders(&specs, 8000, DEFAULT_DIM, gap, 5).unwrap();
            let mut total = 0.0;
            let mut count = 0;
            for (clip, &cid) in ds.clips.iter().zip(&ds.class_ids) {
                let q = audio.encode_audio(clip).unwrap();
                let t = text.encode_text(specs[cid].label_caption()).unwrap();
                total += q.cosine(&t);
                count += 1;
            }
            means.push(total / count as f64);
        }
        assert!(
            means[0] > means[1] && means[1] > means[2],
            "cosines not monotone: {means:?}"
        );
    }

    #[test]
    fn embedding_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let entries = vec![
            (audio_key("wavs/a.wav"), vec![1.0f32, 0.0, -0.5, 0.25]),
            (fnv1a(b"The sound of rain"), vec![0.1, 0.2, 0.3, 0.4]),
        ];
        write_embedding_file(&path, 4, &entries).unwrap();
        let (dim, back) = read_embedding_file(&path).unwrap();
        assert_eq!(dim, 4);
        assert_eq!(back, entries);
    }

    #[test]
    fn truncated_embedding_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        write_embedding_file(&path, 4, &[(7, vec![1.0f32, 2.0, 3.0, 4.0])]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match read_embedding_file(&path) {
            Err(Error::CorruptEmbeddingFile { offset, .. }) => assert!(offset > 0),
            other => panic!("expected corrupt-file error, got {other:?}"),
        }
    }

    #[test]
    fn stored_text_encoder_resolves_known_captions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("text.bin");
        let caption = "The sound of rain";
        write_embedding_file(
            &path,
            3,
            &[(fnv1a(caption.as_bytes()), vec![0.6f32, 0.8, 0.0])],
        )
        .unwrap();
        let enc = StoredTextEncoder::from_file(&path).unwrap();
        assert_eq!(enc.dim(), 3);
        let e = enc.encode_text(caption).unwrap();
        assert!((e.values[0] - 0.6).abs() < 1e-7);
        assert!(matches!(
            enc.encode_text("not stored"),
            Err(Error::InvalidCaption(_))
        ));
    }
}
