//! Synthetic desk-scale dataset: harmonic tone classes with per-clip
//! variation, a caption corpus per class, and WAV/manifest persistence.
//!
//! Three preset worlds of increasing class overlap stand in for real
//! benchmarks: disjoint bands, adjacent bands, and overlapping harmonics.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::rng::{derived_rng, stream};
use crate::signal::Waveform;

/// Uniform sampling range.
pub type Range = (f64, f64);

/// Per-clip amplitude envelope parameters, sampled per clip.
#[derive(Debug, Clone)]
pub struct EnvelopeSpec {
    pub attack_s: Range,
    pub release_s: Range,
    pub tremolo_hz: Range,
    pub tremolo_depth: Range,
}

impl Default for EnvelopeSpec {
    fn default() -> Self {
        EnvelopeSpec {
            attack_s: (0.05, 0.25),
            release_s: (0.05, 0.25),
            tremolo_hz: (1.5, 6.0),
            tremolo_depth: (0.0, 0.5),
        }
    }
}

/// One synthetic sound class: a harmonic tone confined to a frequency band,
/// with caption templates for the text side.
#[derive(Debug, Clone)]
pub struct SynthClassSpec {
    pub class_id: usize,
    pub name: String,
    /// Template 0 is the label-form caption ("The sound of <name>");
    /// the rest are natural-language paraphrases.
    pub caption_templates: Vec<String>,
    pub band_hz: (f64, f64),
    pub harmonics: Vec<u32>,
    pub envelope: EnvelopeSpec,
}

/// Cap on per-class fundamental spread; keeps clips of a class spectrally
/// close while their harmonic amplitudes still vary clip to clip.
const F0_SPREAD: f64 = 1.12;

impl SynthClassSpec {
    pub fn label_caption(&self) -> &str {
        &self.caption_templates[0]
    }

    pub fn paraphrases(&self) -> &[String] {
        &self.caption_templates[1..]
    }

    /// Fundamental range keeping every harmonic inside the band.
    pub fn f0_range(&self) -> Result<Range> {
        let k_min = *self.harmonics.iter().min().unwrap_or(&1) as f64;
        let k_max = *self.harmonics.iter().max().unwrap_or(&1) as f64;
        let lo = self.band_hz.0 / k_min;
        let hi = (self.band_hz.1 / k_max).min(lo * F0_SPREAD);
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidConfig(format!(
                "class {}: harmonics {:?} do not fit band {:?}",
                self.name, self.harmonics, self.band_hz
            )));
        }
        Ok((lo, hi))
    }

    fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.caption_templates.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "class {} has no caption templates",
                self.name
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if self.band_hz.0 <= 0.0 || self.band_hz.1 <= self.band_hz.0 || self.band_hz.1 >= nyquist {
            return Err(Error::InvalidConfig(format!(
                "class {}: band {:?} invalid for Nyquist {nyquist}",
                self.name, self.band_hz
            )));
        }
        if self.harmonics.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "class {} has no harmonics",
                self.name
            )));
        }
        self.f0_range().map(|_| ())
    }
}

/// Build the caption template list for one class: the label caption first,
/// then the deterministic adjective x verb x context cross product.
fn caption_templates(
    name: &str,
    adjectives: [&str; 4],
    verbs: [&str; 4],
    contexts: [&str; 4],
) -> Vec<String> {
    let mut out = Vec::with_capacity(1 + 4 * 4 * 4);
    out.push(format!("The sound of {name}"));
    for adj in adjectives {
        let article = if "aeiou".contains(adj.chars().next().unwrap()) {
            "An"
        } else {
            "A"
        };
        for verb in verbs {
            for ctx in contexts {
                out.push(format!("{article} {adj} {name} {verb} {ctx}"));
            }
        }
    }
    out
}

/// The three preset worlds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorldKind {
    Disjoint,
    Adjacent,
    Overlap,
}

impl WorldKind {
    pub fn name(&self) -> &'static str {
        match self {
            WorldKind::Disjoint => "disjoint",
            WorldKind::Adjacent => "adjacent",
            WorldKind::Overlap => "overlap",
        }
    }

    pub fn all() -> [WorldKind; 3] {
        [WorldKind::Disjoint, WorldKind::Adjacent, WorldKind::Overlap]
    }
}

impl FromStr for WorldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(WorldKind::Disjoint),
            "adjacent" => Ok(WorldKind::Adjacent),
            "overlap" => Ok(WorldKind::Overlap),
            other => Err(Error::InvalidConfig(format!(
                "unknown world '{other}' (expected disjoint|adjacent|overlap)"
            ))),
        }
    }
}

/// Class definitions for a world.
pub fn world_classes(kind: WorldKind) -> Vec<SynthClassSpec> {
    let spec = |class_id: usize,
                name: &str,
                band_hz: (f64, f64),
                harmonics: Vec<u32>,
                adj: [&str; 4],
                verbs: [&str; 4],
                contexts: [&str; 4]| SynthClassSpec {
        class_id,
        name: name.to_string(),
        caption_templates: caption_templates(name, adj, verbs, contexts),
        band_hz,
        harmonics,
        envelope: EnvelopeSpec::default(),
    };
    let ctx = [
        "in the distance",
        "close by",
        "in a large hall",
        "outdoors",
    ];
    match kind {
        WorldKind::Disjoint => vec![
            spec(
                0,
                "thunder",
                (150.0, 450.0),
                vec![1, 2],
                ["deep", "heavy", "rolling", "distant"],
                ["rumbling", "booming", "growling", "echoing"],
                ctx,
            ),
            spec(
                1,
                "organ",
                (700.0, 1500.0),
                vec![1, 2],
                ["warm", "steady", "droning", "mellow"],
                ["humming", "droning", "playing", "sounding"],
                ctx,
            ),
            spec(
                2,
                "flute",
                (1900.0, 2700.0),
                vec![1],
                ["bright", "airy", "clear", "soft"],
                ["whistling", "trilling", "playing", "singing"],
                ctx,
            ),
            spec(
                3,
                "chime",
                (3000.0, 3900.0),
                vec![1],
                ["tiny", "glassy", "sharp", "delicate"],
                ["ringing", "tinkling", "chiming", "jingling"],
                ctx,
            ),
        ],
        WorldKind::Adjacent => vec![
            spec(
                0,
                "horn",
                (300.0, 1100.0),
                vec![1, 2, 3],
                ["low", "deep", "brassy", "loud"],
                ["honking", "blaring", "droning", "sounding"],
                ctx,
            ),
            spec(
                1,
                "siren",
                (1100.0, 1900.0),
                vec![1],
                ["urgent", "loud", "steady", "rising"],
                ["wailing", "howling", "sounding", "blaring"],
                ctx,
            ),
            spec(
                2,
                "whistle",
                (1900.0, 2700.0),
                vec![1],
                ["shrill", "sharp", "piercing", "thin"],
                ["whistling", "shrieking", "piping", "sounding"],
                ctx,
            ),
            spec(
                3,
                "bell",
                (2700.0, 3500.0),
                vec![1],
                ["bright", "clear", "metallic", "small"],
                ["ringing", "chiming", "tolling", "clanging"],
                ctx,
            ),
        ],
        WorldKind::Overlap => vec![
            spec(
                0,
                "cello",
                (400.0, 2000.0),
                vec![1, 2, 3, 4],
                ["rich", "warm", "deep", "somber"],
                ["bowing", "playing", "humming", "resonating"],
                ctx,
            ),
            spec(
                1,
                "viola",
                (1000.0, 2600.0),
                vec![1, 2],
                ["mellow", "smooth", "warm", "full"],
                ["playing", "singing", "swelling", "sounding"],
                ctx,
            ),
            spec(
                2,
                "violin",
                (1500.0, 3200.0),
                vec![1, 2],
                ["bright", "sweet", "high", "silvery"],
                ["playing", "trilling", "singing", "soaring"],
                ctx,
            ),
            spec(
                3,
                "piccolo",
                (2200.0, 3800.0),
                vec![1],
                ["high", "piercing", "light", "brilliant"],
                ["piping", "trilling", "whistling", "fluttering"],
                ctx,
            ),
        ],
    }
}

/// Label-form captions, one per class.
pub fn label_captions(specs: &[SynthClassSpec]) -> Vec<String> {
    specs.iter().map(|s| s.label_caption().to_string()).collect()
}

/// The first `per_class` paraphrases of each class; used to build caches.
pub fn train_captions(specs: &[SynthClassSpec], per_class: usize) -> Vec<String> {
    specs
        .iter()
        .flat_map(|s| s.paraphrases().iter().take(per_class).cloned())
        .collect()
}

/// The last `per_class` paraphrases of each class, paired with class ids;
/// disjoint from [`train_captions`] as long as the slices do not overlap.
pub fn test_captions(specs: &[SynthClassSpec], per_class: usize) -> Vec<(usize, String)> {
    specs
        .iter()
        .flat_map(|s| {
            let p = s.paraphrases();
            let start = p.len().saturating_sub(per_class);
            p[start..].iter().map(|c| (s.class_id, c.clone())).collect::<Vec<_>>()
        })
        .collect()
}

/// Synthesize one clip of `len` samples for a class.
pub fn synth_clip(
    spec: &SynthClassSpec,
    sample_rate: u32,
    len: usize,
    rng: &mut impl Rng,
) -> Result<Waveform> {
    let (f0_lo, f0_hi) = spec.f0_range()?;
    let f0 = if f0_hi > f0_lo {
        rng.gen_range(f0_lo..f0_hi)
    } else {
        f0_lo
    };
    let amps: Vec<(f64, f64, f64)> = spec
        .harmonics
        .iter()
        .map(|&k| {
            let amp = (k as f64).powf(-0.7) * rng.gen_range(0.35..1.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            (k as f64, amp, phase)
        })
        .collect();
    let trem_hz = rng.gen_range(spec.envelope.tremolo_hz.0..spec.envelope.tremolo_hz.1);
    let trem_depth = rng.gen_range(spec.envelope.tremolo_depth.0..spec.envelope.tremolo_depth.1);
    let trem_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let attack = rng.gen_range(spec.envelope.attack_s.0..spec.envelope.attack_s.1);
    let release = rng.gen_range(spec.envelope.release_s.0..spec.envelope.release_s.1);

    let dur = len as f64 / sample_rate as f64;
    let tau = std::f64::consts::TAU;
    let mut samples = Vec::with_capacity(len);
    for i in 0..len {
        let t = i as f64 / sample_rate as f64;
        let mut carrier = 0.0;
        for &(k, amp, phase) in &amps {
            carrier += amp * (tau * f0 * k * t + phase).sin();
        }
        let trem = 1.0 - trem_depth * (0.5 + 0.5 * (tau * trem_hz * t + trem_phase).sin());
        let env = if t < attack {
            0.5 * (1.0 - (std::f64::consts::PI * t / attack).cos())
        } else if t > dur - release {
            0.5 * (1.0 - (std::f64::consts::PI * (dur - t) / release).cos())
        } else {
            1.0
        };
        samples.push(carrier * trem * env);
    }
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        let scale = 0.95 / peak;
        for s in &mut samples {
            *s *= scale;
        }
    }
    Waveform::new(samples, sample_rate)
}

/// Dataset generation parameters.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub clips_per_class: usize,
    pub clip_len: usize,
    pub sample_rate: u32,
    pub seed: u64,
}

impl SynthConfig {
    /// Desk-scale default: 2 s clips at 8 kHz.
    pub fn new(clips_per_class: usize, seed: u64) -> Self {
        SynthConfig {
            clips_per_class,
            clip_len: 16_000,
            sample_rate: 8_000,
            seed,
        }
    }
}

/// A generated dataset: clip `i` belongs to class `class_ids[i]`.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub clips: Vec<Waveform>,
    pub class_ids: Vec<usize>,
    pub sample_rate: u32,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Indices of all clips of one class.
    pub fn class_indices(&self, class_id: usize) -> Vec<usize> {
        self.class_ids
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class_id)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Generate `clips_per_class` clips for every class. Deterministic given
/// the seed: each clip's generator stream derives from (seed, clip index),
/// so generation may be parallelized per clip without changing output.
pub fn synth_dataset(specs: &[SynthClassSpec], cfg: &SynthConfig) -> Result<SynthDataset> {
    if specs.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 classes, got {}",
            specs.len()
        )));
    }
    for spec in specs {
        spec.validate(cfg.sample_rate)?;
    }
    let mut clips = Vec::with_capacity(specs.len() * cfg.clips_per_class);
    let mut class_ids = Vec::with_capacity(clips.capacity());
    for (ci, spec) in specs.iter().enumerate() {
        for j in 0..cfg.clips_per_class {
            let global = (ci * cfg.clips_per_class + j) as u64;
            let mut rng = derived_rng(cfg.seed, &[stream::DATASET_CLIP, global]);
            clips.push(synth_clip(spec, cfg.sample_rate, cfg.clip_len, &mut rng)?);
            class_ids.push(spec.class_id);
        }
    }
    Ok(SynthDataset {
        clips,
        class_ids,
        sample_rate: cfg.sample_rate,
    })
}

/// Deterministically assign one train-pool caption to every clip, for the
/// supervised strategy.
pub fn assign_clip_captions(
    specs: &[SynthClassSpec],
    dataset: &SynthDataset,
    caption_pool_per_class: usize,
    seed: u64,
) -> Vec<String> {
    dataset
        .class_ids
        .iter()
        .enumerate()
        .map(|(i, &cid)| {
            let spec = &specs[cid];
            let pool: Vec<&String> =
                spec.paraphrases().iter().take(caption_pool_per_class).collect();
            let mut rng = derived_rng(seed, &[stream::CLIP_CAPTION, i as u64]);
            pool[rng.gen_range(0..pool.len())].clone()
        })
        .collect()
}

/// One line of the dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub class_id: usize,
    pub duration: f64,
}

/// Write a waveform as mono 16-bit PCM.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    {
        let cursor = std::io::Cursor::new(&mut buf);
        let mut writer = hound::WavWriter::new(cursor, spec)
            .map_err(|e| Error::Wav { path: path.into(), reason: e.to_string() })?;
        for &s in &w.samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer
                .write_sample(v)
                .map_err(|e| Error::Wav { path: path.into(), reason: e.to_string() })?;
        }
        writer
            .finalize()
            .map_err(|e| Error::Wav { path: path.into(), reason: e.to_string() })?;
    }
    fsutil::atomic_write(path, &buf)
}

/// Read a mono 16-bit PCM file back into a waveform.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::Wav { path: path.into(), reason: e.to_string() })?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 {
        return Err(Error::Wav {
            path: path.into(),
            reason: format!(
                "expected mono 16-bit PCM, got {} ch {} bit",
                spec.channels, spec.bits_per_sample
            ),
        });
    }
    let samples: Vec<f64> = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32767.0))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Wav { path: path.into(), reason: e.to_string() })?;
    Waveform::new(samples, spec.sample_rate)
}

/// Write clips as WAVs under `dir/wavs/` plus a line-delimited manifest.
/// Returns the manifest path.
pub fn write_dataset(dir: &Path, dataset: &SynthDataset) -> Result<PathBuf> {
    let mut lines = Vec::with_capacity(dataset.len());
    for (i, (clip, &cid)) in dataset.clips.iter().zip(&dataset.class_ids).enumerate() {
        let rel = format!("wavs/clip_c{cid}_{i:05}.wav");
        write_wav(&dir.join(&rel), clip)?;
        let entry = ManifestEntry {
            path: rel,
            class_id: cid,
            duration: clip.duration_secs(),
        };
        lines.push(serde_json::to_string(&entry).expect("manifest entry serializes"));
    }
    let manifest = dir.join("manifest.jsonl");
    fsutil::atomic_write_lines(&manifest, &lines)?;
    Ok(manifest)
}

/// Load a dataset from its manifest; WAV paths are relative to the
/// manifest's directory.
pub fn load_dataset(manifest: &Path) -> Result<SynthDataset> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let lines = fsutil::read_lines(manifest)?;
    if lines.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "empty manifest: {}",
            manifest.display()
        )));
    }
    let mut clips = Vec::with_capacity(lines.len());
    let mut class_ids = Vec::with_capacity(lines.len());
    let mut rate = None;
    for (ln, line) in lines.iter().enumerate() {
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
            Error::InvalidConfig(format!("manifest line {}: {e}", ln + 1))
        })?;
        let w = read_wav(&base.join(&entry.path))?;
        match rate {
            None => rate = Some(w.sample_rate),
            Some(r) if r != w.sample_rate => {
                return Err(Error::SampleRateMismatch(r, w.sample_rate))
            }
            _ => {}
        }
        clips.push(w);
        class_ids.push(entry.class_id);
    }
    Ok(SynthDataset {
        clips,
        class_ids,
        sample_rate: rate.unwrap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{band_energy_fraction, mix, Stft};

    #[test]
    fn same_seed_gives_bit_identical_datasets() {
        let specs = world_classes(WorldKind::Adjacent);
        let cfg = SynthConfig::new(3, 42);
        let a = synth_dataset(&specs, &cfg).unwrap();
        let b = synth_dataset(&specs, &cfg).unwrap();
        for (x, y) in a.clips.iter().zip(&b.clips) {
            assert_eq!(x.samples, y.samples);
        }
        assert_eq!(a.class_ids, b.class_ids);
    }

    #[test]
    fn clips_keep_energy_inside_declared_band() {
        let specs = world_classes(WorldKind::Disjoint);
        let cfg = SynthConfig::new(4, 7);
        let ds = synth_dataset(&specs, &cfg).unwrap();
        for (clip, &cid) in ds.clips.iter().zip(&ds.class_ids) {
            let (lo, hi) = specs[cid].band_hz;
            // widen slightly: envelope ramps smear spectral lines a little
            let frac = band_energy_fraction(clip, lo - 30.0, hi + 30.0);
            assert!(frac >= 0.9, "class {cid}: in-band fraction {frac}");
        }
    }

    #[test]
    fn clips_are_peak_normalized() {
        let specs = world_classes(WorldKind::Overlap);
        let ds = synth_dataset(&specs, &SynthConfig::new(2, 9)).unwrap();
        for clip in &ds.clips {
            assert!(clip.peak() <= 1.0 && clip.peak() > 0.9);
        }
    }

    #[test]
    fn oracle_band_mask_separates_disjoint_classes() {
        let specs = world_classes(WorldKind::Disjoint);
        let ds = synth_dataset(&specs, &SynthConfig::new(2, 5)).unwrap();
        let stft = Stft::default();
        // thunder clip + flute clip
        let t_idx = ds.class_indices(0)[0];
        let f_idx = ds.class_indices(2)[0];
        let pair = mix(&ds.clips[t_idx], &ds.clips[f_idx]).unwrap();
        let (lo, hi) = specs[0].band_hz;
        let est = stft.band_mask_filter(&pair.mixture, lo, hi).unwrap();
        let report = crate::metrics::compute_metrics(&est, &pair.mixture, &pair.target).unwrap();
        assert!(report.si_sdri_db > 10.0, "SI-SDRi {}", report.si_sdri_db);
    }

    #[test]
    fn empty_spec_list_is_config_error() {
        let cfg = SynthConfig::new(2, 1);
        assert!(matches!(
            synth_dataset(&[], &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn caption_slices_are_disjoint_and_sized() {
        let specs = world_classes(WorldKind::Adjacent);
        for s in &specs {
            assert!(s.paraphrases().len() >= 25);
            assert!(s.label_caption().starts_with("The sound of "));
        }
        let train = train_captions(&specs, 20);
        let test = test_captions(&specs, 5);
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        for (_, t) in &test {
            assert!(!train.contains(t), "leaked test caption: {t}");
        }
    }

    #[test]
    fn captions_unique_across_classes() {
        for kind in WorldKind::all() {
            let specs = world_classes(kind);
            let mut seen = std::collections::HashSet::new();
            for s in &specs {
                for c in &s.caption_templates {
                    assert!(seen.insert(c.clone()), "duplicate caption: {c}");
                }
            }
        }
    }

    #[test]
    fn wav_and_manifest_round_trip() {
        let specs = world_classes(WorldKind::Adjacent);
        let ds = synth_dataset(&specs, &SynthConfig::new(2, 11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(&manifest).unwrap();
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.class_ids, ds.class_ids);
        assert_eq!(loaded.sample_rate, ds.sample_rate);
        // 16-bit quantization: samples agree to within one LSB.
        for (a, b) in ds.clips.iter().zip(&loaded.clips) {
            for (x, y) in a.samples.iter().zip(&b.samples) {
                assert!((x - y).abs() < 1.0 / 32000.0);
            }
        }
    }

    #[test]
    fn clip_caption_assignment_is_deterministic_and_class_consistent() {
        let specs = world_classes(WorldKind::Adjacent);
        let ds = synth_dataset(&specs, &SynthConfig::new(3, 2)).unwrap();
        let a = assign_clip_captions(&specs, &ds, 20, 77);
        let b = assign_clip_captions(&specs, &ds, 20, 77);
        assert_eq!(a, b);
        for (i, cap) in a.iter().enumerate() {
            let spec = &specs[ds.class_ids[i]];
            assert!(spec.caption_templates.contains(cap));
        }
    }
}
