//! The text-embedding cache: build from captions, persist, and query by
//! exact cosine similarity.
//!
//! Rows are stored in single precision (matching the file format) while all
//! similarity arithmetic runs in double precision, so the argmax is
//! reproducible across platforms. Search is exact: every query scans every
//! row, ties break to the lowest index.

use std::io::Read;
use std::path::Path;

use rayon::prelude::*;

use crate::embed::{Embedding, TextEncoder};
use crate::error::{Error, Result};

const CACHE_MAGIC: &[u8; 4] = b"TEC1";
const CACHE_VERSION: u32 = 1;

/// Immutable matrix of caption embeddings plus the captions themselves.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    dim: usize,
    /// Row-major M x D.
    rows: Vec<f32>,
    captions: Vec<String>,
    row_norms: Vec<f64>,
}

impl EmbeddingCache {
    /// Build directly from rows. Fails on empty input, dimension mismatch,
    /// or non-finite values.
    pub fn from_rows(dim: usize, rows: Vec<f32>, captions: Vec<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("cache dimension is zero".into()));
        }
        if captions.is_empty() {
            return Err(Error::InvalidConfig("cache has no captions".into()));
        }
        if rows.len() != captions.len() * dim {
            return Err(Error::DimensionMismatch {
                context: "cache rows vs captions",
                expected: captions.len() * dim,
                got: rows.len(),
            });
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "cache rows contain non-finite values".into(),
            ));
        }
        let row_norms = (0..captions.len())
            .map(|i| {
                rows[i * dim..(i + 1) * dim]
                    .iter()
                    .map(|&v| {
                        let v = v as f64;
                        v * v
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Ok(EmbeddingCache {
            dim,
            rows,
            captions,
            row_norms,
        })
    }

    /// Encode every caption in order. Encoder failures carry the caption
    /// index.
    pub fn build(captions: &[String], encoder: &dyn TextEncoder) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::InvalidConfig("no captions to encode".into()));
        }
        let dim = encoder.dim();
        let mut rows = Vec::with_capacity(captions.len() * dim);
        for (index, caption) in captions.iter().enumerate() {
            let e = encoder
                .encode_text(caption)
                .map_err(|e| Error::EncoderFailure {
                    index,
                    source: Box::new(e),
                })?;
            if e.dim() != dim {
                return Err(Error::DimensionMismatch {
                    context: "encoder output dimension",
                    expected: dim,
                    got: e.dim(),
                });
            }
            rows.extend(e.values.iter().map(|&v| v as f32));
        }
        EmbeddingCache::from_rows(dim, rows, captions.to_vec())
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn caption(&self, index: usize) -> &str {
        &self.captions[index]
    }

    pub fn captions(&self) -> &[String] {
        &self.captions
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.rows[index * self.dim..(index + 1) * self.dim]
    }

    /// Row as a double-precision embedding.
    pub fn row_embedding(&self, index: usize) -> Embedding {
        Embedding::new(self.row(index).iter().map(|&v| v as f64).collect())
    }

    pub fn row_norm(&self, index: usize) -> f64 {
        self.row_norms[index]
    }

    fn check_query(&self, query: &Embedding) -> Result<f64> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "query dimension",
                expected: self.dim,
                got: query.dim(),
            });
        }
        let norm = query.norm();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(Error::InvalidQuery(format!("query norm {norm}")));
        }
        Ok(norm)
    }

    /// Index and cosine similarity of the most similar row. Ties break to
    /// the lowest index; comparisons are in double precision.
    pub fn retrieve_top1(&self, query: &Embedding) -> Result<(usize, f64)> {
        let qnorm = self.check_query(query)?;
        let (mut best_i, mut best_s) = (0usize, f64::NEG_INFINITY);
        for i in 0..self.len() {
            let s = self.row_similarity(i, &query.values, qnorm);
            if s > best_s {
                best_s = s;
                best_i = i;
            }
        }
        Ok((best_i, best_s))
    }

    /// Top-k rows by similarity, descending; ties by ascending index.
    pub fn retrieve_topk(&self, query: &Embedding, k: usize) -> Result<Vec<(usize, f64)>> {
        let qnorm = self.check_query(query)?;
        let mut all: Vec<(usize, f64)> = (0..self.len())
            .map(|i| (i, self.row_similarity(i, &query.values, qnorm)))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        Ok(all)
    }

    fn row_similarity(&self, i: usize, query: &[f64], qnorm: f64) -> f64 {
        let row = self.row(i);
        let mut acc = 0.0f64;
        for (r, q) in row.iter().zip(query) {
            acc += *r as f64 * q;
        }
        let denom = self.row_norms[i] * qnorm;
        if denom > 0.0 {
            (acc / denom).clamp(-1.0, 1.0)
        } else {
            -1.0
        }
    }

    /// Batched retrieval, element-wise equal to independent
    /// [`EmbeddingCache::retrieve_top1`] calls regardless of the rayon pool
    /// configuration.
    pub fn retrieve_batch(&self, queries: &[Embedding]) -> Result<Vec<(usize, f64)>> {
        queries
            .par_iter()
            .map(|q| self.retrieve_top1(q))
            .collect()
    }

    /// Persist to the binary cache format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf =
            Vec::with_capacity(20 + self.rows.len() * 4 + self.captions.len() * 16);
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.rows {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.captions {
            let bytes = c.as_bytes();
            buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            buf.extend_from_slice(bytes);
        }
        crate::fsutil::atomic_write(path, &buf)
    }

    /// Load and validate a cache file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut offset = 0u64;
        let corrupt = |offset: u64, reason: String| Error::CorruptCache { offset, reason };
        let mut read_exact = |buf: &mut [u8], offset: &mut u64| -> Result<()> {
            file.read_exact(buf)
                .map_err(|_| corrupt(*offset, "unexpected end of file".into()))?;
            *offset += buf.len() as u64;
            Ok(())
        };

        let mut magic = [0u8; 4];
        read_exact(&mut magic, &mut offset)?;
        if &magic != CACHE_MAGIC {
            return Err(corrupt(0, format!("bad magic {magic:?}")));
        }
        let mut u32b = [0u8; 4];
        read_exact(&mut u32b, &mut offset)?;
        let version = u32::from_le_bytes(u32b);
        if version != CACHE_VERSION {
            return Err(corrupt(4, format!("unsupported version {version}")));
        }
        read_exact(&mut u32b, &mut offset)?;
        let dim = u32::from_le_bytes(u32b) as usize;
        if dim == 0 || dim > 1 << 20 {
            return Err(corrupt(8, format!("implausible dimension {dim}")));
        }
        let mut u64b = [0u8; 8];
        read_exact(&mut u64b, &mut offset)?;
        let count = u64::from_le_bytes(u64b) as usize;
        if count == 0 {
            return Err(corrupt(12, "cache holds zero rows".into()));
        }

        let mut rows = vec![0f32; count * dim];
        {
            let mut f32b = [0u8; 4];
            for v in rows.iter_mut() {
                read_exact(&mut f32b, &mut offset)?;
                *v = f32::from_le_bytes(f32b);
            }
        }
        if let Some(bad) = rows.iter().position(|v| !v.is_finite()) {
            return Err(corrupt(
                20 + bad as u64 * 4,
                "non-finite embedding value".into(),
            ));
        }

        let mut captions = Vec::with_capacity(count);
        for _ in 0..count {
            read_exact(&mut u32b, &mut offset)?;
            let len = u32::from_le_bytes(u32b) as usize;
            if len > 1 << 20 {
                return Err(corrupt(offset - 4, format!("implausible caption length {len}")));
            }
            let mut bytes = vec![0u8; len];
            read_exact(&mut bytes, &mut offset)?;
            let start = offset - len as u64;
            captions.push(
                String::from_utf8(bytes)
                    .map_err(|_| corrupt(start, "caption is not valid UTF-8".into()))?,
            );
        }
        let mut trailing = [0u8; 1];
        if file.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(corrupt(offset, "trailing bytes after caption block".into()));
        }
        EmbeddingCache::from_rows(dim, rows, captions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{build_reference_encoders, GapModel, DEFAULT_DIM};
    use crate::rng::derived_rng;
    use crate::synth::{world_classes, WorldKind};
    use rand::Rng;

    fn unit_query(values: Vec<f64>) -> Embedding {
        Embedding::new(values)
    }

    fn basis_cache() -> EmbeddingCache {
        // 4 standard basis vectors in D=4.
        let mut rows = vec![0f32; 16];
        for i in 0..4 {
            rows[i * 4 + i] = 1.0;
        }
        let captions = (0..4).map(|i| format!("axis {i}")).collect();
        EmbeddingCache::from_rows(4, rows, captions).unwrap()
    }

    #[test]
    fn top1_on_basis_rows_matches_hand_computation() {
        let cache = basis_cache();
        let (i, s) = cache
            .retrieve_top1(&unit_query(vec![0.9, 0.1, 0.0, 0.0]))
            .unwrap();
        assert_eq!(i, 0);
        let expected = 0.9 / 0.82f64.sqrt();
        assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
    }

    #[test]
    fn exact_row_query_returns_similarity_one() {
        let cache = basis_cache();
        let (i, s) = cache.retrieve_top1(&cache.row_embedding(2)).unwrap();
        assert_eq!(i, 2);
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let rows = vec![1.0f32, 0.0, 1.0, 0.0, 0.0, 1.0];
        let captions = vec!["a".into(), "b".into(), "c".into()];
        let cache = EmbeddingCache::from_rows(2, rows, captions).unwrap();
        let (i, _) = cache.retrieve_top1(&unit_query(vec![1.0, 0.0])).unwrap();
        assert_eq!(i, 0);
    }

    #[test]
    fn zero_query_is_rejected() {
        let cache = basis_cache();
        assert!(matches!(
            cache.retrieve_top1(&unit_query(vec![0.0; 4])),
            Err(Error::InvalidQuery(_))
        ));
        assert!(matches!(
            cache.retrieve_top1(&unit_query(vec![1.0; 3])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn build_preserves_order_and_duplicates() {
        let specs = world_classes(WorldKind::Adjacent);
        let (_, text) =
            build_reference_encoders(&specs, 8000, DEFAULT_DIM, GapModel::zero(DEFAULT_DIM), 3)
                .unwrap();
        let captions = vec![
            specs[0].label_caption().to_string(),
            specs[1].label_caption().to_string(),
            specs[0].label_caption().to_string(),
        ];
        let cache = EmbeddingCache::build(&captions, &text).unwrap();
        assert_eq!(cache.len(), 3);
        assert_eq!(cache.row(0), cache.row(2));
        assert_eq!(cache.caption(2), specs[0].label_caption());
        assert!(matches!(
            EmbeddingCache::build(&[], &text),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn build_reports_failing_caption_index() {
        let specs = world_classes(WorldKind::Adjacent);
        let (_, text) =
            build_reference_encoders(&specs, 8000, DEFAULT_DIM, GapModel::zero(DEFAULT_DIM), 3)
                .unwrap();
        let captions = vec!["ok caption".to_string(), "".to_string()];
        match EmbeddingCache::build(&captions, &text) {
            Err(Error::EncoderFailure { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected encoder failure, got {other:?}"),
        }
    }

    #[test]
    fn batch_matches_brute_force_oracle() {
        let mut rng = derived_rng(11, &[0xcafe]);
        let m = 500;
        let d = 16;
        let rows: Vec<f32> = (0..m * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let captions = (0..m).map(|i| format!("c{i}")).collect();
        let cache = EmbeddingCache::from_rows(d, rows.clone(), captions).unwrap();

        let queries: Vec<Embedding> = (0..64)
            .map(|_| Embedding::new((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let got = cache.retrieve_batch(&queries).unwrap();

        for (q, (gi, gs)) in queries.iter().zip(&got) {
            // independent double-loop argmax
            let qn = q.norm();
            let mut best = (0usize, f64::NEG_INFINITY);
            for i in 0..m {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += rows[i * d + k] as f64 * q.values[k];
                }
                let rn = (0..d)
                    .map(|k| {
                        let v = rows[i * d + k] as f64;
                        v * v
                    })
                    .sum::<f64>()
                    .sqrt();
                let s = acc / (rn * qn);
                if s > best.1 {
                    best = (i, s);
                }
            }
            assert_eq!(*gi, best.0);
            assert!((gs - best.1).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_of_one_equals_top1() {
        let cache = basis_cache();
        let q = unit_query(vec![0.2, -0.3, 0.9, 0.0]);
        let single = cache.retrieve_top1(&q).unwrap();
        let batch = cache.retrieve_batch(std::slice::from_ref(&q)).unwrap();
        assert_eq!(batch[0], single);
    }

    #[test]
    fn batch_is_invariant_to_thread_count() {
        let mut rng = derived_rng(13, &[0xbeef]);
        let m = 300;
        let d = 8;
        let rows: Vec<f32> = (0..m * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let captions = (0..m).map(|i| format!("c{i}")).collect();
        let cache = EmbeddingCache::from_rows(d, rows, captions).unwrap();
        let queries: Vec<Embedding> = (0..32)
            .map(|_| Embedding::new((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();

        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| cache.retrieve_batch(&queries).unwrap())
        };
        assert_eq!(run(1), run(8));
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let specs = world_classes(WorldKind::Adjacent);
        let (_, text) =
            build_reference_encoders(&specs, 8000, DEFAULT_DIM, GapModel::default_jitter(DEFAULT_DIM), 3)
                .unwrap();
        let captions = crate::synth::train_captions(&specs, 5);
        let cache = EmbeddingCache::build(&captions, &text).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.tec1");
        cache.save(&path).unwrap();
        let loaded = EmbeddingCache::load(&path).unwrap();
        assert_eq!(loaded.rows, cache.rows);
        assert_eq!(loaded.captions, cache.captions);
        assert_eq!(loaded.dim, cache.dim);

        // saving the loaded cache reproduces the same bytes
        let path2 = dir.path().join("cache2.tec1");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_cache_file_is_a_clean_error() {
        let cache = basis_cache();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.tec1");
        cache.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 10, 25, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            match EmbeddingCache::load(&path) {
                Err(Error::CorruptCache { .. }) => {}
                other => panic!("cut at {cut}: expected corrupt-cache error, got {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_is_rejected_with_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.tec1");
        std::fs::write(&path, b"NOPE then some garbage").unwrap();
        match EmbeddingCache::load(&path) {
            Err(Error::CorruptCache { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected corrupt-cache error, got {other:?}"),
        }
    }

    #[test]
    fn near_tie_resolution_is_stable() {
        // Two rows with cosine gap ~1e-7 to the query: double precision
        // comparison must pick the genuinely closer one.
        let d = 8;
        let mut row_a = vec![0f32; d];
        let mut row_b = vec![0f32; d];
        row_a[0] = 1.0;
        row_b[0] = 1.0;
        row_b[1] = 4.5e-4; // cos(query, b) = 1/sqrt(1+2e-7) ~ 1 - 1e-7
        let mut rows = row_b.clone();
        rows.extend_from_slice(&row_a);
        let cache =
            EmbeddingCache::from_rows(d, rows, vec!["b".into(), "a".into()]).unwrap();
        let mut q = vec![0.0; d];
        q[0] = 1.0;
        let (i, _) = cache.retrieve_top1(&Embedding::new(q)).unwrap();
        assert_eq!(i, 1, "exact-match row must win over the near tie");
    }
}
