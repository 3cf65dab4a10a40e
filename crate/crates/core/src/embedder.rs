//! Feature-hashed character 3-gram embeddings.

use std::fs;
use std::hash::Hasher;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use fnv::FnvHasher;
use rayon::prelude::*;

use crate::corpus::{serialize_item_context, Catalog};
use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 64;

const MAGIC: &[u8; 4] = b"SEMB";
const VERSION: u32 = 1;

fn mix(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^ (h >> 33)
}

fn gram_hash(gram: &[char], seed: u64) -> u64 {
    let mut hasher = FnvHasher::with_key(0xcbf2_9ce4_8422_2325 ^ seed);
    let mut buf = [0u8; 4];
    for c in gram {
        hasher.write(c.encode_utf8(&mut buf).as_bytes());
    }
    mix(hasher.finish())
}

/// Embed text as L2-normalized signed counts of its character 3-grams.
///
/// Texts shorter than three characters contribute one gram (the whole
/// text). Empty text, or a text whose signed counts cancel exactly, maps to
/// the unit vector along bucket 0.
pub fn embed_text(text: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("embedding dim {dim} < 2")));
    }
    let chars: Vec<char> = text.chars().collect();
    let mut v = vec![0.0; dim];
    let mut add = |gram: &[char]| {
        let h = gram_hash(gram, seed);
        let bucket = (h % dim as u64) as usize;
        v[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    };
    if chars.len() >= 3 {
        chars.windows(3).for_each(&mut add);
    } else if !chars.is_empty() {
        add(&chars);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut sentinel = vec![0.0; dim];
        sentinel[0] = 1.0;
        return Ok(sentinel);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Bucket index a 3-gram lands in; exposed for hash-distribution checks.
pub fn gram_bucket(gram: &str, dim: usize, seed: u64) -> usize {
    let chars: Vec<char> = gram.chars().collect();
    (gram_hash(&chars, seed) % dim as u64) as usize
}

/// Row-major matrix of unit-norm item embeddings, one row per catalog item.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument(
                "embedding rows must be non-empty and share one dimension".into(),
            ));
        }
        Ok(Self {
            dim,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    /// Binary form: magic, version, count, dim (u32 LE) then row-major f32 LE.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        out.write_all(MAGIC)?;
        for v in [VERSION, self.len() as u32, self.dim as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        for x in &self.data {
            out.write_all(&(*x as f32).to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "not an embedding matrix"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != VERSION {
            return Err(Error::format(path, format!("unsupported version {}", word(0))));
        }
        let (count, dim) = (word(1) as usize, word(2) as usize);
        let body = &bytes[16..];
        if dim == 0 || body.len() != count * dim * 4 {
            return Err(Error::format(path, "payload size does not match header"));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self { dim, data })
    }
}

/// Embed every item's serialized context, preserving catalog order.
pub fn embed_catalog(catalog: &Catalog, dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    if catalog.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let rows = catalog
        .items()
        .par_iter()
        .map(|item| embed_text(&serialize_item_context(item), dim, seed))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingMatrix::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_catalog;
    use rand::{Rng, SeedableRng};

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn deterministic_and_normalized() {
        let a = embed_text("blue slim phone", 64, 3).unwrap();
        let b = embed_text("blue slim phone", 64, 3).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_ne!(a, embed_text("blue slim phone", 64, 4).unwrap());
    }

    #[test]
    fn empty_text_is_the_bucket_zero_sentinel() {
        let v = embed_text("", 8, 0).unwrap();
        assert_eq!(v, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(embed_text("x", 1, 0).is_err());
        let short = embed_text("ab", 8, 0).unwrap();
        assert!((short.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn same_category_items_are_closer_than_random_pairs() {
        let catalog = generate_catalog(21, 600, 30, 12).unwrap();
        let emb = embed_catalog(&catalog, 64, 0).unwrap();
        let items = catalog.items();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let (mut same, mut rand_sum) = (Vec::new(), Vec::new());
        while same.len() < 100 {
            let (i, j) = (rng.random_range(0..items.len()), rng.random_range(0..items.len()));
            if i != j && items[i].category_id == items[j].category_id {
                same.push(cosine(emb.row(i), emb.row(j)));
            }
        }
        while rand_sum.len() < 100 {
            let (i, j) = (rng.random_range(0..items.len()), rng.random_range(0..items.len()));
            if i != j {
                rand_sum.push(cosine(emb.row(i), emb.row(j)));
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&same) > mean(&rand_sum), "{} vs {}", mean(&same), mean(&rand_sum));
    }

    #[test]
    fn catalog_rows_follow_catalog_order() {
        let catalog = generate_catalog(2, 30, 5, 4).unwrap();
        let emb = embed_catalog(&catalog, 16, 1).unwrap();
        assert_eq!(emb.len(), 30);
        let order: Vec<usize> = (0..30).rev().collect();
        let permuted = embed_catalog(&catalog.permuted(&order).unwrap(), 16, 1).unwrap();
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(permuted.row(k), emb.row(i));
        }
        let one = Catalog::new(vec![catalog.items()[0].clone()]).unwrap();
        let single = embed_catalog(&one, 16, 1).unwrap();
        assert_eq!((single.len(), single.dim()), (1, 16));
    }

    #[test]
    fn identical_items_embed_identically() {
        let catalog = generate_catalog(2, 2, 1, 1).unwrap();
        let mut twin = catalog.items()[0].clone();
        twin.item_id = 77;
        let pair = Catalog::new(vec![catalog.items()[0].clone(), twin]).unwrap();
        let emb = embed_catalog(&pair, 32, 5).unwrap();
        assert_eq!(emb.row(0), emb.row(1));
    }

    #[test]
    fn hash_buckets_are_balanced() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let alphabet: Vec<char> = "abcdefghijklmnopqrstuvwxyz0123456789 ".chars().collect();
        let mut counts = vec![0usize; 64];
        for _ in 0..10_000 {
            let len = rng.random_range(12..40);
            let title: Vec<char> = (0..len)
                .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                .collect();
            for g in title.windows(3) {
                counts[gram_bucket(&g.iter().collect::<String>(), 64, 0)] += 1;
            }
        }
        let (max, min) = (*counts.iter().max().unwrap(), *counts.iter().min().unwrap());
        assert!((max as f64) / (min as f64) < 3.0, "{max}/{min}");
    }

    #[test]
    fn binary_round_trip() {
        let catalog = generate_catalog(2, 10, 3, 2).unwrap();
        let emb = embed_catalog(&catalog, 8, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        emb.write(&path).unwrap();
        let back = EmbeddingMatrix::read(&path).unwrap();
        assert_eq!(back.len(), 10);
        for (a, b) in emb.rows().zip(back.rows()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-7);
            }
        }
        assert_eq!(fs::metadata(&path).unwrap().len(), 16 + 10 * 8 * 4);
    }
}
