//! Semantic IDs: residual K-Means codebooks, the deduplication layer, and
//! the prefix trie used for constrained decoding.
//!
//! Layer `l` clusters the residuals left by layers `0..l`; an item's code at
//! each layer is its nearest centroid, and the residual passed down is the
//! item's vector minus that centroid. Items sharing all quantized codes are
//! told apart by a fourth, ordinal code.

mod kmeans;
mod trie;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, KMeansResult, DEFAULT_MAX_ITERS, DEFAULT_TOL};
pub use trie::PrefixTrie;

use crate::corpus::{read_jsonl, write_jsonl, ItemId};
use crate::embedder::EmbeddingMatrix;
use crate::error::{Error, Result};
use kmeans::nearest;

/// Number of quantized layers; the SID adds one dedup code on top.
pub const QUANT_LAYERS: usize = 3;
/// Tokens per semantic ID.
pub const SID_LEN: usize = QUANT_LAYERS + 1;
pub const DEFAULT_LAYER_SIZES: [usize; QUANT_LAYERS] = [512, 256, 256];
/// Layer tags used in the textual rendering.
pub const LAYER_TAGS: [char; SID_LEN] = ['a', 'b', 'c', 'd'];

/// A four-code item identifier: three quantization codes and a dedup code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SemanticId(pub [u32; SID_LEN]);

impl SemanticId {
    pub fn codes(&self) -> &[u32; SID_LEN] {
        &self.0
    }

    /// `(layer tag, code)` pairs in layer order.
    pub fn tagged(&self) -> [(char, u32); SID_LEN] {
        std::array::from_fn(|l| (LAYER_TAGS[l], self.0[l]))
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (tag, code) in self.tagged() {
            write!(f, "<{tag}_{code}>")?;
        }
        Ok(())
    }
}

impl FromStr for SemanticId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed semantic id {s:?}"));
        let mut codes = [0u32; SID_LEN];
        let mut rest = s;
        for (l, tag) in LAYER_TAGS.iter().enumerate() {
            let body = rest
                .strip_prefix('<')
                .and_then(|r| r.strip_prefix(*tag))
                .and_then(|r| r.strip_prefix('_'))
                .ok_or_else(bad)?;
            let end = body.find('>').ok_or_else(bad)?;
            codes[l] = body[..end].parse().map_err(|_| bad())?;
            rest = &body[end + 1..];
        }
        if !rest.is_empty() {
            return Err(bad());
        }
        Ok(SemanticId(codes))
    }
}

/// Trained residual quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub dim: usize,
    /// Centroids per layer; `layers[l].len()` is the effective size N_l.
    pub layers: Vec<Vec<Vec<f64>>>,
    pub iterations: Vec<usize>,
    pub inertia: Vec<f64>,
}

const CODEBOOK_MAGIC: &[u8; 4] = b"SCBK";
const CODEBOOK_VERSION: u32 = 1;

impl Codebook {
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    /// Quantize one vector: the nearest centroid at each layer.
    pub fn encode(&self, v: &[f64]) -> Vec<u32> {
        let mut residual = v.to_vec();
        self.layers
            .iter()
            .map(|centroids| {
                let (k, _) = nearest(&residual, centroids);
                residual.iter_mut().zip(&centroids[k]).for_each(|(r, c)| *r -= c);
                k as u32
            })
            .collect()
    }

    /// Header (magic, version, K, dim, layer sizes; u32 LE) then centroids
    /// as f32 LE, layer by layer.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        out.write_all(CODEBOOK_MAGIC)?;
        out.write_all(&CODEBOOK_VERSION.to_le_bytes())?;
        out.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        for n in self.layer_sizes() {
            out.write_all(&(n as u32).to_le_bytes())?;
        }
        for c in self.layers.iter().flatten().flatten() {
            out.write_all(&(*c as f32).to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    /// Read a codebook. Training metadata is not persisted.
    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(4 + 4 * i..8 + 4 * i)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| Error::format(path, "truncated header"))
        };
        if bytes.get(..4) != Some(CODEBOOK_MAGIC) || word(0)? != CODEBOOK_VERSION {
            return Err(Error::format(path, "not a version-1 codebook"));
        }
        let (k, dim) = (word(1)? as usize, word(2)? as usize);
        let sizes = (0..k).map(|l| Ok(word(3 + l)? as usize)).collect::<Result<Vec<_>>>()?;
        let mut floats = bytes[16 + 4 * k..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let expected: usize = sizes.iter().sum::<usize>() * dim;
        if bytes.len() != 16 + 4 * k + 4 * expected {
            return Err(Error::format(path, "payload size does not match header"));
        }
        let layers = sizes
            .iter()
            .map(|&n| (0..n).map(|_| floats.by_ref().take(dim).collect()).collect())
            .collect();
        Ok(Self {
            dim,
            layers,
            iterations: vec![0; k],
            inertia: vec![0.0; k],
        })
    }
}

/// Residual vectors at every depth: `chain[0]` is the input, `chain[l + 1]`
/// what remains after layer `l`.
pub type ResidualChain = Vec<Vec<Vec<f64>>>;

/// Train one K-Means layer per entry of `layer_sizes` on successive residuals.
pub fn build_codebook(
    embeddings: &EmbeddingMatrix,
    layer_sizes: &[usize],
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<(Codebook, ResidualChain)> {
    if layer_sizes.is_empty() {
        return Err(Error::InvalidArgument("layer_sizes must be non-empty".into()));
    }
    if embeddings.is_empty() {
        return Err(Error::InvalidArgument("no embeddings to quantize".into()));
    }
    let mut chain: ResidualChain = vec![embeddings.to_rows()];
    let mut codebook = Codebook {
        dim: embeddings.dim(),
        layers: Vec::with_capacity(layer_sizes.len()),
        iterations: Vec::new(),
        inertia: Vec::new(),
    };
    for (l, &n) in layer_sizes.iter().enumerate() {
        let current = chain.last().expect("chain starts non-empty");
        let fit = kmeans(current, n, max_iters, tol, seed.wrapping_add(l as u64))?;
        let next: Vec<Vec<f64>> = current
            .par_iter()
            .zip(&fit.assignments)
            .map(|(e, &k)| e.iter().zip(&fit.centroids[k]).map(|(x, c)| x - c).collect())
            .collect();
        codebook.iterations.push(fit.iterations);
        codebook.inertia.push(fit.inertia);
        codebook.layers.push(fit.centroids);
        chain.push(next);
    }
    Ok((codebook, chain))
}

/// Bijection between catalog items and their semantic IDs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SidAssignment {
    item_to_sid: BTreeMap<ItemId, SemanticId>,
    sid_to_item: BTreeMap<SemanticId, ItemId>,
}

#[derive(Serialize, Deserialize)]
struct AssignmentRow {
    item_id: ItemId,
    codes: [u32; SID_LEN],
}

impl SidAssignment {
    /// Build from explicit pairs, rejecting duplicate items or SIDs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (ItemId, SemanticId)>) -> Result<Self> {
        let mut out = Self::default();
        for (item, sid) in pairs {
            if out.item_to_sid.insert(item, sid).is_some() {
                return Err(Error::InvalidArgument(format!("item {item} assigned twice")));
            }
            if out.sid_to_item.insert(sid, item).is_some() {
                return Err(Error::InvalidArgument(format!("sid {sid} assigned twice")));
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.item_to_sid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_to_sid.is_empty()
    }

    pub fn sid_of(&self, item: ItemId) -> Option<SemanticId> {
        self.item_to_sid.get(&item).copied()
    }

    /// Item for a SID, or `None` when the SID is unassigned.
    pub fn decode(&self, sid: &SemanticId) -> Option<ItemId> {
        self.sid_to_item.get(sid).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ItemId, SemanticId)> + '_ {
        self.item_to_sid.iter().map(|(i, s)| (*i, *s))
    }

    /// Largest code used at each layer.
    pub fn max_codes(&self) -> [u32; SID_LEN] {
        let mut max = [0u32; SID_LEN];
        for sid in self.sid_to_item.keys() {
            for (m, c) in max.iter_mut().zip(sid.codes()) {
                *m = (*m).max(*c);
            }
        }
        max
    }

    pub fn max_dedup(&self) -> u32 {
        self.max_codes()[QUANT_LAYERS]
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let rows: Vec<AssignmentRow> = self
            .iter()
            .map(|(item_id, sid)| AssignmentRow {
                item_id,
                codes: sid.0,
            })
            .collect();
        write_jsonl(path, &rows)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let rows: Vec<AssignmentRow> = read_jsonl(path)?;
        Self::from_pairs(rows.into_iter().map(|r| (r.item_id, SemanticId(r.codes))))
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Assign SIDs: nearest-centroid codes per layer plus, within each bucket of
/// items sharing those codes, the item's ordinal by ascending item id.
///
/// `item_ids[i]` names the item embedded in row `i`.
pub fn assign_sids(
    codebook: &Codebook,
    embeddings: &EmbeddingMatrix,
    item_ids: &[ItemId],
) -> Result<SidAssignment> {
    if codebook.layers.len() != QUANT_LAYERS {
        return Err(Error::InvalidArgument(format!(
            "semantic ids need {QUANT_LAYERS} quantization layers, codebook has {}",
            codebook.layers.len()
        )));
    }
    if embeddings.dim() != codebook.dim || embeddings.len() != item_ids.len() {
        return Err(Error::InvalidArgument(
            "embeddings do not match the codebook dimension or item list".into(),
        ));
    }
    let codes: Vec<Vec<u32>> = embeddings
        .to_rows()
        .par_iter()
        .map(|row| codebook.encode(row))
        .collect();
    let mut buckets: BTreeMap<[u32; QUANT_LAYERS], Vec<ItemId>> = BTreeMap::new();
    for (c, &item) in codes.iter().zip(item_ids) {
        buckets.entry([c[0], c[1], c[2]]).or_default().push(item);
    }
    let mut pairs = Vec::with_capacity(item_ids.len());
    for (prefix, mut items) in buckets {
        items.sort_unstable();
        for (ordinal, item) in items.into_iter().enumerate() {
            pairs.push((
                item,
                SemanticId([prefix[0], prefix[1], prefix[2], ordinal as u32]),
            ));
        }
    }
    SidAssignment::from_pairs(pairs)
}

/// Build the prefix trie of every assigned SID.
pub fn build_trie(assignment: &SidAssignment) -> Result<PrefixTrie> {
    if assignment.is_empty() {
        return Err(Error::InvalidArgument("cannot build a trie from no items".into()));
    }
    Ok(PrefixTrie::from_assignment(assignment))
}

/// Item for a SID, or `None` (not found).
pub fn decode_sid(assignment: &SidAssignment, sid: &SemanticId) -> Option<ItemId> {
    assignment.decode(sid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_catalog;
    use crate::embedder::embed_catalog;

    fn energy(rows: &[Vec<f64>]) -> f64 {
        rows.iter().flatten().map(|x| x * x).sum()
    }

    #[test]
    fn sid_text_round_trip() {
        let sid = SemanticId([23, 1, 124, 0]);
        assert_eq!(sid.to_string(), "<a_23><b_1><c_124><d_0>");
        assert_eq!("<a_23><b_1><c_124><d_0>".parse::<SemanticId>().unwrap(), sid);
        assert!("<a_1><b_2><c_3>".parse::<SemanticId>().is_err());
        assert!("<b_1><a_2><c_3><d_0>".parse::<SemanticId>().is_err());
    }

    #[test]
    fn one_layer_one_cluster_centers_the_data() {
        let emb = EmbeddingMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]])
            .unwrap();
        let (cb, chain) = build_codebook(&emb, &[1], 100, 1e-9, 0).unwrap();
        assert_eq!(cb.layer_sizes(), vec![1]);
        let mean = [1.0, 1.0];
        for (r, e) in chain[1].iter().zip(emb.rows()) {
            assert!((r[0] - (e[0] - mean[0])).abs() < 1e-12);
            assert!((r[1] - (e[1] - mean[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_energy_never_grows() {
        let catalog = generate_catalog(4, 500, 20, 10).unwrap();
        let emb = embed_catalog(&catalog, 32, 0).unwrap();
        let (cb, chain) = build_codebook(&emb, &[16, 8, 8], 100, 1e-6, 1).unwrap();
        assert_eq!(chain.len(), 4);
        for l in 0..3 {
            assert!(energy(&chain[l + 1]) <= energy(&chain[l]) + 1e-9);
            assert!((cb.inertia[l] - energy(&chain[l + 1])).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_embeddings_share_codes_and_get_ordinals() {
        let emb = EmbeddingMatrix::from_rows(vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
        ])
        .unwrap();
        let (cb, _) = build_codebook(&emb, &[2, 1, 1], 50, 1e-9, 0).unwrap();
        let a = assign_sids(&cb, &emb, &[5, 9, 3]).unwrap();
        let (s5, s3, s9) = (a.sid_of(5).unwrap(), a.sid_of(3).unwrap(), a.sid_of(9).unwrap());
        assert_eq!(s5.0[..3], s3.0[..3]);
        assert_eq!((s3.0[3], s5.0[3]), (0, 1));
        assert_eq!(s9.0[3], 0);
    }

    #[test]
    fn decode_and_round_trip() {
        let catalog = generate_catalog(8, 300, 12, 8).unwrap();
        let emb = embed_catalog(&catalog, 32, 0).unwrap();
        let (cb, _) = build_codebook(&emb, &[8, 4, 4], 100, 1e-6, 2).unwrap();
        let ids: Vec<ItemId> = catalog.items().iter().map(|i| i.item_id).collect();
        let a = assign_sids(&cb, &emb, &ids).unwrap();
        assert_eq!(a.len(), 300);
        for &id in &ids {
            assert_eq!(decode_sid(&a, &a.sid_of(id).unwrap()), Some(id));
        }
        assert_eq!(decode_sid(&a, &SemanticId([99, 99, 99, 99])), None);
        let dir = tempfile::tempdir().unwrap();
        a.write_jsonl(&dir.path().join("a.jsonl")).unwrap();
        assert_eq!(SidAssignment::read_jsonl(&dir.path().join("a.jsonl")).unwrap(), a);
        cb.write(&dir.path().join("cb.bin")).unwrap();
        let back = Codebook::read(&dir.path().join("cb.bin")).unwrap();
        assert_eq!(back.layer_sizes(), cb.layer_sizes());
        assert!((back.layers[1][2][3] - cb.layers[1][2][3]).abs() < 1e-6);
    }

    #[test]
    fn codebook_is_deterministic() {
        let catalog = generate_catalog(8, 200, 12, 8).unwrap();
        let emb = embed_catalog(&catalog, 16, 0).unwrap();
        let a = build_codebook(&emb, &[8, 4, 4], 100, 1e-6, 5).unwrap();
        let b = build_codebook(&emb, &[8, 4, 4], 100, 1e-6, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn assign_rejects_wrong_depth() {
        let emb = EmbeddingMatrix::from_rows(vec![vec![1.0, 0.0]]).unwrap();
        let (cb, _) = build_codebook(&emb, &[1], 10, 1e-6, 0).unwrap();
        assert!(assign_sids(&cb, &emb, &[0]).is_err());
    }
}
