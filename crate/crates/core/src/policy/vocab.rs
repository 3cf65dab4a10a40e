use std::collections::{BTreeSet, HashMap};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    category_synonym, read_jsonl, serialize_item_context, write_jsonl, Catalog, AGE_BANDS, COLORS,
    GENDERS, QUERY_PRICE_WORDS, REGIONS, STYLES, TEMPLATE_WORDS,
};
use crate::error::{Error, Result};
use crate::sidcodec::{SemanticId, LAYER_TAGS, QUANT_LAYERS, SID_LEN};

pub const UNK: &str = "<unk>";
pub const THINK: &str = "<think>";
pub const END_THINK: &str = "</think>";
pub const EOS: &str = "<eos>";
const SPECIALS: [&str; 4] = [UNK, THINK, END_THINK, EOS];

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenFamily {
    Special,
    Text,
    /// SID token of the given layer (0 = `a` .. 3 = `d`).
    Sid(usize),
}

/// Dense token ids: specials, then sorted text tokens, then the four SID
/// families in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, TokenId>,
    text_end: TokenId,
    sid_offsets: [TokenId; SID_LEN],
    sid_sizes: [u32; SID_LEN],
    hash: u64,
}

/// Lower-cased alphanumeric words of `text`, in order.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn is_number(w: &str) -> bool {
    w.chars().all(|c| c.is_ascii_digit())
}

/// Build the vocabulary for a catalog and SID space.
///
/// `layer_sizes` are the quantization codebook sizes; the dedup family gets
/// `dedup_max + 1` tokens. Numbers never enter the vocabulary and map to the
/// unknown token.
pub fn build_vocabulary(
    catalog: &Catalog,
    layer_sizes: &[usize; QUANT_LAYERS],
    dedup_max: u32,
) -> Vocabulary {
    let mut text: BTreeSet<String> = TEMPLATE_WORDS
        .iter()
        .chain(COLORS)
        .chain(STYLES)
        .chain(AGE_BANDS)
        .chain(GENDERS)
        .chain(REGIONS)
        .chain(QUERY_PRICE_WORDS.iter())
        .map(|w| w.to_string())
        .collect();
    for item in catalog.items() {
        text.extend(words(&serialize_item_context(item)));
    }
    for category in catalog.categories() {
        text.extend(words(&category_synonym(category)));
    }
    text.retain(|w| !is_number(w));
    let sizes = [
        layer_sizes[0] as u32,
        layer_sizes[1] as u32,
        layer_sizes[2] as u32,
        dedup_max + 1,
    ];
    Vocabulary::from_parts(text.into_iter().collect(), sizes)
}

impl Vocabulary {
    fn from_parts(text: Vec<String>, sid_sizes: [u32; SID_LEN]) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(text);
        let text_end = tokens.len() as TokenId;
        let mut sid_offsets = [0; SID_LEN];
        for (l, &n) in sid_sizes.iter().enumerate() {
            sid_offsets[l] = tokens.len() as TokenId;
            tokens.extend((0..n).map(|c| format!("<{}_{}>", LAYER_TAGS[l], c)));
        }
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        let mut hasher = Sha256::new();
        for t in &tokens {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        let hash = u64::from_le_bytes(digest[..8].try_into().unwrap());
        Self {
            tokens,
            lookup,
            text_end,
            sid_offsets,
            sid_sizes,
            hash,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Stable content hash of the token list.
    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn unk(&self) -> TokenId {
        0
    }

    pub fn think(&self) -> TokenId {
        1
    }

    pub fn end_think(&self) -> TokenId {
        2
    }

    pub fn eos(&self) -> TokenId {
        3
    }

    pub fn family(&self, id: TokenId) -> TokenFamily {
        if id < SPECIALS.len() as TokenId {
            TokenFamily::Special
        } else if id < self.text_end {
            TokenFamily::Text
        } else {
            TokenFamily::Sid(self.sid_offsets.iter().rposition(|&o| id >= o).unwrap_or(0))
        }
    }

    pub fn text_range(&self) -> Range<TokenId> {
        SPECIALS.len() as TokenId..self.text_end
    }

    pub fn sid_sizes(&self) -> [u32; SID_LEN] {
        self.sid_sizes
    }

    /// Token ids of one SID family.
    pub fn sid_family(&self, layer: usize) -> Range<TokenId> {
        self.sid_offsets[layer]..self.sid_offsets[layer] + self.sid_sizes[layer]
    }

    pub fn sid_token(&self, layer: usize, code: u32) -> Option<TokenId> {
        (layer < SID_LEN && code < self.sid_sizes[layer]).then(|| self.sid_offsets[layer] + code)
    }

    /// `(layer, code)` of a SID token.
    pub fn sid_code(&self, id: TokenId) -> Option<(usize, u32)> {
        match self.family(id) {
            TokenFamily::Sid(l) if (id as usize) < self.tokens.len() => {
                Some((l, id - self.sid_offsets[l]))
            }
            _ => None,
        }
    }

    pub fn sid_tokens(&self, sid: &SemanticId) -> Option<[TokenId; SID_LEN]> {
        let mut out = [0; SID_LEN];
        for (l, &c) in sid.codes().iter().enumerate() {
            out[l] = self.sid_token(l, c)?;
        }
        Some(out)
    }

    /// Parse exactly four SID tokens in layer order; anything else is `None`.
    pub fn sid_from_tokens(&self, tokens: &[TokenId]) -> Option<SemanticId> {
        if tokens.len() != SID_LEN {
            return None;
        }
        let mut codes = [0; SID_LEN];
        for (l, &t) in tokens.iter().enumerate() {
            match self.sid_code(t) {
                Some((layer, code)) if layer == l => codes[l] = code,
                _ => return None,
            }
        }
        Some(SemanticId(codes))
    }

    /// Tokenize text: special tokens written literally (`<think>`,
    /// `<a_12>`, ...) are recognized, everything else is split into
    /// lower-cased alphanumeric words; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            if rest.starts_with('<') {
                if let Some(end) = rest.find('>') {
                    if let Some(id) = self.id(&rest[..=end]) {
                        out.push(id);
                        rest = &rest[end + 1..];
                        continue;
                    }
                }
            }
            let next = rest[1..].find('<').map_or(rest.len(), |i| i + 1);
            for w in words(&rest[..next]) {
                out.push(self.id(&w).unwrap_or(self.unk()));
            }
            rest = &rest[next..];
        }
        out
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let rows: Vec<VocabRow> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(id, token)| VocabRow {
                token: token.clone(),
                id: id as TokenId,
                family: match self.family(id as TokenId) {
                    TokenFamily::Special => "special".into(),
                    TokenFamily::Text => "text".into(),
                    TokenFamily::Sid(l) => LAYER_TAGS[l].to_string(),
                },
            })
            .collect();
        write_jsonl(path, &rows)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let rows: Vec<VocabRow> = read_jsonl(path)?;
        let mut text = Vec::new();
        let mut sizes = [0u32; SID_LEN];
        for (i, row) in rows.iter().enumerate() {
            if row.id as usize != i {
                return Err(Error::format(path, "vocabulary ids must be dense and ordered"));
            }
            match row.family.as_str() {
                "special" => {}
                "text" => text.push(row.token.clone()),
                tag => {
                    let l = LAYER_TAGS
                        .iter()
                        .position(|t| t.to_string() == tag)
                        .ok_or_else(|| Error::format(path, format!("unknown family {tag}")))?;
                    sizes[l] += 1;
                }
            }
        }
        let vocab = Self::from_parts(text, sizes);
        if vocab.tokens.iter().zip(&rows).any(|(a, r)| *a != r.token) || vocab.len() != rows.len()
        {
            return Err(Error::format(path, "vocabulary layout is not canonical"));
        }
        Ok(vocab)
    }
}

#[derive(Serialize, Deserialize)]
struct VocabRow {
    token: String,
    id: TokenId,
    family: String,
}
