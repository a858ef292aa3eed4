//! Synthetic compositional retrieval world: items are attribute vectors,
//! reference images render attributes onto a noisy grid, modification texts
//! are attribute-edit token sequences, and targets are the edited items.
//!
//! Everything is deterministic under seeds; per-record seeds are derived
//! with a splitmix-style mixer so record `i` is independent of how many
//! records surround it.

use crate::encoders::RawImage;
use crate::error::{Error, Result};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write as IoWrite};
use std::path::Path;

/// Token index of the function word "set".
pub const SET_TOKEN: usize = 0;
/// Token index of the function word "to".
pub const TO_TOKEN: usize = 1;

/// Seed stream tags for [`derive_seed`]; each independent consumer of
/// randomness gets its own stream so draws never alias across purposes.
pub const STREAM_TRIPLET: u64 = 1;
pub const STREAM_GALLERY: u64 = 2;
pub const STREAM_QUERY: u64 = 3;
pub const STREAM_RENDER_REFERENCE: u64 = 4;
pub const STREAM_RENDER_TARGET: u64 = 5;
pub const STREAM_RENDER_GALLERY: u64 = 6;
pub const STREAM_BATCH_ORDER: u64 = 7;
pub const STREAM_PARAM_INIT: u64 = 8;
pub const STREAM_EVAL_RENDER: u64 = 9;

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent sub-seed from a master seed, a stream tag, and an
/// index within the stream.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(master ^ mix64(stream)) ^ index)
}

/// The attribute world: `a` attributes, each taking one of `v` values,
/// rendered onto an `h`×`w` grid with `c_in` channels per cell.
///
/// Vocabulary layout (indices dense from 0): "set", "to", the `a`
/// attribute names, then the `a`·`v` per-attribute value names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemUniverse {
    a: usize,
    v: usize,
    h: usize,
    w: usize,
    c_in: usize,
    seed: u64,
    vocab: Vec<String>,
}

impl ItemUniverse {
    pub fn generate(seed: u64, a: usize, v: usize, h: usize, w: usize, c_in: usize) -> Result<Self> {
        if a < 2 || v < 2 {
            return Err(Error::Config(format!(
                "universe needs at least 2 attributes and 2 values per attribute, got A={a}, V={v}"
            )));
        }
        if v > c_in {
            return Err(Error::Config(format!(
                "renderer capacity overflow: V={v} values need one channel each but C_in={c_in}"
            )));
        }
        if a > h * w {
            return Err(Error::Config(format!(
                "renderer capacity overflow: A={a} attributes need one grid cell each but H*W={}",
                h * w
            )));
        }
        let mut vocab = Vec::with_capacity(a + a * v + 2);
        vocab.push("set".to_string());
        vocab.push("to".to_string());
        for i in 0..a {
            vocab.push(format!("a{i}"));
        }
        for i in 0..a {
            for k in 0..v {
                vocab.push(format!("a{i}v{k}"));
            }
        }
        Ok(ItemUniverse { a, v, h, w, c_in, seed, vocab })
    }

    pub fn attr_count(&self) -> usize {
        self.a
    }

    pub fn value_count(&self) -> usize {
        self.v
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c_in)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_name(&self, index: usize) -> Result<&str> {
        self.vocab
            .get(index)
            .map(String::as_str)
            .ok_or(Error::Vocab { index, vocab_size: self.vocab.len() })
    }

    pub fn attr_token(&self, attr: usize) -> usize {
        debug_assert!(attr < self.a);
        2 + attr
    }

    pub fn value_token(&self, attr: usize, value: usize) -> usize {
        debug_assert!(attr < self.a && value < self.v);
        2 + self.a + attr * self.v + value
    }

    /// Total number of distinct items (V^A), or `None` on overflow.
    pub fn item_count(&self) -> Option<usize> {
        let mut n: usize = 1;
        for _ in 0..self.a {
            n = n.checked_mul(self.v)?;
        }
        Some(n)
    }

    fn check_item(&self, item: &[usize], op: &'static str) -> Result<()> {
        if item.len() != self.a {
            return Err(Error::shape(op, &[item.len()], &[self.a]));
        }
        for (i, val) in item.iter().enumerate() {
            if *val >= self.v {
                return Err(Error::Invariant(format!(
                    "{op}: attribute {i} has value {val}, outside 0..{}",
                    self.v
                )));
            }
        }
        Ok(())
    }

    /// Render an item: attribute `i` occupies grid cell `i` (row-major), its
    /// cell's channel vector is the one-hot of the attribute's value padded
    /// to C_in; Gaussian noise(0, σ) is added to every channel of every cell
    /// in a fixed cell-then-channel order, so two items rendered under the
    /// same seed differ only where their attributes differ.
    pub fn render_image(&self, item: &[usize], sigma: f64, seed: u64) -> Result<RawImage> {
        self.check_item(item, "render_image")?;
        if !(sigma >= 0.0) {
            return Err(Error::Config(format!("noise level must be >= 0, got {sigma}")));
        }
        let cells = self.h * self.w;
        let mut data = vec![0.0f64; cells * self.c_in];
        for (i, val) in item.iter().enumerate() {
            data[i * self.c_in + val] = 1.0;
        }
        if sigma > 0.0 {
            let mut rng = StdRng::seed_from_u64(seed);
            let normal = Normal::new(0.0, sigma)
                .map_err(|e| Error::Config(format!("invalid noise level {sigma}: {e}")))?;
            for slot in data.iter_mut() {
                *slot += normal.sample(&mut rng);
            }
        }
        RawImage::new(self.h, self.w, self.c_in, data)
    }
}

/// One attribute edit: set `attr` to `value`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub attr: usize,
    pub value: usize,
}

/// One retrieval example: a reference item, the edits that produce the
/// target, the target item, and the tokenized modification text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub query_id: u64,
    pub reference: Vec<usize>,
    pub edits: Vec<Edit>,
    pub target: Vec<usize>,
    pub tokens: Vec<usize>,
}

impl TripletRecord {
    /// Structural invariants that hold independent of any universe:
    /// edits touch distinct attributes, each changes its attribute's value,
    /// and the target equals the reference with exactly the edits applied.
    pub fn validate(&self) -> Result<()> {
        if self.reference.len() != self.target.len() {
            return Err(Error::Invariant(format!(
                "record {}: reference length {} != target length {}",
                self.query_id,
                self.reference.len(),
                self.target.len()
            )));
        }
        let mut seen = HashSet::new();
        let mut expected = self.reference.clone();
        for e in &self.edits {
            if e.attr >= self.reference.len() {
                return Err(Error::Invariant(format!(
                    "record {}: edit attribute {} out of range",
                    self.query_id, e.attr
                )));
            }
            if !seen.insert(e.attr) {
                return Err(Error::Invariant(format!(
                    "record {}: attribute {} edited twice",
                    self.query_id, e.attr
                )));
            }
            if self.reference[e.attr] == e.value {
                return Err(Error::Invariant(format!(
                    "record {}: edit on attribute {} does not change its value",
                    self.query_id, e.attr
                )));
            }
            expected[e.attr] = e.value;
        }
        if self.edits.is_empty() {
            return Err(Error::Invariant(format!("record {}: no edits", self.query_id)));
        }
        if expected != self.target {
            return Err(Error::Invariant(format!(
                "record {}: target does not equal reference with edits applied",
                self.query_id
            )));
        }
        Ok(())
    }
}

/// Encode edits as tokens: per edit, `set <attr-name> to <value-name>`,
/// concatenated in order.
pub fn encode_edits(universe: &ItemUniverse, edits: &[Edit]) -> Vec<usize> {
    let mut tokens = Vec::with_capacity(edits.len() * 4);
    for e in edits {
        tokens.push(SET_TOKEN);
        tokens.push(universe.attr_token(e.attr));
        tokens.push(TO_TOKEN);
        tokens.push(universe.value_token(e.attr, e.value));
    }
    tokens
}

/// Decode a token sequence back to its edits; the grammar is
/// prefix-decodable so this is unambiguous for any concatenation of edits.
pub fn decode_tokens(universe: &ItemUniverse, tokens: &[usize]) -> Result<Vec<Edit>> {
    if tokens.len() % 4 != 0 || tokens.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: format!("token sequence length {} is not a positive multiple of 4", tokens.len()),
        });
    }
    let a = universe.attr_count();
    let v = universe.value_count();
    let mut edits = Vec::with_capacity(tokens.len() / 4);
    for chunk in tokens.chunks(4) {
        let [set, attr_tok, to, value_tok] = [chunk[0], chunk[1], chunk[2], chunk[3]];
        if set != SET_TOKEN || to != TO_TOKEN {
            return Err(Error::Parse {
                line: 0,
                msg: format!("malformed edit clause {chunk:?}: expected set/to frame"),
            });
        }
        if !(2..2 + a).contains(&attr_tok) {
            return Err(Error::Parse {
                line: 0,
                msg: format!("token {attr_tok} is not an attribute name"),
            });
        }
        let attr = attr_tok - 2;
        let value_base = 2 + a + attr * v;
        if !(value_base..value_base + v).contains(&value_tok) {
            return Err(Error::Parse {
                line: 0,
                msg: format!("token {value_tok} is not a value of attribute {attr}"),
            });
        }
        edits.push(Edit { attr, value: value_tok - value_base });
    }
    Ok(edits)
}

fn sample_item<R: Rng>(universe: &ItemUniverse, rng: &mut R) -> Vec<usize> {
    (0..universe.attr_count())
        .map(|_| rng.gen_range(0..universe.value_count()))
        .collect()
}

/// Choose `k` distinct attribute indices, in sampled order.
fn sample_attrs<R: Rng>(a: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..a).collect();
    for i in 0..k {
        let j = rng.gen_range(i..a);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// A value in `0..v` different from `current`, uniform over the others.
fn sample_changed_value<R: Rng>(v: usize, current: usize, rng: &mut R) -> usize {
    let raw = rng.gen_range(0..v - 1);
    if raw >= current {
        raw + 1
    } else {
        raw
    }
}

fn check_edit_budget(universe: &ItemUniverse, max_edits: usize) -> Result<()> {
    if max_edits == 0 || max_edits > universe.attr_count() {
        return Err(Error::Config(format!(
            "max_edits must be in 1..={}, got {max_edits}",
            universe.attr_count()
        )));
    }
    Ok(())
}

/// Generate `n` training triplets: a uniform reference item, 1..=max_edits
/// edits on distinct attributes (each changing the value), the edited
/// target, and the edit tokens. Record `i` depends only on (seed, i).
pub fn generate_triplets(
    universe: &ItemUniverse,
    n: usize,
    max_edits: usize,
    seed: u64,
) -> Result<Vec<TripletRecord>> {
    if n == 0 {
        return Err(Error::Config("requested 0 triplets".into()));
    }
    check_edit_budget(universe, max_edits)?;
    let mut records = Vec::with_capacity(n);
    for idx in 0..n {
        let mut rng = StdRng::seed_from_u64(derive_seed(seed, STREAM_TRIPLET, idx as u64));
        let reference = sample_item(universe, &mut rng);
        let k = rng.gen_range(1..=max_edits);
        let attrs = sample_attrs(universe.attr_count(), k, &mut rng);
        let mut target = reference.clone();
        let mut edits = Vec::with_capacity(k);
        for attr in attrs {
            let value = sample_changed_value(universe.value_count(), reference[attr], &mut rng);
            target[attr] = value;
            edits.push(Edit { attr, value });
        }
        let tokens = encode_edits(universe, &edits);
        records.push(TripletRecord { query_id: idx as u64, reference, edits, target, tokens });
    }
    Ok(records)
}

/// An evaluation split: a gallery of distinct items plus queries whose
/// targets are sampled *from* the gallery (references are the targets with
/// the edits un-applied), so every true target is retrievable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub gallery: Vec<Vec<usize>>,
    pub queries: Vec<TripletRecord>,
}

pub fn generate_eval_set(
    universe: &ItemUniverse,
    gallery_size: usize,
    n_queries: usize,
    max_edits: usize,
    seed: u64,
) -> Result<EvalSet> {
    if gallery_size == 0 || n_queries == 0 {
        return Err(Error::Config(format!(
            "evaluation split needs a non-empty gallery and queries, got gallery={gallery_size}, queries={n_queries}"
        )));
    }
    check_edit_budget(universe, max_edits)?;
    if let Some(total) = universe.item_count() {
        if gallery_size > total {
            return Err(Error::Config(format!(
                "gallery of {gallery_size} distinct items requested but the universe only has {total}"
            )));
        }
    }
    let mut rng = StdRng::seed_from_u64(derive_seed(seed, STREAM_GALLERY, 0));
    let gallery = match universe.item_count() {
        // Dense small universe: enumerate and take a shuffled prefix, which
        // stays fast even when the gallery is most of the universe.
        Some(total) if total <= 1 << 20 => {
            let mut all: Vec<Vec<usize>> = Vec::with_capacity(total);
            let a = universe.attr_count();
            let v = universe.value_count();
            let mut item = vec![0usize; a];
            loop {
                all.push(item.clone());
                let mut pos = a;
                loop {
                    if pos == 0 {
                        break;
                    }
                    pos -= 1;
                    item[pos] += 1;
                    if item[pos] < v {
                        break;
                    }
                    item[pos] = 0;
                }
                if item.iter().all(|x| *x == 0) {
                    break;
                }
            }
            for i in 0..gallery_size {
                let j = rng.gen_range(i..total);
                all.swap(i, j);
            }
            all.truncate(gallery_size);
            all
        }
        // Vast universe: rejection-sample distinct items.
        _ => {
            let mut seen = HashSet::new();
            let mut items = Vec::with_capacity(gallery_size);
            while items.len() < gallery_size {
                let item = sample_item(universe, &mut rng);
                if seen.insert(item.clone()) {
                    items.push(item);
                }
            }
            items
        }
    };
    let mut queries = Vec::with_capacity(n_queries);
    for idx in 0..n_queries {
        let mut qrng = StdRng::seed_from_u64(derive_seed(seed, STREAM_QUERY, idx as u64));
        let target = gallery[qrng.gen_range(0..gallery.len())].clone();
        let k = qrng.gen_range(1..=max_edits);
        let attrs = sample_attrs(universe.attr_count(), k, &mut qrng);
        let mut reference = target.clone();
        let mut edits = Vec::with_capacity(k);
        for attr in attrs {
            // The forward edit restores the target's value; the reference
            // holds some other value before it.
            let old = sample_changed_value(universe.value_count(), target[attr], &mut qrng);
            reference[attr] = old;
            edits.push(Edit { attr, value: target[attr] });
        }
        let tokens = encode_edits(universe, &edits);
        queries.push(TripletRecord { query_id: idx as u64, reference, edits, target, tokens });
    }
    Ok(EvalSet { gallery, queries })
}

/// Write records as line-delimited JSON, one record per line, with fields
/// query_id, reference, edits, target, tokens.
pub fn write_records(path: &Path, records: &[TripletRecord]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::Parse { line: 0, msg: format!("serialize: {e}") })?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Read records back; every record is structurally validated. Errors carry
/// the 1-based line number.
pub fn read_records(path: &Path) -> Result<Vec<TripletRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TripletRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        record
            .validate()
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        records.push(record);
    }
    Ok(records)
}

/// Write a gallery, one JSON item (attribute-value array) per line.
pub fn write_gallery(path: &Path, gallery: &[Vec<usize>]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for item in gallery {
        let line = serde_json::to_string(item)
            .map_err(|e| Error::Parse { line: 0, msg: format!("serialize: {e}") })?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_gallery(path: &Path) -> Result<Vec<Vec<usize>>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: Vec<usize> = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        items.push(item);
    }
    Ok(items)
}
