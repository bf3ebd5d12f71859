//! Byte-level BPE with atomic special tokens.
//!
//! Id layout: special tokens first, then the 256 single bytes, then one id per
//! learned merge in training order. Text is split at special-token occurrences,
//! the remaining spans are pre-split into chunks (a whitespace run attaches to
//! the word that follows it), and merges never cross a chunk boundary.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::serializer::SpecialTokens;

pub const VOCAB_SCHEMA_VERSION: u32 = 1;
const BYTE_COUNT: usize = 256;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocab_size {requested} must exceed the byte alphabet plus specials ({minimum})")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("no text to train on")]
    InsufficientText,
    #[error("token id {id} out of range for vocabulary of {size}")]
    OutOfRange { id: u32, size: usize },
    #[error("invalid vocab file: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Ids of the special tokens inside a [`Vocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub belief_prefix: u32,
    pub eob: u32,
    pub db_prefix: u32,
    pub eokb: u32,
    pub eos: u32,
    pub user_prefix: u32,
    pub system_prefix: u32,
}

impl SpecialIds {
    pub fn all(&self) -> [u32; 7] {
        [
            self.belief_prefix,
            self.eob,
            self.db_prefix,
            self.eokb,
            self.eos,
            self.user_prefix,
            self.system_prefix,
        ]
    }

    pub fn contains(&self, id: u32) -> bool {
        self.all().contains(&id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    specials: SpecialTokens,
    special_ids: SpecialIds,
    pieces: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    merge_ranks: HashMap<(u32, u32), usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    schema_version: u32,
    specials: SpecialTokens,
    merges: Vec<(String, String)>,
    pieces: Vec<String>,
}

impl Vocab {
    fn base(specials: &SpecialTokens) -> Vocab {
        let mut pieces: Vec<Vec<u8>> = specials
            .all()
            .iter()
            .map(|s| s.as_bytes().to_vec())
            .collect();
        pieces.extend((0..=255u8).map(|b| vec![b]));
        let special_ids = SpecialIds {
            belief_prefix: 0,
            eob: 1,
            db_prefix: 2,
            eokb: 3,
            eos: 4,
            user_prefix: 5,
            system_prefix: 6,
        };
        Vocab {
            specials: specials.clone(),
            special_ids,
            pieces,
            merges: Vec::new(),
            merge_ranks: HashMap::new(),
        }
    }

    fn byte_offset(&self) -> u32 {
        self.special_ids.all().len() as u32
    }

    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let mut piece = self.pieces[left as usize].clone();
        piece.extend_from_slice(&self.pieces[right as usize]);
        let id = self.pieces.len() as u32;
        self.pieces.push(piece);
        self.merge_ranks.insert((left, right), self.merges.len());
        self.merges.push((left, right));
        id
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn specials(&self) -> &SpecialTokens {
        &self.specials
    }

    pub fn special_ids(&self) -> SpecialIds {
        self.special_ids
    }

    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    /// Merge pairs as piece bytes, in training order.
    pub fn merges(&self) -> Vec<(Vec<u8>, Vec<u8>)> {
        self.merges
            .iter()
            .map(|&(l, r)| (self.pieces[l as usize].clone(), self.pieces[r as usize].clone()))
            .collect()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::new();
        for segment in split_specials(bytes, &self.specials) {
            match segment {
                Segment::Special(i) => out.push(self.special_ids.all()[i]),
                Segment::Text(span) => {
                    for chunk in chunks(span) {
                        self.encode_chunk(chunk, &mut out);
                    }
                }
            }
        }
        out
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let offset = self.byte_offset();
        let mut symbols: Vec<u32> = chunk.iter().map(|&b| offset + b as u32).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0], w[1])).map(|&r| (r, w[0], w[1])))
                .min();
            let Some((rank, left, right)) = best else { break };
            let merged = offset + BYTE_COUNT as u32 + rank as u32;
            symbols = merge_pair(&symbols, left, right, merged);
        }
        out.extend(symbols);
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            let piece = self.piece(id).ok_or(TokenizerError::OutOfRange {
                id,
                size: self.len(),
            })?;
            out.extend_from_slice(piece);
        }
        Ok(out)
    }

    /// Decode to a string; invalid UTF-8 sequences are replaced.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(String::from_utf8(bytes)
            .unwrap_or_else(|e| String::from_utf8_lossy(e.as_bytes()).into_owned()))
    }

    pub fn to_json(&self) -> String {
        let table = byte_to_unicode();
        let show = |bytes: &[u8]| bytes.iter().map(|&b| table[b as usize]).collect::<String>();
        let file = VocabFile {
            schema_version: VOCAB_SCHEMA_VERSION,
            specials: self.specials.clone(),
            merges: self
                .merges
                .iter()
                .map(|&(l, r)| (show(&self.pieces[l as usize]), show(&self.pieces[r as usize])))
                .collect(),
            pieces: self.pieces.iter().map(|p| show(p)).collect(),
        };
        serde_json::to_string_pretty(&file).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Vocab, TokenizerError> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|e| TokenizerError::Format(e.to_string()))?;
        if file.schema_version != VOCAB_SCHEMA_VERSION {
            return Err(TokenizerError::Format(format!(
                "unsupported schema_version {}",
                file.schema_version
            )));
        }
        let table = byte_to_unicode();
        let inverse: HashMap<char, u8> =
            table.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let parse = |s: &str| -> Result<Vec<u8>, TokenizerError> {
            s.chars()
                .map(|c| {
                    inverse
                        .get(&c)
                        .copied()
                        .ok_or_else(|| TokenizerError::Format(format!("bad piece char {c:?}")))
                })
                .collect()
        };
        let mut vocab = Vocab::base(&file.specials);
        let mut lookup: HashMap<Vec<u8>, u32> = HashMap::new();
        for (id, piece) in vocab.pieces.iter().enumerate().skip(vocab.byte_offset() as usize) {
            lookup.insert(piece.clone(), id as u32);
        }
        for (l, r) in &file.merges {
            let (l, r) = (parse(l)?, parse(r)?);
            let (Some(&li), Some(&ri)) = (lookup.get(&l), lookup.get(&r)) else {
                return Err(TokenizerError::Format("merge references an unknown piece".into()));
            };
            let id = vocab.push_merge(li, ri);
            lookup.insert(vocab.pieces[id as usize].clone(), id);
        }
        let expected: Vec<String> = vocab
            .pieces
            .iter()
            .map(|p| p.iter().map(|&b| table[b as usize]).collect())
            .collect();
        if expected != file.pieces {
            return Err(TokenizerError::Format(
                "piece table disagrees with the merge list".into(),
            ));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_json()).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Vocab, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Vocab::from_json(&text)
    }
}

/// Greedy BPE: repeatedly merge the most frequent adjacent pair. Ties go to
/// the pair whose concatenated bytes sort first, then to the shorter left
/// piece. Pairs seen fewer than twice are never merged.
pub fn train_bpe<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    vocab_size: usize,
    specials: &SpecialTokens,
) -> Result<Vocab, TokenizerError> {
    let minimum = BYTE_COUNT + specials.all().len();
    if vocab_size <= minimum {
        return Err(TokenizerError::VocabTooSmall {
            requested: vocab_size,
            minimum,
        });
    }
    let mut vocab = Vocab::base(specials);
    let offset = vocab.byte_offset();

    let mut counts: HashMap<&[u8], u64> = HashMap::new();
    let mut total = 0usize;
    for text in texts {
        for segment in split_specials(text.as_bytes(), specials) {
            if let Segment::Text(span) = segment {
                for chunk in chunks(span) {
                    total += chunk.len();
                    *counts.entry(chunk).or_insert(0) += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(TokenizerError::InsufficientText);
    }
    let mut words: Vec<(Vec<u32>, u64)> = counts
        .into_iter()
        .map(|(chunk, n)| (chunk.iter().map(|&b| offset + b as u32).collect(), n))
        .collect();
    words.sort();

    while vocab.len() < vocab_size {
        let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
        for (symbols, n) in &words {
            for w in symbols.windows(2) {
                *pairs.entry((w[0], w[1])).or_insert(0) += n;
            }
        }
        let best = pairs
            .into_iter()
            .filter(|&(_, n)| n >= 2)
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| tie_break(&vocab, b.0, a.0)));
        let Some(((left, right), _)) = best else { break };
        let merged = vocab.push_merge(left, right);
        for (symbols, _) in words.iter_mut() {
            if symbols.len() > 1 {
                *symbols = merge_pair(symbols, left, right, merged);
            }
        }
    }
    Ok(vocab)
}

fn tie_break(vocab: &Vocab, a: (u32, u32), b: (u32, u32)) -> Ordering {
    let key = |(l, r): (u32, u32)| {
        let mut cat = vocab.pieces[l as usize].clone();
        cat.extend_from_slice(&vocab.pieces[r as usize]);
        (cat, vocab.pieces[l as usize].len())
    };
    key(a).cmp(&key(b))
}

fn merge_pair(symbols: &[u32], left: u32, right: u32, merged: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

enum Segment<'a> {
    Special(usize),
    Text(&'a [u8]),
}

/// Split at special-token occurrences, longest special first at each position.
fn split_specials<'a>(bytes: &'a [u8], specials: &SpecialTokens) -> Vec<Segment<'a>> {
    let table = specials.all();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let hit = table
            .iter()
            .enumerate()
            .filter(|(_, s)| bytes[i..].starts_with(s.as_bytes()))
            .max_by_key(|(_, s)| s.len());
        match hit {
            Some((idx, s)) => {
                if start < i {
                    out.push(Segment::Text(&bytes[start..i]));
                }
                out.push(Segment::Special(idx));
                i += s.len();
                start = i;
            }
            None => i += 1,
        }
    }
    if start < bytes.len() {
        out.push(Segment::Text(&bytes[start..]));
    }
    out
}

/// Chunks begin at the start of a whitespace run that follows a non-space.
fn chunks(span: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..span.len() {
        if span[i].is_ascii_whitespace() && !span[i - 1].is_ascii_whitespace() {
            out.push(&span[start..i]);
            start = i;
        }
    }
    if start < span.len() {
        out.push(&span[start..]);
    }
    out
}

/// Printable stand-in for every byte, used for the vocab file's piece strings.
fn byte_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| (33..=126).contains(&b) || (161..=172).contains(&b) || (174..=255).contains(&b);
    let mut extra = 0u32;
    for b in 0..256u32 {
        table[b as usize] = if printable(b) {
            char::from_u32(b).unwrap()
        } else {
            extra += 1;
            char::from_u32(255 + extra).unwrap()
        };
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specials() -> SpecialTokens {
        SpecialTokens::default()
    }

    fn base_size() -> usize {
        BYTE_COUNT + specials().all().len()
    }

    /// Hand-run BPE on "aaab aaab": chunks "aaab" and " aaab". Pair counts:
    /// (a,a)=4, (a,b)=2, (' ',a)=1 → merge "aa". Then (aa,a)=2, (a,b)=2,
    /// (' ',aa)=1: tie broken by concatenation "aaa" < "ab" → merge ("aa","a").
    #[test]
    fn hand_run_merges() {
        let v = train_bpe(["aaab aaab"], base_size() + 2, &specials()).unwrap();
        let merges: Vec<(String, String)> = v
            .merges()
            .into_iter()
            .map(|(l, r)| (String::from_utf8(l).unwrap(), String::from_utf8(r).unwrap()))
            .collect();
        assert_eq!(
            merges,
            vec![("a".into(), "a".into()), ("aa".into(), "a".into())]
        );
        let ids = v.encode("aaab");
        let pieces: Vec<&[u8]> = ids.iter().map(|&i| v.piece(i).unwrap()).collect();
        assert_eq!(pieces, vec![&b"aaa"[..], &b"b"[..]]);
    }

    #[test]
    fn vocab_size_below_alphabet_errors() {
        assert!(matches!(
            train_bpe(["abc"], 100, &specials()),
            Err(TokenizerError::VocabTooSmall { .. })
        ));
        assert!(matches!(
            train_bpe(Vec::<&str>::new(), base_size() + 5, &specials()),
            Err(TokenizerError::InsufficientText)
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let text = ["the cat sat on the mat", "the dog sat on the log <EOS>"];
        let a = train_bpe(text, base_size() + 20, &specials()).unwrap();
        let b = train_bpe(text, base_size() + 20, &specials()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn specials_are_atomic() {
        let v = train_bpe(["<EOB> <EOB> EOB EOB"], base_size() + 10, &specials()).unwrap();
        assert_eq!(v.encode("<EOB>"), vec![v.special_ids().eob]);
        let ids = v.encode("x => Belief State : y<EOS>");
        assert_eq!(
            ids.iter()
                .filter(|&&i| v.special_ids().contains(i))
                .count(),
            2
        );
        assert!(v
            .merges()
            .iter()
            .all(|(l, r)| !String::from_utf8_lossy(&[l.clone(), r.clone()].concat()).contains("<EOB>")));
    }

    #[test]
    fn empty_encodes_to_nothing() {
        let v = train_bpe(["ab ab"], base_size() + 1, &specials()).unwrap();
        assert!(v.encode("").is_empty());
        assert_eq!(v.decode(&[]).unwrap(), "");
    }

    #[test]
    fn out_of_range_decode_errors() {
        let v = train_bpe(["ab ab"], base_size() + 1, &specials()).unwrap();
        assert!(matches!(
            v.decode(&[v.len() as u32]),
            Err(TokenizerError::OutOfRange { .. })
        ));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = train_bpe(["héllo wörld hello world"], base_size() + 12, &specials()).unwrap();
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn chunking_attaches_spaces_forward() {
        let c: Vec<&[u8]> = chunks(b"a  bc d ");
        assert_eq!(c, vec![&b"a"[..], b"  bc", b" d", b" "]);
    }

    proptest::proptest! {
        #[test]
        fn round_trip_arbitrary_bytes(bytes in proptest::collection::vec(proptest::prelude::any::<u8>(), 0..64)) {
            let v = train_bpe(["hello there user : <EOS> system"], base_size() + 16, &specials()).unwrap();
            proptest::prop_assert_eq!(v.decode_bytes(&v.encode_bytes(&bytes)).unwrap(), bytes);
        }
    }
}
