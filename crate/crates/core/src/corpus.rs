//! Documents, chunk partitions, retrievable sets and sliding-window plans.
//!
//! Chunk indices are 0-based throughout: chunk `i` covers tokens
//! `[i*m, (i+1)*m)`, and its retrievable set is every chunk `j <= i - w`.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, RptError};

pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tokenizer {
    /// Identity over raw bytes, vocabulary 256.
    Bytes,
    /// Whitespace-separated integer ids, each `< vocab_size`.
    Ids { vocab_size: usize },
}

impl Tokenizer {
    pub fn parse(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "bytes" => Ok(Tokenizer::Bytes),
            "ids" => Ok(Tokenizer::Ids { vocab_size }),
            other => Err(RptError::UnknownTokenizer(other.to_string())),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Bytes => BYTE_VOCAB,
            Tokenizer::Ids { vocab_size } => *vocab_size,
        }
    }

    pub fn encode(&self, raw: &[u8]) -> Result<Vec<u32>> {
        match self {
            Tokenizer::Bytes => Ok(raw.iter().map(|&b| b as u32).collect()),
            Tokenizer::Ids { vocab_size } => {
                let text = String::from_utf8_lossy(raw);
                text.split_whitespace()
                    .enumerate()
                    .map(|(position, tok)| {
                        let id: u64 =
                            tok.parse().map_err(|_| RptError::TokenParse { token: tok.to_string(), position })?;
                        if id as usize >= *vocab_size || id > u32::MAX as u64 {
                            return Err(RptError::TokenOutOfRange { id, position, vocab_size: *vocab_size });
                        }
                        Ok(id as u32)
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<u32>,
}

impl Document {
    pub fn new(id: impl Into<String>, tokens: Vec<u32>, vocab_size: usize) -> Result<Self> {
        let id = id.into();
        if tokens.is_empty() {
            return Err(RptError::EmptyDocument(id));
        }
        if let Some((position, &t)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= vocab_size) {
            return Err(RptError::TokenOutOfRange { id: t as u64, position, vocab_size });
        }
        Ok(Self { id, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Read one file and tokenize it. The document id is the file name.
pub fn ingest(path: &Path, tokenizer: Tokenizer) -> Result<Document> {
    let raw = fs::read(path).map_err(|e| RptError::io(path, e))?;
    let tokens = tokenizer.encode(&raw)?;
    let id = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string());
    Document::new(id, tokens, tokenizer.vocab_size())
}

/// All regular, non-hidden files of `dir` in name order.
pub fn list_corpus(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| RptError::io(dir, e))? {
        let entry = entry.map_err(|e| RptError::io(dir, e))?;
        let path = entry.path();
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if path.is_file() && !hidden {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn ingest_dir(dir: &Path, tokenizer: Tokenizer) -> Result<Vec<Document>> {
    list_corpus(dir)?.iter().map(|p| ingest(p, tokenizer)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chunk {
    pub index: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPartition {
    pub doc_id: String,
    pub chunk_len: usize,
    pub tokens: Vec<u32>,
    pub dropped: usize,
}

impl ChunkPartition {
    pub fn num_chunks(&self) -> usize {
        self.tokens.len() / self.chunk_len
    }

    pub fn chunk(&self, i: usize) -> Chunk {
        Chunk { index: i, start: i * self.chunk_len, end: (i + 1) * self.chunk_len }
    }

    pub fn chunks(&self) -> impl Iterator<Item = Chunk> + '_ {
        (0..self.num_chunks()).map(|i| self.chunk(i))
    }

    pub fn chunk_tokens(&self, i: usize) -> &[u32] {
        let c = self.chunk(i);
        &self.tokens[c.start..c.end]
    }

    pub fn manifest(&self) -> ManifestRecord {
        ManifestRecord {
            doc_id: self.doc_id.clone(),
            length: self.tokens.len() + self.dropped,
            chunk_len: self.chunk_len,
            num_chunks: self.num_chunks(),
            dropped: self.dropped,
        }
    }
}

/// Split a document into `floor(L/m)` chunks of exactly `m` tokens. The
/// partition keeps only the covered prefix; the remainder count is reported.
pub fn partition(doc: &Document, m: usize) -> ChunkPartition {
    assert!(m >= 1, "chunk length must be positive");
    let n = doc.tokens.len() / m;
    ChunkPartition {
        doc_id: doc.id.clone(),
        chunk_len: m,
        tokens: doc.tokens[..n * m].to_vec(),
        dropped: doc.tokens.len() - n * m,
    }
}

/// One line of the partition manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub doc_id: String,
    #[serde(rename = "L")]
    pub length: usize,
    #[serde(rename = "m")]
    pub chunk_len: usize,
    #[serde(rename = "l")]
    pub num_chunks: usize,
    pub dropped: usize,
}

/// Chunks a query chunk may retrieve: all `j <= i - w`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievableSet {
    pub query_index: usize,
    pub members: Range<usize>,
}

impl RetrievableSet {
    pub fn contains(&self, j: usize) -> bool {
        self.members.contains(&j)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub fn retrievable_set(i: usize, w: usize) -> RetrievableSet {
    RetrievableSet { query_index: i, members: 0..(i + 1).saturating_sub(w) }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSpan {
    pub input: Range<usize>,
    pub output: Range<usize>,
}

/// Sliding-window schedule: each output token attends back to the start of its
/// span's input, i.e. to the cached tail of the previous span plus its own prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub window_tokens: usize,
    pub stride_tokens: usize,
    pub spans: Vec<WindowSpan>,
}

impl WindowPlan {
    pub fn total_len(&self) -> usize {
        self.spans.last().map_or(0, |s| s.output.end)
    }

    /// Cached context carried from one span to the next.
    pub fn context_tokens(&self) -> usize {
        self.window_tokens - self.stride_tokens
    }

    /// First key position visible to the query at `pos`.
    pub fn key_start(&self, pos: usize) -> usize {
        let s = self.spans.iter().find(|s| s.output.contains(&pos)).expect("position outside window plan");
        s.input.start
    }

    /// Per-position `[key_start, pos]` ranges for the whole sequence.
    pub fn key_ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.total_len());
        for s in &self.spans {
            for p in s.output.clone() {
                out.push((s.input.start, p + 1));
            }
        }
        out
    }
}

pub fn plan_windows(len: usize, window: usize, stride: usize) -> Result<WindowPlan> {
    if stride == 0 || window < stride {
        return Err(RptError::WindowPlan(format!("need window >= stride >= 1, got window={window} stride={stride}")));
    }
    if len == 0 {
        return Err(RptError::WindowPlan("empty sequence".into()));
    }
    let mut spans = Vec::new();
    if len <= window {
        spans.push(WindowSpan { input: 0..len, output: 0..len });
    } else {
        spans.push(WindowSpan { input: 0..window, output: 0..window });
        let ctx = window - stride;
        let mut start = window;
        while start < len {
            let end = (start + stride).min(len);
            spans.push(WindowSpan { input: start - ctx..end, output: start..end });
            start = end;
        }
    }
    Ok(WindowPlan { window_tokens: window, stride_tokens: stride, spans })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(n: usize) -> Document {
        Document::new("d", (0..n as u32).map(|t| t % 256).collect(), 256).unwrap()
    }

    #[test]
    fn bytes_tokenizer_is_identity() {
        assert_eq!(Tokenizer::Bytes.encode(b"ab").unwrap(), vec![97, 98]);
    }

    #[test]
    fn ids_tokenizer_parses_and_bounds_checks() {
        let t = Tokenizer::Ids { vocab_size: 8 };
        assert_eq!(t.encode(b"5 7 5").unwrap(), vec![5, 7, 5]);
        assert!(matches!(t.encode(b"9"), Err(RptError::TokenOutOfRange { id: 9, .. })));
        assert!(matches!(t.encode(b"x"), Err(RptError::TokenParse { .. })));
    }

    #[test]
    fn ingest_reads_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        fs::write(&p, "ab").unwrap();
        let d = ingest(&p, Tokenizer::Bytes).unwrap();
        assert_eq!(d.id, "a.txt");
        assert_eq!(d.tokens, vec![97, 98]);
        let q = dir.path().join("ids.txt");
        fs::write(&q, "9").unwrap();
        assert!(ingest(&q, Tokenizer::Ids { vocab_size: 8 }).is_err());
        assert!(matches!(ingest(&dir.path().join("missing"), Tokenizer::Bytes), Err(RptError::Io { .. })));
    }

    #[test]
    fn partition_counts() {
        assert_eq!(partition(&doc(45), 5).num_chunks(), 9);
        assert_eq!(partition(&doc(10), 10).num_chunks(), 1);
        let p = partition(&doc(11), 5);
        assert_eq!((p.num_chunks(), p.dropped), (2, 1));
        let man = p.manifest();
        assert_eq!((man.length, man.chunk_len, man.num_chunks, man.dropped), (11, 5, 2, 1));
    }

    #[test]
    fn retrievable_sets_match_definition() {
        // chunk 9 of 9 (index 8) with w=3 sees chunks 1..=6 (indices 0..6)
        assert_eq!(retrievable_set(8, 3).members, 0..6);
        assert!(retrievable_set(2, 3).is_empty());
        assert_eq!(retrievable_set(3, 3).members, 0..1);
    }

    #[test]
    fn window_plans() {
        let p = plan_windows(4096, 2048, 1024).unwrap();
        assert_eq!(
            p.spans,
            vec![
                WindowSpan { input: 0..2048, output: 0..2048 },
                WindowSpan { input: 1024..3072, output: 2048..3072 },
                WindowSpan { input: 2048..4096, output: 3072..4096 },
            ]
        );
        assert_eq!(plan_windows(2048, 2048, 1024).unwrap().spans.len(), 1);
        let short = plan_windows(1000, 2048, 1024).unwrap();
        assert_eq!(short.spans, vec![WindowSpan { input: 0..1000, output: 0..1000 }]);
        assert!(plan_windows(10, 4, 8).is_err());
        assert!(plan_windows(0, 4, 2).is_err());
    }

    proptest! {
        #[test]
        fn chunks_reassemble_prefix(n in 1usize..300, m in 1usize..20) {
            let d = doc(n);
            let p = partition(&d, m);
            let joined: Vec<u32> = p.chunks().flat_map(|c| p.chunk_tokens(c.index).to_vec()).collect();
            prop_assert_eq!(&joined[..], &d.tokens[..p.num_chunks() * m]);
            prop_assert_eq!(p.num_chunks(), n / m);
        }

        #[test]
        fn retrievable_members_respect_window(i in 0usize..100, w in 0usize..10) {
            let r = retrievable_set(i, w);
            if let Some(max) = r.members.clone().last() {
                prop_assert!(max + w <= i);
            } else {
                prop_assert!(i < w);
            }
        }

        #[test]
        fn window_outputs_partition_the_sequence(len in 1usize..2000, stride in 1usize..64, extra in 0usize..64) {
            let window = stride + extra;
            let p = plan_windows(len, window, stride).unwrap();
            let mut next = 0;
            for s in &p.spans {
                prop_assert_eq!(s.output.start, next);
                prop_assert!(s.input.start <= s.output.start && s.input.end == s.output.end);
                prop_assert!(s.input.len() <= window);
                next = s.output.end;
            }
            prop_assert_eq!(next, len);
        }
    }
}
