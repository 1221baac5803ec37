//! Synthetic long documents where facts stated early are queried much later.
//!
//! A document is a sequence of 8-byte chunks in three regions:
//!
//! * facts: `#KK=VVVV` binds key letter `K` to a value symbol `V`,
//! * mentions: `~K~K~K~K` repeats a key without its value (a lexical decoy),
//! * queries: `?KK.....` names a key and is followed by `=VVV....`, its value.
//!
//! Every other chunk is the same filler, so no earlier chunk predicts it
//! better than the chunks just before it. The value chunk is only predictable by looking back at the fact chunk, which lies outside
//! any window shorter than the distance between the regions.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Document;

pub const CHUNK_LEN: usize = 8;
const VALUE_SYMBOLS: &[u8] = b"0123456789!$%&*+-/<>@^|{}[]()_";
const FILLER: &[u8; CHUNK_LEN] = b"and the ";
/// Chunks per query: two fillers, the query and its value.
const QUERY_UNIT: usize = 4;

/// Layout of one synthetic document, in chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub keys: usize,
    pub fact_region: usize,
    pub mention_region: usize,
    pub query_region: usize,
    pub mentions_per_key: usize,
}

impl Default for Layout {
    fn default() -> Self {
        Self { keys: 6, fact_region: 12, mention_region: 20, query_region: 24, mentions_per_key: 2 }
    }
}

impl Layout {
    pub fn num_chunks(&self) -> usize {
        self.fact_region + self.mention_region + self.query_region
    }

    fn check(&self) {
        assert!(self.keys >= 1 && self.keys <= VALUE_SYMBOLS.len(), "too many keys for distinct values");
        assert!(2 * self.keys <= self.fact_region, "fact region too small");
        assert!(self.keys * self.mentions_per_key <= self.mention_region, "mention region too small");
        assert!(QUERY_UNIT * self.keys <= self.query_region, "query region too small");
    }
}

/// A generated document plus where each fact and its query landed.
#[derive(Debug, Clone)]
pub struct SyntheticDoc {
    pub document: Document,
    /// `(fact chunk, query chunk)` per key; the value chunk is `query + 1`.
    pub links: Vec<(usize, usize)>,
}

fn filler() -> Vec<u8> {
    FILLER.to_vec()
}

enum Slot {
    Filler,
    Key(usize),
}

/// `per_key` entries for each key mixed with fillers up to `len_units`, shuffled.
fn shuffled(keys: usize, per_key: usize, len_units: usize, rng: &mut impl Rng) -> Vec<Slot> {
    let mut v: Vec<Slot> = (0..keys).flat_map(|k| (0..per_key).map(move |_| Slot::Key(k))).collect();
    v.extend((v.len()..len_units).map(|_| Slot::Filler));
    v.shuffle(rng);
    v
}

pub fn generate_doc(id: impl Into<String>, layout: Layout, seed: u64) -> SyntheticDoc {
    layout.check();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut letters: Vec<u8> = (b'A'..=b'Z').collect();
    letters.shuffle(&mut rng);
    let keys = &letters[..layout.keys];
    // values of one document are distinct, so only the right fact helps
    let mut symbols = VALUE_SYMBOLS.to_vec();
    symbols.shuffle(&mut rng);
    let values: Vec<Vec<u8>> = symbols[..layout.keys].iter().map(|&v| vec![v; 4]).collect();

    let mut chunks: Vec<Vec<u8>> = Vec::with_capacity(layout.num_chunks());
    let mut fact_at = vec![0; layout.keys];
    let mut query_at = vec![0; layout.keys];

    // a filler before each fact keeps any two adjacent chunks down to one value
    for slot in shuffled(layout.keys, 1, layout.fact_region - layout.keys, &mut rng) {
        match slot {
            Slot::Filler => chunks.push(filler()),
            Slot::Key(k) => {
                chunks.push(filler());
                fact_at[k] = chunks.len();
                let mut c = vec![b'#', keys[k], keys[k], b'='];
                c.extend_from_slice(&values[k]);
                chunks.push(c);
            }
        }
    }
    let mention_units = layout.mention_region;
    for slot in shuffled(layout.keys, layout.mentions_per_key, mention_units, &mut rng) {
        match slot {
            Slot::Filler => chunks.push(filler()),
            Slot::Key(k) => chunks.push([b'~', keys[k]].repeat(CHUNK_LEN / 2)),
        }
    }
    let query_units = layout.query_region - (QUERY_UNIT - 1) * layout.keys;
    for slot in shuffled(layout.keys, 1, query_units, &mut rng) {
        match slot {
            Slot::Filler => chunks.push(filler()),
            Slot::Key(k) => {
                // the chunks before a query are always filler
                chunks.push(filler());
                chunks.push(filler());
                query_at[k] = chunks.len();
                let mut q = vec![b'?', keys[k], keys[k]];
                q.resize(CHUNK_LEN, b'.');
                chunks.push(q);
                let mut v = vec![b'='];
                v.extend_from_slice(&values[k][..3]);
                v.resize(CHUNK_LEN, b'.');
                chunks.push(v);
            }
        }
    }
    debug_assert!(chunks.iter().all(|c| c.len() == CHUNK_LEN));
    let tokens: Vec<u32> = chunks.concat().into_iter().map(u32::from).collect();
    let document = Document::new(id, tokens, 256).expect("bytes fit the byte vocabulary");
    SyntheticDoc { document, links: fact_at.into_iter().zip(query_at).collect() }
}

/// `n` documents with ids `{prefix}-{index}`, each from its own seed stream.
pub fn generate_corpus(prefix: &str, n: usize, layout: Layout, seed: u64) -> Vec<SyntheticDoc> {
    (0..n)
        .map(|i| generate_doc(format!("{prefix}-{i:04}"), layout, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::partition;

    #[test]
    fn layout_and_links() {
        let layout = Layout::default();
        for seed in 0..20 {
            let d = generate_doc("x", layout, seed);
            let p = partition(&d.document, CHUNK_LEN);
            assert_eq!(p.num_chunks(), 56);
            assert_eq!(p.dropped, 0);
            assert_eq!(d.links.len(), layout.keys);
            for &(f, q) in &d.links {
                let fact = p.chunk_tokens(f);
                let query = p.chunk_tokens(q);
                let value = p.chunk_tokens(q + 1);
                assert!(f < 12 && (34..55).contains(&q));
                assert_eq!(p.chunk_tokens(f - 1), FILLER.map(u32::from));
                assert!(q - f >= 20);
                assert_eq!(fact[0], u32::from(b'#'));
                assert_eq!(query[0], u32::from(b'?'));
                assert_eq!(fact[1], query[1]);
                assert_eq!(p.chunk_tokens(q - 1), p.chunk_tokens(q - 2));
                assert_eq!(&fact[3..7], &value[..4]);
                assert!(value[4..].iter().all(|&t| t == u32::from(b'.')));
            }
            let mut used: Vec<u32> = d.links.iter().flat_map(|&(f, _)| p.chunk_tokens(f)[4..].to_vec()).collect();
            used.sort();
            used.dedup();
            assert_eq!(used.len(), layout.keys);
            let mentions = (12..32).filter(|&i| p.chunk_tokens(i)[0] == u32::from(b'~')).count();
            assert_eq!(mentions, 12);
        }
    }

    #[test]
    fn corpus_is_deterministic_and_varied() {
        let a = generate_corpus("t", 3, Layout::default(), 9);
        let b = generate_corpus("t", 3, Layout::default(), 9);
        assert_eq!(a[2].document, b[2].document);
        assert_ne!(a[0].document.tokens, a[1].document.tokens);
        assert_eq!(a[1].document.id, "t-0001");
    }
}
