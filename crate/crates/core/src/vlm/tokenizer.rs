//! Word-level hashing tokenizer for the stand-in text encoder.

/// Padding row; its embedding is all zeros.
pub const PAD: u32 = 0;
/// Begin-of-text sentinel.
pub const SOT: u32 = 1;
/// End-of-text sentinel; its position is pooled.
pub const EOT: u32 = 2;
const RESERVED: u32 = 3;

/// Lower-cases, splits on anything that is not alphanumeric, `-` or `'`,
/// and hashes each word into `[3, vocab)`.
pub fn tokenize(text: &str, vocab: usize) -> Vec<u32> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\''))
        .filter(|w| !w.is_empty())
        .map(|w| word_id(&w.to_lowercase(), vocab))
        .collect()
}

fn word_id(word: &str, vocab: usize) -> u32 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in word.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    RESERVED + (h % (vocab as u64 - RESERVED as u64)) as u32
}

/// `[SOT, words…, PAD…, EOT]` with exactly `n_tokens` content slots.
/// Returns the ids and whether the phrase had to be truncated.
pub fn context_ids(text: &str, vocab: usize, n_tokens: usize) -> (Vec<u32>, bool) {
    let mut words = tokenize(text, vocab);
    let truncated = words.len() > n_tokens;
    words.truncate(n_tokens);
    let mut ids = Vec::with_capacity(n_tokens + 2);
    ids.push(SOT);
    ids.extend_from_slice(&words);
    ids.resize(n_tokens + 1, PAD);
    ids.push(EOT);
    (ids, truncated)
}
