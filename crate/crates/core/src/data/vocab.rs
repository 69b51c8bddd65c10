//! Byte-level vocabulary: ids 0..=255 are raw bytes, followed by the special
//! tokens and one hundred span sentinels.

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const SENTINEL_BASE: u32 = 259;
pub const N_SENTINELS: u32 = 100;
/// Smallest vocabulary holding every byte, special and sentinel token.
pub const MIN_VOCAB: usize = (SENTINEL_BASE + N_SENTINELS) as usize;

/// Sentinel `S{i}`.
pub fn sentinel(i: usize) -> Option<u32> {
    (i < N_SENTINELS as usize).then(|| SENTINEL_BASE + i as u32)
}

/// Index of a sentinel token.
pub fn sentinel_index(id: u32) -> Option<usize> {
    (SENTINEL_BASE..SENTINEL_BASE + N_SENTINELS)
        .contains(&id)
        .then(|| (id - SENTINEL_BASE) as usize)
}

pub fn is_special(id: u32) -> bool {
    id >= PAD
}

pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`tokenize`]; `None` when a non-byte token is present.
pub fn detokenize(ids: &[u32]) -> Option<Vec<u8>> {
    ids.iter().map(|&id| u8::try_from(id).ok()).collect()
}

/// Bytes of `ids` with special tokens dropped, for display.
pub fn detokenize_lossy(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter_map(|&id| u8::try_from(id).ok()).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
