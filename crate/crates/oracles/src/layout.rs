//! Byte-size arithmetic for the shard layout.

pub const HEADER_BYTES: u64 = 5 + 1 + 1 + 1 + 8;
pub const LENGTHS_PER_RECORD: u64 = 4 + 4;

/// Exact shard size for records with the given (src_len, tgt_len) and id widths.
pub fn shard_size(lengths: &[(u64, u64)], src_width: u64, tgt_width: u64) -> u64 {
    let ids: u64 = lengths.iter().map(|(s, t)| s * src_width + t * tgt_width).sum();
    HEADER_BYTES + LENGTHS_PER_RECORD * lengths.len() as u64 + ids
}

/// Hand-assembled single-record shard.
pub fn single_record_shard(src: &[u32], src_width: usize, tgt: &[u32], tgt_width: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"NLDB1");
    out.push(1);
    out.push(src_width as u8);
    out.push(tgt_width as u8);
    out.extend_from_slice(&1u64.to_le_bytes());
    out.extend_from_slice(&(src.len() as u32).to_le_bytes());
    out.extend_from_slice(&(tgt.len() as u32).to_le_bytes());
    for &id in src {
        out.extend_from_slice(&id.to_le_bytes()[..src_width]);
    }
    for &id in tgt {
        out.extend_from_slice(&id.to_le_bytes()[..tgt_width]);
    }
    out
}
