//! Bitstream container: per-PE records, each a little-endian 32-bit header
//! `row << 24 | col << 16 | word_count` followed by `word_count` little-endian
//! 64-bit configuration words. A column of `0xFF` broadcasts the record to
//! every PE of the row (SCMD).

use thiserror::Error;

use crate::pe::{ConfigWord, DecodeError};

pub const BROADCAST_COL: u8 = 0xFF;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeRecord {
    pub row: u8,
    pub col: u8,
    pub words: Vec<ConfigWord>,
}

impl PeRecord {
    pub fn is_broadcast(&self) -> bool {
        self.col == BROADCAST_COL
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BitstreamError {
    #[error("bitstream truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("record ({row},{col}) word {index}: {source}")]
    Word {
        row: u8,
        col: u8,
        index: usize,
        #[source]
        source: DecodeError,
    },
    #[error("bitstream length {0} is not a multiple of 4 bytes")]
    Misaligned(usize),
}

pub fn encode_bitstream(records: &[PeRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        let header = (u32::from(r.row) << 24) | (u32::from(r.col) << 16) | r.words.len() as u32;
        out.extend_from_slice(&header.to_le_bytes());
        for w in &r.words {
            out.extend_from_slice(&w.encode().to_le_bytes());
        }
    }
    out
}

pub fn decode_bitstream(bytes: &[u8]) -> Result<Vec<PeRecord>, BitstreamError> {
    let mut records = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let header = bytes.get(at..at + 4).ok_or(BitstreamError::Truncated { offset: at })?;
        let header = u32::from_le_bytes(header.try_into().unwrap());
        at += 4;
        let (row, col, count) = ((header >> 24) as u8, (header >> 16) as u8, (header & 0xFFFF) as usize);
        let mut words = Vec::with_capacity(count);
        for index in 0..count {
            let raw = bytes.get(at..at + 8).ok_or(BitstreamError::Truncated { offset: at })?;
            let raw = u64::from_le_bytes(raw.try_into().unwrap());
            words.push(ConfigWord::decode(raw).map_err(|source| BitstreamError::Word { row, col, index, source })?);
            at += 8;
        }
        records.push(PeRecord { row, col, words });
    }
    Ok(records)
}

/// Bitstream bytes as the 32-bit words of the configuration store.
pub fn bytes_to_words(bytes: &[u8]) -> Result<Vec<u32>, BitstreamError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(BitstreamError::Misaligned(bytes.len()));
    }
    Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn words_to_bytes(words: &[u32]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pe::{Opcode, SrcSel};

    #[test]
    fn empty_bitstream_has_no_records() {
        assert!(encode_bitstream(&[]).is_empty());
        assert!(decode_bitstream(&[]).unwrap().is_empty());
    }

    #[test]
    fn header_layout() {
        let rec = PeRecord { row: 2, col: 3, words: vec![ConfigWord::NOP] };
        let bytes = encode_bitstream(std::slice::from_ref(&rec));
        assert_eq!(&bytes[..4], &[1, 0, 3, 2]);
        assert_eq!(bytes.len(), 12);
        assert_eq!(decode_bitstream(&bytes).unwrap(), vec![rec]);
    }

    #[test]
    fn truncated_and_bad_words_rejected() {
        let rec =
            PeRecord { row: 0, col: 0, words: vec![ConfigWord::new(Opcode::Add).with_src(SrcSel::Imm, SrcSel::Imm)] };
        let bytes = encode_bitstream(&[rec]);
        assert_eq!(decode_bitstream(&bytes[..10]), Err(BitstreamError::Truncated { offset: 4 }));
        let mut bad = bytes.clone();
        bad[4] = 1; // reserved bit
        assert!(matches!(decode_bitstream(&bad), Err(BitstreamError::Word { index: 0, .. })));
    }

    #[test]
    fn word_view_round_trip() {
        let bytes = encode_bitstream(&[PeRecord { row: 1, col: BROADCAST_COL, words: vec![ConfigWord::NOP; 2] }]);
        let words = bytes_to_words(&bytes).unwrap();
        assert_eq!(words.len(), 5);
        assert_eq!(words_to_bytes(&words), bytes);
        assert!(bytes_to_words(&bytes[..5]).is_err());
    }
}
