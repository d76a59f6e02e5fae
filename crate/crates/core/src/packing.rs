//! Dense N-bit code packing.
//!
//! Codes are written row by row, least-significant bit first, and every row
//! is zero-padded to a whole byte so rows can be addressed independently.

use crate::error::{Error, Result};

/// Bytes occupied by one packed row.
pub fn packed_row_bytes(cols: usize, bits: u8) -> usize {
    (cols * bits as usize).div_ceil(8)
}

pub fn packed_len(rows: usize, cols: usize, bits: u8) -> usize {
    rows * packed_row_bytes(cols, bits)
}

fn check_bits(bits: u8) -> Result<()> {
    if (1..=8).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!("bits must be in [1, 8], got {bits}")))
    }
}

/// Packs row-major `codes` of a `rows×cols` matrix at `bits` per code.
pub fn pack(codes: &[u8], rows: usize, cols: usize, bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    if codes.len() != rows * cols {
        return Err(Error::Format(format!(
            "expected {} codes, found {}",
            rows * cols,
            codes.len()
        )));
    }
    let limit = 1u16 << bits;
    let row_bytes = packed_row_bytes(cols, bits);
    let mut out = vec![0u8; rows * row_bytes];
    for (r, row) in codes.chunks_exact(cols.max(1)).enumerate().take(rows) {
        let dst = &mut out[r * row_bytes..(r + 1) * row_bytes];
        let mut bit = 0usize;
        for &code in row {
            if code as u16 >= limit {
                return Err(Error::Format(format!("code {code} does not fit in {bits} bits")));
            }
            let wide = (code as u16) << (bit % 8);
            dst[bit / 8] |= wide as u8;
            if bit % 8 + bits as usize > 8 {
                dst[bit / 8 + 1] |= (wide >> 8) as u8;
            }
            bit += bits as usize;
        }
    }
    Ok(out)
}

/// Inverse of [`pack`]. Rejects wrong lengths and nonzero padding.
pub fn unpack(bytes: &[u8], rows: usize, cols: usize, bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let row_bytes = packed_row_bytes(cols, bits);
    if bytes.len() != rows * row_bytes {
        return Err(Error::Format(format!(
            "packed codes: expected {} bytes, found {}",
            rows * row_bytes,
            bytes.len()
        )));
    }
    let mask = ((1u16 << bits) - 1) as u8;
    let used = cols * bits as usize;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let src = &bytes[r * row_bytes..(r + 1) * row_bytes];
        for c in 0..cols {
            let bit = c * bits as usize;
            let lo = src[bit / 8] as u16;
            let hi = if bit % 8 + bits as usize > 8 { src[bit / 8 + 1] as u16 } else { 0 };
            out.push((((hi << 8) | lo) >> (bit % 8)) as u8 & mask);
        }
        if used % 8 != 0 && src[row_bytes - 1] >> (used % 8) != 0 {
            return Err(Error::Format(format!("nonzero padding in packed row {r}")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lsb_first_layout() {
        // 4-bit codes 1, 2, 3 → 0x21, 0x03.
        assert_eq!(pack(&[1, 2, 3], 1, 3, 4).unwrap(), vec![0x21, 0x03]);
        // 3-bit codes straddle bytes: 7, 0, 5 → bits 111 000 101.
        assert_eq!(pack(&[7, 0, 5], 1, 3, 3).unwrap(), vec![0b0100_0111, 0b1]);
        assert_eq!(pack(&[1; 8], 1, 8, 1).unwrap(), vec![0xff]);
    }

    #[test]
    fn rows_are_padded_independently() {
        let packed = pack(&[1, 1, 1, 1, 1, 1], 2, 3, 1).unwrap();
        assert_eq!(packed, vec![0b111, 0b111]);
        assert_eq!(packed_len(2, 3, 1), 2);
    }

    #[test]
    fn rejects_corruption() {
        assert!(pack(&[16], 1, 1, 4).is_err());
        assert!(unpack(&[0x21], 1, 3, 4).is_err());
        assert!(unpack(&[0x21, 0x13], 1, 3, 4).is_err());
        assert!(pack(&[0], 1, 1, 9).is_err());
    }

    #[test]
    fn empty_matrix() {
        assert!(pack(&[], 0, 5, 4).unwrap().is_empty());
        assert!(unpack(&[], 0, 5, 4).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn round_trip(bits in 1u8..=8, rows in 1usize..6, cols in 1usize..40, seed in any::<u64>()) {
            let mask = ((1u16 << bits) - 1) as u64;
            let mut state = seed;
            let codes: Vec<u8> = (0..rows * cols)
                .map(|_| {
                    state = crate::linalg::random::splitmix64(state);
                    (state & mask) as u8
                })
                .collect();
            let packed = pack(&codes, rows, cols, bits).unwrap();
            prop_assert_eq!(packed.len(), packed_len(rows, cols, bits));
            prop_assert_eq!(unpack(&packed, rows, cols, bits).unwrap(), codes);
        }
    }
}
