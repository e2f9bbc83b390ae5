//! Sub-byte packing of two's-complement integers.
//!
//! Value `i` occupies bit positions `[i*bits, (i+1)*bits)` counting from the
//! least significant bit of byte 0; trailing pad bits are zero.

use crate::error::{contract_err, Error, Result};

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=8).contains(&bits) {
        return contract_err(format!("packing width must be in 2..=8, got {bits}"));
    }
    Ok(())
}

/// Representable range of a `bits`-wide two's-complement integer.
pub fn twos_complement_range(bits: u32) -> (i64, i64) {
    let half = 1i64 << (bits - 1);
    (-half, half - 1)
}

pub fn packed_len(count: usize, bits: u32) -> usize {
    (count * bits as usize).div_ceil(8)
}

pub fn pack_bits(values: &[i32], bits: u32) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let (lo, hi) = twos_complement_range(bits);
    let mask = (1u32 << bits) - 1;
    let mut out = Vec::with_capacity(packed_len(values.len(), bits));
    let mut acc = 0u32;
    let mut filled = 0u32;
    for (index, &v) in values.iter().enumerate() {
        if (v as i64) < lo || (v as i64) > hi {
            return Err(Error::Pack {
                index,
                value: v as i64,
                bits,
            });
        }
        acc |= (v as u32 & mask) << filled;
        filled += bits;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    Ok(out)
}

pub fn unpack_bits(bytes: &[u8], bits: u32, count: usize) -> Result<Vec<i32>> {
    check_bits(bits)?;
    let need = packed_len(count, bits);
    if bytes.len() < need {
        return contract_err(format!(
            "{count} values at {bits} bits need {need} bytes, got {}",
            bytes.len()
        ));
    }
    let mask = (1u32 << bits) - 1;
    let sign = 1u32 << (bits - 1);
    let mut out = Vec::with_capacity(count);
    let mut acc = 0u32;
    let mut filled = 0u32;
    let mut it = bytes.iter();
    for _ in 0..count {
        while filled < bits {
            acc |= (*it.next().expect("length checked") as u32) << filled;
            filled += 8;
        }
        let raw = acc & mask;
        acc >>= bits;
        filled -= bits;
        out.push(if raw & sign != 0 {
            raw as i32 - (1i32 << bits)
        } else {
            raw as i32
        });
    }
    Ok(out)
}
