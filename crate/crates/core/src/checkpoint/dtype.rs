use std::fmt;

use half::{bf16, f16};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dtype {
    F64,
    F32,
    F16,
    BF16,
    Bool,
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    I64,
    U64,
}

impl Dtype {
    pub const ALL: [Dtype; 13] = [
        Dtype::F64,
        Dtype::F32,
        Dtype::F16,
        Dtype::BF16,
        Dtype::Bool,
        Dtype::U8,
        Dtype::I8,
        Dtype::I16,
        Dtype::U16,
        Dtype::I32,
        Dtype::U32,
        Dtype::I64,
        Dtype::U64,
    ];

    pub fn width(self) -> usize {
        match self {
            Dtype::F64 | Dtype::I64 | Dtype::U64 => 8,
            Dtype::F32 | Dtype::I32 | Dtype::U32 => 4,
            Dtype::F16 | Dtype::BF16 | Dtype::I16 | Dtype::U16 => 2,
            Dtype::Bool | Dtype::U8 | Dtype::I8 => 1,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, Dtype::F64 | Dtype::F32 | Dtype::F16 | Dtype::BF16)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F64 => "F64",
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
            Dtype::Bool => "BOOL",
            Dtype::U8 => "U8",
            Dtype::I8 => "I8",
            Dtype::I16 => "I16",
            Dtype::U16 => "U16",
            Dtype::I32 => "I32",
            Dtype::U32 => "U32",
            Dtype::I64 => "I64",
            Dtype::U64 => "U64",
        }
    }

    pub fn parse(s: &str) -> Option<Dtype> {
        Dtype::ALL.into_iter().find(|d| d.as_str() == s)
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Decode little-endian float storage. Every float dtype widens exactly into f64,
/// so the only rounding is the final f64 -> `T` step.
pub fn decode<T: Scalar>(dtype: Dtype, bytes: &[u8]) -> Result<Vec<T>> {
    let out = match dtype {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| T::from_f64_rne(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_rne(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| T::from_f64_rne(f16::from_le_bytes([c[0], c[1]]).to_f64()))
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| T::from_f64_rne(bf16::from_le_bytes([c[0], c[1]]).to_f64()))
            .collect(),
        other => {
            return Err(Error::Consistency(format!(
                "cannot decode {other} tensor as floating point"
            )))
        }
    };
    Ok(out)
}

/// f64 -> f32 rounding to odd: inexact results land on the neighbour with an
/// odd mantissa. A second round-to-nearest-even step into f16/bf16 then equals
/// direct correct rounding from f64, which avoids double-rounding errors.
fn f64_to_f32_round_odd(v: f64) -> f32 {
    let r = v as f32;
    if !r.is_finite() || r as f64 == v || r.to_bits() & 1 == 1 {
        return r;
    }
    let bits = r.to_bits();
    let away_from_zero = (r as f64).abs() < v.abs();
    // Magnitude step on the bit pattern; the sign bit is untouched.
    let stepped = if away_from_zero { bits + 1 } else { bits - 1 };
    f32::from_bits(stepped)
}

/// Encode into float storage. Narrowing rounds to nearest-even and overflows to
/// infinity.
pub fn encode<T: Scalar>(dtype: Dtype, values: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(values.len() * dtype.width());
    match dtype {
        Dtype::F64 => {
            for v in values {
                out.extend_from_slice(&v.to_f64_exact().to_le_bytes());
            }
        }
        Dtype::F32 => {
            for v in values {
                out.extend_from_slice(&(v.to_f64_exact() as f32).to_le_bytes());
            }
        }
        Dtype::F16 => {
            for v in values {
                out.extend_from_slice(&f16::from_f32(f64_to_f32_round_odd(v.to_f64_exact())).to_le_bytes());
            }
        }
        Dtype::BF16 => {
            for v in values {
                out.extend_from_slice(&bf16::from_f32(f64_to_f32_round_odd(v.to_f64_exact())).to_le_bytes());
            }
        }
        other => {
            return Err(Error::Consistency(format!(
                "cannot encode floating point values as {other}"
            )))
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Round-to-nearest-even f32 -> bf16 on raw bit patterns.
    fn bf16_rne_oracle(x: f32) -> u16 {
        let bits = x.to_bits();
        if x.is_nan() {
            return ((bits >> 16) as u16) | 0x0040;
        }
        let lsb = (bits >> 16) & 1;
        let rounded = bits.wrapping_add(0x7FFF + lsb);
        (rounded >> 16) as u16
    }

    #[test]
    fn f16_widening_is_exact() {
        let one = f16::from_f32(1.0).to_le_bytes();
        assert_eq!(decode::<f32>(Dtype::F16, &one).unwrap(), vec![1.0f32]);
    }

    #[test]
    fn bf16_payload_widens_to_one() {
        let bytes = 0x3F80u16.to_le_bytes();
        assert_eq!(decode::<f32>(Dtype::BF16, &bytes).unwrap(), vec![1.0f32]);
    }

    #[test]
    fn bf16_narrowing_rounds_to_nearest_even() {
        let x = 1.000_000_1f32;
        let enc = encode::<f32>(Dtype::BF16, &[x]).unwrap();
        let bits = u16::from_le_bytes([enc[0], enc[1]]);
        assert_eq!(bits, bf16_rne_oracle(x));
        assert_eq!(bf16::from_bits(bits).to_f32(), 1.0);
    }

    #[test]
    fn bf16_narrowing_matches_bit_oracle_on_sweep() {
        // Exact ties, values just above/below ties, and a spread of magnitudes.
        let mut probes: Vec<u32> = vec![0x3F80_8000, 0x3F81_8000, 0x3F80_8001, 0x3F80_7FFF, 0x7F7F_FFFF];
        let mut state = 0x9E37_79B9u32;
        for _ in 0..20_000 {
            state ^= state << 13;
            state ^= state >> 17;
            state ^= state << 5;
            probes.push(state);
        }
        for bits in probes {
            let x = f32::from_bits(bits);
            if x.is_nan() {
                continue;
            }
            let enc = encode::<f32>(Dtype::BF16, &[x]).unwrap();
            assert_eq!(
                u16::from_le_bytes([enc[0], enc[1]]),
                bf16_rne_oracle(x),
                "bits {bits:#010x}"
            );
        }
    }

    #[test]
    fn f16_narrowing_ties_to_even() {
        // 1 + 2^-11 sits exactly between 1.0 and the next f16; even mantissa wins.
        let x = 1.0f32 + 2f32.powi(-11);
        let enc = encode::<f32>(Dtype::F16, &[x]).unwrap();
        assert_eq!(f16::from_le_bytes([enc[0], enc[1]]).to_f32(), 1.0);
        let y = 1.0f32 + 3.0 * 2f32.powi(-11);
        let enc = encode::<f32>(Dtype::F16, &[y]).unwrap();
        assert_eq!(f16::from_le_bytes([enc[0], enc[1]]).to_f32(), 1.0 + 2f32.powi(-9));
    }

    #[test]
    fn f64_narrowing_avoids_double_rounding() {
        // Just above the bf16 tie between 1.0 and 1 + 2^-7, by less than an f32 ulp:
        // f64 -> f32 (nearest) would land on the tie and then round down to even.
        let v = 1.0 + 2f64.powi(-8) + 2f64.powi(-40);
        let enc = encode::<f64>(Dtype::BF16, &[v]).unwrap();
        assert_eq!(bf16::from_le_bytes([enc[0], enc[1]]).to_f64(), 1.0 + 2f64.powi(-7));
        let v = 1.0 + 2f64.powi(-11) + 2f64.powi(-40);
        let enc = encode::<f64>(Dtype::F16, &[v]).unwrap();
        assert_eq!(f16::from_le_bytes([enc[0], enc[1]]).to_f64(), 1.0 + 2f64.powi(-10));
        let v = -(1.0 + 2f64.powi(-8) - 2f64.powi(-40));
        let enc = encode::<f64>(Dtype::BF16, &[v]).unwrap();
        assert_eq!(bf16::from_le_bytes([enc[0], enc[1]]).to_f64(), -1.0);
    }

    #[test]
    fn narrowing_overflows_to_infinity() {
        let enc = encode::<f32>(Dtype::F16, &[1.0e6]).unwrap();
        assert!(f16::from_le_bytes([enc[0], enc[1]]).is_infinite());
    }

    #[test]
    fn dtype_names_round_trip() {
        for d in Dtype::ALL {
            assert_eq!(Dtype::parse(d.as_str()), Some(d));
        }
        assert_eq!(Dtype::parse("F8_E4M3"), None);
    }
}
