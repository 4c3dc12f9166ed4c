//! Bit messages, the hex codec used on the command line, and the 0.5
//! decision rule.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Fixed-length binary watermark.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitMessage {
    bits: Vec<u8>,
}

impl BitMessage {
    pub fn new(bits: Vec<u8>) -> Self {
        assert!(bits.iter().all(|&b| b <= 1), "bits must be 0 or 1");
        Self { bits }
    }

    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![0; len] }
    }

    pub fn random(rng: &mut Rng, len: usize) -> Self {
        Self {
            bits: (0..len).map(|_| rng.gen_range(0..=1u8)).collect(),
        }
    }

    /// Parses a big-endian hex string of exactly `len / 4` nibbles.
    pub fn from_hex(hex: &str, len: usize) -> Result<Self> {
        if len % 4 != 0 {
            return Err(Error::Message(format!("message length {len} is not a multiple of 4")));
        }
        if hex.len() != len / 4 {
            return Err(Error::Message(format!(
                "expected {} hex digits for {len} bits, got {}",
                len / 4,
                hex.len()
            )));
        }
        let mut bits = Vec::with_capacity(len);
        for ch in hex.chars() {
            let nib = ch
                .to_digit(16)
                .ok_or_else(|| Error::Message(format!("invalid hex digit `{ch}`")))?;
            bits.extend((0..4).rev().map(|s| ((nib >> s) & 1) as u8));
        }
        Ok(Self { bits })
    }

    /// Upper-case big-endian hex. Requires `len % 4 == 0`.
    pub fn to_hex(&self) -> String {
        assert!(self.bits.len() % 4 == 0, "length not a multiple of 4");
        self.bits
            .chunks(4)
            .map(|n| {
                let v = n.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32);
                char::from_digit(v, 16).unwrap().to_ascii_uppercase()
            })
            .collect()
    }

    /// Hard decision: bit is 1 iff probability is strictly above 0.5.
    pub fn from_probabilities(probs: &[f64]) -> Self {
        Self {
            bits: probs.iter().map(|&p| threshold(p)).collect(),
        }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// `±1` encoding used by the message projector.
    pub fn signs(&self) -> impl Iterator<Item = f64> + '_ {
        self.bits.iter().map(|&b| if b == 1 { 1.0 } else { -1.0 })
    }
}

#[inline]
pub fn threshold(p: f64) -> u8 {
    u8::from(p > 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use proptest::prelude::*;

    #[test]
    fn f0_decodes_big_endian() {
        let m = BitMessage::from_hex("F0", 8).unwrap();
        assert_eq!(m.bits(), &[1, 1, 1, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn zero_string_is_all_zero() {
        let m = BitMessage::from_hex("00000000", 32).unwrap();
        assert!(m.bits().iter().all(|&b| b == 0));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(BitMessage::from_hex("F", 8).is_err());
        assert!(BitMessage::from_hex("F00", 8).is_err());
        assert!(BitMessage::from_hex("G0", 8).is_err());
    }

    #[test]
    fn tie_rule() {
        assert_eq!(threshold(0.51), 1);
        assert_eq!(threshold(0.49), 0);
        assert_eq!(threshold(0.5), 0);
    }

    #[test]
    fn random_message_round_trips() {
        let mut rng = seeded_rng(1);
        let m = BitMessage::random(&mut rng, 128);
        assert_eq!(BitMessage::from_hex(&m.to_hex(), 128).unwrap(), m);
    }

    proptest! {
        #[test]
        fn hex_round_trip(s in "[0-9A-F]{8}") {
            let m = BitMessage::from_hex(&s, 32).unwrap();
            prop_assert_eq!(m.to_hex(), s);
        }

        #[test]
        fn threshold_survives_monotone_recalibration(p in 0.0f64..1.0, k in 0.1f64..10.0) {
            prop_assume!(p > 0.0 && (p - 0.5).abs() > 1e-9);
            // logit scaling is strictly monotone and fixes 0.5
            let q = 1.0 / (1.0 + ((1.0 - p) / p).powf(k));
            prop_assert_eq!(threshold(p), threshold(q));
        }
    }
}
