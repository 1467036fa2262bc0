use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::boxes::normalize_heading;

pub const NUM_HEADING_BINS: usize = 12;
pub const HEADING_BIN_WIDTH: f64 = PI / NUM_HEADING_BINS as f64;

/// Heading as a bin over `[0, π)` plus an offset from the bin centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadingCode {
    pub bin: usize,
    pub residual: f64,
}

pub fn bin_center(bin: usize) -> f64 {
    (bin as f64 + 0.5) * HEADING_BIN_WIDTH
}

pub fn heading_encode(theta: f64) -> HeadingCode {
    let t = normalize_heading(theta);
    let bin = ((t / HEADING_BIN_WIDTH).floor() as usize).min(NUM_HEADING_BINS - 1);
    HeadingCode { bin, residual: t - bin_center(bin) }
}

pub fn heading_decode(code: &HeadingCode) -> f64 {
    bin_center(code.bin) + code.residual
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn boundaries() {
        let c = heading_encode(0.0);
        assert_eq!(c.bin, 0);
        assert!((c.residual + PI / 24.0).abs() < 1e-15);
        let c = heading_encode(PI / 24.0);
        assert_eq!(c.bin, 0);
        assert_eq!(c.residual, 0.0);
        let c = heading_encode(PI - 1e-12);
        assert_eq!(c.bin, 11);
    }

    #[test]
    fn wraps_before_encoding() {
        assert_eq!(heading_encode(PI).bin, 0);
        assert_eq!(heading_encode(-0.01).bin, 11);
    }

    proptest! {
        #[test]
        fn roundtrip(theta in 0.0..PI) {
            let c = heading_encode(theta);
            prop_assert!(c.bin < NUM_HEADING_BINS);
            prop_assert!(c.residual >= -HEADING_BIN_WIDTH / 2.0 - 1e-15);
            prop_assert!(c.residual < HEADING_BIN_WIDTH / 2.0 + 1e-15);
            prop_assert!((heading_decode(&c) - theta).abs() < 1e-12);
        }
    }
}
