//! Orthogonal low-pass filter tables and their quadrature-mirror high-pass
//! partners.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const HAAR: [f64; 2] = [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];

const SYM2: [f64; 4] = [
    0.48296291314469025,
    0.836516303737469,
    0.22414386804185735,
    -0.12940952255092145,
];

const SYM4: [f64; 8] = [
    0.0322231006040427,
    -0.012603967262037833,
    -0.09921954357684722,
    0.29785779560527736,
    0.8037387518059161,
    0.49761866763201545,
    -0.02963552764599851,
    -0.07576571478927333,
];

const COIF1: [f64; 6] = [
    -0.07273261951252645,
    0.3378976624574818,
    0.8525720202116004,
    0.3848648468648578,
    -0.07273261951252645,
    -0.015655728135791993,
];

const COIF2: [f64; 12] = [
    0.01638733646320364,
    -0.04146493678687178,
    -0.0673725547237256,
    0.3861100668227629,
    0.8127236354494135,
    0.4170051844232391,
    -0.07648859907828076,
    -0.05943441864643109,
    0.02368017194684777,
    0.005611434819368834,
    -0.0018232088709110323,
    -0.000720549445520347,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveletFamily {
    Haar,
    Sym2,
    Sym4,
    Coif1,
    Coif2,
}

impl WaveletFamily {
    pub const ALL: [WaveletFamily; 5] = [
        WaveletFamily::Haar,
        WaveletFamily::Sym2,
        WaveletFamily::Sym4,
        WaveletFamily::Coif1,
        WaveletFamily::Coif2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WaveletFamily::Haar => "haar",
            WaveletFamily::Sym2 => "sym2",
            WaveletFamily::Sym4 => "sym4",
            WaveletFamily::Coif1 => "coif1",
            WaveletFamily::Coif2 => "coif2",
        }
    }

    fn low_pass(self) -> &'static [f64] {
        match self {
            WaveletFamily::Haar => &HAAR,
            WaveletFamily::Sym2 => &SYM2,
            WaveletFamily::Sym4 => &SYM4,
            WaveletFamily::Coif1 => &COIF1,
            WaveletFamily::Coif2 => &COIF2,
        }
    }
}

impl fmt::Display for WaveletFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WaveletFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WaveletFamily::ALL
            .into_iter()
            .find(|f| f.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::UnknownFamily(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterPair {
    pub family: WaveletFamily,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl FilterPair {
    pub fn new(family: WaveletFamily) -> Self {
        let low = family.low_pass().to_vec();
        let len = low.len();
        let high = (0..len)
            .map(|k| {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                sign * low[len - 1 - k]
            })
            .collect();
        Self { family, low, high }
    }

    pub fn len(&self) -> usize {
        self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.low.is_empty()
    }
}

/// Looks up a filter bank by family name.
pub fn filter_bank(family: &str) -> Result<FilterPair> {
    Ok(FilterPair::new(family.parse()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn haar_definition() {
        let f = filter_bank("haar").unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(f.low, vec![r, r]);
        assert_eq!(f.high, vec![r, -r]);
    }

    #[test]
    fn normalization_identities_hold_for_every_family() {
        for fam in WaveletFamily::ALL {
            let f = FilterPair::new(fam);
            let s: f64 = f.low.iter().sum();
            let h: f64 = f.high.iter().sum();
            let e: f64 = f.low.iter().map(|v| v * v).sum();
            assert!((s - 2f64.sqrt()).abs() < 1e-10, "{fam}: sum {s}");
            assert!(h.abs() < 1e-10, "{fam}: high sum {h}");
            assert!((e - 1.0).abs() < 1e-10, "{fam}: energy {e}");
            // Orthogonality to even shifts.
            for shift in (2..f.len()).step_by(2) {
                let c: f64 = (0..f.len() - shift).map(|k| f.low[k] * f.low[k + shift]).sum();
                assert!(c.abs() < 1e-10, "{fam}: shift {shift} gives {c}");
            }
        }
    }

    #[test]
    fn sym2_matches_closed_form_daubechies_coefficients() {
        // (1+√3, 3+√3, 3−√3, 1−√3) / (4√2)
        let s3 = 3f64.sqrt();
        let denom = 4.0 * 2f64.sqrt();
        let fixture = [(1.0 + s3) / denom, (3.0 + s3) / denom, (3.0 - s3) / denom, (1.0 - s3) / denom];
        let f = filter_bank("sym2").unwrap();
        for (a, b) in f.low.iter().zip(fixture) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn unknown_family_lists_supported() {
        let err = filter_bank("db7").unwrap_err().to_string();
        assert!(err.contains("haar") && err.contains("coif2"), "{err}");
    }
}
