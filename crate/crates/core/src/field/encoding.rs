//! Fourier-feature positional encoding.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingConfig {
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            pos_freqs: 10,
            dir_freqs: 4,
            include_input: true,
        }
    }
}

/// Length of the encoding of a `k`-vector.
pub fn encoded_len(k: usize, freqs: usize, include_input: bool) -> usize {
    k * (2 * freqs + include_input as usize)
}

/// `[v, sin(v), cos(v), sin(2v), cos(2v), ..., sin(2^(L-1) v), cos(2^(L-1) v)]`
/// with the leading `v` only when `include_input` is set.
pub fn positional_encode(v: &[f64], freqs: usize, include_input: bool) -> Vec<f64> {
    let mut out = vec![0.0; encoded_len(v.len(), freqs, include_input)];
    encode_into(v, freqs, include_input, &mut out);
    out
}

/// Writes the encoding of `v` into `out`, which must have [`encoded_len`] entries.
///
/// Higher octaves come from the double-angle identities, which keeps the
/// error below `2^L` ulps while evaluating one `sin_cos` per component.
pub(crate) fn encode_into(v: &[f64], freqs: usize, include_input: bool, out: &mut [f64]) {
    let k = v.len();
    debug_assert_eq!(out.len(), encoded_len(k, freqs, include_input));
    let mut o = 0;
    if include_input {
        out[..k].copy_from_slice(v);
        o = k;
    }
    if freqs == 0 {
        return;
    }
    let mut s = [0.0f64; 3];
    let mut c = [0.0f64; 3];
    let mut sv = Vec::new();
    let mut cv = Vec::new();
    let (s, c): (&mut [f64], &mut [f64]) = if k <= 3 {
        (&mut s[..k], &mut c[..k])
    } else {
        sv.resize(k, 0.0);
        cv.resize(k, 0.0);
        (&mut sv, &mut cv)
    };
    for j in 0..k {
        let (sj, cj) = v[j].sin_cos();
        s[j] = sj;
        c[j] = cj;
    }
    for l in 0..freqs {
        if l > 0 {
            for j in 0..k {
                let (sj, cj) = (s[j], c[j]);
                s[j] = 2.0 * sj * cj;
                c[j] = (cj - sj) * (cj + sj);
            }
        }
        out[o..o + k].copy_from_slice(s);
        out[o + k..o + 2 * k].copy_from_slice(c);
        o += 2 * k;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn zero_input() {
        let e = positional_encode(&[0.0; 3], 4, false);
        assert_eq!(e.len(), 24);
        for l in 0..4 {
            assert_eq!(&e[6 * l..6 * l + 3], &[0.0; 3]);
            assert_eq!(&e[6 * l + 3..6 * l + 6], &[1.0; 3]);
        }
    }

    #[test]
    fn quarter_turn() {
        let e = positional_encode(&[FRAC_PI_2], 1, false);
        assert!((e[0] - 1.0).abs() < 1e-12);
        assert!(e[1].abs() < 1e-12);
    }

    #[test]
    fn identity_when_no_frequencies() {
        let v = [0.3, -1.2, 4.0];
        assert_eq!(positional_encode(&v, 0, true), v.to_vec());
    }

    #[test]
    fn recurrence_matches_direct_evaluation() {
        let v = [0.731, -2.4, 1.9, 0.05];
        let e = positional_encode(&v, 10, true);
        assert_eq!(e.len(), 4 * 21);
        for l in 0..10 {
            let f = (1u64 << l) as f64;
            for j in 0..4 {
                let base = 4 + 8 * l;
                assert!((e[base + j] - (f * v[j]).sin()).abs() < 1e-12);
                assert!((e[base + 4 + j] - (f * v[j]).cos()).abs() < 1e-12);
            }
        }
    }
}
