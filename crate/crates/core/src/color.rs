//! sRGB <-> CIE Lab (D65, 2 degree observer).
//!
//! The reference white is taken as the row sums of the sRGB->XYZ matrix so
//! neutral sRGB triples land exactly on `a = b = 0`.

use std::sync::LazyLock;

use nalgebra::Matrix3;
use rayon::prelude::*;

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;
const GAMUT_SLACK: f64 = 1e-9;

static WHITE: LazyLock<[f64; 3]> = LazyLock::new(|| SRGB_TO_XYZ.map(|row| row.iter().sum()));

static XYZ_TO_SRGB: LazyLock<Matrix3<f64>> = LazyLock::new(|| {
    Matrix3::from_fn(|r, c| SRGB_TO_XYZ[r][c])
        .try_inverse()
        .expect("sRGB primaries matrix is invertible")
});

/// Result of an Lab -> sRGB conversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SrgbConversion {
    pub rgb: [u8; 3],
    /// Set when any linear channel fell outside `[0, 1]` and was clamped.
    pub clamped: bool,
}

fn decode_gamma(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn encode_gamma(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    let t3 = t * t * t;
    if t3 > EPSILON {
        t3
    } else {
        (116.0 * t - 16.0) / KAPPA
    }
}

/// Converts an 8-bit sRGB triple to `[L, a, b]`.
pub fn srgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let lin = rgb.map(decode_gamma);
    let white = *WHITE;
    let mut f = [0.0; 3];
    for (i, row) in SRGB_TO_XYZ.iter().enumerate() {
        let xyz = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
        f[i] = lab_f(xyz / white[i]);
    }
    [
        116.0 * f[1] - 16.0,
        500.0 * (f[0] - f[1]),
        200.0 * (f[1] - f[2]),
    ]
}

/// Converts `[L, a, b]` back to 8-bit sRGB, clamping out-of-gamut colors in
/// linear light.
pub fn lab_to_srgb(lab: [f64; 3]) -> SrgbConversion {
    let [l, a, b] = lab;
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let white = *WHITE;
    let xyz = nalgebra::Vector3::new(
        lab_f_inv(fx) * white[0],
        lab_f_inv(fy) * white[1],
        lab_f_inv(fz) * white[2],
    );
    let lin = *XYZ_TO_SRGB * xyz;
    let mut clamped = false;
    let mut rgb = [0u8; 3];
    for (out, &c) in rgb.iter_mut().zip(lin.iter()) {
        // rounding noise around the gamut boundary is not a clamp
        if c.is_nan() || c < -GAMUT_SLACK || c > 1.0 + GAMUT_SLACK {
            clamped = true;
        }
        let c = if c.is_nan() { 0.0 } else { c.clamp(0.0, 1.0) };
        *out = (encode_gamma(c) * 255.0).round() as u8;
    }
    SrgbConversion { rgb, clamped }
}

/// Largest per-channel difference after `srgb -> lab -> srgb`.
pub fn round_trip_error(rgb: [u8; 3]) -> u8 {
    let back = lab_to_srgb(srgb_to_lab(rgb)).rgb;
    (0..3).map(|i| rgb[i].abs_diff(back[i])).max().unwrap_or(0)
}

/// [`round_trip_error`] maximized over all `256³` sRGB triples.
pub fn cube_round_trip_error() -> u8 {
    (0..=255u8)
        .into_par_iter()
        .map(|r| {
            let mut worst = 0;
            for g in 0..=255u8 {
                for b in 0..=255u8 {
                    worst = worst.max(round_trip_error([r, g, b]));
                }
            }
            worst
        })
        .max()
        .unwrap_or(0)
}

/// Triples of the `16³` lattice `{0, 17, ..., 255}³` that do not round-trip
/// exactly.
pub fn lattice_round_trip_failures() -> Vec<[u8; 3]> {
    let levels: Vec<u8> = (0..16).map(|i| i * 17).collect();
    let mut failures = Vec::new();
    for &r in &levels {
        for &g in &levels {
            for &b in &levels {
                if round_trip_error([r, g, b]) != 0 {
                    failures.push([r, g, b]);
                }
            }
        }
    }
    failures
}
