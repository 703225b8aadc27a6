//! Image containers on the solver grid and at native resolution.
//!
//! Intensities live in `[0, 1]` (L*/100). Chrominance is kept in native Lab
//! units; the solver works on `a/110`, `b/110` (see [`CHROMA_SCALE`]).

use crate::color::{lab_to_srgb, srgb_to_lab};
use crate::error::{GcrfError, Result};

/// Native Lab chroma is divided by this before entering the solver.
pub const CHROMA_SCALE: f64 = 110.0;

/// A single row-major channel of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GcrfError::InvalidInput(format!(
                "plane dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(GcrfError::DimensionMismatch(format!(
                "{}x{} plane needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Area-average when shrinking an axis, bilinear (corner aligned) when
    /// growing it, identity when the size is unchanged.
    pub fn resample(&self, target_w: usize, target_h: usize) -> Result<Plane> {
        if target_w == 0 || target_h == 0 {
            return Err(GcrfError::InvalidInput(format!(
                "resample target must be at least 1x1, got {target_w}x{target_h}"
            )));
        }
        if target_w == self.width && target_h == self.height {
            return Ok(self.clone());
        }
        // horizontal pass
        let mut horiz = Vec::with_capacity(target_w * self.height);
        for row in self.data.chunks(self.width) {
            horiz.extend(resample_line(row, target_w));
        }
        // vertical pass, one column at a time
        let mut out = vec![0.0; target_w * target_h];
        let mut column = vec![0.0; self.height];
        for col in 0..target_w {
            for (r, v) in column.iter_mut().enumerate() {
                *v = horiz[r * target_w + col];
            }
            for (r, v) in resample_line(&column, target_h).into_iter().enumerate() {
                out[r * target_w + col] = v;
            }
        }
        Plane::new(target_w, target_h, out)
    }
}

fn resample_line(src: &[f64], len: usize) -> Vec<f64> {
    let n = src.len();
    if len == n {
        return src.to_vec();
    }
    if len < n {
        // Box filter with fractional coverage. Accumulate offsets from the
        // first sample so a constant line is reproduced bit for bit.
        let scale = n as f64 / len as f64;
        (0..len)
            .map(|i| {
                let start = i as f64 * scale;
                let end = ((i + 1) as f64 * scale).min(n as f64);
                let first = start.floor() as usize;
                let last = (end.ceil() as usize).min(n);
                let base = src[first];
                let (mut acc, mut weight) = (0.0, 0.0);
                for (k, &v) in src.iter().enumerate().take(last).skip(first) {
                    let w = (end.min((k + 1) as f64) - start.max(k as f64)).max(0.0);
                    acc += w * (v - base);
                    weight += w;
                }
                base + acc / weight
            })
            .collect()
    } else if n == 1 {
        vec![src[0]; len]
    } else {
        let step = (n - 1) as f64 / (len - 1) as f64;
        (0..len)
            .map(|i| {
                let pos = i as f64 * step;
                let k = (pos.floor() as usize).min(n - 2);
                let t = pos - k as f64;
                src[k] + t * (src[k + 1] - src[k])
            })
            .collect()
    }
}

/// Luminance field `g`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    plane: Plane,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, intensity: Vec<f64>) -> Result<Self> {
        let plane = Plane::new(width, height, intensity)?;
        if let Some(v) = plane.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GcrfError::InvalidInput(format!(
                "gray intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self { plane })
    }

    pub fn from_plane(plane: Plane) -> Result<Self> {
        Self::new(plane.width, plane.height, plane.data)
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.plane.width
    }

    pub fn height(&self) -> usize {
        self.plane.height
    }

    pub fn pixel_count(&self) -> usize {
        self.plane.len()
    }

    pub fn intensity(&self) -> &[f64] {
        &self.plane.data
    }

    pub fn plane(&self) -> &Plane {
        &self.plane
    }

    pub fn resample(&self, target_w: usize, target_h: usize) -> Result<GrayImage> {
        let mut plane = self.plane.resample(target_w, target_h)?;
        // bilinear and box filters are convex combinations; clamp away ulp drift
        for v in &mut plane.data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { plane })
    }
}

/// Two-channel chrominance field `x` in native Lab units.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorFieldLab {
    pub width: usize,
    pub height: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl ColorFieldLab {
    pub fn new(width: usize, height: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let p = width * height;
        if width == 0 || height == 0 || a.len() != p || b.len() != p {
            return Err(GcrfError::DimensionMismatch(format!(
                "{width}x{height} color field needs {p} values per channel, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(GcrfError::NonFinite("color field"));
        }
        Ok(Self {
            width,
            height,
            a,
            b,
        })
    }

    /// Builds a field from solver-scale chroma (`native / CHROMA_SCALE`).
    pub fn from_scaled(width: usize, height: usize, a: &[f64], b: &[f64]) -> Result<Self> {
        Self::new(
            width,
            height,
            a.iter().map(|v| v * CHROMA_SCALE).collect(),
            b.iter().map(|v| v * CHROMA_SCALE).collect(),
        )
    }

    pub fn constant(width: usize, height: usize, a: f64, b: f64) -> Self {
        let p = width * height;
        Self {
            width,
            height,
            a: vec![a; p],
            b: vec![b; p],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.a.len()
    }

    pub fn scaled_a(&self) -> Vec<f64> {
        self.a.iter().map(|v| v / CHROMA_SCALE).collect()
    }

    pub fn scaled_b(&self) -> Vec<f64> {
        self.b.iter().map(|v| v / CHROMA_SCALE).collect()
    }

    /// Chroma mapped from the solver range `[-1, 1]` onto `[0, 1]`, the scale
    /// used by every metric.
    pub fn unit_channels(&self) -> (Plane, Plane) {
        let unit = |c: &[f64]| {
            Plane::new(
                self.width,
                self.height,
                c.iter().map(|v| 0.5 * (v / CHROMA_SCALE + 1.0)).collect(),
            )
            .expect("field dimensions are validated at construction")
        };
        (unit(&self.a), unit(&self.b))
    }

    pub fn resample(&self, target_w: usize, target_h: usize) -> Result<ColorFieldLab> {
        let a = Plane::new(self.width, self.height, self.a.clone())?.resample(target_w, target_h)?;
        let b = Plane::new(self.width, self.height, self.b.clone())?.resample(target_w, target_h)?;
        Ok(Self {
            width: target_w,
            height: target_h,
            a: a.data,
            b: b.data,
        })
    }
}

/// Packed 8-bit sRGB pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(GcrfError::DimensionMismatch(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Splits into luminance (`L*/100`) and native Lab chroma.
    pub fn to_lab(&self) -> (GrayImage, ColorFieldLab) {
        let mut l = Vec::with_capacity(self.pixels.len());
        let mut a = Vec::with_capacity(self.pixels.len());
        let mut b = Vec::with_capacity(self.pixels.len());
        for &px in &self.pixels {
            let lab = srgb_to_lab(px);
            l.push((lab[0] / 100.0).clamp(0.0, 1.0));
            a.push(lab[1]);
            b.push(lab[2]);
        }
        (
            GrayImage::new(self.width, self.height, l).expect("clamped to [0, 1]"),
            ColorFieldLab {
                width: self.width,
                height: self.height,
                a,
                b,
            },
        )
    }

    /// Recombines luminance and chroma of equal size; returns the image and
    /// the number of pixels that needed gamut clamping.
    pub fn from_lab(gray: &GrayImage, color: &ColorFieldLab) -> Result<(Self, usize)> {
        if gray.width() != color.width || gray.height() != color.height {
            return Err(GcrfError::DimensionMismatch(format!(
                "gray {}x{} vs color {}x{}",
                gray.width(),
                gray.height(),
                color.width,
                color.height
            )));
        }
        let mut clamped = 0;
        let pixels = gray
            .intensity()
            .iter()
            .zip(color.a.iter().zip(&color.b))
            .map(|(&l, (&a, &b))| {
                let conv = lab_to_srgb([l * 100.0, a, b]);
                clamped += usize::from(conv.clamped);
                conv.rgb
            })
            .collect();
        Ok((Self::new(gray.width(), gray.height(), pixels)?, clamped))
    }

    /// Channels on `[0, 1]`, for PSNR in RGB.
    pub fn unit_channels(&self) -> [Plane; 3] {
        std::array::from_fn(|c| Plane {
            width: self.width,
            height: self.height,
            data: self.pixels.iter().map(|p| p[c] as f64 / 255.0).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_downsample_is_exact() {
        let p = Plane::filled(64, 64, 0.3718);
        let d = p.resample(32, 32).unwrap();
        assert!(d.data.iter().all(|&v| v == 0.3718));
        let odd = p.resample(17, 5).unwrap();
        assert!(odd.data.iter().all(|&v| v == 0.3718));
    }

    #[test]
    fn two_by_two_area_mean() {
        let p = Plane::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let d = p.resample(1, 1).unwrap();
        assert_eq!(d.data, vec![0.5]);
    }

    #[test]
    fn upsample_preserves_corners() {
        let data: Vec<f64> = (0..32 * 32).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let p = Plane::new(32, 32, data).unwrap();
        let u = p.resample(64, 64).unwrap();
        assert_eq!(u.get(0, 0), p.get(0, 0));
        assert_eq!(u.get(0, 63), p.get(0, 31));
        assert_eq!(u.get(63, 0), p.get(31, 0));
        assert_eq!(u.get(63, 63), p.get(31, 31));
        // interior sample: direct bilinear evaluation at source position (31/63*row, ...)
        let (r, c) = (10usize, 45usize);
        let (sr, sc) = (r as f64 * 31.0 / 63.0, c as f64 * 31.0 / 63.0);
        let (r0, c0) = (sr.floor() as usize, sc.floor() as usize);
        let (tr, tc) = (sr - r0 as f64, sc - c0 as f64);
        let expect = (1.0 - tr) * ((1.0 - tc) * p.get(r0, c0) + tc * p.get(r0, c0 + 1))
            + tr * ((1.0 - tc) * p.get(r0 + 1, c0) + tc * p.get(r0 + 1, c0 + 1));
        assert!((u.get(r, c) - expect).abs() < 1e-12);
    }

    #[test]
    fn same_size_is_identity() {
        let p = Plane::new(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(p.resample(3, 2).unwrap(), p);
    }

    #[test]
    fn zero_target_rejected() {
        let p = Plane::filled(4, 4, 0.0);
        assert!(p.resample(0, 4).is_err());
    }

    #[test]
    fn gray_range_enforced() {
        assert!(GrayImage::new(1, 2, vec![0.5, 1.2]).is_err());
        assert!(GrayImage::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn color_field_rejects_nan() {
        assert!(ColorFieldLab::new(1, 1, vec![f64::NAN], vec![0.0]).is_err());
    }
}
