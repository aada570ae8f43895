//! Dense channel-last feature maps, score maps, and the image-processing
//! primitives the pipeline and post-processing are built from.
//!
//! Every operation accumulates in `f64` and rounds once to `f32`, so results
//! are independent of how the work is split and are bit-reproducible.

use crate::error::{Error, Result};

/// An `H x W x C` map of `f32`, row-major with channels innermost:
/// element `(h, w, c)` lives at `(h * W + w) * C + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "feature tensor dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::Shape("feature tensor size overflows".into()))?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} tensor needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "feature tensor contains non-finite values".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for h in 0..height {
            for w in 0..width {
                for c in 0..channels {
                    data.push(f(h, w, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of spatial locations, `H * W`.
    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> f32 {
        self.data[(h * self.width + w) * self.channels + c]
    }

    /// The channel vector at `(h, w)`.
    pub fn at(&self, h: usize, w: usize) -> &[f32] {
        let start = (h * self.width + w) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// A single-channel `H x W` field of scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "score map dims must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} score map needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "score map contains non-finite values".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, h: usize, w: usize) -> f32 {
        self.data[h * self.width + w]
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Views the map as a one-channel feature tensor.
    pub fn to_tensor(&self) -> FeatureTensor {
        FeatureTensor {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.clone(),
        }
    }

    fn from_tensor(t: FeatureTensor) -> Self {
        debug_assert_eq!(t.channels, 1);
        Self {
            height: t.height,
            width: t.width,
            data: t.data,
        }
    }
}

/// Mean over the `patch_size x patch_size` window centred on each location.
/// Windows are clipped to the map, so border entries average fewer neighbours.
pub fn aggregate_neighborhood(map: &FeatureTensor, patch_size: usize) -> Result<FeatureTensor> {
    if patch_size == 0 || patch_size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "patch size must be odd and positive, got {patch_size}"
        )));
    }
    if patch_size == 1 {
        return Ok(map.clone());
    }
    let (h, w, c) = (map.height, map.width, map.channels);
    let half = patch_size / 2;

    // Horizontal window sums. f32 inputs summed in f64 are exact for any
    // practical dynamic range, so the separable split matches direct
    // enumeration.
    let mut rows = vec![0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(half);
            let hi = (x + half).min(w - 1);
            let out = &mut rows[(y * w + x) * c..(y * w + x + 1) * c];
            for xx in lo..=hi {
                for (acc, v) in out.iter_mut().zip(map.at(y, xx)) {
                    *acc += f64::from(*v);
                }
            }
        }
    }

    let mut data = vec![0f32; h * w * c];
    let mut acc = vec![0f64; c];
    for y in 0..h {
        let lo = y.saturating_sub(half);
        let hi = (y + half).min(h - 1);
        for x in 0..w {
            let count = ((hi - lo + 1) * ((x + half).min(w - 1) - x.saturating_sub(half) + 1)) as f64;
            acc.iter_mut().for_each(|a| *a = 0.0);
            for yy in lo..=hi {
                let src = &rows[(yy * w + x) * c..(yy * w + x + 1) * c];
                for (a, v) in acc.iter_mut().zip(src) {
                    *a += v;
                }
            }
            let out = &mut data[(y * w + x) * c..(y * w + x + 1) * c];
            for (o, a) in out.iter_mut().zip(&acc) {
                *o = (a / count) as f32;
            }
        }
    }
    Ok(FeatureTensor {
        height: h,
        width: w,
        channels: c,
        data,
    })
}

/// Source sample position and interpolation weight for one output index,
/// pixel-centre convention (align-corners off), clamped at the edges.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if lo == input - 1 { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Bilinear resize with the align-corners=false convention.
pub fn resize_bilinear(map: &FeatureTensor, out_h: usize, out_w: usize) -> Result<FeatureTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    if out_h == map.height && out_w == map.width {
        return Ok(map.clone());
    }
    let c = map.channels;
    let ys = taps(map.height, out_h);
    let xs = taps(map.width, out_w);
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for ty in &ys {
        for tx in &xs {
            let v00 = map.at(ty.lo, tx.lo);
            let v01 = map.at(ty.lo, tx.hi);
            let v10 = map.at(ty.hi, tx.lo);
            let v11 = map.at(ty.hi, tx.hi);
            for ch in 0..c {
                let top = (1.0 - tx.frac) * f64::from(v00[ch]) + tx.frac * f64::from(v01[ch]);
                let bottom = (1.0 - tx.frac) * f64::from(v10[ch]) + tx.frac * f64::from(v11[ch]);
                data.push(((1.0 - ty.frac) * top + ty.frac * bottom) as f32);
            }
        }
    }
    Ok(FeatureTensor {
        height: out_h,
        width: out_w,
        channels: c,
        data,
    })
}

/// Stacks maps along the channel axis, in list order.
pub fn concat_channels(maps: &[FeatureTensor]) -> Result<FeatureTensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of an empty list".into()))?;
    let (h, w) = (first.height, first.width);
    if let Some(bad) = maps.iter().find(|m| m.height != h || m.width != w) {
        return Err(Error::Shape(format!(
            "cannot concat {}x{} with {h}x{w}",
            bad.height, bad.width
        )));
    }
    if maps.len() == 1 {
        return Ok(first.clone());
    }
    let channels: usize = maps.iter().map(|m| m.channels).sum();
    let mut data = Vec::with_capacity(h * w * channels);
    for y in 0..h {
        for x in 0..w {
            for m in maps {
                data.extend_from_slice(m.at(y, x));
            }
        }
    }
    Ok(FeatureTensor {
        height: h,
        width: w,
        channels,
        data,
    })
}

/// Normalised 1-D Gaussian kernel of radius `ceil(4 * sigma)`, centre at
/// index `radius`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let radius = (4.0 * sigma).ceil() as i64;
    let denom = 2.0 * sigma * sigma;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / denom).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`),
/// periodic so offsets larger than the axis still resolve.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

/// Separable Gaussian smoothing: rows first, then columns, reflect borders.
pub fn gaussian_filter(map: &ScoreMap, sigma: f64) -> Result<ScoreMap> {
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = (map.height, map.width);

    let mut rows = vec![0f32; h * w];
    for y in 0..h {
        let src = &map.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0f64;
            for (k, wk) in kernel.iter().enumerate() {
                let xx = reflect_index(x as isize + k as isize - radius, w);
                acc += wk * f64::from(src[xx]);
            }
            rows[y * w + x] = acc as f32;
        }
    }

    let mut data = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f64;
            for (k, wk) in kernel.iter().enumerate() {
                let yy = reflect_index(y as isize + k as isize - radius, h);
                acc += wk * f64::from(rows[yy * w + x]);
            }
            data[y * w + x] = acc as f32;
        }
    }
    Ok(ScoreMap {
        height: h,
        width: w,
        data,
    })
}

/// Bilinear resize of a single-channel map.
pub fn resize_scores(map: &ScoreMap, out_h: usize, out_w: usize) -> Result<ScoreMap> {
    resize_bilinear(&map.to_tensor(), out_h, out_w).map(ScoreMap::from_tensor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> FeatureTensor {
        FeatureTensor::from_fn(h, w, c, |y, x, ch| (y * w * c + x * c + ch) as f32 + 1.0).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_length_and_nan() {
        assert!(matches!(
            FeatureTensor::new(2, 2, 1, vec![0.0; 3]),
            Err(Error::Shape(_))
        ));
        assert!(FeatureTensor::new(1, 1, 1, vec![f32::NAN]).is_err());
        assert!(FeatureTensor::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn aggregate_constant_and_identity() {
        let c = FeatureTensor::filled(5, 4, 3, 2.5).unwrap();
        assert_eq!(aggregate_neighborhood(&c, 3).unwrap(), c);
        let r = ramp(4, 5, 2);
        assert_eq!(aggregate_neighborhood(&r, 1).unwrap(), r);
    }

    #[test]
    fn aggregate_three_by_three_window() {
        let m = ramp(3, 3, 1);
        let out = aggregate_neighborhood(&m, 3).unwrap();
        assert_eq!(out.get(1, 1, 0), 5.0);
        assert_eq!(out.get(0, 0, 0), 3.0);
        // bottom-right corner: mean{5, 6, 8, 9}
        assert_eq!(out.get(2, 2, 0), 7.0);
    }

    #[test]
    fn aggregate_rejects_even_or_zero_patch() {
        let m = ramp(3, 3, 1);
        for p in [0, 2, 4] {
            assert!(matches!(
                aggregate_neighborhood(&m, p),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let r = ramp(4, 4, 2);
        assert_eq!(resize_bilinear(&r, 4, 4).unwrap(), r);
        let c = FeatureTensor::filled(3, 5, 2, -1.25).unwrap();
        let out = resize_bilinear(&c, 7, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn resize_upsample_row() {
        let m = FeatureTensor::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let out = resize_bilinear(&m, 1, 4).unwrap();
        assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn resize_rejects_zero_dim() {
        let m = ramp(2, 2, 1);
        assert!(resize_bilinear(&m, 0, 3).is_err());
        assert!(resize_bilinear(&m, 3, 0).is_err());
    }

    #[test]
    fn concat_orders_channel_blocks() {
        let a = FeatureTensor::filled(2, 2, 1, 1.0).unwrap();
        let b = FeatureTensor::filled(2, 2, 1, 2.0).unwrap();
        let out = concat_channels(&[a.clone(), b]).unwrap();
        assert_eq!(out.channels(), 2);
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(out.at(y, x), &[1.0, 2.0]);
            }
        }
        assert_eq!(concat_channels(std::slice::from_ref(&a)).unwrap(), a);
    }

    #[test]
    fn concat_feature_width_of_two_levels() {
        let a = FeatureTensor::filled(2, 2, 512, 0.0).unwrap();
        let b = FeatureTensor::filled(2, 2, 1024, 0.0).unwrap();
        assert_eq!(concat_channels(&[a, b]).unwrap().channels(), 1536);
    }

    #[test]
    fn concat_rejects_mismatch() {
        let a = FeatureTensor::filled(2, 2, 1, 1.0).unwrap();
        let b = FeatureTensor::filled(2, 3, 1, 2.0).unwrap();
        assert!(matches!(concat_channels(&[a, b]), Err(Error::Shape(_))));
        assert!(concat_channels(&[]).is_err());
    }

    #[test]
    fn gaussian_constant_map() {
        let m = ScoreMap::filled(9, 13, 3.75).unwrap();
        let out = gaussian_filter(&m, 4.0).unwrap();
        assert!(out.data().iter().all(|v| (v - 3.75).abs() < 1e-6));
    }

    #[test]
    fn gaussian_impulse_centre_weight() {
        let n = 21;
        let mut data = vec![0f32; n * n];
        data[10 * n + 10] = 1.0;
        let m = ScoreMap::new(n, n, data).unwrap();
        let out = gaussian_filter(&m, 1.0).unwrap();
        // radius 4, weights exp(-i^2/2) normalised
        let total: f64 = (-4i32..=4).map(|i| (-(i * i) as f64 / 2.0).exp()).sum();
        let centre = 1.0 / total;
        assert!((f64::from(out.get(10, 10)) - centre * centre).abs() < 1e-7);
    }

    #[test]
    fn gaussian_rejects_bad_sigma() {
        let m = ScoreMap::filled(3, 3, 0.0).unwrap();
        assert!(gaussian_filter(&m, 0.0).is_err());
        assert!(gaussian_filter(&m, -1.0).is_err());
        assert!(gaussian_filter(&m, f64::NAN).is_err());
    }

    #[test]
    fn reflect_matches_half_sample_symmetry() {
        let got: Vec<usize> = (-4..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-7, 1), 0);
    }
}
