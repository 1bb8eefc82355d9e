//! Image conditioning applied identically to training and inference
//! projections: standardise, rescale to `[0, 1]`, equalise, pool 2×2.

use crate::drr::ProjectionImage;
use crate::error::{Error, Result};

const STD_FLOOR: f64 = 1e-12;

pub const DEFAULT_BINS: usize = 256;

fn rebuild(img: &ProjectionImage, values: Vec<f64>) -> ProjectionImage {
    ProjectionImage::new(img.dims(), values).expect("same dims, finite values")
}

/// `(img − mean) / std` over all pixels; all zeros when `std < 1e-12`.
pub fn variance_equalize(img: &ProjectionImage) -> ProjectionImage {
    let v = img.values();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < STD_FLOOR {
        return rebuild(img, vec![0.0; v.len()]);
    }
    rebuild(img, v.iter().map(|x| (x - mean) / std).collect())
}

/// `(img − min) / (max − min)`; a constant image maps to 0.5.
pub fn normalize01(img: &ProjectionImage) -> ProjectionImage {
    let v = img.values();
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !(hi > lo) {
        return rebuild(img, vec![0.5; v.len()]);
    }
    let r = hi - lo;
    rebuild(img, v.iter().map(|x| ((x - lo) / r).clamp(0.0, 1.0)).collect())
}

/// Bin of `v ∈ [0, 1]` among `bins` equal-width bins with inclusive right
/// edges. The scaled value is snapped to 1e-9 first so that rounding noise
/// cannot move a pixel sitting on an edge.
#[inline]
fn bin_of(v: f64, bins: usize) -> usize {
    let scaled = (v * bins as f64 * 1e9).round() / 1e9;
    let b = scaled.ceil() as usize;
    b.saturating_sub(1).min(bins - 1)
}

/// Maps every pixel to the empirical CDF of its bin.
pub fn histogram_equalize(img: &ProjectionImage, bins: usize) -> Result<ProjectionImage> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let v = img.values();
    if let Some(bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::InvalidArgument(format!(
            "histogram equalisation expects values in [0, 1], found {bad}"
        )));
    }
    let mut counts = vec![0usize; bins];
    for &x in v {
        counts[bin_of(x, bins)] += 1;
    }
    let n = v.len() as f64;
    let mut cdf = vec![0.0; bins];
    let mut acc = 0usize;
    for (c, &k) in cdf.iter_mut().zip(&counts) {
        acc += k;
        *c = acc as f64 / n;
    }
    Ok(rebuild(img, v.iter().map(|&x| cdf[bin_of(x, bins)]).collect()))
}

/// Mean of each 2×2 block; an odd trailing row or column is dropped.
pub fn downsample_avg2(img: &ProjectionImage) -> ProjectionImage {
    let [nu, nv] = img.dims();
    let (ou, ov) = (nu / 2, nv / 2);
    let mut out = Vec::with_capacity(ou * ov);
    for j in 0..ov {
        for i in 0..ou {
            let s = img.get(2 * i, 2 * j) + img.get(2 * i + 1, 2 * j) + img.get(2 * i, 2 * j + 1) + img.get(2 * i + 1, 2 * j + 1);
            out.push(0.25 * s);
        }
    }
    ProjectionImage::new([ou, ov], out).expect("pooled values are finite")
}

/// `variance_equalize → normalize01 → histogram_equalize → downsample_avg2`.
pub fn preprocess_pipeline(img: &ProjectionImage) -> Result<ProjectionImage> {
    preprocess_with_bins(img, DEFAULT_BINS)
}

pub fn preprocess_with_bins(img: &ProjectionImage, bins: usize) -> Result<ProjectionImage> {
    let [nu, nv] = img.dims();
    if nu < 2 || nv < 2 {
        return Err(Error::InvalidArgument(format!("image {nu}×{nv} is too small to pool")));
    }
    let eq = histogram_equalize(&normalize01(&variance_equalize(img)), bins)?;
    Ok(downsample_avg2(&eq))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(dims: [usize; 2], v: &[f64]) -> ProjectionImage {
        ProjectionImage::new(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn standardised_image_is_unchanged() {
        let x = img([4, 1], &[-1.0, 1.0, -1.0, 1.0]);
        let y = variance_equalize(&x);
        for (a, b) in x.values().iter().zip(y.values()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(variance_equalize(&img([3, 1], &[2.0; 3])).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize01(&img([3, 1], &[0.0, 5.0, 10.0])).values(), &[0.0, 0.5, 1.0]);
        assert_eq!(normalize01(&img([2, 1], &[7.0, 7.0])).values(), &[0.5, 0.5]);
    }

    #[test]
    fn histogram_examples() {
        let c = histogram_equalize(&img([3, 1], &[0.3; 3]), 256).unwrap();
        assert_eq!(c.values(), &[1.0; 3]);
        let two = histogram_equalize(&img([4, 1], &[0.0, 1.0, 1.0, 1.0]), 256).unwrap();
        assert_eq!(two.values(), &[0.25, 1.0, 1.0, 1.0]);
        assert!(histogram_equalize(&img([2, 1], &[0.0, 1.5]), 256).is_err());
        assert!(histogram_equalize(&img([2, 1], &[0.0, 1.0]), 0).is_err());
    }

    #[test]
    fn uniform_ramp_is_already_equalised() {
        let n = 1024;
        let v: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let out = histogram_equalize(&img([n, 1], &v), 256).unwrap();
        for (a, b) in v.iter().zip(out.values()) {
            assert!((a - b).abs() <= 1.0 / 256.0 + 1e-12, "{a} -> {b}");
        }
    }

    #[test]
    fn pooling_examples() {
        assert_eq!(downsample_avg2(&img([2, 2], &[1.0, 2.0, 3.0, 4.0])).values(), &[2.5]);
        let checker: Vec<f64> = (0..16).map(|i| ((i % 4 + i / 4) % 2) as f64).collect();
        assert_eq!(downsample_avg2(&img([4, 4], &checker)).values(), &[0.5; 4]);
        // 5 wide, 4 tall: the last column is dropped.
        let v: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let out = downsample_avg2(&img([5, 4], &v));
        assert_eq!(out.dims(), [2, 2]);
        assert_eq!(out.values(), &[3.0, 5.0, 13.0, 15.0]);
    }

    #[test]
    fn pipeline_halves_dims_and_is_deterministic() {
        let v: Vec<f64> = (0..48).map(|i| ((i * 37) % 11) as f64).collect();
        let x = img([8, 6], &v);
        let a = preprocess_pipeline(&x).unwrap();
        assert_eq!(a.dims(), [4, 3]);
        assert_eq!(a, preprocess_pipeline(&x).unwrap());
        assert!(preprocess_pipeline(&img([1, 4], &[0.0; 4])).is_err());
    }
}
