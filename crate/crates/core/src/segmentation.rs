//! Soft segmentations from spatial activation maps, consolidated core masks,
//! core-cropping and mask-targeted image corruptions.

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_store::{ActivationSet, PredictionTable, SpatialActivationSet};

pub const DEFAULT_CROP_THRESHOLD: f32 = 0.9;
pub const DEFAULT_CROP_EXPAND: f64 = 0.2;
pub const DEFAULT_BLUR_RADIUS: u32 = 4;
pub const DEFAULT_PATCH_SIZE: u32 = 32;
pub const DEFAULT_SENSITIVITY_IMAGES: usize = 65;

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("spatial data unavailable: {0}")]
    Unavailable(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no pixel reaches the crop threshold {0}")]
    EmptyCrop(f32),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("missing predictions for {} image(s)", .0.len())]
    IncompletePredictions(Vec<String>),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, SegmentationError>;

/// H×W map with values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftSegmentation {
    pub image_id: String,
    /// None for derived masks.
    pub feature: Option<usize>,
    pub map: Array2<f32>,
}

impl SoftSegmentation {
    pub fn new(image_id: impl Into<String>, feature: Option<usize>, map: Array2<f32>) -> Self {
        Self {
            image_id: image_id.into(),
            feature,
            map: map.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    /// (height, width)
    pub fn size(&self) -> (usize, usize) {
        self.map.dim()
    }
}

/// Pixel-wise maximum of the core-feature segmentations of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidatedCoreMask {
    pub image_id: String,
    pub map: Array2<f32>,
}

impl ConsolidatedCoreMask {
    pub fn as_segmentation(&self) -> SoftSegmentation {
        SoftSegmentation {
            image_id: self.image_id.clone(),
            feature: None,
            map: self.map.clone(),
        }
    }
}

/// Min-max normalisation to [0, 1]; a constant map becomes all zeros.
pub fn normalize_map(map: ArrayView2<'_, f32>) -> Array2<f32> {
    let (lo, hi) = map
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Bilinear resize with corner alignment: output corners sample the input
/// corners exactly.
pub fn resize_bilinear(map: ArrayView2<'_, f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (in_h, in_w) = map.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return map.to_owned();
    }
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_out <= 1 || n_in <= 1 {
            return (0, 0, 0.0);
        }
        let src = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (src.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - lo as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = coord(y, in_h, out_h);
        let (x0, x1, fx) = coord(x, in_w, out_w);
        let v = |yy: usize, xx: usize| f64::from(map[[yy, xx]]);
        let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
        let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    })
}

/// Normalised activation map of `feature` on `image_id`, upsampled to
/// `height`×`width`.
pub fn soft_segmentation(
    spatial: &SpatialActivationSet,
    acts: &ActivationSet,
    image_id: &str,
    feature: usize,
    height: usize,
    width: usize,
) -> Result<SoftSegmentation> {
    let row = acts
        .row_of(image_id)
        .ok_or_else(|| SegmentationError::Unavailable(format!("unknown image {image_id:?}")))?;
    if row >= spatial.num_images() || feature >= spatial.num_features() {
        return Err(SegmentationError::Unavailable(format!(
            "no spatial map for image {image_id:?} feature {feature}"
        )));
    }
    if height == 0 || width == 0 {
        return Err(SegmentationError::Argument("image size must be positive".into()));
    }
    let normalized = normalize_map(spatial.map(row, feature));
    Ok(SoftSegmentation::new(
        image_id,
        Some(feature),
        resize_bilinear(normalized.view(), height, width),
    ))
}

fn same_size(a: &Array2<f32>, b: &Array2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(SegmentationError::Shape(format!(
            "{:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

pub fn consolidated_core_mask(segs: &[SoftSegmentation]) -> Result<ConsolidatedCoreMask> {
    let first = segs
        .first()
        .ok_or_else(|| SegmentationError::Argument("no core segmentations".into()))?;
    let mut map = first.map.clone();
    for s in &segs[1..] {
        same_size(&map, &s.map)?;
        map.zip_mut_with(&s.map, |m, &v| *m = m.max(v));
    }
    Ok(ConsolidatedCoreMask {
        image_id: first.image_id.clone(),
        map,
    })
}

/// Pixel-wise mean of the core-feature segmentations, an alternative mask
/// for core-cropping.
pub fn mean_core_mask(segs: &[SoftSegmentation]) -> Result<ConsolidatedCoreMask> {
    let first = segs
        .first()
        .ok_or_else(|| SegmentationError::Argument("no core segmentations".into()))?;
    let mut sum = first.map.mapv(f64::from);
    for s in &segs[1..] {
        same_size(&first.map, &s.map)?;
        sum.zip_mut_with(&s.map, |m, &v| *m += f64::from(v));
    }
    let n = segs.len() as f64;
    Ok(ConsolidatedCoreMask {
        image_id: first.image_id.clone(),
        map: sum.mapv(|v| (v / n) as f32),
    })
}

/// Spurious segmentation with the core region removed: max(s − core, 0).
pub fn filter_spurious_region(
    spurious: &SoftSegmentation,
    core: &ConsolidatedCoreMask,
) -> Result<SoftSegmentation> {
    same_size(&spurious.map, &core.map)?;
    let mut map = spurious.map.clone();
    map.zip_mut_with(&core.map, |s, &c| *s = (*s - c).max(0.0));
    Ok(SoftSegmentation {
        image_id: spurious.image_id.clone(),
        feature: spurious.feature,
        map,
    })
}

/// Half-open pixel box: columns `x0..x1`, rows `y0..y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub image_id: String,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CropBox {
    pub fn new(image_id: impl Into<String>, b: BoundingBox) -> Self {
        Self {
            image_id: image_id.into(),
            x0: b.x0,
            y0: b.y0,
            x1: b.x1,
            y1: b.y1,
        }
    }
}

/// Square crop around the pixels at or above `threshold`.
///
/// The tight box is grown by `ceil(expand / 2 · side)` pixels on each side
/// of each axis, the shorter side is then extended symmetrically (extra
/// pixel after) to match the longer one, and the result is clipped to the
/// image.
pub fn core_crop(mask: &ConsolidatedCoreMask, threshold: f32, expand: f64) -> Result<BoundingBox> {
    if !(expand >= 0.0) {
        return Err(SegmentationError::Argument(format!(
            "expansion must be non-negative, got {expand}"
        )));
    }
    let (h, w) = mask.map.dim();
    let mut extent: Option<(usize, usize, usize, usize)> = None;
    for ((y, x), &v) in mask.map.indexed_iter() {
        if v >= threshold {
            extent = Some(match extent {
                None => (y, y, x, x),
                Some((r0, r1, c0, c1)) => (r0.min(y), r1.max(y), c0.min(x), c1.max(x)),
            });
        }
    }
    let (r0, r1, c0, c1) = extent.ok_or(SegmentationError::EmptyCrop(threshold))?;
    let pad = |side: usize| (((expand / 2.0) * side as f64) - 1e-9).ceil().max(0.0) as i64;
    let (bh, bw) = ((r1 - r0 + 1) as i64, (c1 - c0 + 1) as i64);
    let (pr, pc) = (pad(bh as usize), pad(bw as usize));
    let (mut top, mut bottom) = (r0 as i64 - pr, r1 as i64 + pr);
    let (mut left, mut right) = (c0 as i64 - pc, c1 as i64 + pc);
    let (eh, ew) = (bottom - top + 1, right - left + 1);
    if eh < ew {
        let diff = ew - eh;
        top -= diff / 2;
        bottom += diff - diff / 2;
    } else if ew < eh {
        let diff = eh - ew;
        left -= diff / 2;
        right += diff - diff / 2;
    }
    let clip = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    Ok(BoundingBox {
        x0: clip(left, w),
        y0: clip(top, h),
        x1: clip(right, w) + 1,
        y1: clip(bottom, h) + 1,
    })
}

pub fn crop_image(image: &RgbImage, b: BoundingBox) -> RgbImage {
    image::imageops::crop_imm(image, b.x0 as u32, b.y0 as u32, b.width() as u32, b.height() as u32)
        .to_image()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorruptionKind {
    Gray,
    Blur { radius: u32 },
    PatchRotate { patch_size: u32, seed: u64 },
}

impl CorruptionKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CorruptionKind::Blur { radius: 0 } => {
                Err(SegmentationError::Argument("blur radius must be positive".into()))
            }
            CorruptionKind::PatchRotate { patch_size: 0, .. } => {
                Err(SegmentationError::Argument("patch size must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

fn luma(p: &Rgb<u8>) -> u8 {
    let v: f64 = p.0.iter().zip(LUMA).map(|(&c, w)| f64::from(c) * w).sum();
    v.round().clamp(0.0, 255.0) as u8
}

pub fn grayscale(image: &RgbImage) -> RgbImage {
    let mut out = image.clone();
    for p in out.pixels_mut() {
        let l = luma(p);
        *p = Rgb([l, l, l]);
    }
    out
}

fn gaussian_kernel(radius: u32) -> Vec<f64> {
    let sigma = (f64::from(radius) / 2.0).max(0.5);
    let r = radius as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur: half-width `radius`, sigma `radius / 2`, edges
/// clamped.
pub fn gaussian_blur(image: &RgbImage, radius: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    let kernel = gaussian_kernel(radius);
    let r = radius as i64;
    let mut tmp = vec![[0.0f64; 3]; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, weight) in kernel.iter().enumerate() {
                let sx = (x as i64 + k as i64 - r).clamp(0, w as i64 - 1) as u32;
                let p = image.get_pixel(sx, y);
                for c in 0..3 {
                    acc[c] += weight * f64::from(p[c]);
                }
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (k, weight) in kernel.iter().enumerate() {
                let sy = (y as i64 + k as i64 - r).clamp(0, h as i64 - 1) as u32;
                let p = tmp[(sy * w + x) as usize];
                for c in 0..3 {
                    acc[c] += weight * p[c];
                }
            }
            out.put_pixel(
                x,
                y,
                Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8)),
            );
        }
    }
    out
}

/// Tiles the image into `patch_size` squares and rotates each by a random
/// multiple of 90°. Partial tiles at the right and bottom edges are not
/// square and only rotate by 0° or 180°.
pub fn patch_rotate(image: &RgbImage, patch_size: u32, seed: u64) -> RgbImage {
    let (w, h) = image.dimensions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    for ty in (0..h).step_by(patch_size as usize) {
        for tx in (0..w).step_by(patch_size as usize) {
            let th = patch_size.min(h - ty);
            let tw = patch_size.min(w - tx);
            let mut turns: u32 = rng.random_range(0..4);
            if th != tw {
                turns &= 2;
            }
            for y in 0..th {
                for x in 0..tw {
                    // source pixel that lands on (x, y) after `turns` clockwise quarter turns
                    let (sx, sy) = match turns {
                        0 => (x, y),
                        1 => (y, th - 1 - x),
                        2 => (tw - 1 - x, th - 1 - y),
                        _ => (tw - 1 - y, x),
                    };
                    out.put_pixel(tx + x, ty + y, *image.get_pixel(tx + sx, ty + sy));
                }
            }
        }
    }
    out
}

/// `mask ⊙ corrupt(image) + (1 − mask) ⊙ image`, rounded per channel.
/// Pixels with mask 0 are copied unchanged and pixels with mask 1 take the
/// corrupted value exactly.
pub fn apply_corruption(image: &RgbImage, mask: &SoftSegmentation, kind: CorruptionKind) -> Result<RgbImage> {
    kind.validate()?;
    let (w, h) = image.dimensions();
    if mask.size() != (h as usize, w as usize) {
        return Err(SegmentationError::Shape(format!(
            "image is {h}×{w} but mask is {:?}",
            mask.size()
        )));
    }
    let corrupted = match kind {
        CorruptionKind::Gray => grayscale(image),
        CorruptionKind::Blur { radius } => gaussian_blur(image, radius),
        CorruptionKind::PatchRotate { patch_size, seed } => patch_rotate(image, patch_size, seed),
    };
    let mut out = image.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let m = f64::from(mask.map[[y as usize, x as usize]]);
        if m <= 0.0 {
            continue;
        }
        let c = corrupted.get_pixel(x, y);
        if m >= 1.0 {
            *p = *c;
            continue;
        }
        for ch in 0..3 {
            let v = m * f64::from(c[ch]) + (1.0 - m) * f64::from(p[ch]);
            p[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Image blended with a jet-coloured rendering of the segmentation.
pub fn heatmap_overlay(image: &RgbImage, seg: &SoftSegmentation, alpha: f64) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if seg.size() != (h as usize, w as usize) {
        return Err(SegmentationError::Shape(format!(
            "image is {h}×{w} but segmentation is {:?}",
            seg.size()
        )));
    }
    let jet = |v: f64, offset: f64| (1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0) * 255.0;
    let mut out = image.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let v = f64::from(seg.map[[y as usize, x as usize]]);
        let color = [jet(v, 3.0), jet(v, 2.0), jet(v, 1.0)];
        for ch in 0..3 {
            let blended = alpha * color[ch] + (1.0 - alpha) * f64::from(p[ch]);
            p[ch] = blended.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

pub fn load_rgb(path: impl AsRef<std::path::Path>) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub num_images: usize,
    pub acc_clean: f64,
    pub acc_corrupted: f64,
    /// acc_clean − acc_corrupted
    pub drop: f64,
}

/// Accuracy drop caused by a corruption on exactly `eval_ids`.
pub fn feature_sensitivity(
    clean: &PredictionTable,
    corrupted: &PredictionTable,
    eval_ids: &[String],
    acts: &ActivationSet,
) -> Result<SensitivityReport> {
    if eval_ids.is_empty() {
        return Err(SegmentationError::Argument("empty evaluation set".into()));
    }
    let mut missing = Vec::new();
    let (mut ok_clean, mut ok_corrupted) = (0usize, 0usize);
    for id in eval_ids {
        let row = acts
            .row_of(id)
            .ok_or_else(|| SegmentationError::Argument(format!("unknown image {id:?}")))?;
        let label = acts.record(row).label;
        match (clean.get(id), corrupted.get(id)) {
            (Some(a), Some(b)) => {
                ok_clean += usize::from(a == label);
                ok_corrupted += usize::from(b == label);
            }
            _ => missing.push(id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(SegmentationError::IncompletePredictions(missing));
    }
    let n = eval_ids.len() as f64;
    let (acc_clean, acc_corrupted) = (ok_clean as f64 / n, ok_corrupted as f64 / n);
    Ok(SensitivityReport {
        num_images: eval_ids.len(),
        acc_clean,
        acc_corrupted,
        drop: acc_clean - acc_corrupted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn mask(map: Array2<f32>) -> ConsolidatedCoreMask {
        ConsolidatedCoreMask {
            image_id: "m".into(),
            map,
        }
    }

    #[test]
    fn bilinear_two_by_two_to_four_by_four() {
        let up = resize_bilinear(array![[0.0f32, 1.0], [1.0, 0.0]].view(), 4, 4);
        assert_eq!(up[[0, 0]], 0.0);
        assert_eq!(up[[0, 3]], 1.0);
        assert_eq!(up[[3, 0]], 1.0);
        assert_eq!(up[[3, 3]], 0.0);
        // hand-computed: value = fx + fy − 2·fx·fy at fractional coords
        let oracle = |fy: f64, fx: f64| (fx + fy - 2.0 * fx * fy) as f32;
        for y in 0..4 {
            for x in 0..4 {
                let expected = oracle(y as f64 / 3.0, x as f64 / 3.0);
                assert!((up[[y, x]] - expected).abs() < 1e-6, "({y},{x})");
            }
        }
        assert!((up[[1, 1]] - 4.0 / 9.0).abs() < 1e-6);
    }

    #[test]
    fn constant_map_normalizes_to_zero() {
        assert_eq!(normalize_map(array![[3.0f32, 3.0], [3.0, 3.0]].view()), Array2::<f32>::zeros((2, 2)));
    }

    #[test]
    fn unit_range_map_is_unchanged() {
        let m = array![[0.0f32, 0.25], [1.0, 0.5]];
        let out = resize_bilinear(normalize_map(m.view()).view(), 2, 2);
        assert_eq!(out, m);
    }

    #[test]
    fn pointwise_max_and_filter() {
        let a = SoftSegmentation::new("i", Some(0), array![[0.2f32, 0.8]]);
        let b = SoftSegmentation::new("i", Some(1), array![[0.5f32, 0.1]]);
        let core = consolidated_core_mask(&[a.clone(), b]).unwrap();
        assert_eq!(core.map, array![[0.5f32, 0.8]]);
        assert_eq!(consolidated_core_mask(&[a.clone()]).unwrap().map, a.map);
        assert!(consolidated_core_mask(&[]).is_err());

        let zero = mask(Array2::zeros((1, 2)));
        assert_eq!(filter_spurious_region(&a, &zero).unwrap().map, a.map);
        let ones = mask(Array2::ones((1, 2)));
        assert_eq!(filter_spurious_region(&a, &ones).unwrap().map, Array2::<f32>::zeros((1, 2)));
        assert!(filter_spurious_region(&a, &mask(Array2::zeros((2, 2)))).is_err());
    }

    #[test]
    fn point_mask_crop() {
        let mut m = Array2::<f32>::zeros((8, 8));
        m[[3, 3]] = 1.0;
        let b = core_crop(&mask(m), 0.9, 0.2).unwrap();
        // ceil(0.1 × 1) = 1 pixel on each side
        assert_eq!(b, BoundingBox { x0: 2, y0: 2, x1: 5, y1: 5 });
    }

    #[test]
    fn wide_mask_crop_squarifies_and_clips() {
        let mut m = Array2::<f32>::zeros((10, 10));
        for y in 2..=3 {
            for x in 1..=6 {
                m[[y, x]] = 0.95;
            }
        }
        // tight rows 2..=3, cols 1..=6; pad 1 each → rows 1..=4, cols 0..=7;
        // height 4 → 8: rows -1..=6, clipped to 0..=6
        let b = core_crop(&mask(m), 0.9, 0.2).unwrap();
        assert_eq!(b, BoundingBox { x0: 0, y0: 0, x1: 8, y1: 7 });
    }

    #[test]
    fn full_mask_crop_is_whole_image() {
        let b = core_crop(&mask(Array2::ones((6, 9))), 0.9, 0.2).unwrap();
        assert_eq!(b, BoundingBox { x0: 0, y0: 0, x1: 9, y1: 6 });
    }

    #[test]
    fn empty_crop_is_error() {
        assert!(matches!(
            core_crop(&mask(Array2::from_elem((4, 4), 0.5)), 0.9, 0.2),
            Err(SegmentationError::EmptyCrop(_))
        ));
    }

    #[test]
    fn quarter_turn_is_a_rotation() {
        let mut img = RgbImage::new(2, 2);
        img.put_pixel(0, 0, Rgb([1, 1, 1]));
        img.put_pixel(1, 0, Rgb([2, 2, 2]));
        img.put_pixel(0, 1, Rgb([3, 3, 3]));
        img.put_pixel(1, 1, Rgb([4, 4, 4]));
        // with one tile, some seed yields each rotation; all must be rotations of [[1,2],[3,4]]
        let valid = [[1, 2, 3, 4], [3, 1, 4, 2], [4, 3, 2, 1], [2, 4, 1, 3]];
        for seed in 0..16 {
            let out = patch_rotate(&img, 2, seed);
            let got = [
                out.get_pixel(0, 0)[0],
                out.get_pixel(1, 0)[0],
                out.get_pixel(0, 1)[0],
                out.get_pixel(1, 1)[0],
            ];
            assert!(valid.contains(&got), "{got:?}");
        }
    }

    #[test]
    fn mismatched_mask_rejected() {
        let img = RgbImage::new(4, 4);
        let seg = SoftSegmentation::new("i", None, Array2::zeros((3, 4)));
        assert!(matches!(
            apply_corruption(&img, &seg, CorruptionKind::Gray),
            Err(SegmentationError::Shape(_))
        ));
        let seg = SoftSegmentation::new("i", None, Array2::zeros((4, 4)));
        assert!(apply_corruption(&img, &seg, CorruptionKind::Blur { radius: 0 }).is_err());
    }

    #[test]
    fn soft_mask_interpolates() {
        let img = RgbImage::from_pixel(1, 1, Rgb([200, 0, 0]));
        let seg = SoftSegmentation::new("i", None, array![[0.5f32]]);
        let out = apply_corruption(&img, &seg, CorruptionKind::Gray).unwrap();
        // luma = round(59.8) = 60; blend 0.5·60 + 0.5·200 = 130
        assert_eq!(out.get_pixel(0, 0).0, [130, 30, 30]);
    }
}
