//! Geometry, image and annotation primitives shared by every stage.
//!
//! Boxes use the half-open pixel convention `[x_min, x_max) x [y_min, y_max)`, so a box built
//! from a single pixel `(x, y)` is `(x, y, x + 1, y + 1)` and its area is one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox { x_min, y_min, x_max, y_max })
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) * 0.5, (self.y_min + self.y_max) * 0.5)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Intersection area with `other` (zero when disjoint).
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Lexicographic key used for deterministic tie-breaking.
    pub fn sort_key(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Intersects `b` with the frame `[0, width] x [0, height]`; `None` when nothing is left.
pub fn clip_box(b: &BoundingBox, width: f64, height: f64) -> Option<BoundingBox> {
    let clipped = BoundingBox {
        x_min: b.x_min.max(0.0),
        y_min: b.y_min.max(0.0),
        x_max: b.x_max.min(width),
        y_max: b.y_max.min(height),
    };
    clipped.is_valid().then_some(clipped)
}

/// Tightest box covering every pixel of the set (pixel extents included).
pub fn box_from_pixel_set<I>(pixels: I) -> Result<BoundingBox>
where
    I: IntoIterator<Item = (u32, u32)>,
{
    let mut iter = pixels.into_iter();
    let (x0, y0) = iter.next().ok_or(Error::EmptyPixelSet)?;
    let (mut x_min, mut y_min, mut x_max, mut y_max) = (x0, y0, x0, y0);
    for (x, y) in iter {
        x_min = x_min.min(x);
        y_min = y_min.min(y);
        x_max = x_max.max(x);
        y_max = y_max.max(y);
    }
    Ok(BoundingBox {
        x_min: x_min as f64,
        y_min: y_min as f64,
        x_max: x_max as f64 + 1.0,
        y_max: y_max as f64 + 1.0,
    })
}

/// Lower bound (exclusive) of a valid depth reading, meters.
pub const MIN_VALID_DEPTH: f32 = 0.1;
/// Upper bound (inclusive) of a valid depth reading, meters.
pub const MAX_VALID_DEPTH: f32 = 10.0;

#[inline]
pub fn is_valid_depth(d: f32) -> bool {
    d > MIN_VALID_DEPTH && d <= MAX_VALID_DEPTH
}

/// Synchronized color + depth image. Depth `0.0` marks an invalid reading.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame {
    pub width: u32,
    pub height: u32,
    /// Row-major, 3 bytes per pixel.
    pub rgb: Vec<u8>,
    /// Row-major, meters.
    pub depth: Vec<f32>,
    pub timestamp: f64,
    pub index: u32,
}

impl RgbdFrame {
    pub fn new(
        width: u32,
        height: u32,
        rgb: Vec<u8>,
        depth: Vec<f32>,
        timestamp: f64,
        index: u32,
    ) -> Result<Self> {
        let n = width as usize * height as usize;
        if width == 0 || height == 0 {
            return Err(Error::InvalidFrame("zero-sized frame".into()));
        }
        if rgb.len() != 3 * n || depth.len() != n {
            return Err(Error::InvalidFrame(format!(
                "buffer sizes rgb={} depth={} do not match {}x{}",
                rgb.len(),
                depth.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, rgb, depth, timestamp, index })
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    #[inline]
    pub fn depth_at(&self, x: u32, y: u32) -> f32 {
        self.depth[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn rgb_at(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn valid_depth_count(&self) -> usize {
        self.depth.iter().filter(|d| is_valid_depth(**d)).count()
    }
}

/// Provenance of an annotation box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    Manual,
    HandProximal,
    DistanceBased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub frame_index: u32,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub label: String,
    pub source: AnnotationSource,
    /// Number of blob pixels the box was derived from (0 for manual boxes).
    #[serde(default)]
    pub pixel_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub label: String,
    pub score: f64,
}

/// Pinhole intrinsics; pixel `(u, v)` is sampled at its center `(u + 0.5, v + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self::for_resolution(320, 240)
    }
}

impl CameraIntrinsics {
    /// Focal 277 px at 320x240, scaled linearly with width; principal point at the center.
    pub fn for_resolution(width: u32, height: u32) -> Self {
        let f = 277.0 * width as f64 / 320.0;
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    /// Projects a camera-frame point (x right, y down, z forward) to continuous pixel coords.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        if p[2] <= 1e-9 {
            return None;
        }
        Some((self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy))
    }

    /// Ray direction through the center of pixel `(u, v)`, normalized to `z = 1`.
    #[inline]
    pub fn ray(&self, u: u32, v: u32) -> [f64; 3] {
        [
            (u as f64 + 0.5 - self.cx) / self.fx,
            (v as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        ]
    }

    /// 3D point seen at pixel `(u, v)` with depth `z`.
    #[inline]
    pub fn back_project(&self, u: u32, v: u32, z: f64) -> [f64; 3] {
        let r = self.ray(u, v);
        [r[0] * z, r[1] * z, z]
    }

    /// Back-projection of a continuous pixel location (keypoints).
    pub fn back_project_continuous(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        [(x - self.cx) / self.fx * z, (y - self.cy) / self.fy * z, z]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64
    }
}

#[inline]
pub fn distance3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bx(0., 0., 10., 10.), &bx(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&bx(0., 0., 10., 10.), &bx(20., 20., 30., 30.)), 0.0);
        // intersection 50, union 150
        let v = iou(&bx(0., 0., 10., 10.), &bx(5., 0., 15., 10.));
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&bx(0., 0., 10., 10.), &bx(10., 0., 20., 10.)), 0.0);
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_box(&bx(-5., -5., 5., 5.), 100., 100.), Some(bx(0., 0., 5., 5.)));
        assert_eq!(clip_box(&bx(0., 0., 10., 10.), 100., 100.), Some(bx(0., 0., 10., 10.)));
        assert_eq!(clip_box(&bx(200., 200., 210., 210.), 100., 100.), None);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BoundingBox::new(5., 0., 5., 10.).is_err());
        assert!(BoundingBox::new(0., 0., f64::NAN, 10.).is_err());
    }

    #[test]
    fn pixel_set_boxes() {
        assert_eq!(box_from_pixel_set([(3, 4)]).unwrap(), bx(3., 4., 4., 5.));
        assert_eq!(box_from_pixel_set([(0, 0), (9, 9)]).unwrap(), bx(0., 0., 10., 10.));
        assert!(matches!(box_from_pixel_set(Vec::<(u32, u32)>::new()), Err(Error::EmptyPixelSet)));
    }

    #[test]
    fn pixel_set_from_rendered_rectangle() {
        // render a 20x30 rectangle at (5,7) into a mask and scan it
        let (w, h) = (64u32, 64u32);
        let mut mask = vec![false; (w * h) as usize];
        for y in 7..37 {
            for x in 5..25 {
                mask[(y * w + x) as usize] = true;
            }
        }
        let pixels = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| mask[(y * w + x) as usize]);
        assert_eq!(box_from_pixel_set(pixels).unwrap(), bx(5., 7., 25., 37.));
    }

    #[test]
    fn frame_buffer_sizes_checked() {
        assert!(RgbdFrame::new(2, 2, vec![0; 12], vec![1.0; 4], 0.0, 0).is_ok());
        assert!(RgbdFrame::new(2, 2, vec![0; 11], vec![1.0; 4], 0.0, 0).is_err());
    }

    #[test]
    fn projection_round_trip() {
        let cam = CameraIntrinsics::default();
        let p = cam.back_project(100, 50, 1.7);
        let (u, v) = cam.project(p).unwrap();
        assert!((u - 100.5).abs() < 1e-9 && (v - 50.5).abs() < 1e-9);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.5..60.0f64, 0.5..60.0f64)
            .prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn sliding_apart_never_increases_iou(a in arb_box(), b in arb_box(), dx in 0.0..40.0f64) {
            // with b starting right of a's left edge, moving b right only shrinks the overlap
            let b = bx(b.x_min.max(a.x_min), b.y_min, b.x_min.max(a.x_min) + b.width(), b.y_max);
            let moved = bx(b.x_min + dx, b.y_min, b.x_max + dx, b.y_max);
            prop_assert!(a.intersection_area(&moved) <= a.intersection_area(&b) + 1e-9);
            prop_assert!(iou(&a, &moved) <= iou(&a, &b) + 1e-12);
        }

        #[test]
        fn pixel_box_order_invariant(mut pts in proptest::collection::vec((0u32..50, 0u32..50), 1..40), seed in any::<u64>()) {
            let forward = box_from_pixel_set(pts.iter().copied()).unwrap();
            // deterministic shuffle
            let n = pts.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (s >> 33) as usize % (i + 1);
                pts.swap(i, j);
            }
            prop_assert_eq!(forward, box_from_pixel_set(pts.into_iter()).unwrap());
        }
    }
}
