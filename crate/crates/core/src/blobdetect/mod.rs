//! Marker blob detection in 8-bit infrared frames and rectified stereo matching.
//!
//! Pixels at or above the intensity threshold are grouped into 8-connected
//! components. Each component is measured (area, contour perimeter,
//! circularity, black-white ratio) and kept only if every measurement falls in
//! the configured range.
//!
//! The perimeter is the length of the traced outer contour through boundary
//! pixel centres, weighted with the corner-count estimator
//! (0.980 per axial step, 1.406 per diagonal step, -0.091 per direction change),
//! plus `π` for the half-pixel band between that contour and the pixel-union
//! boundary whose area the pixel count measures. The result is an
//! asymptotically unbiased perimeter for convex shapes, so circularity of
//! rasterised discs approaches 1.

pub mod pgm;

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Pixel, StereoRig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlobError {
    #[error("perimeter must be positive, got {0}")]
    NonPositivePerimeter(f64),
    #[error("image buffer has {actual} bytes, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("invalid filter range for {0}: min > max")]
    InvalidRange(&'static str),
}

/// Row-major 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self, BlobError> {
        if data.len() != width * height {
            return Err(BlobError::BufferSize {
                expected: width * height,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }

    /// Saturating add, used when rendering overlapping discs.
    pub fn add(&mut self, x: usize, y: usize, value: u8) {
        let i = y * self.width + x;
        self.data[i] = self.data[i].saturating_add(value);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    /// Intensity-weighted centroid.
    pub centroid: Pixel,
    pub area: usize,
    pub perimeter: f64,
    pub circularity: f64,
    pub bw_ratio: f64,
}

impl Blob {
    /// A blob with only a centroid and an ideal disc shape, used when centroids
    /// are observed directly rather than segmented from an image.
    pub fn ideal(centroid: Pixel, radius_px: f64) -> Self {
        let r = radius_px.max(0.5);
        Self {
            centroid,
            area: (PI * r * r).round().max(1.0) as usize,
            perimeter: 2.0 * PI * r,
            circularity: 1.0,
            bw_ratio: PI / 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobFilterParams {
    pub threshold: u8,
    pub area: [usize; 2],
    pub circularity: [f64; 2],
    pub bw_ratio: [f64; 2],
}

impl Default for BlobFilterParams {
    fn default() -> Self {
        Self {
            threshold: 60,
            area: [6, 20_000],
            circularity: [0.7, 1.3],
            bw_ratio: [0.5, 1.0],
        }
    }
}

impl BlobFilterParams {
    pub fn validate(&self) -> Result<(), BlobError> {
        if self.area[0] > self.area[1] {
            return Err(BlobError::InvalidRange("area"));
        }
        if !(self.circularity[0] <= self.circularity[1]) {
            return Err(BlobError::InvalidRange("circularity"));
        }
        if !(self.bw_ratio[0] <= self.bw_ratio[1]) {
            return Err(BlobError::InvalidRange("bw_ratio"));
        }
        Ok(())
    }

    fn accepts(&self, b: &Blob) -> bool {
        (self.area[0]..=self.area[1]).contains(&b.area)
            && b.circularity >= self.circularity[0]
            && b.circularity <= self.circularity[1]
            && b.bw_ratio >= self.bw_ratio[0]
            && b.bw_ratio <= self.bw_ratio[1]
    }
}

/// `4π·area / perimeter²`.
pub fn circularity(area: f64, perimeter: f64) -> Result<f64, BlobError> {
    if !(perimeter > 0.0) {
        return Err(BlobError::NonPositivePerimeter(perimeter));
    }
    Ok(4.0 * PI * area / (perimeter * perimeter))
}

// Clockwise in image coordinates (y down). Even codes are axial moves.
const DIRS: [(i64, i64); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

fn dir_index(dx: i64, dy: i64) -> usize {
    DIRS.iter().position(|&d| d == (dx, dy)).expect("unit step")
}

struct Labels {
    width: usize,
    height: usize,
    labels: Vec<u32>,
}

impl Labels {
    fn is(&self, x: i64, y: i64, label: u32) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.labels[y as usize * self.width + x as usize] == label
    }
}

/// Freeman chain code of the outer contour starting at the component's first
/// pixel in raster order (Moore-neighbour tracing, Jacob's stop rule).
fn trace_contour(labels: &Labels, label: u32, start: (i64, i64)) -> Vec<usize> {
    let step = |c: (i64, i64), back: usize| -> Option<((i64, i64), usize, usize)> {
        for k in 1..=8 {
            let d = (back + k) % 8;
            let n = (c.0 + DIRS[d].0, c.1 + DIRS[d].1);
            if labels.is(n.0, n.1, label) {
                let prev = DIRS[(back + k - 1) % 8];
                let b = (c.0 + prev.0 - n.0, c.1 + prev.1 - n.1);
                return Some((n, d, dir_index(b.0, b.1)));
            }
        }
        None
    };

    // The raster-first pixel has background to its west.
    let Some((mut c, first, mut back)) = step(start, 4) else {
        return Vec::new();
    };
    let mut codes = vec![first];
    let cap = 4 * labels.labels.len() + 8;
    loop {
        let (n, d, b) = step(c, back).expect("traced pixel has a neighbour");
        if c == start && d == first {
            break;
        }
        codes.push(d);
        c = n;
        back = b;
        if codes.len() > cap {
            break;
        }
    }
    codes
}

fn chain_length(codes: &[usize]) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    let odd = codes.iter().filter(|&&c| c % 2 == 1).count() as f64;
    let even = codes.len() as f64 - odd;
    let corners = (0..codes.len())
        .filter(|&i| codes[i] != codes[(i + 1) % codes.len()])
        .count() as f64;
    0.980 * even + 1.406 * odd - 0.091 * corners
}

/// All blobs of `img` that pass `params`, in raster order of their first pixel.
pub fn detect_blobs(img: &GrayImage, params: &BlobFilterParams) -> Vec<Blob> {
    let (w, h) = (img.width, img.height);
    let mut labels = Labels {
        width: w,
        height: h,
        labels: vec![0; w * h],
    };
    let mut next = 0u32;
    let mut out = Vec::new();
    let mut queue = VecDeque::new();

    for y in 0..h {
        for x in 0..w {
            if img.get(x, y) < params.threshold || labels.labels[y * w + x] != 0 {
                continue;
            }
            next += 1;
            labels.labels[y * w + x] = next;
            queue.push_back((x, y));

            let (mut area, mut sw, mut sx, mut sy) = (0usize, 0.0, 0.0, 0.0);
            let (mut x0, mut x1, mut y0, mut y1) = (x, x, y, y);
            while let Some((px, py)) = queue.pop_front() {
                let i = img.get(px, py) as f64;
                area += 1;
                sw += i;
                sx += i * px as f64;
                sy += i * py as f64;
                x0 = x0.min(px);
                x1 = x1.max(px);
                y0 = y0.min(py);
                y1 = y1.max(py);
                for (dx, dy) in DIRS {
                    let (nx, ny) = (px as i64 + dx, py as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    if img.get(nx, ny) >= params.threshold && labels.labels[ny * w + nx] == 0 {
                        labels.labels[ny * w + nx] = next;
                        queue.push_back((nx, ny));
                    }
                }
            }

            let codes = trace_contour(&labels, next, (x as i64, y as i64));
            let perimeter = chain_length(&codes) + PI;
            let bbox = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
            let blob = Blob {
                centroid: Pixel::new(sx / sw, sy / sw),
                area,
                perimeter,
                circularity: circularity(area as f64, perimeter).expect("perimeter >= π"),
                bw_ratio: area as f64 / bbox,
            };
            if params.accepts(&blob) {
                out.push(blob);
            }
        }
    }
    out
}

/// Pair left and right blobs of a rectified rig.
///
/// Candidate pairs must agree in row within `row_tol` and have a disparity
/// inside the rig's working window. Pairs are accepted greedily by increasing
/// row discrepancy; ties prefer the smaller disparity, then the left-most
/// blobs. Returns `(left index, right index)` sorted by left index.
pub fn stereo_match(left: &[Blob], right: &[Blob], rig: &StereoRig, row_tol: f64) -> Vec<(usize, usize)> {
    let (dmin, dmax) = rig.disparity_window();
    let mut left_order: Vec<usize> = (0..left.len()).collect();
    left_order.sort_by(|&a, &b| left[a].centroid.u.total_cmp(&left[b].centroid.u));
    let mut rank = vec![0; left.len()];
    for (r, &i) in left_order.iter().enumerate() {
        rank[i] = r;
    }

    let mut candidates = Vec::new();
    for (i, l) in left.iter().enumerate() {
        for (j, r) in right.iter().enumerate() {
            let dv = (l.centroid.v - r.centroid.v).abs();
            let d = l.centroid.u - r.centroid.u;
            if dv <= row_tol && d > 0.0 && d >= dmin && d <= dmax {
                candidates.push((dv, d, rank[i], j, i));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });

    let mut used_l = vec![false; left.len()];
    let mut used_r = vec![false; right.len()];
    let mut pairs = Vec::new();
    for (_, _, _, j, i) in candidates {
        if !used_l[i] && !used_r[j] {
            used_l[i] = true;
            used_r[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Every left/right pairing whose rows agree within `row_tol` and whose
/// disparity lies inside the rig's working window, sorted by row discrepancy.
/// A superset of [`stereo_match`] used to keep row-ambiguous alternatives.
pub fn stereo_candidates(left: &[Blob], right: &[Blob], rig: &StereoRig, row_tol: f64) -> Vec<(usize, usize, f64)> {
    let (dmin, dmax) = rig.disparity_window();
    let mut out = Vec::new();
    for (i, l) in left.iter().enumerate() {
        for (j, r) in right.iter().enumerate() {
            let dv = (l.centroid.v - r.centroid.v).abs();
            let d = l.centroid.u - r.centroid.u;
            if dv <= row_tol && d > 0.0 && d >= dmin && d <= dmax {
                out.push((i, j, dv));
            }
        }
    }
    out.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Supersampled disc, the same way the reference labelling script draws it.
    pub(crate) fn disc_image(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> GrayImage {
        let mut img = GrayImage::new(w, h);
        let ss = 8;
        for y in 0..h {
            for x in 0..w {
                let mut hits = 0;
                for sy in 0..ss {
                    for sx in 0..ss {
                        let px = x as f64 - 0.5 + (sx as f64 + 0.5) / ss as f64;
                        let py = y as f64 - 0.5 + (sy as f64 + 0.5) / ss as f64;
                        if (px - cx).powi(2) + (py - cy).powi(2) <= r * r {
                            hits += 1;
                        }
                    }
                }
                img.set(x, y, (255 * hits / (ss * ss)) as u8);
            }
        }
        img
    }

    fn open_filter() -> BlobFilterParams {
        BlobFilterParams {
            threshold: 128,
            area: [1, usize::MAX],
            circularity: [0.0, 10.0],
            bw_ratio: [0.0, 1.0],
        }
    }

    #[test]
    fn candidates_include_crossed_rows() {
        let rig = StereoRig::rectified(700.0, 120.0, 1280, 720);
        let left = [Blob::ideal(Pixel::new(620.0, 300.0), 4.0), Blob::ideal(Pixel::new(700.0, 300.3), 4.0)];
        let right = [Blob::ideal(Pixel::new(460.0, 300.1), 4.0), Blob::ideal(Pixel::new(560.0, 300.2), 4.0)];
        let c = stereo_candidates(&left, &right, &rig, 1.0);
        assert_eq!(c.len(), 4);
        for (i, j) in stereo_match(&left, &right, &rig, 1.0) {
            assert!(c.iter().any(|&(a, b, _)| (a, b) == (i, j)));
        }
    }

    #[test]
    fn black_image_has_no_blobs() {
        let img = GrayImage::new(64, 48);
        assert!(detect_blobs(&img, &BlobFilterParams::default()).is_empty());
    }

    #[test]
    fn disc_radius_ten() {
        let img = disc_image(64, 64, 31.3, 30.8, 10.0);
        let blobs = detect_blobs(&img, &open_filter());
        assert_eq!(blobs.len(), 1);
        let b = blobs[0];
        assert!((b.centroid.u - 31.3).abs() < 0.1, "{:?}", b.centroid);
        assert!((b.centroid.v - 30.8).abs() < 0.1, "{:?}", b.centroid);
        assert!((0.9..=1.1).contains(&b.circularity), "{}", b.circularity);
    }

    #[test]
    fn thin_bar_is_rejected_by_circularity() {
        let mut img = GrayImage::new(60, 20);
        for y in 9..11 {
            for x in 10..50 {
                img.set(x, y, 255);
            }
        }
        let open = detect_blobs(&img, &open_filter());
        assert_eq!(open.len(), 1);
        assert_eq!(open[0].area, 80);
        assert!(open[0].circularity < 0.3, "{}", open[0].circularity);

        let strict = BlobFilterParams {
            circularity: [0.7, 1.1],
            ..open_filter()
        };
        assert!(detect_blobs(&img, &strict).is_empty());
    }

    #[test]
    fn circularity_identities() {
        let r = 7.5;
        assert_abs_diff_eq!(circularity(PI * r * r, 2.0 * PI * r).unwrap(), 1.0, epsilon = 1e-15);
        let s = 3.0;
        assert_abs_diff_eq!(circularity(s * s, 4.0 * s).unwrap(), PI / 4.0, epsilon = 1e-15);
        assert!(circularity(10.0, 0.0).is_err());
        assert!(circularity(10.0, -1.0).is_err());
    }

    #[test]
    fn single_pixel_and_bbox_ratio() {
        let mut img = GrayImage::new(5, 5);
        img.set(2, 2, 200);
        let b = detect_blobs(&img, &open_filter());
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].area, 1);
        assert_abs_diff_eq!(b[0].bw_ratio, 1.0);
        assert_abs_diff_eq!(b[0].centroid.u, 2.0);
    }

    #[test]
    fn contour_of_l_shape() {
        // Three pixels in an L: the trace must visit each boundary step once.
        let mut img = GrayImage::new(6, 6);
        img.set(2, 2, 255);
        img.set(2, 3, 255);
        img.set(3, 3, 255);
        let b = detect_blobs(&img, &open_filter());
        assert_eq!(b.len(), 1);
        // Chain: SE, W, N -> 2 axial, 1 diagonal, 3 corners.
        let expect = 0.980 * 2.0 + 1.406 - 0.091 * 3.0 + PI;
        assert_abs_diff_eq!(b[0].perimeter, expect, epsilon = 1e-12);
    }

    #[test]
    fn eight_connectivity_joins_diagonals() {
        let mut img = GrayImage::new(6, 6);
        img.set(1, 1, 255);
        img.set(2, 2, 255);
        img.set(4, 4, 255);
        let b = detect_blobs(&img, &open_filter());
        assert_eq!(b.len(), 2);
        assert_eq!(b[0].area, 2);
    }

    #[test]
    fn invalid_ranges() {
        let p = BlobFilterParams {
            area: [10, 5],
            ..Default::default()
        };
        assert!(p.validate().is_err());
        assert!(GrayImage::from_raw(3, 3, vec![0; 8]).is_err());
    }

    fn blob_at(u: f64, v: f64) -> Blob {
        Blob::ideal(Pixel::new(u, v), 4.0)
    }

    #[test]
    fn stereo_single_pair_and_occlusion() {
        let rig = StereoRig::default();
        let l = [blob_at(600.0, 300.0)];
        let r = [blob_at(470.0, 300.0)];
        assert_eq!(stereo_match(&l, &r, &rig, 1.0), vec![(0, 0)]);
        assert!(stereo_match(&l, &[], &rig, 1.0).is_empty());
    }

    #[test]
    fn stereo_never_crosses_rows() {
        let rig = StereoRig::default();
        let l = [blob_at(600.0, 300.0), blob_at(610.0, 340.0)];
        let r = [blob_at(485.0, 340.2), blob_at(470.0, 300.1)];
        let pairs = stereo_match(&l, &r, &rig, 1.0);
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);

        // Enumerate both one-to-one assignments; the chosen one is cheaper.
        let cost = |p: &[(usize, usize)]| -> f64 {
            p.iter().map(|&(i, j)| (l[i].centroid.v - r[j].centroid.v).abs()).sum()
        };
        assert!(cost(&pairs) < cost(&[(0, 0), (1, 1)]));
    }

    #[test]
    fn stereo_rejects_negative_disparity() {
        let rig = StereoRig::default();
        let l = [blob_at(400.0, 300.0)];
        let r = [blob_at(470.0, 300.0)];
        assert!(stereo_match(&l, &r, &rig, 1.0).is_empty());
    }
}
