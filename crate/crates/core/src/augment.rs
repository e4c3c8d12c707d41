//! Two-view augmentation with tracked geometry.
//!
//! Dense objectives need to know which spatial positions of view A and view B
//! come from the same image location, so crops and flips are explicit data
//! rather than baked into the pixels. Photometric transforms are tracked too
//! but never enter the correspondence math.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Geometry and photometric parameters of one augmented view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    /// Normalized crop box (x0, y0, x1, y1), 0 <= x0 < x1 <= 1.
    pub crop: (f64, f64, f64, f64),
    pub hflip: bool,
    pub brightness: f64,
    pub contrast: f64,
    /// Hue rotation in radians.
    pub hue_shift: f64,
    pub out_size: usize,
}

impl ViewSpec {
    pub fn identity(out_size: usize) -> Self {
        ViewSpec {
            crop: (0.0, 0.0, 1.0, 1.0),
            hflip: false,
            brightness: 0.0,
            contrast: 1.0,
            hue_shift: 0.0,
            out_size,
        }
    }
}

/// Sampler policy for view pairs.
#[derive(Clone, Copy, Debug)]
pub struct ViewPolicy {
    /// Crop side length range as a fraction of the image.
    pub scale_range: (f64, f64),
    pub hflip_prob: f64,
    /// Minimum IoU between the two crop boxes.
    pub min_overlap: f64,
    pub out_size: usize,
    pub brightness_jitter: f64,
    pub contrast_jitter: f64,
    pub hue_jitter: f64,
}

impl ViewPolicy {
    pub fn default_policy(out_size: usize) -> Self {
        ViewPolicy {
            scale_range: (0.3, 1.0),
            hflip_prob: 0.5,
            min_overlap: 0.2,
            out_size,
            brightness_jitter: 0.2,
            contrast_jitter: 0.2,
            hue_jitter: 0.3,
        }
    }

    /// Fixed full-frame crops, no flips, no photometric jitter.
    pub fn identity_policy(out_size: usize) -> Self {
        ViewPolicy {
            scale_range: (1.0, 1.0),
            hflip_prob: 0.0,
            min_overlap: 0.0,
            out_size,
            brightness_jitter: 0.0,
            contrast_jitter: 0.0,
            hue_jitter: 0.0,
        }
    }
}

/// Spatial matches between two views at one feature grid resolution.
/// Cells are (row, col); each A cell appears at most once.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchSet {
    pub grid: usize,
    pub pairs: Vec<((usize, usize), (usize, usize))>,
}

impl MatchSet {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn crop_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let ix = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let iy = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.2 - a.0) * (a.3 - a.1);
    let area_b = (b.2 - b.0) * (b.3 - b.1);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn sample_crop(rng: &mut ChaCha8Rng, policy: &ViewPolicy) -> (f64, f64, f64, f64) {
    let (lo, hi) = policy.scale_range;
    let side = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let x0 = if side < 1.0 { rng.gen_range(0.0..(1.0 - side)) } else { 0.0 };
    let y0 = if side < 1.0 { rng.gen_range(0.0..(1.0 - side)) } else { 0.0 };
    (x0, y0, x0 + side, y0 + side)
}

/// Samples a pair of crops whose IoU is at least `policy.min_overlap`,
/// retrying up to 100 times and then falling back to the best pair seen, so
/// a pair is always produced.
pub fn sample_view_pair(rng: &mut ChaCha8Rng, policy: &ViewPolicy) -> (ViewSpec, ViewSpec) {
    let mut best: Option<((f64, f64, f64, f64), (f64, f64, f64, f64), f64)> = None;
    let mut chosen = None;
    for _ in 0..100 {
        let ca = sample_crop(rng, policy);
        let cb = sample_crop(rng, policy);
        let iou = crop_iou(ca, cb);
        if iou >= policy.min_overlap {
            chosen = Some((ca, cb));
            break;
        }
        if best.map_or(true, |(_, _, b)| iou > b) {
            best = Some((ca, cb, iou));
        }
    }
    let (ca, cb) = chosen.unwrap_or_else(|| {
        let (ca, cb, _) = best.expect("at least one attempt");
        (ca, cb)
    });
    let mut finish = |crop: (f64, f64, f64, f64)| {
        let hflip = rng.gen_bool(policy.hflip_prob);
        let brightness = if policy.brightness_jitter > 0.0 {
            rng.gen_range(-policy.brightness_jitter..policy.brightness_jitter)
        } else {
            0.0
        };
        let contrast = if policy.contrast_jitter > 0.0 {
            rng.gen_range(1.0 - policy.contrast_jitter..1.0 + policy.contrast_jitter)
        } else {
            1.0
        };
        let hue_shift = if policy.hue_jitter > 0.0 {
            rng.gen_range(-policy.hue_jitter..policy.hue_jitter)
        } else {
            0.0
        };
        ViewSpec { crop, hflip, brightness, contrast, hue_shift, out_size: policy.out_size }
    };
    (finish(ca), finish(cb))
}

/// Photometric transform of one RGB value: hue rotation (YIQ space), then
/// contrast around 0.5, then brightness, clamped to [0,1].
pub fn photometric(rgb: [f32; 3], spec: &ViewSpec) -> [f32; 3] {
    // the classic YIQ matrices are rounded and not exact inverses, so the
    // rotation is skipped entirely at zero hue to keep identity specs exact
    let rotated = if spec.hue_shift == 0.0 {
        rgb.map(|v| v as f64)
    } else {
        let [r, g, b] = rgb.map(|v| v as f64);
        let y = 0.299 * r + 0.587 * g + 0.114 * b;
        let i = 0.596 * r - 0.274 * g - 0.322 * b;
        let q = 0.211 * r - 0.523 * g + 0.312 * b;
        let (sin, cos) = spec.hue_shift.sin_cos();
        let i2 = i * cos - q * sin;
        let q2 = i * sin + q * cos;
        [
            y + 0.956 * i2 + 0.621 * q2,
            y - 0.272 * i2 - 0.647 * q2,
            y - 1.106 * i2 + 1.703 * q2,
        ]
    };
    rotated.map(|v| {
        let v = (v - 0.5) * spec.contrast + 0.5 + spec.brightness;
        v.clamp(0.0, 1.0) as f32
    })
}

fn bilinear(image: &Array3<f32>, ch: usize, x: f64, y: f64) -> f32 {
    let (_, h, w) = image.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let clamp_x = |v: f64| (v.max(0.0) as usize).min(w - 1);
    let clamp_y = |v: f64| (v.max(0.0) as usize).min(h - 1);
    let (x0i, x1i) = (clamp_x(x0), clamp_x(x0 + 1.0));
    let (y0i, y1i) = (clamp_y(y0), clamp_y(y0 + 1.0));
    let p00 = image[(ch, y0i, x0i)];
    let p01 = image[(ch, y0i, x1i)];
    let p10 = image[(ch, y1i, x0i)];
    let p11 = image[(ch, y1i, x1i)];
    let top = p00 * (1.0 - fx) + p01 * fx;
    let bot = p10 * (1.0 - fx) + p11 * fx;
    top * (1.0 - fy) + bot * fy
}

/// Renders a view: bilinear resample of the crop, horizontal flip, then
/// photometric transform.
pub fn apply_view(image: &Array3<f32>, spec: &ViewSpec) -> Array3<f32> {
    let (_, h, w) = image.dim();
    let out = spec.out_size;
    let (x0, y0, x1, y1) = spec.crop;
    let mut view = Array3::<f32>::zeros((3, out, out));
    for oy in 0..out {
        for ox in 0..out {
            let mut u = (ox as f64 + 0.5) / out as f64;
            if spec.hflip {
                u = 1.0 - u;
            }
            let v = (oy as f64 + 0.5) / out as f64;
            let sx = (x0 + u * (x1 - x0)) * w as f64 - 0.5;
            let sy = (y0 + v * (y1 - y0)) * h as f64 - 0.5;
            let rgb = [
                bilinear(image, 0, sx, sy),
                bilinear(image, 1, sx, sy),
                bilinear(image, 2, sx, sy),
            ];
            let rgb = photometric(rgb, spec);
            for ch in 0..3 {
                view[(ch, oy, ox)] = rgb[ch];
            }
        }
    }
    view
}

/// Maps each A cell center through A's geometry into the shared image frame
/// and then into B's frame. A pair is kept iff the mapped point lies inside
/// B's crop and its nearest B cell center is within half a cell.
pub fn correspondence_grid(spec_a: &ViewSpec, spec_b: &ViewSpec, grid: usize) -> MatchSet {
    assert!(grid >= 1, "grid must be >= 1");
    let g = grid as f64;
    let (ax0, ay0, ax1, ay1) = spec_a.crop;
    let (bx0, by0, bx1, by1) = spec_b.crop;
    let mut pairs = Vec::new();
    let eps = 1e-9;
    for row in 0..grid {
        for col in 0..grid {
            let mut u = (col as f64 + 0.5) / g;
            let v = (row as f64 + 0.5) / g;
            if spec_a.hflip {
                u = 1.0 - u;
            }
            let xi = ax0 + u * (ax1 - ax0);
            let yi = ay0 + v * (ay1 - ay0);
            let bu = (xi - bx0) / (bx1 - bx0);
            let bv = (yi - by0) / (by1 - by0);
            if !((-eps..=1.0 + eps).contains(&bu) && (-eps..=1.0 + eps).contains(&bv)) {
                continue;
            }
            let bu = if spec_b.hflip { 1.0 - bu } else { bu };
            let tx = bu * g;
            let ty = bv * g;
            let cb = (tx - 0.5).round().clamp(0.0, g - 1.0);
            let rb = (ty - 0.5).round().clamp(0.0, g - 1.0);
            if (tx - (cb + 0.5)).abs() <= 0.5 + eps && (ty - (rb + 0.5)).abs() <= 0.5 + eps {
                pairs.push(((row, col), (rb as usize, cb as usize)));
            }
        }
    }
    MatchSet { grid, pairs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use ndarray::Array;

    #[test]
    fn identity_policy_gives_full_crops() {
        let policy = ViewPolicy::identity_policy(32);
        let (a, b) = sample_view_pair(&mut substream(1, "v"), &policy);
        assert_eq!(a.crop, (0.0, 0.0, 1.0, 1.0));
        assert_eq!(b.crop, (0.0, 0.0, 1.0, 1.0));
        assert!(!a.hflip && !b.hflip);
    }

    #[test]
    fn flip_prob_one_flips_both() {
        let policy = ViewPolicy { hflip_prob: 1.0, ..ViewPolicy::identity_policy(32) };
        let (a, b) = sample_view_pair(&mut substream(2, "v"), &policy);
        assert!(a.hflip && b.hflip);
    }

    #[test]
    fn sampler_respects_min_overlap() {
        let policy = ViewPolicy::default_policy(32);
        let mut rng = substream(3, "v");
        let mut min_iou = f64::INFINITY;
        for _ in 0..1000 {
            let (a, b) = sample_view_pair(&mut rng, &policy);
            min_iou = min_iou.min(crop_iou(a.crop, b.crop));
            assert!(a.crop.0 >= 0.0 && a.crop.2 <= 1.0 && a.crop.0 < a.crop.2);
        }
        assert!(min_iou >= policy.min_overlap, "min IoU {min_iou}");
    }

    #[test]
    fn identity_view_preserves_image() {
        let mut rng = substream(4, "img");
        let image: Array3<f32> =
            Array::from_shape_simple_fn((3, 16, 16), || rng.gen_range(0.0..1.0));
        let spec = ViewSpec::identity(16);
        let out = apply_view(&image, &spec);
        for (a, b) in image.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hflip_is_an_involution() {
        let mut rng = substream(5, "img");
        let image: Array3<f32> =
            Array::from_shape_simple_fn((3, 16, 16), || rng.gen_range(0.0..1.0));
        let spec = ViewSpec { hflip: true, ..ViewSpec::identity(16) };
        let once = apply_view(&image, &spec);
        let twice = apply_view(&once, &spec);
        for (a, b) in image.iter().zip(twice.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_image_maps_to_photometric_constant() {
        let color = [0.25f32, 0.5, 0.75];
        let mut image = Array3::<f32>::zeros((3, 20, 20));
        for ch in 0..3 {
            image.slice_mut(ndarray::s![ch, .., ..]).fill(color[ch]);
        }
        let spec = ViewSpec {
            crop: (0.1, 0.2, 0.8, 0.9),
            hflip: true,
            brightness: 0.1,
            contrast: 1.2,
            hue_shift: 0.4,
            out_size: 8,
        };
        let expected = photometric(color, &spec);
        let out = apply_view(&image, &spec);
        for oy in 0..8 {
            for ox in 0..8 {
                for ch in 0..3 {
                    assert!((out[(ch, oy, ox)] - expected[ch]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn identical_specs_match_identically() {
        let spec = ViewSpec { crop: (0.1, 0.1, 0.7, 0.7), ..ViewSpec::identity(32) };
        let m = correspondence_grid(&spec, &spec, 4);
        assert_eq!(m.pairs.len(), 16);
        for (a, b) in &m.pairs {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mirrored_spec_matches_mirrored_columns() {
        let spec = ViewSpec { crop: (0.2, 0.0, 0.9, 0.7), ..ViewSpec::identity(32) };
        let flipped = ViewSpec { hflip: true, ..spec };
        let m = correspondence_grid(&spec, &flipped, 4);
        assert_eq!(m.pairs.len(), 16);
        for ((ra, ca), (rb, cb)) in &m.pairs {
            assert_eq!(ra, rb);
            assert_eq!(*cb, 3 - ca);
        }
    }

    #[test]
    fn quarter_offset_crops_match_hand_geometry() {
        let a = ViewSpec { crop: (0.0, 0.0, 0.5, 0.5), ..ViewSpec::identity(32) };
        let b = ViewSpec { crop: (0.25, 0.25, 0.75, 0.75), ..ViewSpec::identity(32) };
        let m = correspondence_grid(&a, &b, 4);
        assert_eq!(m.pairs.len(), 4);
        for ((ra, ca), (rb, cb)) in &m.pairs {
            assert!((2..=3).contains(ra) && (2..=3).contains(ca));
            assert_eq!(*rb, ra - 2);
            assert_eq!(*cb, ca - 2);
        }
    }

    #[test]
    fn scale_consistency_on_aligned_families() {
        // families where grid halving provably commutes with the matching
        // rule: identical specs, mirrored specs, and equal-size crops offset
        // by a whole number of coarse cells
        let specs: Vec<(ViewSpec, ViewSpec)> = vec![
            {
                let s = ViewSpec { crop: (0.13, 0.2, 0.77, 0.84), ..ViewSpec::identity(32) };
                (s, s)
            },
            {
                let s = ViewSpec { crop: (0.05, 0.1, 0.65, 0.7), ..ViewSpec::identity(32) };
                (s, ViewSpec { hflip: true, ..s })
            },
            (
                ViewSpec { crop: (0.0, 0.0, 0.5, 0.5), ..ViewSpec::identity(32) },
                ViewSpec { crop: (0.25, 0.25, 0.75, 0.75), ..ViewSpec::identity(32) },
            ),
        ];
        for (a, b) in specs {
            for g in [4usize, 8] {
                let fine = correspondence_grid(&a, &b, g);
                let coarse = correspondence_grid(&a, &b, g / 2);
                for ((ra, ca), (rb, cb)) in &fine.pairs {
                    let want = ((ra / 2, ca / 2), (rb / 2, cb / 2));
                    assert!(
                        coarse.pairs.contains(&want),
                        "fine ({ra},{ca})->({rb},{cb}) at g={g} not in coarse matches"
                    );
                }
            }
        }
    }

    #[test]
    fn exact_matches_are_symmetric() {
        let mut rng = substream(6, "sym");
        let policy = ViewPolicy::default_policy(32);
        for _ in 0..50 {
            let (a, b) = sample_view_pair(&mut rng, &policy);
            let fwd = correspondence_grid(&a, &b, 8);
            let bwd = correspondence_grid(&b, &a, 8);
            // pairs whose mapped point is an exact B cell center map back
            for (ca, cb) in &fwd.pairs {
                if bwd.pairs.contains(&(*cb, *ca)) {
                    continue;
                }
                // non-exact matches may be asymmetric; exactness check:
                // re-map and require the asymmetric ones to be off-center.
                let g = 8.0;
                let mut u = (ca.1 as f64 + 0.5) / g;
                if a.hflip {
                    u = 1.0 - u;
                }
                let xi = a.crop.0 + u * (a.crop.2 - a.crop.0);
                let mut bu = (xi - b.crop.0) / (b.crop.2 - b.crop.0);
                if b.hflip {
                    bu = 1.0 - bu;
                }
                let off = (bu * g - (cb.1 as f64 + 0.5)).abs();
                assert!(off > 1e-9, "exact-center match not symmetric");
            }
        }
    }
}
