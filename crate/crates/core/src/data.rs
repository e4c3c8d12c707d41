//! Synthetic multi-shape scenes: generation, persistence, and loading.
//!
//! Scenes double as pre-training images (labels ignored) and as a 4-way
//! semantic segmentation benchmark (background, circle, square, triangle).
//! Everything is a pure function of the seed, so regenerating a dataset is
//! byte-identical.

use crate::error::{DeconError, Result};
use crate::par::map_indexed;
use crate::rng::substream_indexed;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const MANIFEST_VERSION: &str = "decon-data-1";
pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeClass {
    Circle = 1,
    Square = 2,
    Triangle = 3,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShapeInfo {
    pub class: ShapeClass,
    /// Center in pixel coordinates.
    pub center: (f32, f32),
    /// Characteristic half-extent in pixels.
    pub scale: f32,
    pub color: [f32; 3],
}

/// One rendered scene. The image is RGB in [0,1], already quantized to the
/// 8-bit grid so PNG round trips are exact; the mask holds class ids.
#[derive(Clone, Debug)]
pub struct ShapeScene {
    pub image: Array3<f32>, // (3, H, W)
    pub mask: Array2<u8>,   // (H, W)
    pub shapes: Vec<ShapeInfo>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestItem {
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: String,
    pub image_size: u32,
    pub count: usize,
    pub seed: u64,
    pub items: Vec<ManifestItem>,
}

fn quantize(v: f32) -> f32 {
    let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    byte as f32 / 255.0
}

/// Saturated color from a hue in [0,1) (HSV with S=V=1).
fn saturated_color(hue: f32) -> [f32; 3] {
    let h = (hue.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    match i {
        0 => [1.0, f, 0.0],
        1 => [1.0 - f, 1.0, 0.0],
        2 => [0.0, 1.0, f],
        3 => [0.0, 1.0 - f, 1.0],
        4 => [f, 0.0, 1.0],
        _ => [1.0, 0.0, 1.0 - f],
    }
}

fn point_in_triangle(px: f32, py: f32, v: &[(f32, f32); 3]) -> bool {
    let sign = |a: (f32, f32), b: (f32, f32), c: (f32, f32)| {
        (a.0 - c.0) * (b.1 - c.1) - (b.0 - c.0) * (a.1 - c.1)
    };
    let d1 = sign((px, py), v[0], v[1]);
    let d2 = sign((px, py), v[1], v[2]);
    let d3 = sign((px, py), v[2], v[0]);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

/// Renders one scene: a low-frequency background gradient plus `n_shapes`
/// randomly placed shapes, later shapes occluding earlier ones. The mask
/// matches drawing order.
pub fn generate_scene(rng: &mut ChaCha8Rng, size: usize, n_shapes: usize) -> Result<ShapeScene> {
    if size < 16 {
        return Err(DeconError::Data(format!("scene size {size} < 16")));
    }
    if n_shapes > 8 {
        return Err(DeconError::Data(format!("n_shapes {n_shapes} > 8")));
    }
    let s = size as f32;
    let mut image = Array3::<f32>::zeros((3, size, size));
    let mut mask = Array2::<u8>::zeros((size, size));

    // Background: soft color ramp between two random muted colors.
    let c0: [f32; 3] = [
        rng.gen_range(0.1..0.5),
        rng.gen_range(0.1..0.5),
        rng.gen_range(0.1..0.5),
    ];
    let c1: [f32; 3] = [
        rng.gen_range(0.3..0.7),
        rng.gen_range(0.3..0.7),
        rng.gen_range(0.3..0.7),
    ];
    let dir = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (dir.cos(), dir.sin());
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f32 / s) * dx + (y as f32 / s) * dy + 1.0) / 2.0;
            let t = t.clamp(0.0, 1.0);
            for ch in 0..3 {
                image[(ch, y, x)] = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
        }
    }

    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let class = match rng.gen_range(0..3) {
            0 => ShapeClass::Circle,
            1 => ShapeClass::Square,
            _ => ShapeClass::Triangle,
        };
        let cx = rng.gen_range(0.0..s);
        let cy = rng.gen_range(0.0..s);
        let scale = rng.gen_range(s / 8.0..s / 3.0);
        let color = saturated_color(rng.gen_range(0.0..1.0));
        let id = class as u8;
        for y in 0..size {
            for x in 0..size {
                // pixel center
                let px = x as f32 + 0.5;
                let py = y as f32 + 0.5;
                let inside = match class {
                    ShapeClass::Circle => {
                        (px - cx).powi(2) + (py - cy).powi(2) <= scale * scale
                    }
                    ShapeClass::Square => {
                        (px - cx).abs() <= scale && (py - cy).abs() <= scale
                    }
                    ShapeClass::Triangle => {
                        let v = [
                            (cx, cy - scale),
                            (cx - scale, cy + scale),
                            (cx + scale, cy + scale),
                        ];
                        point_in_triangle(px, py, &v)
                    }
                };
                if inside {
                    mask[(y, x)] = id;
                    for ch in 0..3 {
                        image[(ch, y, x)] = color[ch];
                    }
                }
            }
        }
        shapes.push(ShapeInfo { class, center: (cx, cy), scale, color });
    }

    image.mapv_inplace(quantize);
    Ok(ShapeScene { image, mask, shapes })
}

fn image_to_rgb8(image: &Array3<f32>) -> Vec<u8> {
    let (_, h, w) = image.dim();
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push((image[(ch, y, x)].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    buf
}

fn rgb8_to_image(buf: &[u8], h: usize, w: usize) -> Array3<f32> {
    let mut image = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                image[(ch, y, x)] = buf[(y * w + x) * 3 + ch] as f32 / 255.0;
            }
        }
    }
    image
}

fn write_png_rgb(path: &Path, image: &Array3<f32>) -> Result<()> {
    let (_, h, w) = image.dim();
    let buf = image_to_rgb8(image);
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::Rgb8)
        .map_err(|e| DeconError::Data(format!("writing {}: {e}", path.display())))
}

fn write_png_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: Vec<u8> = mask.iter().copied().collect();
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::L8)
        .map_err(|e| DeconError::Data(format!("writing {}: {e}", path.display())))
}

/// Per-item generation policy used by `generate_dataset`: 1..=4 shapes.
fn scene_for_item(seed: u64, index: u64, size: usize) -> Result<ShapeScene> {
    let mut rng = substream_indexed(seed, "data-item", index);
    let n_shapes = rng.gen_range(1..=4);
    generate_scene(&mut rng, size, n_shapes)
}

/// Generates `n_items` scenes under `out_dir` as `img/NNNN.png` +
/// `mask/NNNN.png` plus a `manifest.json`. Items are generated in parallel
/// from per-item derived RNG streams, so the output is order-independent.
pub fn generate_dataset(
    seed: u64,
    image_size: u32,
    n_items: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let img_dir = out_dir.join("img");
    let mask_dir = out_dir.join("mask");
    for d in [out_dir, &img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(|e| DeconError::io(d.display().to_string(), e))?;
    }
    let size = image_size as usize;
    let results: Vec<Result<ManifestItem>> = map_indexed(n_items, |i| {
        let scene = scene_for_item(seed, i as u64, size)?;
        let img_rel = format!("img/{i:04}.png");
        let mask_rel = format!("mask/{i:04}.png");
        write_png_rgb(&out_dir.join(&img_rel), &scene.image)?;
        write_png_mask(&out_dir.join(&mask_rel), &scene.mask)?;
        Ok(ManifestItem { image: img_rel, mask: mask_rel })
    });
    let mut items = Vec::with_capacity(n_items);
    for r in results {
        items.push(r?);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.to_string(),
        image_size,
        count: n_items,
        seed,
        items,
    };
    let manifest_path = out_dir.join("manifest.json");
    let mut f = std::fs::File::create(&manifest_path)
        .map_err(|e| DeconError::io(manifest_path.display().to_string(), e))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    f.write_all(text.as_bytes())
        .map_err(|e| DeconError::io(manifest_path.display().to_string(), e))?;
    Ok(manifest)
}

/// Reads and validates a manifest.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| DeconError::io(path.display().to_string(), e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DeconError::Data(format!("manifest: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DeconError::Data(format!(
            "manifest version `{}` != expected `{MANIFEST_VERSION}`",
            manifest.version
        )));
    }
    if manifest.count != manifest.items.len() {
        return Err(DeconError::Data(format!(
            "manifest count {} != item list length {}",
            manifest.count,
            manifest.items.len()
        )));
    }
    Ok(manifest)
}

fn decode_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| DeconError::Data(format!("reading {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Ok(rgb8_to_image(img.as_raw(), h as usize, w as usize))
}

fn decode_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| DeconError::Data(format!("reading {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let mut mask = Array2::<u8>::zeros((h as usize, w as usize));
    for (y, row) in img.rows().enumerate() {
        for (x, p) in row.enumerate() {
            mask[(y, x)] = p.0[0];
        }
    }
    Ok(mask)
}

/// Loads every scene of a dataset in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<ShapeScene>> {
    let manifest = load_manifest(dir)?;
    let results: Vec<Result<ShapeScene>> = map_indexed(manifest.items.len(), |i| {
        let item = &manifest.items[i];
        let image = decode_rgb(&dir.join(&item.image))?;
        let mask = decode_mask(&dir.join(&item.mask))?;
        if image.dim().1 != mask.dim().0 || image.dim().2 != mask.dim().1 {
            return Err(DeconError::Data(format!(
                "item {i}: image/mask size mismatch"
            )));
        }
        Ok(ShapeScene { image, mask, shapes: Vec::new() })
    });
    let mut scenes = Vec::with_capacity(manifest.items.len());
    for r in results {
        scenes.push(r?);
    }
    Ok(scenes)
}

/// Deterministic train/val split by index: every fifth item is held out.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for i in 0..n {
        if i % 5 == 4 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}
