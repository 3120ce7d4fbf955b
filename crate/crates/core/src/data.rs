//! Procedural "shapes world": aligned (image, mask, sketch, depth) tuples
//! rendered from compact scene specs, plus dataset persistence.
//!
//! Everything is a pure function of the scene seed. Images are quantized to
//! the 8-bit grid at render time so PPM/PGM round-trips are lossless.

use crate::error::{Error, Result};
use crate::models::{Condition, TaskKind};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

/// Ground-truth resolution.
pub const IMG_HW: usize = 32;
/// Number of foreground shape classes.
pub const NUM_CLASSES: usize = 4;
/// Descriptor layout: class counts (4) + background palette one-hot (4).
pub const DESCRIPTOR_DIM: usize = NUM_CLASSES + NUM_BG_PALETTES;
pub const NUM_BG_PALETTES: usize = 4;
pub const MAX_OBJECTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Star,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; NUM_CLASSES] = [
        ShapeClass::Circle,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Star,
    ];

    /// Mask index; 0 is background.
    pub fn mask_id(&self) -> u8 {
        match self {
            ShapeClass::Circle => 1,
            ShapeClass::Square => 2,
            ShapeClass::Triangle => 3,
            ShapeClass::Star => 4,
        }
    }
}

/// Canonical class colors (8-bit RGB); shade variants scale these.
pub const CLASS_COLORS: [[u8; 3]; NUM_CLASSES] = [
    [220, 60, 50],  // circle: red
    [60, 180, 75],  // square: green
    [55, 100, 220], // triangle: blue
    [240, 200, 40], // star: yellow
];

pub const BG_PALETTES: [[u8; 3]; NUM_BG_PALETTES] = [
    [45, 45, 45],
    [205, 205, 210],
    [30, 75, 70],
    [95, 60, 110],
];

pub const SHADE_FACTORS: [f32; 3] = [0.85, 1.0, 1.15];

fn shaded_color(class: ShapeClass, shade: usize) -> [u8; 3] {
    let base = CLASS_COLORS[ShapeClass::ALL.iter().position(|c| *c == class).unwrap()];
    let f = SHADE_FACTORS[shade];
    [
        (base[0] as f32 * f).round().clamp(0.0, 255.0) as u8,
        (base[1] as f32 * f).round().clamp(0.0, 255.0) as u8,
        (base[2] as f32 * f).round().clamp(0.0, 255.0) as u8,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: ShapeClass,
    /// Center in canvas units `[0, 1]`.
    pub cx: f32,
    pub cy: f32,
    /// Circumradius in canvas units.
    pub size: f32,
    /// Shade index into [`SHADE_FACTORS`].
    pub shade: usize,
    /// 1 = farthest; higher ranks draw on top.
    pub depth_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub background: usize,
    pub seed: u64,
}

/// One aligned scene: image plus all conditioning maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, 32, 32]` in `[-1, 1]` on the 8-bit grid.
    pub image: ArrayD<f32>,
    /// Per-pixel class indices, 0 = background.
    pub mask: Array2<u8>,
    /// Binary edge map.
    pub sketch: Array2<u8>,
    /// Normalized depth ranks in `[0, 1]`, 0 = background.
    pub depth: Array2<f32>,
    pub descriptor: Vec<f32>,
    pub spec: SceneSpec,
}

impl Sample {
    pub fn condition(&self, task: TaskKind) -> Condition {
        match task {
            TaskKind::Mask => Condition::Mask(self.mask.clone()),
            TaskKind::Sketch => Condition::Sketch(self.sketch.clone()),
            TaskKind::Geometry => Condition::Geometry(self.depth.clone()),
        }
    }

    pub fn descriptor_condition(&self) -> Condition {
        Condition::Descriptor(self.descriptor.clone())
    }

    /// Area-averaged 16x16 version of the image for the base model.
    pub fn image16(&self) -> ArrayD<f32> {
        crate::nn::downsample2x(&self.image)
    }
}

/// Deterministic scene from a seed: 1-5 objects with uniform class, shade and
/// position draws, unique shuffled depth ranks, uniform background palette.
pub fn generate_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_objects = rng.random_range(1..=MAX_OBJECTS);
    let background = rng.random_range(0..NUM_BG_PALETTES);
    let mut ranks: Vec<usize> = (1..=n_objects).collect();
    // Fisher-Yates with the scene rng keeps ranks a uniform permutation.
    for i in (1..ranks.len()).rev() {
        let j = rng.random_range(0..=i);
        ranks.swap(i, j);
    }
    let margin = 1.0 / IMG_HW as f32;
    let objects = (0..n_objects)
        .map(|i| {
            let class = ShapeClass::ALL[rng.random_range(0..NUM_CLASSES)];
            let size = rng.random_range(0.10..0.26f32);
            let lo = size + margin;
            let hi = 1.0 - size - margin;
            let cx = rng.random_range(lo..hi);
            let cy = rng.random_range(lo..hi);
            let shade = rng.random_range(0..SHADE_FACTORS.len());
            ObjectSpec {
                class,
                cx,
                cy,
                size,
                shade,
                depth_rank: ranks[i],
            }
        })
        .collect();
    SceneSpec {
        objects,
        background,
        seed,
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

fn star_vertices(o: &ObjectSpec) -> [(f32, f32); 10] {
    let mut v = [(0.0f32, 0.0f32); 10];
    let inner = 0.45 * o.size;
    for (i, slot) in v.iter_mut().enumerate() {
        let r = if i % 2 == 0 { o.size } else { inner };
        // Start pointing up (screen coordinates grow downward).
        let ang = std::f32::consts::PI * (-0.5 + i as f32 / 5.0);
        *slot = (o.cx + r * ang.cos(), o.cy + r * ang.sin());
    }
    v
}

/// Point-in-shape test in canvas units.
pub fn contains(o: &ObjectSpec, px: f32, py: f32) -> bool {
    let dx = px - o.cx;
    let dy = py - o.cy;
    match o.class {
        ShapeClass::Circle => dx * dx + dy * dy <= o.size * o.size,
        ShapeClass::Square => {
            let half = 0.85 * o.size;
            dx.abs() <= half && dy.abs() <= half
        }
        ShapeClass::Triangle => {
            let mut v = [(0.0f32, 0.0f32); 3];
            for (i, slot) in v.iter_mut().enumerate() {
                let ang = std::f32::consts::PI * (-0.5 + 2.0 * i as f32 / 3.0);
                *slot = (o.cx + o.size * ang.cos(), o.cy + o.size * ang.sin());
            }
            point_in_triangle(px, py, &v)
        }
        ShapeClass::Star => {
            let v = star_vertices(o);
            let c = (o.cx, o.cy);
            (0..10).any(|i| {
                let tri = [c, v[i], v[(i + 1) % 10]];
                point_in_triangle(px, py, &tri)
            })
        }
    }
}

/// Analytic footprint area in canvas units, for rasterization oracles.
pub fn analytic_area(o: &ObjectSpec) -> f64 {
    let r = o.size as f64;
    match o.class {
        ShapeClass::Circle => std::f64::consts::PI * r * r,
        ShapeClass::Square => (1.7 * r) * (1.7 * r),
        ShapeClass::Triangle => 3.0 * 3f64.sqrt() / 4.0 * r * r,
        ShapeClass::Star => {
            let inner = 0.45 * r;
            10.0 * 0.5 * r * inner * (std::f64::consts::PI / 5.0).sin()
        }
    }
}

fn u8_to_f32(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

fn f32_to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Rasterize a scene with depth-rank occlusion.
///
/// Image, mask and depth all use the same exact pixel-center test, so the
/// image re-segments onto the mask analytically. Pixel values live on the
/// 8-bit grid so PPM/PGM round-trips are lossless.
pub fn render(spec: &SceneSpec) -> Sample {
    let hw = IMG_HW;
    let bg = BG_PALETTES[spec.background];
    // Sort far to near once; the nearest containing object wins a pixel.
    let mut order: Vec<&ObjectSpec> = spec.objects.iter().collect();
    order.sort_by_key(|o| o.depth_rank);

    let mut image = ArrayD::<f32>::zeros(IxDyn(&[3, hw, hw]));
    let mut mask = Array2::<u8>::zeros((hw, hw));
    let mut depth = Array2::<f32>::zeros((hw, hw));
    let n = spec.objects.len().max(1) as f32;

    for y in 0..hw {
        for x in 0..hw {
            let px = (x as f32 + 0.5) / hw as f32;
            let py = (y as f32 + 0.5) / hw as f32;
            let mut color = bg;
            let mut cls = 0u8;
            let mut rank = 0usize;
            for o in &order {
                if contains(o, px, py) {
                    color = shaded_color(o.class, o.shade);
                    cls = o.class.mask_id();
                    rank = o.depth_rank;
                }
            }
            for c in 0..3 {
                image[[c, y, x]] = u8_to_f32(color[c]);
            }
            mask[(y, x)] = cls;
            // Quantized to the 8-bit grid so PGM round-trips exactly.
            let d = if rank == 0 { 0.0 } else { rank as f32 / n };
            depth[(y, x)] = (d * 255.0).round() / 255.0;
        }
    }

    let sketch = extract_sketch(&image, SKETCH_QUANTILE);

    let mut descriptor = vec![0.0f32; DESCRIPTOR_DIM];
    for o in &spec.objects {
        descriptor[o.class.mask_id() as usize - 1] += 1.0 / MAX_OBJECTS as f32;
    }
    descriptor[NUM_CLASSES + spec.background] = 1.0;

    Sample {
        image,
        mask,
        sketch,
        depth,
        descriptor,
        spec: spec.clone(),
    }
}

pub const SKETCH_QUANTILE: f64 = 0.9;

/// Sobel gradient magnitude over luminance, thresholded at a quantile.
///
/// A constant image has zero gradient everywhere and yields an empty sketch.
pub fn extract_sketch(image: &ArrayD<f32>, quantile: f64) -> Array2<u8> {
    let v = image
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .expect("[3,H,W]");
    let (_, h, w) = v.dim();
    let mut lum = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            lum[(y, x)] = 0.299 * v[(0, y, x)] + 0.587 * v[(1, y, x)] + 0.114 * v[(2, y, x)];
        }
    }
    let at = |y: isize, x: isize| -> f32 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        lum[(yy, xx)]
    };
    let mut grad = Array2::<f32>::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = -at(y - 1, x - 1) - 2.0 * at(y, x - 1) - at(y + 1, x - 1)
                + at(y - 1, x + 1)
                + 2.0 * at(y, x + 1)
                + at(y + 1, x + 1);
            let gy = -at(y - 1, x - 1) - 2.0 * at(y - 1, x) - at(y - 1, x + 1)
                + at(y + 1, x - 1)
                + 2.0 * at(y + 1, x)
                + at(y + 1, x + 1);
            grad[(y as usize, x as usize)] = (gx * gx + gy * gy).sqrt();
        }
    }
    let mut sorted: Vec<f32> = grad.iter().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((sorted.len() - 1) as f64 * quantile).floor() as usize;
    let tau = sorted[idx];
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[(y, x)] = u8::from(grad[(y, x)] > tau && grad[(y, x)] > 1e-6);
        }
    }
    out
}

/// Render a contiguous seed range, in order.
pub fn generate_corpus(seed_start: u64, count: usize) -> Vec<Sample> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| render(&generate_scene(seed_start + i)))
        .collect()
}

// ---------------------------------------------------------------------------
// Persistence: binary PPM (P6) images, PGM (P5) maps, JSONL metadata.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MetaRecord {
    index: usize,
    spec: SceneSpec,
    descriptor: Vec<f32>,
}

fn write_binary(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_binary(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_ppm(path: &Path, image: &ArrayD<f32>) -> Result<()> {
    let v = image
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| Error::Shape("ppm image must be [3,H,W]".into()))?;
    let (_, h, w) = v.dim();
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push(f32_to_u8(v[(c, y, x)]));
            }
        }
    }
    write_binary(path, &bytes)
}

fn parse_pnm_header(data: &[u8], magic: &str, path: &Path) -> Result<(usize, usize, usize)> {
    let err = |m: &str| Error::Dataset(format!("{}: {m}", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0usize;
    // Header tokens separated by whitespace; `#` comments run to end of line.
    while fields.len() < 4 && pos < data.len() {
        match data[pos] {
            b'#' => {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => pos += 1,
            _ => {
                let start = pos;
                while pos < data.len() && !data[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                fields.push(std::str::from_utf8(&data[start..pos]).map_err(|_| err("bad header"))?);
            }
        }
    }
    if fields.len() < 4 {
        return Err(err("truncated header"));
    }
    if fields[0] != magic {
        return Err(err(&format!("expected {magic}, got {}", fields[0])));
    }
    let w: usize = fields[1].parse().map_err(|_| err("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| err("bad height"))?;
    let maxval: usize = fields[3].parse().map_err(|_| err("bad maxval"))?;
    if maxval != 255 {
        return Err(err("only 8-bit maxval supported"));
    }
    // One whitespace byte separates header from raster.
    Ok((w, h, pos + 1))
}

pub fn read_ppm(path: &Path) -> Result<ArrayD<f32>> {
    let data = read_binary(path)?;
    let (w, h, off) = parse_pnm_header(&data, "P6", path)?;
    let need = w * h * 3;
    if data.len() < off + need {
        return Err(Error::Dataset(format!(
            "{}: raster truncated ({} of {need} bytes)",
            path.display(),
            data.len().saturating_sub(off)
        )));
    }
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[3, h, w]));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[[c, y, x]] = u8_to_f32(data[off + (y * w + x) * 3 + c]);
            }
        }
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, map: &Array2<u8>) -> Result<()> {
    let (h, w) = map.dim();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.iter().copied());
    write_binary(path, &bytes)
}

pub fn read_pgm(path: &Path) -> Result<Array2<u8>> {
    let data = read_binary(path)?;
    let (w, h, off) = parse_pnm_header(&data, "P5", path)?;
    if data.len() < off + w * h {
        return Err(Error::Dataset(format!(
            "{}: raster truncated ({} of {} bytes)",
            path.display(),
            data.len().saturating_sub(off),
            w * h
        )));
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| data[off + y * w + x]))
}

fn depth_to_u8(d: &Array2<f32>) -> Array2<u8> {
    d.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
}

fn depth_from_u8(d: &Array2<u8>) -> Array2<f32> {
    d.mapv(|v| v as f32 / 255.0)
}

/// Write samples into a split directory; layout is one PPM/PGM quartet per
/// sample plus one `meta.jsonl`.
pub fn dataset_write(samples: &[Sample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let meta_path = dir.join("meta.jsonl");
    let mut meta = fs::File::create(&meta_path)
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    for (i, s) in samples.iter().enumerate() {
        write_ppm(&dir.join(format!("img_{i:05}.ppm")), &s.image)?;
        write_pgm(&dir.join(format!("mask_{i:05}.pgm")), &s.mask)?;
        write_pgm(&dir.join(format!("sketch_{i:05}.pgm")), &s.sketch)?;
        write_pgm(&dir.join(format!("depth_{i:05}.pgm")), &depth_to_u8(&s.depth))?;
        let rec = MetaRecord {
            index: i,
            spec: s.spec.clone(),
            descriptor: s.descriptor.clone(),
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::Dataset(format!("sample {i}: metadata encode: {e}")))?;
        meta.write_all(line.as_bytes())
            .and_then(|_| meta.write_all(b"\n"))
            .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    }
    Ok(())
}

pub fn dataset_read(dir: &Path) -> Result<Vec<Sample>> {
    let meta_path = dir.join("meta.jsonl");
    let file =
        fs::File::open(&meta_path).map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let mut samples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(meta_path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetaRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Dataset(format!("sample {lineno}: metadata decode: {e}"))
        })?;
        let i = rec.index;
        fn with_ctx<T>(r: Result<T>, i: usize, what: &str) -> Result<T> {
            r.map_err(|e| Error::Dataset(format!("sample {i}: {what}: {e}")))
        }
        let image = with_ctx(read_ppm(&dir.join(format!("img_{i:05}.ppm"))), i, "image")?;
        let mask = with_ctx(read_pgm(&dir.join(format!("mask_{i:05}.pgm"))), i, "mask")?;
        let sketch = with_ctx(read_pgm(&dir.join(format!("sketch_{i:05}.pgm"))), i, "sketch")?;
        let depth_u8 = with_ctx(read_pgm(&dir.join(format!("depth_{i:05}.pgm"))), i, "depth")?;
        samples.push(Sample {
            image,
            mask,
            sketch,
            depth: depth_from_u8(&depth_u8),
            descriptor: rec.descriptor,
            spec: rec.spec,
        });
    }
    Ok(samples)
}

/// Count PPM files in a directory without loading them.
pub fn dataset_len(dir: &Path) -> Result<usize> {
    let meta_path = dir.join("meta.jsonl");
    let file =
        fs::File::open(&meta_path).map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let mut n = 0usize;
    let mut reader = BufReader::new(file);
    let mut buf = String::new();
    while reader.read_to_string(&mut buf).map_err(|e| Error::io(meta_path.display().to_string(), e))? > 0 {}
    for l in buf.lines() {
        if !l.trim().is_empty() {
            n += 1;
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_pure_functions_of_seed() {
        for seed in [0u64, 1, 42, 9999] {
            assert_eq!(generate_scene(seed), generate_scene(seed));
        }
        assert_ne!(generate_scene(1), generate_scene(2));
    }

    #[test]
    fn object_count_histogram_and_bounds() {
        let n = 10_000usize;
        let mut hist = [0usize; MAX_OBJECTS + 1];
        for seed in 0..n as u64 {
            let spec = generate_scene(seed);
            hist[spec.objects.len()] += 1;
            let mut ranks: Vec<usize> = spec.objects.iter().map(|o| o.depth_rank).collect();
            ranks.sort_unstable();
            let want: Vec<usize> = (1..=spec.objects.len()).collect();
            assert_eq!(ranks, want, "ranks must be a permutation");
            for o in &spec.objects {
                assert!(o.cx - o.size >= 0.0 && o.cx + o.size <= 1.0);
                assert!(o.cy - o.size >= 0.0 && o.cy + o.size <= 1.0);
            }
        }
        // Uniform over 1..=5: 3-sigma binomial band around n/5.
        let p = 1.0 / MAX_OBJECTS as f64;
        let tol = 3.0 * (n as f64 * p * (1.0 - p)).sqrt();
        for count in 1..=MAX_OBJECTS {
            let diff = (hist[count] as f64 - n as f64 * p).abs();
            assert!(diff < tol, "count {count}: {} vs {}", hist[count], n as f64 * p);
        }
    }

    #[test]
    fn empty_scene_renders_uniform_background() {
        let spec = SceneSpec {
            objects: vec![],
            background: 1,
            seed: 0,
        };
        let s = render(&spec);
        let bg = BG_PALETTES[1];
        for c in 0..3 {
            let want = u8_to_f32(bg[c]);
            assert!(s
                .image
                .index_axis(ndarray::Axis(0), c)
                .iter()
                .all(|&v| v == want));
        }
        assert!(s.mask.iter().all(|&m| m == 0));
        assert!(s.sketch.iter().all(|&m| m == 0));
        assert!(s.depth.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn mask_area_matches_analytic_footprint() {
        for seed in 0..40u64 {
            let mut spec = generate_scene(seed);
            // Single object, no occlusion.
            spec.objects.truncate(1);
            spec.objects[0].depth_rank = 1;
            let s = render(&spec);
            let o = &spec.objects[0];
            let pixels = s.mask.iter().filter(|&&m| m == o.class.mask_id()).count();
            let analytic = analytic_area(o) * (IMG_HW * IMG_HW) as f64;
            let rel = (pixels as f64 - analytic).abs() / analytic;
            assert!(
                rel < 0.15,
                "seed {seed}: {pixels} px vs analytic {analytic:.1}"
            );
        }
    }

    #[test]
    fn occlusion_nearer_rank_wins() {
        let spec = SceneSpec {
            objects: vec![
                ObjectSpec {
                    class: ShapeClass::Square,
                    cx: 0.5,
                    cy: 0.5,
                    size: 0.2,
                    shade: 1,
                    depth_rank: 1,
                },
                ObjectSpec {
                    class: ShapeClass::Circle,
                    cx: 0.5,
                    cy: 0.5,
                    size: 0.15,
                    shade: 1,
                    depth_rank: 2,
                },
            ],
            background: 0,
            seed: 0,
        };
        let s = render(&spec);
        // Center pixel: circle (rank 2, nearer) must win.
        assert_eq!(s.mask[(16, 16)], ShapeClass::Circle.mask_id());
        assert_eq!(s.depth[(16, 16)], 1.0);
        // A square corner outside the circle keeps the square class.
        let corner_px = ((0.5 + 0.85 * 0.2 - 0.02) * IMG_HW as f32) as usize;
        assert_eq!(s.mask[(corner_px, corner_px)], ShapeClass::Square.mask_id());
        let d = s.depth[(corner_px, corner_px)];
        assert!((d - (255.0f32 * 0.5).round() / 255.0).abs() < 1e-6);
    }

    #[test]
    fn sample_maps_are_consistent() {
        for seed in 100..140u64 {
            let spec = generate_scene(seed);
            let s = render(&spec);
            for y in 0..IMG_HW {
                for x in 0..IMG_HW {
                    let cls = s.mask[(y, x)];
                    let px = (x as f32 + 0.5) / IMG_HW as f32;
                    let py = (y as f32 + 0.5) / IMG_HW as f32;
                    if cls > 0 {
                        // Non-background mask pixels lie inside some object of
                        // that class, and depth is that object's rank.
                        let inside = spec
                            .objects
                            .iter()
                            .any(|o| o.class.mask_id() == cls && contains(o, px, py));
                        assert!(inside, "seed {seed} pixel ({y},{x})");
                        assert!(s.depth[(y, x)] > 0.0);
                    } else {
                        assert_eq!(s.depth[(y, x)], 0.0);
                    }
                }
            }
            assert!(s.sketch.iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn sketch_of_constant_image_is_empty_and_binary() {
        let img = ArrayD::from_elem(IxDyn(&[3, 32, 32]), 0.25f32);
        let sk = extract_sketch(&img, SKETCH_QUANTILE);
        assert!(sk.iter().all(|&v| v == 0));
    }

    #[test]
    fn sketch_traces_square_boundary() {
        let spec = SceneSpec {
            objects: vec![ObjectSpec {
                class: ShapeClass::Square,
                cx: 0.5,
                cy: 0.5,
                size: 0.25,
                shade: 1,
                depth_rank: 1,
            }],
            background: 0,
            seed: 0,
        };
        let s = render(&spec);
        // Analytic boundary pixels: those whose center is within one pixel of
        // the square edge.
        let half = 0.85 * 0.25;
        let px_sz = 1.0 / IMG_HW as f32;
        let mut boundary = 0usize;
        let mut marked = 0usize;
        for y in 0..IMG_HW {
            for x in 0..IMG_HW {
                let pxc = (x as f32 + 0.5) / IMG_HW as f32 - 0.5;
                let pyc = (y as f32 + 0.5) / IMG_HW as f32 - 0.5;
                let d = (pxc.abs().max(pyc.abs()) - half).abs();
                if d <= px_sz {
                    boundary += 1;
                    // Allow the mark within a 1-px neighborhood.
                    let mut hit = false;
                    for yy in y.saturating_sub(1)..=(y + 1).min(IMG_HW - 1) {
                        for xx in x.saturating_sub(1)..=(x + 1).min(IMG_HW - 1) {
                            hit |= s.sketch[(yy, xx)] == 1;
                        }
                    }
                    if hit {
                        marked += 1;
                    }
                }
            }
        }
        assert!(boundary > 0);
        let frac = marked as f64 / boundary as f64;
        assert!(frac >= 0.9, "only {frac:.2} of boundary marked");
    }

    #[test]
    fn dataset_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<Sample> = (0..5).map(|s| render(&generate_scene(s))).collect();
        dataset_write(&samples, dir.path()).unwrap();
        let back = dataset_read(dir.path()).unwrap();
        assert_eq!(samples.len(), back.len());
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_file_names_offender() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<Sample> = (0..3).map(|s| render(&generate_scene(s))).collect();
        dataset_write(&samples, dir.path()).unwrap();
        // Truncate one raster file.
        let victim = dir.path().join("img_00001.ppm");
        let data = fs::read(&victim).unwrap();
        fs::write(&victim, &data[..data.len() / 2]).unwrap();
        let err = dataset_read(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sample 1"), "got: {msg}");
        assert!(msg.contains("truncated"), "got: {msg}");
    }

    #[test]
    fn corpus_generation_is_reproducible_and_ordered() {
        let a = generate_corpus(500, 32);
        let b = generate_corpus(500, 32);
        assert_eq!(a, b);
        assert_eq!(a[3].spec.seed, 503);
    }
}
