//! Procedural six-task scenes and the on-disk dataset format.
//!
//! A scene is a background plane at depth 1 with 3 to 8 solids seen from
//! above under orthographic projection. Each solid is a height field
//! `A·h(u, v)` over its footprint, so depth, normals and occlusion are
//! analytic. All maps are stored as `f32`; shading is computed from the
//! stored normals so the dataset is self-consistent to rounding.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::Task;
use crate::error::{dim_err, Error, Result};
use crate::loss::TaskTarget;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 8;
pub const BACKGROUND: u16 = 7;
pub const KEYPOINT_SIGMA: f64 = 1.5;
const NOISE_STD: f64 = 0.01;
const MAGIC: &[u8; 4] = b"MTDS";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Sphere,
    Box,
    Cylinder,
    Cone,
    TorusDisc,
    Pyramid,
    Wedge,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 7] = [
        ShapeClass::Sphere,
        ShapeClass::Box,
        ShapeClass::Cylinder,
        ShapeClass::Cone,
        ShapeClass::TorusDisc,
        ShapeClass::Pyramid,
        ShapeClass::Wedge,
    ];

    pub fn label(self) -> u16 {
        self as u16
    }

    fn has_corners(self) -> bool {
        matches!(
            self,
            ShapeClass::Box | ShapeClass::Pyramid | ShapeClass::Wedge
        )
    }

    /// Height in [0, 1] and its gradient at footprint coordinates `(u, v)`,
    /// or `None` outside the footprint.
    fn height(self, u: f64, v: f64) -> Option<(f64, f64, f64)> {
        let rho = (u * u + v * v).sqrt();
        match self {
            ShapeClass::Sphere => {
                if rho >= 1.0 {
                    return None;
                }
                let h = (1.0 - rho * rho).sqrt();
                let hs = h.max(1e-3);
                Some((h, -u / hs, -v / hs))
            }
            ShapeClass::Box => (u.abs() < 0.8 && v.abs() < 0.8).then_some((1.0, 0.0, 0.0)),
            ShapeClass::Cylinder => {
                let t = v / 0.6;
                if u.abs() >= 1.0 || t.abs() >= 1.0 {
                    return None;
                }
                let h = (1.0 - t * t).sqrt();
                Some((h, 0.0, -t / (0.6 * h.max(1e-3))))
            }
            ShapeClass::Cone => {
                if rho >= 1.0 {
                    return None;
                }
                let r = rho.max(1e-9);
                Some((1.0 - rho, -u / r, -v / r))
            }
            ShapeClass::TorusDisc => {
                if !(0.4..1.0).contains(&rho) {
                    return None;
                }
                let t = (rho - 0.7) / 0.3;
                if t.abs() >= 1.0 {
                    return None;
                }
                let h = (1.0 - t * t).sqrt();
                let dh = -t / (0.3 * h.max(1e-3));
                Some((h, dh * u / rho, dh * v / rho))
            }
            ShapeClass::Pyramid => {
                let m = u.abs().max(v.abs());
                if m >= 1.0 {
                    return None;
                }
                if u.abs() >= v.abs() {
                    Some((1.0 - m, -u.signum(), 0.0))
                } else {
                    Some((1.0 - m, 0.0, -v.signum()))
                }
            }
            ShapeClass::Wedge => {
                (u.abs() < 1.0 && v.abs() < 1.0).then_some(((1.0 - u) / 2.0, -0.5, 0.0))
            }
        }
    }

    /// Keypoint locations in footprint coordinates.
    fn keypoints(self) -> [(f64, f64); 4] {
        let e = match self {
            ShapeClass::Box => 0.8,
            _ => 1.0,
        };
        if self.has_corners() {
            [(-e, -e), (e, -e), (-e, e), (e, e)]
        } else {
            [(-e, 0.0), (e, 0.0), (0.0, -e), (0.0, e)]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub class: ShapeClass,
    /// Footprint centre in pixels (x, y).
    pub center: (f64, f64),
    /// Footprint radius in pixels.
    pub radius: f64,
    /// Depth of the footprint plane.
    pub depth_offset: f64,
    /// Depth span between footprint and peak.
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    pub shapes: Vec<ShapeSpec>,
    /// Unit light direction with positive z (towards the viewer).
    pub light: [f64; 3],
}

impl SceneSpec {
    pub fn from_seed(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = size as f64;
        let count = rng.gen_range(3..=8);
        let shapes = (0..count)
            .map(|_| ShapeSpec {
                class: ShapeClass::ALL[rng.gen_range(0..ShapeClass::ALL.len())],
                center: (rng.gen_range(0.1..0.9) * s, rng.gen_range(0.1..0.9) * s),
                radius: rng.gen_range(0.08..0.25) * s,
                depth_offset: rng.gen_range(0.55..0.95),
                amplitude: rng.gen_range(0.1..0.35),
            })
            .collect();
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let z: f64 = rng.gen_range(0.5..1.0);
        let r = (1.0 - z * z).sqrt();
        SceneSpec {
            seed,
            size,
            shapes,
            light: [r * theta.cos(), r * theta.sin(), z],
        }
    }
}

/// One sample: RGB input and the six targets, row-major `[H, W, ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBundle {
    pub seed: u64,
    pub size: usize,
    pub rgb: Vec<f32>,
    pub segmentation: Vec<u16>,
    pub depth: Vec<f32>,
    pub normals: Vec<f32>,
    pub keypoints: Vec<f32>,
    pub edges: Vec<f32>,
    pub shading: Vec<f32>,
}

/// Albedo per class; background last.
const ALBEDO: [[f64; 3]; NUM_CLASSES] = [
    [0.9, 0.2, 0.2],
    [0.2, 0.8, 0.3],
    [0.2, 0.3, 0.9],
    [0.9, 0.8, 0.2],
    [0.8, 0.3, 0.8],
    [0.2, 0.8, 0.8],
    [0.95, 0.6, 0.3],
    [0.5, 0.5, 0.5],
];

pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Lambertian shading `clamp(max(0, n·l), 0, 1)`.
pub fn lambert(n: [f64; 3], light: [f64; 3]) -> f64 {
    (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).clamp(0.0, 1.0)
}

pub fn generate_sample(seed: u64, size: usize) -> TaskBundle {
    let spec = SceneSpec::from_seed(seed, size);
    render(&spec)
}

pub fn render(spec: &SceneSpec) -> TaskBundle {
    let size = spec.size;
    let px = size * size;
    let mut depth = vec![1.0f64; px];
    let mut owner: Vec<Option<usize>> = vec![None; px];
    let mut normal = vec![[0.0, 0.0, 1.0]; px];
    let s = size as f64;
    for (si, shape) in spec.shapes.iter().enumerate() {
        let r = shape.radius;
        // Slope factor from footprint coordinates to image-normalized units.
        let k = shape.amplitude * s / r;
        let (x0, x1) = (
            (shape.center.0 - r).floor().max(0.0) as usize,
            ((shape.center.0 + r).ceil() as usize).min(size),
        );
        let (y0, y1) = (
            (shape.center.1 - r).floor().max(0.0) as usize,
            ((shape.center.1 + r).ceil() as usize).min(size),
        );
        for y in y0..y1 {
            for x in x0..x1 {
                let u = (x as f64 + 0.5 - shape.center.0) / r;
                let v = (y as f64 + 0.5 - shape.center.1) / r;
                let Some((h, dhu, dhv)) = shape.class.height(u, v) else {
                    continue;
                };
                let d = shape.depth_offset - shape.amplitude * h;
                let i = y * size + x;
                if d < depth[i] {
                    depth[i] = d;
                    owner[i] = Some(si);
                    let n = [-k * dhu, -k * dhv, 1.0];
                    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                    normal[i] = [n[0] / len, n[1] / len, n[2] / len];
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid noise");
    let mut normals = Vec::with_capacity(px * 3);
    let mut shading = Vec::with_capacity(px);
    let mut segmentation = Vec::with_capacity(px);
    let mut rgb = Vec::with_capacity(px * 3);
    for i in 0..px {
        let n32 = normal[i].map(|c| c as f32);
        normals.extend_from_slice(&n32);
        let shade = lambert(n32.map(f64::from), spec.light) as f32;
        shading.push(shade);
        let label = owner[i].map_or(BACKGROUND, |si| spec.shapes[si].class.label());
        segmentation.push(label);
        for albedo in ALBEDO[label as usize] {
            let v = albedo * f64::from(shade) + noise.sample(&mut rng);
            rgb.push(v.clamp(0.0, 1.0) as f32);
        }
    }

    let gray = Tensor::from_vec(
        &[size, size],
        rgb.chunks(3)
            .map(|p| luminance(p[0].into(), p[1].into(), p[2].into()))
            .collect(),
    );
    let edges = sobel_edges(&gray)
        .expect("image is at least 3x3")
        .data()
        .iter()
        .map(|&v| v as f32)
        .collect();

    let mut keypoints = vec![0.0f64; px];
    let reach = (4.0 * KEYPOINT_SIGMA).ceil() as i64;
    for (si, shape) in spec.shapes.iter().enumerate() {
        for (ku, kv) in shape.class.keypoints() {
            let cx = shape.center.0 + ku * shape.radius * 0.999;
            let cy = shape.center.1 + kv * shape.radius * 0.999;
            let (ix, iy) = (cx.floor() as i64, cy.floor() as i64);
            if ix < 0 || iy < 0 || ix >= size as i64 || iy >= size as i64 {
                continue;
            }
            if owner[iy as usize * size + ix as usize] != Some(si) {
                continue;
            }
            for y in (iy - reach).max(0)..(iy + reach + 1).min(size as i64) {
                for x in (ix - reach).max(0)..(ix + reach + 1).min(size as i64) {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let g = (-(dx * dx + dy * dy) / (2.0 * KEYPOINT_SIGMA * KEYPOINT_SIGMA)).exp();
                    let cell = &mut keypoints[y as usize * size + x as usize];
                    *cell = cell.max(g);
                }
            }
        }
    }

    TaskBundle {
        seed: spec.seed,
        size,
        rgb,
        segmentation,
        depth: depth.iter().map(|&d| d as f32).collect(),
        normals,
        keypoints: keypoints.iter().map(|&v| v as f32).collect(),
        edges,
        shading,
    }
}

/// Sobel gradient magnitude with replicate padding, divided by its maximum.
pub fn sobel_edges(gray: &Tensor) -> Result<Tensor> {
    let &[h, w] = gray.shape() else {
        return dim_err(format!(
            "sobel_edges expects [H, W], got {:?}",
            gray.shape()
        ));
    };
    if h < 3 || w < 3 {
        return dim_err(format!("sobel_edges needs at least 3x3, got {h}x{w}"));
    }
    let mag = sobel_magnitude(gray.data(), h, w);
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let out = if max > 0.0 {
        mag.iter().map(|v| v / max).collect()
    } else {
        vec![0.0; h * w]
    };
    Tensor::new(vec![h, w], out)
}

/// Unnormalized Sobel magnitude.
pub fn sobel_magnitude(g: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        g[y * w + x]
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Per-sample seeds derived from one base seed.
pub fn derive_seeds(base: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    (0..count).map(|_| rng.gen()).collect()
}

/// Renders samples in parallel, in seed order.
pub fn generate_dataset(seeds: &[u64], size: usize) -> Vec<TaskBundle> {
    seeds
        .par_iter()
        .map(|&s| generate_sample(s, size))
        .collect()
}

pub fn generate_dataset_serial(seeds: &[u64], size: usize) -> Vec<TaskBundle> {
    seeds.iter().map(|&s| generate_sample(s, size)).collect()
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Serializes samples to the binary layout (no manifest).
pub fn encode_dataset(samples: &[TaskBundle]) -> Result<Vec<u8>> {
    let size = samples.first().map_or(0, |s| s.size);
    if let Some(bad) = samples.iter().find(|s| s.size != size) {
        return Err(Error::Data(format!(
            "mixed sample sizes {size} and {}",
            bad.size
        )));
    }
    let px = size * size;
    let mut out = Vec::with_capacity(20 + samples.len() * px * 4 * 10);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, samples.len() as u32, size as u32, size as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let put = |out: &mut Vec<u8>, xs: &[f32]| {
        xs.iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
    };
    for s in samples {
        put(&mut out, &s.rgb);
        s.segmentation
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        put(&mut out, &s.depth);
        put(&mut out, &s.normals);
        put(&mut out, &s.keypoints);
        put(&mut out, &s.edges);
        put(&mut out, &s.shading);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u16s(&mut self, n: usize, what: &str) -> Result<Vec<u16>> {
        Ok(self
            .take(n * 2, what)?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses the binary layout. Seeds are filled from `seeds` when given.
pub fn decode_dataset(bytes: &[u8], seeds: Option<&[u64]>) -> Result<Vec<TaskBundle>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected \"MTDS\"".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("sample count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    if h != w {
        return Err(Error::Format {
            offset: 12,
            message: format!("non-square samples {h}x{w}"),
        });
    }
    if let Some(s) = seeds {
        if s.len() != count {
            return Err(Error::Data(format!(
                "manifest lists {} seeds for {count} samples",
                s.len()
            )));
        }
    }
    let px = h * w;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let rgb = r.f32s(px * 3, "rgb")?;
        let segmentation = r.u16s(px, "segmentation")?;
        let depth = r.f32s(px, "depth")?;
        let normals = r.f32s(px * 3, "normals")?;
        let keypoints = r.f32s(px, "keypoints")?;
        let edges = r.f32s(px, "edges")?;
        let shading = r.f32s(px, "shading")?;
        samples.push(TaskBundle {
            seed: seeds.map_or(0, |s| s[i]),
            size: h,
            rgb,
            segmentation,
            depth,
            normals,
            keypoints,
            edges,
            shading,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: "trailing bytes after last sample".into(),
        });
    }
    Ok(samples)
}

/// Writes the dataset file and its `.manifest` sibling (`index seed` lines).
pub fn write_dataset(samples: &[TaskBundle], path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(samples)?)?;
    let mut m = fs::File::create(manifest_path(path))?;
    for (i, s) in samples.iter().enumerate() {
        writeln!(m, "{i} {}", s.seed)?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<u64>> {
    let text = fs::read_to_string(manifest_path(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let mut parts = line.split_whitespace();
            let idx: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad_manifest(i))?;
            let seed: u64 = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad_manifest(i))?;
            if idx != i {
                return Err(bad_manifest(i));
            }
            Ok(seed)
        })
        .collect()
}

fn bad_manifest(line: usize) -> Error {
    Error::Data(format!("malformed manifest line {}", line + 1))
}

pub fn read_dataset(path: &Path) -> Result<Vec<TaskBundle>> {
    let bytes = fs::read(path)?;
    let seeds = read_manifest(path)?;
    decode_dataset(&bytes, Some(&seeds))
}

/// Model inputs and targets for a batch of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub targets: Vec<(Task, TaskTarget)>,
}

impl Batch {
    pub fn target(&self, task: Task) -> Option<&TaskTarget> {
        self.targets
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, v)| v)
    }
}

pub fn make_batch(samples: &[&TaskBundle], tasks: &[Task]) -> Result<Batch> {
    let Some(first) = samples.first() else {
        return Err(Error::Data("empty batch".into()));
    };
    let size = first.size;
    if samples.iter().any(|s| s.size != size) {
        return Err(Error::Data("batch mixes sample sizes".into()));
    }
    let b = samples.len();
    let widen = |f: &dyn Fn(&TaskBundle) -> &[f32]| -> Vec<f64> {
        samples
            .iter()
            .flat_map(|s| f(s).iter().map(|&v| f64::from(v)))
            .collect()
    };
    let images = Tensor::new(vec![b, size, size, 3], widen(&|s| &s.rgb))?;
    let mut targets = Vec::with_capacity(tasks.len());
    for &task in tasks {
        let target = match task {
            Task::S => TaskTarget::Labels(
                samples
                    .iter()
                    .flat_map(|s| s.segmentation.iter().map(|&l| l as usize))
                    .collect(),
            ),
            Task::N => {
                TaskTarget::Dense(Tensor::new(vec![b, size, size, 3], widen(&|s| &s.normals))?)
            }
            Task::D => {
                TaskTarget::Dense(Tensor::new(vec![b, size, size, 1], widen(&|s| &s.depth))?)
            }
            Task::K => TaskTarget::Dense(Tensor::new(
                vec![b, size, size, 1],
                widen(&|s| &s.keypoints),
            )?),
            Task::E => {
                TaskTarget::Dense(Tensor::new(vec![b, size, size, 1], widen(&|s| &s.edges))?)
            }
            Task::R => {
                TaskTarget::Dense(Tensor::new(vec![b, size, size, 1], widen(&|s| &s.shading))?)
            }
        };
        targets.push((task, target));
    }
    Ok(Batch { images, targets })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_edges() {
        let e = sobel_edges(&Tensor::full(&[5, 6], 0.4)).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_response() {
        let (h, w) = (5, 6);
        let g: Vec<f64> = (0..h * w)
            .map(|i| if i % w >= 3 { 0.5 } else { 0.0 })
            .collect();
        let raw = sobel_magnitude(&g, h, w);
        for y in 0..h {
            for x in 0..w {
                let expect = if x == 2 || x == 3 { 4.0 * 0.5 } else { 0.0 };
                assert!((raw[y * w + x] - expect).abs() < 1e-12, "({y},{x})");
            }
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        let samples = vec![generate_sample(3, 8)];
        let mut bytes = encode_dataset(&samples).unwrap();
        assert_eq!(&bytes[..4], b"MTDS");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode_dataset(short, None),
            Err(Error::Format { .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode_dataset(&bytes, None),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn ranges_hold() {
        let s = generate_sample(11, 32);
        assert!(s.depth.iter().all(|d| (0.0..=1.0).contains(d)));
        assert!(s.segmentation.iter().all(|&l| (l as usize) < NUM_CLASSES));
        for n in s.normals.chunks(3) {
            let len = n.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            assert!((len - 1.0).abs() < 1e-6);
        }
    }
}
