//! Procedural shifted-view segmentation benchmark: textured ground plane
//! plus colored convex shapes, rendered under sampled view homographies.
//! Train and test splits differ only in warp strength.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pht::{estimate_homography, CorrPair, Correspondences, Homography};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"DLPD";
pub const DATASET_VERSION: u32 = 1;

/// One rendered sample: image, per-pixel labels, and the view homography
/// that produced it (labels and image share the same warp).
#[derive(Clone, Debug)]
pub struct SegSample {
    /// `[3, H, W]` in [0, 1], quantized to 8-bit steps.
    pub image: Tensor,
    /// Row-major class ids, `H * W` entries.
    pub labels: Vec<u8>,
    /// Canonical-to-view homography.
    pub view_h: Homography,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub img_size: usize,
    pub num_classes: usize,
    pub train: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

enum ShapeKind {
    /// Convex polygon, counterclockwise vertices.
    Polygon(Vec<[f64; 2]>),
    Ellipse {
        center: [f64; 2],
        rx: f64,
        ry: f64,
        rot: f64,
    },
}

struct Shape {
    kind: ShapeKind,
    class: u8,
    color: [f64; 3],
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match &self.kind {
            ShapeKind::Polygon(vs) => {
                for i in 0..vs.len() {
                    let a = vs[i];
                    let b = vs[(i + 1) % vs.len()];
                    let cross = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
                    if cross < 0.0 {
                        return false;
                    }
                }
                true
            }
            ShapeKind::Ellipse {
                center,
                rx,
                ry,
                rot,
            } => {
                let dx = x - center[0];
                let dy = y - center[1];
                let (s, c) = rot.sin_cos();
                let u = (c * dx + s * dy) / rx;
                let v = (-s * dx + c * dy) / ry;
                u * u + v * v <= 1.0
            }
        }
    }
}

/// Layered sinusoidal ground texture attached to the canonical plane.
struct GroundTexture {
    octaves: Vec<(f64, f64, f64, f64)>, // (freq, dir_x, dir_y, phase)
    base: [f64; 3],
}

impl GroundTexture {
    fn value(&self, x: f64, y: f64) -> f64 {
        let mut t = 0.0;
        let mut w = 0.5;
        for &(freq, dx, dy, phase) in &self.octaves {
            t += w * (2.0 * std::f64::consts::PI * freq * (dx * x + dy * y) + phase).sin();
            w *= 0.55;
        }
        t
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let t = 0.18 * self.value(x, y);
        [
            (self.base[0] + t).clamp(0.0, 1.0),
            (self.base[1] + t).clamp(0.0, 1.0),
            (self.base[2] + t).clamp(0.0, 1.0),
        ]
    }
}

struct Scene {
    shapes: Vec<Shape>,
    ground: GroundTexture,
}

impl Scene {
    /// Color and class at a canonical-plane point; shapes later in the list
    /// sit on top.
    fn at(&self, x: f64, y: f64) -> ([f64; 3], u8) {
        for shape in self.shapes.iter().rev() {
            if shape.contains(x, y) {
                return (shape.color, shape.class);
            }
        }
        (self.ground.color(x, y), 0)
    }
}

/// Class ids follow shape geometry, which is stable under any projective
/// view: class k < num_classes - 1 is a convex polygon with k + 2 vertices,
/// the last class is an ellipse. Colors are drawn independently of class,
/// so labels cannot be read off color alone.
fn shape_of_class(
    rng: &mut ChaCha8Rng,
    class: usize,
    num_classes: usize,
    center: [f64; 2],
    rx: f64,
    ry: f64,
    rot: f64,
) -> ShapeKind {
    if class == num_classes - 1 {
        return ShapeKind::Ellipse {
            center,
            rx,
            ry,
            rot,
        };
    }
    // convex polygon inscribed in the rotated ellipse; evenly spread
    // angles with bounded jitter avoid sliver shapes
    let k = class + 2;
    let step = std::f64::consts::TAU / k as f64;
    let angles: Vec<f64> = (0..k)
        .map(|i| i as f64 * step + rng.random_range(-0.25 * step..0.25 * step))
        .collect();
    let (s, c) = rot.sin_cos();
    let verts = angles
        .iter()
        .map(|&a| {
            let ex = rx * a.cos();
            let ey = ry * a.sin();
            [center[0] + c * ex - s * ey, center[1] + s * ex + c * ey]
        })
        .collect();
    ShapeKind::Polygon(verts)
}

fn sample_scene(rng: &mut ChaCha8Rng, num_classes: usize) -> Scene {
    let octaves = (0..3)
        .map(|o| {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            (
                [3.0, 7.0, 13.0][o] * rng.random_range(0.8..1.2),
                angle.cos(),
                angle.sin(),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let ground_base = [
        0.42 + rng.random_range(-0.05..0.05),
        0.46 + rng.random_range(-0.05..0.05),
        0.38 + rng.random_range(-0.05..0.05),
    ];
    let ground = GroundTexture {
        octaves,
        base: ground_base,
    };

    let shape_classes = num_classes - 1;
    let n_shapes = rng.random_range(3..=8usize).max(shape_classes);
    let mut shapes = Vec::with_capacity(n_shapes);
    // jittered anchor ring for the topmost shapes so they cannot occlude
    // each other; one per class guarantees label coverage
    let anchors: Vec<[f64; 2]> = (0..shape_classes)
        .map(|i| {
            let angle = std::f64::consts::TAU * i as f64 / shape_classes as f64;
            [0.5 + 0.2 * angle.cos(), 0.5 + 0.2 * angle.sin()]
        })
        .collect();
    for idx in 0..n_shapes {
        // the topmost shapes cover every class once; the rest draw at
        // random underneath
        let coverage_rank = (idx + shape_classes).checked_sub(n_shapes);
        let class = match coverage_rank {
            Some(r) => (r + 1) as u8,
            None => rng.random_range(1..=shape_classes) as u8,
        };
        // any visible color, kept away from the ground palette
        let color = loop {
            let cand = [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ];
            let dist: f64 = cand
                .iter()
                .zip(&ground_base)
                .map(|(a, b)| (a - b).abs())
                .sum();
            if dist > 0.7 {
                break cand;
            }
        };
        // anchored shapes stay small enough that neighbors on the ring
        // cannot touch even at full jitter
        let chord = 2.0 * 0.2 * (std::f64::consts::PI / shape_classes as f64).sin();
        let rmax = (chord / 2.0 - 0.043).clamp(0.05, 0.13);
        let (center, rx, ry) = match coverage_rank {
            Some(r) => {
                let a = anchors[r];
                (
                    [
                        a[0] + rng.random_range(-0.03..0.03),
                        a[1] + rng.random_range(-0.03..0.03),
                    ],
                    rng.random_range(0.05..rmax),
                    rng.random_range(0.05..rmax),
                )
            }
            None => (
                [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)],
                rng.random_range(0.08..0.2),
                rng.random_range(0.08..0.2),
            ),
        };
        let rot = rng.random_range(0.0..std::f64::consts::PI);
        let kind = shape_of_class(rng, class as usize, num_classes, center, rx, ry, rot);
        shapes.push(Shape { kind, class, color });
    }
    Scene { shapes, ground }
}

/// View homography from corner jitter: each unit-square corner moves by
/// `strength * U(-1, 1)^2` (a fraction of the image extent).
fn sample_view(rng: &mut ChaCha8Rng, strength: f64) -> Result<Homography> {
    if strength == 0.0 {
        return Ok(Homography::identity());
    }
    let corners = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    let pairs = corners
        .iter()
        .map(|&c| CorrPair {
            src: c,
            dst: [
                c[0] + strength * rng.random_range(-1.0..1.0),
                c[1] + strength * rng.random_range(-1.0..1.0),
            ],
            weight: 1.0,
        })
        .collect();
    let h = estimate_homography(&Correspondences::from_pairs(pairs));
    if h.degenerate {
        // essentially impossible at strengths <= 1, but stay total
        return Ok(Homography::identity());
    }
    Ok(h)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render_sample(
    rng: &mut ChaCha8Rng,
    img_size: usize,
    num_classes: usize,
    warp_strength: f64,
) -> Result<SegSample> {
    let scene = sample_scene(rng, num_classes);
    // the class-coverage shapes are the topmost ones; resample views that
    // push any of their centers out of frame
    let coverage_centers: Vec<[f64; 2]> = scene
        .shapes
        .iter()
        .rev()
        .take(num_classes - 1)
        .map(|s| match &s.kind {
            ShapeKind::Ellipse { center, .. } => *center,
            ShapeKind::Polygon(vs) => {
                let n = vs.len() as f64;
                [
                    vs.iter().map(|v| v[0]).sum::<f64>() / n,
                    vs.iter().map(|v| v[1]).sum::<f64>() / n,
                ]
            }
        })
        .collect();
    let mut view_h = sample_view(rng, warp_strength)?;
    for _ in 0..40 {
        let visible = coverage_centers.iter().all(|c| {
            let (x, y) = view_h.apply(c[0], c[1]);
            (0.07..=0.93).contains(&x) && (0.07..=0.93).contains(&y)
        });
        if visible {
            break;
        }
        view_h = sample_view(rng, warp_strength)?;
    }
    let inv = view_h.inverse()?;
    let n = img_size * img_size;
    let mut image = vec![0.0; 3 * n];
    let mut labels = vec![0u8; n];
    for r in 0..img_size {
        for c in 0..img_size {
            let vx = (c as f64 + 0.5) / img_size as f64;
            let vy = (r as f64 + 0.5) / img_size as f64;
            let (cx, cy) = inv.apply(vx, vy);
            let (color, class) = scene.at(cx, cy);
            let idx = r * img_size + c;
            image[idx] = quantize(color[0]);
            image[n + idx] = quantize(color[1]);
            image[2 * n + idx] = quantize(color[2]);
            labels[idx] = class;
        }
    }
    Ok(SegSample {
        image: Tensor::new(vec![3, img_size, img_size], image)?,
        labels,
        view_h,
    })
}

/// Deterministic benchmark generation. Train samples use `warp_train`, test
/// samples `warp_test`.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    n_train: usize,
    n_test: usize,
    num_classes: usize,
    img_size: usize,
    warp_train: f64,
    warp_test: f64,
    seed: u64,
) -> Result<Dataset> {
    for (name, w) in [("warp_train", warp_train), ("warp_test", warp_test)] {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::Config(format!("{name} must lie in [0, 1], got {w}")));
        }
    }
    if num_classes < 2 || num_classes > 250 {
        return Err(Error::Config(format!(
            "num_classes must lie in [2, 250], got {num_classes}"
        )));
    }
    if img_size < 8 {
        return Err(Error::Config(format!("img_size too small: {img_size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(n_train);
    for _ in 0..n_train {
        train.push(render_sample(&mut rng, img_size, num_classes, warp_train)?);
    }
    let mut test = Vec::with_capacity(n_test);
    for _ in 0..n_test {
        test.push(render_sample(&mut rng, img_size, num_classes, warp_test)?);
    }
    Ok(Dataset {
        img_size,
        num_classes,
        train,
        test,
    })
}

/// Single-file binary cache: magic, version, counts and shapes, then per
/// sample the view homography (9 f64), the 8-bit image planes, and the
/// 8-bit labels.
pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(ds.img_size as u32).to_le_bytes())?;
    w.write_all(&(ds.num_classes as u32).to_le_bytes())?;
    w.write_all(&(ds.train.len() as u32).to_le_bytes())?;
    w.write_all(&(ds.test.len() as u32).to_le_bytes())?;
    for sample in ds.train.iter().chain(&ds.test) {
        for row in &sample.view_h.h {
            for &v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for &v in sample.image.data() {
            w.write_all(&[(v * 255.0).round() as u8])?;
        }
        w.write_all(&sample.labels)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("{}: truncated dataset", path.display())))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad dataset magic {magic:?}",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut r)?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported dataset version {version}",
            path.display()
        )));
    }
    let img_size = read_u32(&mut r)? as usize;
    let num_classes = read_u32(&mut r)? as usize;
    let n_train = read_u32(&mut r)? as usize;
    let n_test = read_u32(&mut r)? as usize;
    if img_size == 0 || img_size > 4096 || n_train.saturating_add(n_test) > 1 << 24 {
        return Err(Error::Format(format!(
            "{}: implausible dataset header",
            path.display()
        )));
    }
    let n = img_size * img_size;
    let read_sample = |r: &mut BufReader<File>| -> Result<SegSample> {
        let mut h = [[0.0; 3]; 3];
        for row in h.iter_mut() {
            for v in row.iter_mut() {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf).map_err(|_| {
                    Error::Format(format!("{}: truncated homography", path.display()))
                })?;
                *v = f64::from_le_bytes(buf);
            }
        }
        let mut img = vec![0u8; 3 * n];
        r.read_exact(&mut img)
            .map_err(|_| Error::Format(format!("{}: truncated image", path.display())))?;
        let mut labels = vec![0u8; n];
        r.read_exact(&mut labels)
            .map_err(|_| Error::Format(format!("{}: truncated labels", path.display())))?;
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Format(format!(
                "{}: label {bad} out of range for {num_classes} classes",
                path.display()
            )));
        }
        let image = Tensor::new(
            vec![3, img_size, img_size],
            img.iter().map(|&b| b as f64 / 255.0).collect(),
        )?;
        Ok(SegSample {
            image,
            labels,
            view_h: Homography::from_matrix(h)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
        })
    };
    let mut train = Vec::with_capacity(n_train);
    for _ in 0..n_train {
        train.push(read_sample(&mut r)?);
    }
    let mut test = Vec::with_capacity(n_test);
    for _ in 0..n_test {
        test.push(read_sample(&mut r)?);
    }
    Ok(Dataset {
        img_size,
        num_classes,
        train,
        test,
    })
}
