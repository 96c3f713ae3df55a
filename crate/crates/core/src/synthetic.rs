//! Synthetic shape datasets with controllable per-class object scales.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Annotation, BBox, Dataset, ImageRecord, IMAGE_DIR};
use crate::error::{Error, Result};
use crate::raster::RgbImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Ring, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Ring => "ring",
            Shape::Cross => "cross",
        }
    }

    /// Whether the point `(u, v)` in the unit square `[0,1)²` is inside the
    /// shape; `eps` is half a pixel in unit coordinates.
    fn contains(self, u: f64, v: f64, eps: f64) -> bool {
        let (dx, dy) = (u - 0.5, v - 0.5);
        match self {
            Shape::Disk => dx * dx + dy * dy <= 0.25,
            Shape::Square => true,
            // Apex at the top centre, base along the bottom edge.
            Shape::Triangle => dx.abs() * 2.0 <= v + eps,
            Shape::Ring => {
                let r2 = dx * dx + dy * dy;
                (0.09..=0.25).contains(&r2)
            }
            Shape::Cross => dx.abs() <= 1.0 / 6.0 || dy.abs() <= 1.0 / 6.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub shape: Shape,
    pub instances: usize,
    /// `(scale, weight)` pairs; a scale is drawn by weight and then
    /// multiplied by `1 + U(-jitter, jitter)`.
    pub scales: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: Vec<ClassSpec>,
    pub image_width: u32,
    pub image_height: u32,
    pub max_objects_per_image: usize,
    pub scale_jitter: f64,
    /// Standard deviation of per-pixel background noise.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        if self.image_width < 8 || self.image_height < 8 {
            return bad("images must be at least 8×8".into());
        }
        if self.max_objects_per_image == 0 {
            return bad("max_objects_per_image must be positive".into());
        }
        if !(0.0..1.0).contains(&self.scale_jitter) || !(self.noise >= 0.0) {
            return bad("scale_jitter must be in [0,1) and noise non-negative".into());
        }
        let limit = self.image_width.min(self.image_height) as f64;
        for c in &self.classes {
            if c.instances > 0 && (c.scales.is_empty() || c.scales.iter().all(|s| s.1 <= 0.0)) {
                return bad(format!("class {} needs a scale distribution", c.name));
            }
            for &(s, w) in &c.scales {
                if !(s >= 4.0) || s * (1.0 + self.scale_jitter) > limit || !(w >= 0.0) {
                    return bad(format!(
                        "class {}: scale {s} (weight {w}) must lie in [4, {limit}] including jitter",
                        c.name
                    ));
                }
            }
        }
        Ok(())
    }
}

struct Placed {
    class_id: usize,
    side: usize,
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    // Saturated colour from a random hue.
    let h = rng.random_range(0.0..6.0f32);
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let v = rng.random_range(0.55..1.0f32);
    [r * v, g * v, b * v]
}

/// Paints `shape` into the `side × side` square at `(x0, y0)` and returns
/// the tight box of the painted pixels.
fn paint(img: &mut RgbImage, shape: Shape, x0: usize, y0: usize, side: usize, color: [f32; 3]) -> Option<BBox> {
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..side {
        for x in 0..side {
            let u = (x as f64 + 0.5) / side as f64;
            let v = (y as f64 + 0.5) / side as f64;
            if shape.contains(u, v, 0.5 / side as f64) {
                img.set(x0 + x, y0 + y, color);
                x1 = x1.min(x0 + x);
                y1 = y1.min(y0 + y);
                x2 = x2.max(x0 + x + 1);
                y2 = y2.max(y0 + y + 1);
            }
        }
    }
    (x1 != usize::MAX).then(|| BBox::raw(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
}

/// Renders the dataset in memory; image files are named
/// `images/<id>.png` for [`crate::datamodel::save_dataset`].
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.image_width as usize, spec.image_height as usize);

    let mut todo: Vec<Placed> = Vec::new();
    for (class_id, c) in spec.classes.iter().enumerate() {
        if c.instances == 0 {
            continue;
        }
        let dist = WeightedIndex::new(c.scales.iter().map(|s| s.1))
            .map_err(|e| Error::InvalidInput(format!("class {}: {e}", c.name)))?;
        for _ in 0..c.instances {
            let s = c.scales[dist.sample(&mut rng)].0;
            let j = if spec.scale_jitter > 0.0 {
                rng.random_range(-spec.scale_jitter..spec.scale_jitter)
            } else {
                0.0
            };
            let side = ((s * (1.0 + j)).round() as usize).clamp(2, w.min(h));
            todo.push(Placed { class_id, side });
        }
    }
    // Interleave classes across images.
    for i in (1..todo.len()).rev() {
        let j = rng.random_range(0..=i);
        todo.swap(i, j);
    }

    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid noise");
    let mut images = Vec::new();
    let mut queue = todo.into_iter().peekable();
    while queue.peek().is_some() {
        let id = format!("img{:05}", images.len());
        let bg = [
            rng.random_range(0.2..0.5f32),
            rng.random_range(0.2..0.5f32),
            rng.random_range(0.2..0.5f32),
        ];
        let mut img = RgbImage::filled(w, h, bg);
        if spec.noise > 0.0 {
            for v in img.data.iter_mut() {
                *v = (*v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
            }
        }
        let mut squares: Vec<BBox> = Vec::new();
        let mut annotations = Vec::new();
        while annotations.len() < spec.max_objects_per_image {
            let Some(p) = queue.peek() else { break };
            let side = p.side;
            let mut spot = None;
            for _ in 0..50 {
                let x0 = rng.random_range(0..=w - side);
                let y0 = rng.random_range(0..=h - side);
                let sq = BBox::raw(x0 as f64, y0 as f64, (x0 + side) as f64, (y0 + side) as f64);
                let gap = BBox::raw(sq.x1 - 2.0, sq.y1 - 2.0, sq.x2 + 2.0, sq.y2 + 2.0);
                if squares.iter().all(|o| o.intersection_area(&gap) == 0.0) {
                    spot = Some((x0, y0, sq));
                    break;
                }
            }
            let Some((x0, y0, sq)) = spot else {
                if annotations.is_empty() {
                    unreachable!("an empty image always fits one object");
                }
                break;
            };
            let p = queue.next().expect("peeked");
            let shape = spec.classes[p.class_id].shape;
            let color = random_color(&mut rng);
            if let Some(b) = paint(&mut img, shape, x0, y0, side, color) {
                squares.push(sq);
                annotations.push(Annotation {
                    bbox: b,
                    class_id: p.class_id,
                    image_id: id.clone(),
                });
            }
        }
        images.push(ImageRecord {
            file: format!("{IMAGE_DIR}/{id}.png"),
            id,
            width: spec.image_width,
            height: spec.image_height,
            annotations,
            pixels: Some(std::sync::Arc::new(img)),
        });
    }
    let ds = Dataset::new(spec.classes.iter().map(|c| c.name.clone()).collect(), images);
    ds.validate()?;
    Ok(ds)
}
