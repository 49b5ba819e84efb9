//! Synthetic shapes scenes: 2–4 non-overlapping colored shapes on gray.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::rng_for;

use super::{GroundingSample, Mask, Rgb8};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Whether pixel center `(px, py)`, relative to the top-left corner of
    /// an `s × s` box, lies inside the shape.
    fn contains(self, px: f64, py: f64, s: f64) -> bool {
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let r = s / 2.0;
                (px - r).powi(2) + (py - r).powi(2) <= r * r
            }
            // apex at top center, base along the bottom edge
            ShapeKind::Triangle => (px - s / 2.0).abs() <= py / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeColor {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ShapeColor {
    pub const ALL: [ShapeColor; 4] = [ShapeColor::Red, ShapeColor::Green, ShapeColor::Blue, ShapeColor::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            ShapeColor::Red => "red",
            ShapeColor::Green => "green",
            ShapeColor::Blue => "blue",
            ShapeColor::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            ShapeColor::Red => [220, 40, 40],
            ShapeColor::Green => [40, 190, 60],
            ShapeColor::Blue => [40, 70, 220],
            ShapeColor::Yellow => [230, 210, 40],
        }
    }
}

pub const BACKGROUND: [u8; 3] = [128, 128, 128];

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub color: ShapeColor,
    /// Top-left corner and side of the bounding box.
    pub x: usize,
    pub y: usize,
    pub side: usize,
    pub mask: Mask,
}

impl PlacedShape {
    pub fn question(&self) -> String {
        format!("where is the {} {}?", self.color.name(), self.kind.name())
    }

    pub fn answer(&self) -> String {
        format!("{} {}", self.color.name(), self.kind.name())
    }
}

/// A rendered image with every shape it contains.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Rgb8,
    pub shapes: Vec<PlacedShape>,
}

impl Scene {
    /// The grounding sample asking about shape `i`.
    pub fn sample(&self, i: usize) -> Result<GroundingSample> {
        let s = self.shapes.get(i).ok_or(Error::Index {
            index: i,
            len: self.shapes.len(),
        })?;
        Ok(GroundingSample {
            image: self.image.clone(),
            question: s.question(),
            answer: s.answer(),
            mask: s.mask.clone(),
        })
    }
}

const PLACEMENT_TRIES: usize = 200;
const SAMPLE_ATTEMPTS: usize = 50;
/// Minimum empty pixels between bounding boxes.
const GAP: usize = 2;

fn try_scene(size: usize, rng: &mut impl Rng) -> Option<Scene> {
    let n_shapes = rng.gen_range(2..=4);
    let mut colors = ShapeColor::ALL.to_vec();
    colors.shuffle(rng);
    let (lo, hi) = (size / 4, size * 3 / 8);
    let mut boxes: Vec<(usize, usize, usize)> = Vec::new();
    let mut shapes = Vec::new();
    for &color in colors.iter().take(n_shapes) {
        let kind = *ShapeKind::ALL.choose(rng)?;
        let side = rng.gen_range(lo..=hi);
        let placed = (0..PLACEMENT_TRIES).find_map(|_| {
            let x = rng.gen_range(0..=size - side);
            let y = rng.gen_range(0..=size - side);
            let clear = boxes.iter().all(|&(bx, by, bs)| {
                x >= bx + bs + GAP || bx >= x + side + GAP || y >= by + bs + GAP || by >= y + side + GAP
            });
            clear.then_some((x, y))
        })?;
        boxes.push((placed.0, placed.1, side));
        let mut mask = Mask::empty(size, size);
        for dy in 0..side {
            for dx in 0..side {
                if kind.contains(dx as f64 + 0.5, dy as f64 + 0.5, side as f64) {
                    mask.set(placed.0 + dx, placed.1 + dy, true);
                }
            }
        }
        shapes.push(PlacedShape {
            kind,
            color,
            x: placed.0,
            y: placed.1,
            side,
            mask,
        });
    }
    let mut image = Rgb8::filled(size, size, BACKGROUND);
    for s in &shapes {
        for (i, &on) in s.mask.pixels.iter().enumerate() {
            if on {
                image.set_index(i, s.color.rgb());
            }
        }
    }
    Some(Scene { image, shapes })
}

/// Scene `index` of the dataset with the given seed.
pub fn generate_scene(seed: u64, index: usize, size: usize) -> Result<Scene> {
    if size < 32 || size % 32 != 0 {
        return Err(Error::Geometry(format!("image size {size} is not a positive multiple of 32")));
    }
    for attempt in 0..SAMPLE_ATTEMPTS {
        let mut rng = rng_for(seed, &format!("scene{index}.attempt{attempt}"));
        if let Some(scene) = try_scene(size, &mut rng) {
            return Ok(scene);
        }
    }
    Err(Error::contract(
        "generate_scene",
        format!("no placement found for scene {index} after {SAMPLE_ATTEMPTS} attempts"),
    ))
}

/// Sample `index`: its scene plus a uniformly chosen queried shape.
pub fn generate_sample(seed: u64, index: usize, size: usize) -> Result<GroundingSample> {
    let scene = generate_scene(seed, index, size)?;
    let mut rng = rng_for(seed, &format!("query{index}"));
    scene.sample(rng.gen_range(0..scene.shapes.len()))
}

pub fn generate_samples(seed: u64, count: usize, size: usize) -> Result<Vec<GroundingSample>> {
    if count == 0 {
        return Err(Error::contract("generate_dataset", "count must be at least 1"));
    }
    (0..count).map(|i| generate_sample(seed, i, size)).collect()
}
