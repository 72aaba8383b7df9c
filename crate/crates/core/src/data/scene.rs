//! Symbolic scenes and the truth checker.
//!
//! A scene is a list of colored shapes on a square canvas. Every caption,
//! entailment label, pair statement and referring expression the generators
//! emit is recomputable from the scene by the checker functions here; the
//! checker is the independent oracle for all task labels and is used to
//! verify every generated example before it is emitted.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EssenError, Result};

pub const COLOR_TABLE: [(u8, u8, u8); 5] = [
    (220, 40, 40),  // red
    (40, 180, 70),  // green
    (50, 80, 220),  // blue
    (230, 210, 50), // yellow
    (150, 60, 190), // purple
];

/// Spatial relations compare centers with a 4-pixel dead zone.
pub const DEAD_ZONE: f64 = 4.0;

pub const MIN_CANVAS: usize = 32;
pub const MIN_OBJECTS: usize = 2;
pub const MAX_OBJECTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

pub const ALL_SHAPES: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorKind {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

pub const ALL_COLORS: [ColorKind; 5] = [
    ColorKind::Red,
    ColorKind::Green,
    ColorKind::Blue,
    ColorKind::Yellow,
    ColorKind::Purple,
];

impl ColorKind {
    pub fn word(self) -> &'static str {
        match self {
            ColorKind::Red => "red",
            ColorKind::Green => "green",
            ColorKind::Blue => "blue",
            ColorKind::Yellow => "yellow",
            ColorKind::Purple => "purple",
        }
    }

    pub fn rgb(self) -> (u8, u8, u8) {
        COLOR_TABLE[self as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeKind {
    Small,
    Large,
}

pub const ALL_SIZES: [SizeKind; 2] = [SizeKind::Small, SizeKind::Large];

impl SizeKind {
    pub fn word(self) -> &'static str {
        match self {
            SizeKind::Small => "small",
            SizeKind::Large => "large",
        }
    }

    /// Fixed pixel radii: shapes stay legible at every canvas size and
    /// placement capacity grows with canvas area.
    pub fn radius(self, _canvas: usize) -> f64 {
        match self {
            SizeKind::Small => 3.0,
            SizeKind::Large => 4.75,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: ColorKind,
    pub size: SizeKind,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub canvas: usize,
    pub seed: u64,
}

/// Rejection-sampled non-overlapping scene. Attribute combos are drawn
/// without replacement so no two objects share (shape, color, size); that
/// keeps referring expressions attribute-resolvable while still allowing
/// repeated shapes or colors.
pub fn gen_scene(seed: u64, canvas: usize, count_range: (usize, usize)) -> Result<Scene> {
    if canvas < MIN_CANVAS {
        return Err(EssenError::DataGen(format!(
            "canvas {canvas} below minimum {MIN_CANVAS}"
        )));
    }
    let (lo, hi) = count_range;
    if lo < MIN_OBJECTS || hi > MAX_OBJECTS || lo > hi {
        return Err(EssenError::DataGen(format!(
            "object count range ({lo},{hi}) outside [{MIN_OBJECTS},{MAX_OBJECTS}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(lo..=hi);

    let mut combos: Vec<(ShapeKind, ColorKind, SizeKind)> = Vec::with_capacity(30);
    for &s in &ALL_SHAPES {
        for &c in &ALL_COLORS {
            for &z in &ALL_SIZES {
                combos.push((s, c, z));
            }
        }
    }
    combos.shuffle(&mut rng);
    // place big objects first; greedy rejection packs much better that way
    let mut chosen: Vec<(ShapeKind, ColorKind, SizeKind)> =
        combos.into_iter().take(count).collect();
    chosen.sort_by_key(|&(_, _, z)| std::cmp::Reverse((z.radius(canvas) * 100.0) as u64));

    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for &(shape, color, size) in &chosen {
        let radius = size.radius(canvas);
        let margin = radius + 1.0;
        let span = canvas as f64 - 2.0 * margin;
        let mut placed = false;
        for _ in 0..1000 {
            let cx = margin + rng.gen::<f64>() * span;
            let cy = margin + rng.gen::<f64>() * span;
            let ok = objects
                .iter()
                .all(|o| ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt() > o.radius + radius + 0.5);
            if ok {
                objects.push(SceneObject {
                    shape,
                    color,
                    size,
                    cx,
                    cy,
                    radius,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(EssenError::DataGen(format!(
                "placement failed after 1000 attempts (canvas {canvas} too crowded for {count} objects)"
            )));
        }
    }
    Ok(Scene {
        objects,
        canvas,
        seed,
    })
}

/// Partial attribute description; `None` fields match anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Descriptor {
    pub color: Option<ColorKind>,
    pub shape: Option<ShapeKind>,
    pub size: Option<SizeKind>,
}

impl Descriptor {
    pub fn of_object(obj: &SceneObject) -> Self {
        Self {
            color: Some(obj.color),
            shape: Some(obj.shape),
            size: Some(obj.size),
        }
    }

    pub fn matches(&self, obj: &SceneObject) -> bool {
        self.color.map_or(true, |c| c == obj.color)
            && self.shape.map_or(true, |s| s == obj.shape)
            && self.size.map_or(true, |z| z == obj.size)
    }

    pub fn is_empty(&self) -> bool {
        self.color.is_none() && self.shape.is_none() && self.size.is_none()
    }

    /// "small red circle" / "red thing" / "circle" ... head noun falls back
    /// to "thing" when the shape is unspecified.
    pub fn phrase(&self) -> String {
        let mut words = Vec::new();
        if let Some(z) = self.size {
            words.push(z.word());
        }
        if let Some(c) = self.color {
            words.push(c.word());
        }
        words.push(self.shape.map_or("thing", |s| s.word()));
        words.join(" ")
    }

    /// Plural form for counting statements.
    pub fn phrase_plural(&self) -> String {
        format!("{}s", self.phrase())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialRel {
    LeftOf,
    RightOf,
    Above,
    Below,
}

pub const ALL_RELS: [SpatialRel; 4] = [
    SpatialRel::LeftOf,
    SpatialRel::RightOf,
    SpatialRel::Above,
    SpatialRel::Below,
];

impl SpatialRel {
    pub fn words(self) -> &'static str {
        match self {
            SpatialRel::LeftOf => "left of",
            SpatialRel::RightOf => "right of",
            SpatialRel::Above => "above",
            SpatialRel::Below => "below",
        }
    }

    /// Does `a rel b` hold? Decided on centers with the dead zone; the y
    /// axis points down, so "above" means smaller y.
    pub fn holds(self, a: &SceneObject, b: &SceneObject) -> bool {
        match self {
            SpatialRel::LeftOf => a.cx < b.cx - DEAD_ZONE,
            SpatialRel::RightOf => a.cx > b.cx + DEAD_ZONE,
            SpatialRel::Above => a.cy < b.cy - DEAD_ZONE,
            SpatialRel::Below => a.cy > b.cy + DEAD_ZONE,
        }
    }
}

/// Closed-world statements the caption grammar can express.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Fact {
    /// At least one matching object exists.
    Exists(Descriptor),
    /// Exactly `n` matching objects exist.
    CountExact(Descriptor, usize),
    /// Some matching pair of distinct objects stands in the relation.
    Pair(Descriptor, SpatialRel, Descriptor),
}

pub fn count_matching(scene: &Scene, d: &Descriptor) -> usize {
    scene.objects.iter().filter(|o| d.matches(o)).count()
}

/// The truth checker: evaluates a fact against a scene exactly.
pub fn check_fact(scene: &Scene, fact: &Fact) -> bool {
    match fact {
        Fact::Exists(d) => count_matching(scene, d) > 0,
        Fact::CountExact(d, n) => count_matching(scene, d) == *n,
        Fact::Pair(d1, rel, d2) => scene.objects.iter().enumerate().any(|(i, a)| {
            d1.matches(a)
                && scene
                    .objects
                    .iter()
                    .enumerate()
                    .any(|(j, b)| i != j && d2.matches(b) && rel.holds(a, b))
        }),
    }
}

/// Referring expression: attribute constraints plus an optional spatial
/// relation to a landmark description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefExpr {
    pub attrs: Descriptor,
    pub rel: Option<(SpatialRel, Descriptor)>,
}

/// Exhaustive matcher: indices of all objects satisfying the expression.
/// This is the oracle the generator verifies uniqueness against.
pub fn refexp_satisfiers(scene: &Scene, expr: &RefExpr) -> Vec<usize> {
    scene
        .objects
        .iter()
        .enumerate()
        .filter(|(i, obj)| {
            expr.attrs.matches(obj)
                && expr.rel.as_ref().map_or(true, |(rel, landmark)| {
                    scene
                        .objects
                        .iter()
                        .enumerate()
                        .any(|(j, b)| *i != j && landmark.matches(b) && rel.holds(obj, b))
                })
        })
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gen_scene_deterministic_and_disjoint() {
        let a = gen_scene(42, 48, (2, 6)).unwrap();
        let b = gen_scene(42, 48, (2, 6)).unwrap();
        assert_eq!(a, b);
        for (i, x) in a.objects.iter().enumerate() {
            for y in &a.objects[i + 1..] {
                let dist = ((x.cx - y.cx).powi(2) + (x.cy - y.cy).powi(2)).sqrt();
                assert!(dist > x.radius + y.radius);
            }
            assert!(x.cx - x.radius >= 0.0 && x.cx + x.radius <= 48.0);
            assert!(x.cy - x.radius >= 0.0 && x.cy + x.radius <= 48.0);
        }
    }

    #[test]
    fn gen_scene_exact_count() {
        let s = gen_scene(7, 32, (2, 2)).unwrap();
        assert_eq!(s.objects.len(), 2);
    }

    #[test]
    fn gen_scene_distinct_combos() {
        let s = gen_scene(9, 64, (10, 10)).unwrap();
        for (i, a) in s.objects.iter().enumerate() {
            for b in &s.objects[i + 1..] {
                assert!(
                    (a.shape, a.color, a.size) != (b.shape, b.color, b.size),
                    "duplicate combo"
                );
            }
        }
    }

    #[test]
    fn gen_scene_rejects_bad_params() {
        assert!(gen_scene(1, 16, (2, 4)).is_err());
        assert!(gen_scene(1, 32, (1, 4)).is_err());
        assert!(gen_scene(1, 32, (2, 40)).is_err());
    }

    #[test]
    fn checker_counts_and_relations() {
        let mk = |shape, color, size, cx: f64, cy: f64| SceneObject {
            shape,
            color,
            size: size,
            cx,
            cy,
            radius: 3.0,
        };
        let scene = Scene {
            objects: vec![
                mk(ShapeKind::Circle, ColorKind::Red, SizeKind::Small, 8.0, 16.0),
                mk(ShapeKind::Square, ColorKind::Blue, SizeKind::Large, 24.0, 16.0),
                mk(ShapeKind::Circle, ColorKind::Blue, SizeKind::Small, 16.0, 26.0),
            ],
            canvas: 32,
            seed: 0,
        };
        let circles = Descriptor {
            shape: Some(ShapeKind::Circle),
            ..Default::default()
        };
        assert_eq!(count_matching(&scene, &circles), 2);
        assert!(check_fact(&scene, &Fact::CountExact(circles, 2)));
        assert!(!check_fact(&scene, &Fact::CountExact(circles, 3)));

        let red_circle = Descriptor {
            color: Some(ColorKind::Red),
            shape: Some(ShapeKind::Circle),
            size: None,
        };
        let blue_square = Descriptor {
            color: Some(ColorKind::Blue),
            shape: Some(ShapeKind::Square),
            size: None,
        };
        assert!(check_fact(
            &scene,
            &Fact::Pair(red_circle, SpatialRel::LeftOf, blue_square)
        ));
        assert!(!check_fact(
            &scene,
            &Fact::Pair(red_circle, SpatialRel::RightOf, blue_square)
        ));
    }

    #[test]
    fn dead_zone_suppresses_close_calls() {
        let a = SceneObject {
            shape: ShapeKind::Circle,
            color: ColorKind::Red,
            size: SizeKind::Small,
            cx: 10.0,
            cy: 10.0,
            radius: 3.0,
        };
        let b = SceneObject {
            cx: 13.0,
            ..a
        };
        assert!(!SpatialRel::LeftOf.holds(&a, &b)); // only 3px apart
        let c = SceneObject {
            cx: 15.0,
            ..a
        };
        assert!(SpatialRel::LeftOf.holds(&a, &c));
    }

    #[test]
    fn refexp_matcher_uses_landmark() {
        let mk = |shape, color, cx: f64| SceneObject {
            shape,
            color,
            size: SizeKind::Small,
            cx,
            cy: 16.0,
            radius: 3.0,
        };
        // two red circles, one blue square between them
        let scene = Scene {
            objects: vec![
                mk(ShapeKind::Circle, ColorKind::Red, 6.0),
                mk(ShapeKind::Square, ColorKind::Blue, 16.0),
                mk(ShapeKind::Circle, ColorKind::Red, 26.0),
            ],
            canvas: 32,
            seed: 0,
        };
        let attrs = Descriptor {
            color: Some(ColorKind::Red),
            shape: Some(ShapeKind::Circle),
            size: None,
        };
        let ambiguous = RefExpr { attrs, rel: None };
        assert_eq!(refexp_satisfiers(&scene, &ambiguous), vec![0, 2]);

        let resolved = RefExpr {
            attrs,
            rel: Some((
                SpatialRel::LeftOf,
                Descriptor {
                    color: Some(ColorKind::Blue),
                    shape: Some(ShapeKind::Square),
                    size: None,
                },
            )),
        };
        assert_eq!(refexp_satisfiers(&scene, &resolved), vec![0]);
    }
}
