//! Procedural tabletop-style scenes with template referring expressions.
//!
//! A scene is a square floor with a handful of axis-aligned primitives on
//! it, each surface-sampled and colored from a named palette. Queries name
//! an object by color and shape, adding a spatial relation to a uniquely
//! named reference object when color and shape alone are ambiguous. Every
//! query is checked against all objects so it resolves to exactly one.

pub mod corpus;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{instance_to_binary, LabelSet};
use crate::sparse3d::PointCloud;
use crate::textenc::{tokenize, Vocabulary};

/// Instance and semantic id of the floor.
pub const FLOOR_ID: u32 = 0;
const PLACEMENT_TRIES: usize = 100;
const PLACEMENT_GAP: f64 = 0.05;
const FLOOR_RGB: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Box,
    Cylinder,
    Sphere,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Box, Shape::Cylinder, Shape::Sphere];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Box => "box",
            Shape::Cylinder => "cylinder",
            Shape::Sphere => "sphere",
        }
    }

    pub fn semantic_id(self) -> u32 {
        match self {
            Shape::Box => 1,
            Shape::Cylinder => 2,
            Shape::Sphere => 3,
        }
    }
}

/// RGB of a palette color name.
pub fn palette_rgb(name: &str) -> Option<[f64; 3]> {
    Some(match name {
        "red" => [0.85, 0.1, 0.1],
        "green" => [0.1, 0.7, 0.2],
        "blue" => [0.1, 0.2, 0.85],
        "yellow" => [0.9, 0.85, 0.1],
        "purple" => [0.55, 0.15, 0.7],
        "orange" => [0.95, 0.5, 0.05],
        "pink" => [0.95, 0.5, 0.7],
        "cyan" => [0.1, 0.8, 0.85],
        "white" => [0.95, 0.95, 0.95],
        "black" => [0.05, 0.05, 0.05],
        "brown" => [0.45, 0.25, 0.1],
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<Shape>,
    pub colors: Vec<String>,
    /// Side length of the square floor, in meters.
    pub floor_extent: f64,
    pub floor_points: usize,
    pub min_object_points: usize,
    pub max_object_points: usize,
    /// Std of the per-point color noise.
    pub color_jitter: f64,
    /// Give the intended target a same-shape object of another color.
    pub distractors: bool,
    /// Chance of adding an exact color-and-shape twin of the intended
    /// target, which forces a relational query.
    pub twin_probability: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            min_objects: 4,
            max_objects: 8,
            shapes: Shape::ALL.to_vec(),
            colors: ["red", "green", "blue", "yellow", "purple", "orange", "pink", "cyan"]
                .map(String::from)
                .to_vec(),
            floor_extent: 4.0,
            floor_points: 2000,
            min_object_points: 150,
            max_object_points: 400,
            color_jitter: 0.03,
            distractors: true,
            twin_probability: 0.3,
        }
    }
}

impl SceneSpec {
    /// Reads a TOML document; absent keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&crate::error::read_text(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Contract(m));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return fail(format!("object range {}..={} is empty", self.min_objects, self.max_objects));
        }
        if self.shapes.is_empty() {
            return fail("no shapes".into());
        }
        if let Some(c) = self.colors.iter().find(|c| palette_rgb(c).is_none()) {
            return fail(format!("unknown color {c:?}"));
        }
        if self.distractors && (self.colors.len() < 2 || self.min_objects < 2) {
            return fail("distractors need two colors and two objects".into());
        }
        if self.colors.is_empty() {
            return fail("no colors".into());
        }
        if self.min_object_points == 0 || self.min_object_points > self.max_object_points {
            return fail("bad object point range".into());
        }
        if !(self.floor_extent > 1.0) || !(0.0..=1.0).contains(&self.twin_probability) {
            return fail("bad floor extent or twin probability".into());
        }
        Ok(())
    }
}

/// One placed primitive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub instance: u32,
    pub shape: Shape,
    pub color: String,
    /// Center of the axis-aligned bounding box.
    pub center: [f64; 3],
    pub half_extent: [f64; 3],
}

impl SceneObject {
    pub fn overlaps(&self, other: &SceneObject, gap: f64) -> bool {
        (0..3).all(|a| {
            (self.center[a] - other.center[a]).abs() < self.half_extent[a] + other.half_extent[a] + gap
        })
    }

    fn same_kind(&self, color: &str, shape: Shape) -> bool {
        self.shape == shape && self.color == color
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub cloud: PointCloud,
    pub labels: LabelSet,
    pub objects: Vec<SceneObject>,
}

fn sample_size(shape: Shape, rng: &mut impl Rng) -> [f64; 3] {
    match shape {
        Shape::Box => [
            rng.random_range(0.15..0.35),
            rng.random_range(0.15..0.35),
            rng.random_range(0.15..0.4),
        ],
        Shape::Cylinder => {
            let r = rng.random_range(0.12..0.3);
            [r, r, rng.random_range(0.15..0.4)]
        }
        Shape::Sphere => {
            let r = rng.random_range(0.12..0.3);
            [r, r, r]
        }
    }
}

fn sample_surface(obj: &SceneObject, rng: &mut impl Rng) -> [f64; 3] {
    let [cx, cy, cz] = obj.center;
    let [hx, hy, hz] = obj.half_extent;
    let u = |rng: &mut dyn rand::RngCore| rng.random_range(-1.0..=1.0);
    match obj.shape {
        Shape::Box => {
            // Top and four sides, weighted by area; the bottom rests on the floor.
            let areas = [hx * hy, hy * hz, hy * hz, hx * hz, hx * hz];
            let mut pick = rng.random_range(0.0..areas.iter().sum::<f64>());
            let mut face = 0;
            while face < 4 && pick >= areas[face] {
                pick -= areas[face];
                face += 1;
            }
            let (a, b) = (u(rng), u(rng));
            match face {
                0 => [cx + a * hx, cy + b * hy, cz + hz],
                1 => [cx + hx, cy + a * hy, cz + b * hz],
                2 => [cx - hx, cy + a * hy, cz + b * hz],
                3 => [cx + a * hx, cy + hy, cz + b * hz],
                _ => [cx + a * hx, cy - hy, cz + b * hz],
            }
        }
        Shape::Cylinder => {
            let side = 2.0 * std::f64::consts::PI * hx * 2.0 * hz;
            let top = std::f64::consts::PI * hx * hx;
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            if rng.random_range(0.0..side + top) < side {
                [cx + hx * theta.cos(), cy + hx * theta.sin(), cz + u(rng) * hz]
            } else {
                let r = hx * rng.random_range(0.0f64..1.0).sqrt();
                [cx + r * theta.cos(), cy + r * theta.sin(), cz + hz]
            }
        }
        Shape::Sphere => {
            let n = Normal::new(0.0, 1.0).expect("unit normal");
            let mut v: [f64; 3] = [n.sample(rng), n.sample(rng), n.sample(rng)];
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x *= hx / len);
            [cx + v[0], cy + v[1], cz + v[2]]
        }
    }
}

fn jittered(rgb: [f64; 3], jitter: &Normal<f64>, rng: &mut impl Rng) -> [f64; 3] {
    rgb.map(|c| (c + jitter.sample(rng)).clamp(0.0, 1.0))
}

/// Chooses kinds for the objects: the intended target first, then its
/// distractor and optional twin, then random fill.
fn choose_kinds(spec: &SceneSpec, rng: &mut impl Rng) -> Vec<(Shape, String)> {
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let shape = *spec.shapes.choose(rng).expect("shapes");
    let color = spec.colors.choose(rng).expect("colors").clone();
    let mut kinds = vec![(shape, color.clone())];
    if spec.distractors && kinds.len() < count {
        let others: Vec<&String> = spec.colors.iter().filter(|c| **c != color).collect();
        kinds.push((shape, (*others.choose(rng).expect("two colors")).clone()));
    }
    if kinds.len() < count && rng.random_bool(spec.twin_probability) {
        kinds.push((shape, color));
    }
    while kinds.len() < count {
        let s = *spec.shapes.choose(rng).expect("shapes");
        let c = spec.colors.choose(rng).expect("colors").clone();
        kinds.push((s, c));
    }
    kinds
}

/// Builds a scene from `spec` and `seed`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = choose_kinds(spec, &mut rng);

    let mut objects: Vec<SceneObject> = Vec::with_capacity(kinds.len());
    for (i, (shape, color)) in kinds.into_iter().enumerate() {
        let half = sample_size(shape, &mut rng);
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let x = rng.random_range(half[0]..spec.floor_extent - half[0]);
            let y = rng.random_range(half[1]..spec.floor_extent - half[1]);
            let cand = SceneObject {
                instance: i as u32 + 1,
                shape,
                color: color.clone(),
                center: [x, y, half[2]],
                half_extent: half,
            };
            if objects.iter().all(|o| !o.overlaps(&cand, PLACEMENT_GAP)) {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(o) => objects.push(o),
            None => {
                return Err(Error::Generation(format!(
                    "could not place object {} after {PLACEMENT_TRIES} tries; the scene is too crowded",
                    i + 1
                )))
            }
        }
    }

    let jitter = Normal::new(0.0, spec.color_jitter.max(0.0)).expect("jitter std");
    let mut points = Vec::new();
    let mut semantic = Vec::new();
    let mut instance = Vec::new();
    for _ in 0..spec.floor_points {
        let x = rng.random_range(0.0..spec.floor_extent);
        let y = rng.random_range(0.0..spec.floor_extent);
        let [r, g, b] = jittered(FLOOR_RGB, &jitter, &mut rng);
        points.push([x, y, 0.0, r, g, b]);
        semantic.push(FLOOR_ID);
        instance.push(FLOOR_ID);
    }
    for obj in &objects {
        let n = rng.random_range(spec.min_object_points..=spec.max_object_points);
        let rgb = palette_rgb(&obj.color).expect("validated color");
        for _ in 0..n {
            let [x, y, z] = sample_surface(obj, &mut rng);
            let [r, g, b] = jittered(rgb, &jitter, &mut rng);
            points.push([x, y, z, r, g, b]);
            semantic.push(obj.shape.semantic_id());
            instance.push(obj.instance);
        }
    }
    Ok(Scene {
        cloud: PointCloud::new(points)?,
        labels: LabelSet::new(semantic, instance)?,
        objects,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// The reference is the subject's nearest other object (ground-plane
    /// center distance, ties to the lower instance id).
    Near,
    /// The subject's center has a smaller x than the reference's.
    LeftOf,
}

impl Relation {
    fn phrase(self) -> &'static str {
        match self {
            Relation::Near => "near",
            Relation::LeftOf => "left of",
        }
    }
}

/// A parsed referring expression.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub color: String,
    pub shape: Shape,
    pub relation: Option<(Relation, String, Shape)>,
}

impl Description {
    pub fn text(&self) -> String {
        let mut s = format!("the {} {}", self.color, self.shape.word());
        if let Some((rel, c, sh)) = &self.relation {
            s.push_str(&format!(" {} the {} {}", rel.phrase(), c, sh.word()));
        }
        s
    }
}

fn ground_distance(a: &SceneObject, b: &SceneObject) -> f64 {
    (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1])
}

fn nearest_other(objects: &[SceneObject], subject: &SceneObject) -> Option<u32> {
    objects
        .iter()
        .filter(|o| o.instance != subject.instance)
        .min_by(|a, b| {
            ground_distance(subject, a)
                .total_cmp(&ground_distance(subject, b))
                .then(a.instance.cmp(&b.instance))
        })
        .map(|o| o.instance)
}

/// Every object the description holds for. A relational description holds
/// only when its reference names exactly one object.
pub fn resolve(objects: &[SceneObject], desc: &Description) -> Vec<u32> {
    let reference = match &desc.relation {
        None => None,
        Some((rel, c, sh)) => {
            let refs: Vec<&SceneObject> = objects.iter().filter(|o| o.same_kind(c, *sh)).collect();
            if refs.len() != 1 {
                return Vec::new();
            }
            Some((*rel, refs[0]))
        }
    };
    objects
        .iter()
        .filter(|o| o.same_kind(&desc.color, desc.shape))
        .filter(|o| match reference {
            None => true,
            Some((_, r)) if r.instance == o.instance => false,
            Some((Relation::Near, r)) => nearest_other(objects, o) == Some(r.instance),
            Some((Relation::LeftOf, r)) => o.center[0] < r.center[0],
        })
        .map(|o| o.instance)
        .collect()
}

/// All descriptions that pick out exactly `target`.
pub fn unique_descriptions(objects: &[SceneObject], target: &SceneObject) -> Vec<Description> {
    let base = Description {
        color: target.color.clone(),
        shape: target.shape,
        relation: None,
    };
    if resolve(objects, &base) == [target.instance] {
        return vec![base];
    }
    let mut out = Vec::new();
    for r in objects.iter().filter(|o| o.instance != target.instance) {
        for rel in [Relation::Near, Relation::LeftOf] {
            let d = Description {
                relation: Some((rel, r.color.clone(), r.shape)),
                ..base.clone()
            };
            if resolve(objects, &d) == [target.instance] {
                out.push(d);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Query {
    pub text: String,
    pub target: u32,
    pub description: Description,
}

/// Picks a target that can be described unambiguously, preferring targets
/// with a same-shape object of another color, and returns its expression.
pub fn generate_query(objects: &[SceneObject], seed: u64) -> Result<Query> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let options: Vec<(&SceneObject, Vec<Description>)> = objects
        .iter()
        .map(|o| (o, unique_descriptions(objects, o)))
        .filter(|(_, d)| !d.is_empty())
        .collect();
    let has_distractor = |t: &SceneObject| {
        objects
            .iter()
            .any(|o| o.shape == t.shape && o.color != t.color)
    };
    // Targets with a distractor first, then ones nameable without a relation.
    let plain = |d: &[Description]| d.iter().any(|x| x.relation.is_none());
    let tiers: [&dyn Fn(&(&SceneObject, Vec<Description>)) -> bool; 3] = [
        &|(o, _)| has_distractor(o),
        &|(_, d)| plain(d),
        &|_| true,
    ];
    let pool: Vec<&(&SceneObject, Vec<Description>)> = tiers
        .iter()
        .map(|keep| options.iter().filter(|o| keep(o)).collect::<Vec<_>>())
        .find(|t| !t.is_empty())
        .unwrap_or_default();
    let (target, descs) = pool
        .choose(&mut rng)
        .ok_or_else(|| Error::Generation("no object can be described unambiguously".into()))?;
    let desc = descs.choose(&mut rng).expect("non-empty").clone();
    Ok(Query {
        text: desc.text(),
        target: target.instance,
        description: desc,
    })
}

/// A scene with one referring expression and its binary mask.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub scene_id: String,
    pub sample_id: String,
    pub cloud: PointCloud,
    pub query: String,
    pub tokens: Vec<usize>,
    pub target: u32,
    pub mask: Vec<bool>,
    pub labels: LabelSet,
}

impl SceneSample {
    pub fn validate(&self) -> Result<()> {
        let n = self.cloud.len();
        if self.mask.len() != n || self.labels.len() != n {
            return Err(Error::Label(format!(
                "sample {}: {} points, {} mask entries, {} labels",
                self.sample_id,
                n,
                self.mask.len(),
                self.labels.len()
            )));
        }
        if instance_to_binary(&self.labels, self.target)? != self.mask {
            return Err(Error::Label(format!("sample {}: mask disagrees with target labels", self.sample_id)));
        }
        if self.tokens.is_empty() {
            return Err(Error::Label(format!("sample {}: empty query", self.sample_id)));
        }
        Ok(())
    }

    pub fn positives(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene{index:06}")
}

/// Seed of scene `index` in a corpus generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    // SplitMix64 finalizer over the pair.
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Layouts tried per sample before giving up.
pub const MAX_LAYOUT_ATTEMPTS: usize = 16;

/// Generates scene `index` and one query for it. A layout in which no
/// object can be named unambiguously is redrawn from a derived seed.
pub fn make_sample(spec: &SceneSpec, seed: u64, index: usize, vocab: &Vocabulary) -> Result<SceneSample> {
    let first = scene_seed(seed, index);
    let mut attempt = 0;
    let (scene, query) = loop {
        let s = if attempt == 0 { first } else { scene_seed(first, attempt) };
        let scene = generate_scene(spec, s)?;
        match generate_query(&scene.objects, s.wrapping_add(1)) {
            Ok(q) => break (scene, q),
            Err(Error::Generation(m)) if attempt + 1 < MAX_LAYOUT_ATTEMPTS => {
                log::debug!("scene {index}, layout {attempt}: {m}");
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    };
    let tokens = tokenize(&query.text, vocab)?;
    let mask = instance_to_binary(&scene.labels, query.target)?;
    let id = scene_id(index);
    let sample = SceneSample {
        sample_id: format!("{id}-q0"),
        scene_id: id,
        cloud: scene.cloud,
        query: query.text,
        tokens,
        target: query.target,
        mask,
        labels: scene.labels,
    };
    sample.validate()?;
    Ok(sample)
}
