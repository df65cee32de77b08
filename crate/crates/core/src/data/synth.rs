//! Seeded synthetic desk scenes: 1 to 4 axis-aligned primitives with
//! templated relational captions and colored surface points.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{sub_seed, Manifest, Scene, SceneObject, Splits, MANIFEST};
use crate::error::{Error, Result};
use crate::metrics::Box3D;
use crate::tensor::checkpoint::write_atomic;

pub const SHAPES: [&str; 3] = ["box", "sphere", "cylinder"];
pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "white", "black"];
pub const RELATIONS: [&str; 6] = ["left of", "right of", "behind", "in front of", "above", "next to"];
const RGB: [[f64; 3]; 6] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]];

/// Minimum face-to-face gap along the relation axis.
pub const RELATION_MARGIN: f64 = 0.2;
const SEPARATION: f64 = 0.05;
const MAX_ATTEMPTS: usize = 500;
/// Per-point features: rgb and height.
pub const N_FEATURES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub points_per_scene: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { count: 100, points_per_scene: 1024, min_objects: 1, max_objects: 4, seed: 0 }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("scene count must be at least 1"));
        }
        if !(1..=4).contains(&self.min_objects) || !(self.min_objects..=4).contains(&self.max_objects) {
            return Err(Error::invalid(format!(
                "object range {}..={} must lie within 1..=4",
                self.min_objects, self.max_objects
            )));
        }
        if self.points_per_scene < self.max_objects {
            return Err(Error::invalid("points_per_scene must be at least max_objects"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Appearance {
    color: usize,
    shape: usize,
}

impl Appearance {
    fn phrase(self) -> String {
        format!("{} {}", COLORS[self.color], SHAPES[self.shape])
    }
}

/// What the target caption of a scene says.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetCombo {
    Single { color: usize, shape: usize },
    Related { target: (usize, usize), relation: usize, anchor: (usize, usize) },
}

fn single_combos() -> Vec<TargetCombo> {
    (0..COLORS.len())
        .flat_map(|color| (0..SHAPES.len()).map(move |shape| TargetCombo::Single { color, shape }))
        .collect()
}

fn related_combos() -> Vec<TargetCombo> {
    let pairs: Vec<(usize, usize)> =
        (0..COLORS.len()).flat_map(|c| (0..SHAPES.len()).map(move |s| (c, s))).collect();
    let mut out = Vec::new();
    for &target in &pairs {
        for relation in 0..RELATIONS.len() {
            for &anchor in &pairs {
                if anchor != target {
                    out.push(TargetCombo::Related { target, relation, anchor });
                }
            }
        }
    }
    out
}

/// Object count and target combination for every scene. Target captions
/// are distinct until a combination space is exhausted.
pub fn plan(config: &SynthConfig) -> Vec<(usize, TargetCombo)> {
    let mut singles = single_combos();
    singles.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "combos.single")));
    let mut related = related_combos();
    related.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "combos.related")));
    let (mut ns, mut nr) = (0, 0);
    (0..config.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, &format!("plan.{i}")));
            let mut n = rng.gen_range(config.min_objects..=config.max_objects);
            if n == 1 && ns >= singles.len() && config.max_objects > 1 {
                n = 2;
            }
            let combo = if n == 1 {
                ns += 1;
                singles[(ns - 1) % singles.len()]
            } else {
                nr += 1;
                related[(nr - 1) % related.len()]
            };
            (n, combo)
        })
        .collect()
}

fn separated(a: &Box3D, b: &Box3D) -> bool {
    let (amin, amax, bmin, bmax) = (a.min(), a.max(), b.min(), b.max());
    (0..3).any(|i| amin[i] >= bmax[i] + SEPARATION || bmin[i] >= amax[i] + SEPARATION)
}

fn sample_size(rng: &mut ChaCha8Rng, shape: usize) -> [f64; 3] {
    let mut u = || rng.gen_range(0.2..0.4);
    match SHAPES[shape] {
        "sphere" => {
            let d = u();
            [d, d, d]
        }
        "cylinder" => {
            let d = u();
            [d, d, u()]
        }
        _ => [u(), u(), u()],
    }
}

/// Relation that holds for `a` relative to `b`; "below" reads as "next to".
pub fn relation_between(a: &Box3D, b: &Box3D) -> &'static str {
    if a.min()[2] >= b.max()[2] - 1e-9 {
        return "above";
    }
    if a.max()[2] <= b.min()[2] + 1e-9 {
        return "next to";
    }
    let dx = a.center[0] - b.center[0];
    let dy = a.center[1] - b.center[1];
    if dx.abs() >= dy.abs() {
        if dx < 0.0 {
            "left of"
        } else {
            "right of"
        }
    } else if dy > 0.0 {
        "behind"
    } else {
        "in front of"
    }
}

/// Places object `j` so that "target <relation> j" holds with the margin.
fn place(rng: &mut ChaCha8Rng, target: &mut Box3D, size: [f64; 3], relation: &str) -> Box3D {
    let gap = rng.gen_range(RELATION_MARGIN..RELATION_MARGIN + 0.2);
    let jitter = rng.gen_range(-0.1..0.1);
    let t = *target;
    let floor = size[2] / 2.0;
    let along_x = |sign: f64| [t.center[0] + sign * (t.size[0] / 2.0 + gap + size[0] / 2.0), t.center[1] + jitter, floor];
    let along_y = |sign: f64| [t.center[0] + jitter, t.center[1] + sign * (t.size[1] / 2.0 + gap + size[1] / 2.0), floor];
    let center = match relation {
        "left of" => along_x(1.0),
        "right of" => along_x(-1.0),
        "behind" => along_y(-1.0),
        "in front of" => along_y(1.0),
        "above" => {
            target.center[2] = size[2] + gap + t.size[2] / 2.0;
            [t.center[0], t.center[1], floor]
        }
        _ => {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            if rng.gen_bool(0.5) {
                along_x(sign)
            } else {
                along_y(sign)
            }
        }
    };
    Box3D { center, size }
}

fn surface_point(rng: &mut ChaCha8Rng, b: &Box3D, shape: usize) -> [f64; 3] {
    let h = b.size.map(|s| s / 2.0);
    let local = match SHAPES[shape] {
        "sphere" => {
            let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
            [v[0] / n * h[0], v[1] / n * h[1], v[2] / n * h[2]]
        }
        "cylinder" => {
            let side = 2.0 * h[0] * b.size[2];
            let cap = h[0] * h[0];
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            if rng.gen_range(0.0..side + 2.0 * cap) < side {
                [h[0] * angle.cos(), h[1] * angle.sin(), rng.gen_range(-h[2]..h[2])]
            } else {
                let r = rng.gen_range(0.0f64..1.0).sqrt();
                let z = if rng.gen_bool(0.5) { h[2] } else { -h[2] };
                [r * h[0] * angle.cos(), r * h[1] * angle.sin(), z]
            }
        }
        _ => {
            let areas = [b.size[1] * b.size[2], b.size[0] * b.size[2], b.size[0] * b.size[1]];
            let pick = rng.gen_range(0.0..areas.iter().sum::<f64>());
            let axis = if pick < areas[0] {
                0
            } else if pick < areas[0] + areas[1] {
                1
            } else {
                2
            };
            let mut p = [0, 1, 2].map(|i| rng.gen_range(-h[i]..h[i]));
            p[axis] = if rng.gen_bool(0.5) { h[axis] } else { -h[axis] };
            p
        }
    };
    [0, 1, 2].map(|i| b.center[i] + local[i])
}

/// Builds scene `index` from its planned object count and target combination.
pub fn generate_scene(config: &SynthConfig, index: usize, n_objects: usize, combo: TargetCombo) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, &format!("scene.{index}")));
    let (target, anchor, first_relation) = match combo {
        TargetCombo::Single { color, shape } => (Appearance { color, shape }, None, None),
        TargetCombo::Related { target, relation, anchor } => (
            Appearance { color: target.0, shape: target.1 },
            Some(Appearance { color: anchor.0, shape: anchor.1 }),
            Some(relation),
        ),
    };
    let n_objects = if anchor.is_some() { n_objects.max(2) } else { 1 };

    let mut looks = vec![target];
    let mut relations: Vec<usize> = Vec::new();
    if let (Some(a), Some(r)) = (anchor, first_relation) {
        looks.push(a);
        relations.push(r);
        let mut remaining: Vec<usize> = (0..RELATIONS.len()).filter(|&x| x != r).collect();
        remaining.shuffle(&mut rng);
        for &rel in remaining.iter().take(n_objects - 2) {
            looks.push(Appearance { color: rng.gen_range(0..COLORS.len()), shape: rng.gen_range(0..SHAPES.len()) });
            relations.push(rel);
        }
    }

    let boxes = (0..MAX_ATTEMPTS)
        .find_map(|_| {
            let size0 = sample_size(&mut rng, target.shape);
            let mut b0 = Box3D {
                center: [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), size0[2] / 2.0],
                size: size0,
            };
            // "above" raises the target, so it is placed first.
            let mut order: Vec<usize> = (0..relations.len()).collect();
            order.sort_by_key(|&k| RELATIONS[relations[k]] != "above");
            let mut others = vec![None; relations.len()];
            for k in order {
                let size = sample_size(&mut rng, looks[k + 1].shape);
                others[k] = Some(place(&mut rng, &mut b0, size, RELATIONS[relations[k]]));
            }
            let mut boxes = vec![b0];
            boxes.extend(others.into_iter().map(|b| b.expect("every object placed")));
            let ok = (0..boxes.len()).all(|i| (i + 1..boxes.len()).all(|j| separated(&boxes[i], &boxes[j])));
            ok.then_some(boxes)
        })
        .ok_or_else(|| Error::invalid(format!("scene {index}: could not place {n_objects} objects")))?;

    let mut objects = Vec::with_capacity(boxes.len());
    for (j, b) in boxes.iter().enumerate() {
        let captions = if boxes.len() == 1 {
            vec![format!("a {}", looks[0].phrase())]
        } else if j == 0 {
            relations
                .iter()
                .enumerate()
                .take(3)
                .map(|(k, &r)| format!("the {} is {} the {}", looks[0].phrase(), RELATIONS[r], looks[k + 1].phrase()))
                .collect()
        } else {
            std::iter::once(0)
                .chain((1..boxes.len()).filter(|&k| k != j))
                .take(3)
                .map(|k| format!("the {} is {} the {}", looks[j].phrase(), relation_between(b, &boxes[k]), looks[k].phrase()))
                .collect()
        };
        objects.push(SceneObject { bbox: *b, captions });
    }

    let n = config.points_per_scene;
    let mut points = Vec::with_capacity(n);
    for (j, b) in boxes.iter().enumerate() {
        let count = n / boxes.len() + usize::from(j < n % boxes.len());
        let rgb = RGB[looks[j].color];
        for _ in 0..count {
            let p = surface_point(&mut rng, b, looks[j].shape);
            points.push(vec![p[0], p[1], p[2], rgb[0], rgb[1], rgb[2], p[2]]);
        }
    }
    Ok(Scene { points, objects })
}

/// Writes `scenes/scene_XXXXX.json` files and the manifest under `dir`.
pub fn generate_dataset(dir: &Path, config: &SynthConfig) -> Result<Manifest> {
    config.validate()?;
    let scene_dir = dir.join("scenes");
    std::fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
    let mut names = Vec::with_capacity(config.count);
    for (i, (n, combo)) in plan(config).into_iter().enumerate() {
        let scene = generate_scene(config, i, n, combo)?;
        let rel = format!("scenes/scene_{i:05}.json");
        let path = dir.join(&rel);
        let json = serde_json::to_string(&scene).map_err(|e| Error::json(&path, e))?;
        write_atomic(&path, json.as_bytes())?;
        names.push(rel);
    }
    let manifest = Manifest {
        version: 1,
        seed: config.seed,
        points_per_scene: config.points_per_scene,
        n_features: N_FEATURES,
        scenes: names,
        splits: Splits::new(config.count, config.seed),
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    write_atomic(&path, json.as_bytes())?;
    Ok(manifest)
}
