//! Scene files, synthetic scene generation, dataset manifests and splits.

pub mod synth;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Box3D;
use crate::pointcloud::PointCloud;

pub use synth::{generate_dataset, generate_scene, SynthConfig, COLORS, RELATIONS, SHAPES};

pub const MANIFEST: &str = "manifest.json";

/// Named sub-seed: FNV-1a of `name` mixed into `seed`, then a splitmix64
/// finalizer.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub points: Vec<Vec<f64>>,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn cloud(&self) -> Result<PointCloud> {
        PointCloud::from_rows(&self.points)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let scene: Scene = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if scene.objects.is_empty() || scene.objects.iter().any(|o| o.captions.is_empty()) {
            return Err(Error::invalid(format!("{}: every scene needs objects with captions", path.display())));
        }
        Ok(scene)
    }

    /// The captioning target: the first object.
    pub fn target(&self) -> &SceneObject {
        &self.objects[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split '{s}' (expected train, val, test)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Seeded 80/10/10 partition of `0..count`, at least one training scene.
    pub fn new(count: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, "split")));
        let n_train = (count * 8 / 10).max(1).min(count);
        let n_val = (count / 10).min(count - n_train);
        let take = |range: std::ops::Range<usize>| {
            let mut v = order[range].to_vec();
            v.sort_unstable();
            v
        };
        Splits { train: take(0..n_train), val: take(n_train..n_train + n_val), test: take(n_train + n_val..count) }
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub points_per_scene: usize,
    pub n_features: usize,
    pub scenes: Vec<String>,
    pub splits: Splits,
}

/// One scene paired with its target caption.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub scene: usize,
    pub caption: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let scenes = manifest.scenes.iter().map(|rel| Scene::load(&root.join(rel))).collect::<Result<Vec<_>>>()?;
        if scenes.is_empty() {
            return Err(Error::invalid(format!("{}: dataset has no scenes", root.display())));
        }
        Ok(Dataset { root: root.to_path_buf(), manifest, scenes })
    }

    pub fn scene_id(&self, index: usize) -> String {
        Path::new(&self.manifest.scenes[index])
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| index.to_string())
    }

    pub fn items(&self, split: Split) -> Vec<TrainItem> {
        self.manifest
            .splits
            .get(split)
            .iter()
            .map(|&i| TrainItem { scene: i, caption: self.scenes[i].target().captions[0].clone() })
            .collect()
    }

    /// Every caption in the given split, for vocabulary construction.
    pub fn captions(&self, split: Split) -> Vec<String> {
        self.manifest
            .splits
            .get(split)
            .iter()
            .flat_map(|&i| self.scenes[i].objects.iter().flat_map(|o| o.captions.iter().cloned()))
            .collect()
    }
}
