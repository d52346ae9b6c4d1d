//! Keypoint annotation index: file format, validation, task-aware pair
//! sampling and a procedural synthetic world.

mod sampler;
mod shapes;
pub mod synth;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gating::is_simplex_row;
use crate::objective::Keypoint;

pub use shapes::Placement;
pub use sampler::{sample_pair_batch, PairSample, PairSampler};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_KEYPOINTS: usize = 5;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: malformed JSON ({detail})")]
    Syntax { path: PathBuf, detail: String },

    #[error("unsupported annotation format version {found}, expected {FORMAT_VERSION}")]
    Version { found: String },

    #[error("{record}: field `{field}`: {detail}")]
    Schema {
        record: String,
        field: String,
        detail: String,
    },

    #[error("{record}: expected {expected} keypoints, found {found}")]
    KeypointCount {
        record: String,
        expected: usize,
        found: usize,
    },

    #[error("{record}: keypoint {role} has a negative coordinate ({x}, {y})")]
    NegativeCoordinate { record: String, role: usize, x: f64, y: f64 },

    #[error("{record}: keypoint {role} at ({x}, {y}) lies outside the {width}x{height} image")]
    OutOfBounds {
        record: String,
        role: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("{record}: unknown {kind} `{name}`")]
    Vocabulary {
        record: String,
        kind: &'static str,
        name: String,
    },

    #[error("{record}: task `{task}` is not valid for category `{category}`")]
    TaskCategory {
        record: String,
        task: String,
        category: String,
    },

    #[error("{record}: duplicate (image `{image}`, task `{task}`) in the {split} split")]
    Duplicate {
        record: String,
        image: String,
        task: String,
        split: Split,
    },

    #[error("{record}: image file {} does not exist", path.display())]
    MissingImage { record: String, path: PathBuf },

    #[error("gating_overrides.{task}: {detail}")]
    Override { task: String, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DatasetError {
    pub fn is_io(&self) -> bool {
        matches!(self, DatasetError::Io { .. })
    }
}

type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    /// Relative to the directory holding the annotation file.
    pub path: String,
    pub width: usize,
    pub height: usize,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub image_id: String,
    pub task: String,
    #[serde(with = "xy_list")]
    pub keypoints: Vec<Keypoint>,
    pub difficulty: Difficulty,
    pub split: Split,
}

mod xy_list {
    use super::Keypoint;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(kps: &[Keypoint], s: S) -> Result<S::Ok, S::Error> {
        kps.iter().map(|k| [k.x, k.y]).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Keypoint>, D::Error> {
        let raw = Vec::<[f64; 2]>::deserialize(d)?;
        Ok(raw.into_iter().map(|[x, y]| Keypoint::new(x, y)).collect())
    }
}

/// On-disk layout of an annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub version: u32,
    pub tasks: Vec<String>,
    pub categories: Vec<String>,
    pub task_categories: BTreeMap<String, Vec<String>>,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    /// Per-task gating matrices applied at inference, `[layer][row][col]`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub gating_overrides: BTreeMap<String, Vec<Vec<Vec<f32>>>>,
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub keypoints: usize,
    pub check_images: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            keypoints: DEFAULT_KEYPOINTS,
            check_images: true,
        }
    }
}

/// A validated annotation file together with the directory its image paths
/// are relative to.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub file: AnnotationFile,
    image_pos: HashMap<String, usize>,
}

/// The ten actions and the five object categories that afford each.
pub fn funkpoint_task_categories() -> BTreeMap<String, Vec<String>> {
    let table: [(&str, [&str; 5]); 10] = [
        ("pour", ["bottle", "frying_pan", "watering_can", "cup", "dustpan"]),
        ("scoop", ["spoon", "basket", "cup", "frying_pan", "shoe"]),
        ("mix", ["spoon", "tablefork", "spatula", "tongs", "whisk"]),
        ("mash_pound", ["bottle", "frying_pan", "hammer", "ladle", "shoe"]),
        ("lift_something", ["ladle", "tablefork", "basket", "tongs", "dustpan"]),
        ("scrape", ["scraper", "tablefork", "spatula", "trowel", "spoon"]),
        ("poke", ["scraper", "watering_can", "screwdriver", "trowel", "scissors"]),
        ("brush_dust", ["whisk", "scrub_brush", "toothbrush", "scraper", "spoon"]),
        ("pull_out_nail", ["hammer", "ladle", "scissors", "frying_pan", "tablefork"]),
        ("flip", ["spoon", "tablefork", "spatula", "ladle", "tongs"]),
    ];
    table
        .iter()
        .map(|(t, cats)| (t.to_string(), cats.iter().map(|c| c.to_string()).collect()))
        .collect()
}

/// Task and category vocabularies of [`funkpoint_task_categories`], in
/// table order and first-appearance order respectively.
pub fn funkpoint_vocabulary() -> (Vec<String>, Vec<String>) {
    let order = [
        "pour",
        "scoop",
        "mix",
        "mash_pound",
        "lift_something",
        "scrape",
        "poke",
        "brush_dust",
        "pull_out_nail",
        "flip",
    ];
    let map = funkpoint_task_categories();
    let mut cats: Vec<String> = Vec::new();
    for t in order {
        for c in &map[t] {
            if !cats.contains(c) {
                cats.push(c.clone());
            }
        }
    }
    (order.iter().map(|s| s.to_string()).collect(), cats)
}

pub fn load_annotations(path: &Path) -> Result<DatasetIndex> {
    load_annotations_with(path, &LoadOptions::default())
}

pub fn load_annotations_with(path: &Path, opts: &LoadOptions) -> Result<DatasetIndex> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file = parse_annotation_file(&text, path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetIndex::new(file, root, opts)
}

/// Parses and type-checks annotation JSON without semantic validation.
pub fn parse_annotation_file(text: &str, path: &Path) -> Result<AnnotationFile> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| {
        if e.is_eof() {
            DatasetError::Truncated {
                path: path.to_path_buf(),
                detail: e.to_string(),
            }
        } else {
            DatasetError::Syntax {
                path: path.to_path_buf(),
                detail: e.to_string(),
            }
        }
    })?;
    match value.get("version") {
        Some(v) if v.as_u64() == Some(FORMAT_VERSION as u64) => {}
        Some(v) => return Err(DatasetError::Version { found: v.to_string() }),
        None => return Err(DatasetError::Version { found: "none".into() }),
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        let record = record_of(&field);
        DatasetError::Schema {
            record,
            field,
            detail: e.into_inner().to_string(),
        }
    })
}

/// `annotations[3].keypoints[1]` -> `annotations[3]`.
fn record_of(field: &str) -> String {
    match field.find(']') {
        Some(end) => field[..=end].to_string(),
        None => field.split('.').next().unwrap_or(field).to_string(),
    }
}

impl DatasetIndex {
    pub fn new(file: AnnotationFile, root: PathBuf, opts: &LoadOptions) -> Result<Self> {
        if file.version != FORMAT_VERSION {
            return Err(DatasetError::Version {
                found: file.version.to_string(),
            });
        }
        let tasks: HashSet<&str> = file.tasks.iter().map(String::as_str).collect();
        let categories: HashSet<&str> = file.categories.iter().map(String::as_str).collect();
        for (t, cats) in &file.task_categories {
            let record = format!("task_categories.{t}");
            if !tasks.contains(t.as_str()) {
                return Err(vocab(&record, "task", t));
            }
            if let Some(c) = cats.iter().find(|c| !categories.contains(c.as_str())) {
                return Err(vocab(&record, "category", c));
            }
        }

        let mut image_pos = HashMap::new();
        for (i, img) in file.images.iter().enumerate() {
            let record = format!("images[{i}]");
            if image_pos.insert(img.id.clone(), i).is_some() {
                return Err(DatasetError::Schema {
                    record,
                    field: "id".into(),
                    detail: format!("duplicate image id `{}`", img.id),
                });
            }
            if img.width == 0 || img.height == 0 {
                return Err(DatasetError::Schema {
                    record,
                    field: "width".into(),
                    detail: "image extents must be positive".into(),
                });
            }
            if !categories.contains(img.category.as_str()) {
                return Err(vocab(&record, "category", &img.category));
            }
            if opts.check_images && !root.join(&img.path).is_file() {
                return Err(DatasetError::MissingImage {
                    record,
                    path: root.join(&img.path),
                });
            }
        }

        let mut seen = HashSet::new();
        for (i, a) in file.annotations.iter().enumerate() {
            let record = format!("annotations[{i}]");
            let img = match image_pos.get(&a.image_id) {
                Some(&p) => &file.images[p],
                None => return Err(vocab(&record, "image", &a.image_id)),
            };
            if !tasks.contains(a.task.as_str()) {
                return Err(vocab(&record, "task", &a.task));
            }
            let allowed = file
                .task_categories
                .get(&a.task)
                .is_some_and(|cats| cats.contains(&img.category));
            if !allowed {
                return Err(DatasetError::TaskCategory {
                    record,
                    task: a.task.clone(),
                    category: img.category.clone(),
                });
            }
            if a.keypoints.len() != opts.keypoints {
                return Err(DatasetError::KeypointCount {
                    record,
                    expected: opts.keypoints,
                    found: a.keypoints.len(),
                });
            }
            for (role, k) in a.keypoints.iter().enumerate() {
                if k.x < 0.0 || k.y < 0.0 {
                    return Err(DatasetError::NegativeCoordinate {
                        record,
                        role,
                        x: k.x,
                        y: k.y,
                    });
                }
                if !(k.x < img.width as f64 && k.y < img.height as f64) {
                    return Err(DatasetError::OutOfBounds {
                        record,
                        role,
                        x: k.x,
                        y: k.y,
                        width: img.width,
                        height: img.height,
                    });
                }
            }
            if !seen.insert((a.image_id.as_str(), a.task.as_str(), a.split)) {
                return Err(DatasetError::Duplicate {
                    record,
                    image: a.image_id.clone(),
                    task: a.task.clone(),
                    split: a.split,
                });
            }
        }

        for (task, layers) in &file.gating_overrides {
            if !tasks.contains(task.as_str()) {
                return Err(vocab("gating_overrides", "task", task));
            }
            for (l, rows) in layers.iter().enumerate() {
                let width = rows.first().map_or(0, Vec::len);
                for (r, row) in rows.iter().enumerate() {
                    if row.len() != width || width == 0 {
                        return Err(DatasetError::Override {
                            task: task.clone(),
                            detail: format!("layer {l} row {r} has inconsistent length"),
                        });
                    }
                    if !is_simplex_row(row) {
                        return Err(DatasetError::Override {
                            task: task.clone(),
                            detail: format!("layer {l} row {r} is not on the probability simplex"),
                        });
                    }
                }
            }
        }

        Ok(DatasetIndex { root, file, image_pos })
    }

    pub fn tasks(&self) -> &[String] {
        &self.file.tasks
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.file.images
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.file.annotations
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.image_pos.get(id).map(|&i| &self.file.images[i])
    }

    pub fn image_position(&self, id: &str) -> Option<usize> {
        self.image_pos.get(id).copied()
    }

    pub fn image_path(&self, img: &ImageRecord) -> PathBuf {
        self.root.join(&img.path)
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.file.tasks.iter().position(|t| t == name)
    }

    /// Annotation indices of `task` within `split`, in file order.
    pub fn annotations_for(&self, split: Split, task: &str) -> Vec<usize> {
        self.file
            .annotations
            .iter()
            .enumerate()
            .filter(|(_, a)| a.split == split && a.task == task)
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of distinct (image, task) pairs.
    pub fn pair_count(&self) -> usize {
        self.file
            .annotations
            .iter()
            .map(|a| (&a.image_id, &a.task))
            .collect::<HashSet<_>>()
            .len()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.file).expect("serializable");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn vocab(record: &str, kind: &'static str, name: &str) -> DatasetError {
    DatasetError::Vocabulary {
        record: record.to_string(),
        kind,
        name: name.to_string(),
    }
}
