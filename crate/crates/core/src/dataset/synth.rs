//! Procedural keypoint world.
//!
//! Each family is a parametric shape with named parts. A task lists `K`
//! roles, and every family that supports the task maps each role to one of
//! its parts. Two instances of a task correspond role by role. Families that
//! share two tasks map their parts differently under each, so the
//! correspondence between them depends on the task.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::shapes::{self, Placement};
use super::{
    Annotation, AnnotationFile, DatasetIndex, Difficulty, ImageRecord, LoadOptions, Split,
    FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::objective::Keypoint;
use crate::par::{self, Execution};
use crate::rng;

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const FEWSHOT_FILE: &str = "fewshot.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub roles: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub name: String,
    /// Task name to the part playing each role, in role order.
    pub tables: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewshotSpec {
    pub families: Vec<String>,
    pub images: usize,
}

impl Default for FewshotSpec {
    fn default() -> Self {
        FewshotSpec {
            families: ["cross", "star", "crescent", "square", "hexagon"].map(String::from).to_vec(),
            images: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Side of the square canvas in pixels.
    pub canvas: usize,
    pub tasks: Vec<TaskSpec>,
    pub families: Vec<FamilySpec>,
    pub instances: usize,
    /// Pixels per canonical unit, `[min, max]`.
    pub size: [f64; 2],
    /// Maximum absolute rotation in degrees.
    pub rotation: f64,
    /// Maximum absolute offset of the object centre from the canvas centre.
    pub translation: f64,
    /// Object hue is drawn from `[0, hue_range)` degrees.
    pub hue_range: f64,
    pub distractors: usize,
    pub test_fraction: f64,
    pub fewshot: FewshotSpec,
    pub seed: u64,
}

fn strings<const N: usize>(xs: [&str; N]) -> Vec<String> {
    xs.map(String::from).to_vec()
}

impl Default for SynthConfig {
    fn default() -> Self {
        let task = |name: &str, roles| TaskSpec {
            name: name.into(),
            roles,
        };
        let family = |name: &str, tables: Vec<(&str, Vec<String>)>| FamilySpec {
            name: name.into(),
            tables: tables.into_iter().map(|(t, p)| (t.to_string(), p)).collect(),
        };
        SynthConfig {
            canvas: 64,
            tasks: vec![
                task("pour", strings(["grip", "lip", "spout", "base", "body"])),
                task("scoop", strings(["grip", "edge", "bowl", "back", "tip"])),
                task("pound", strings(["head", "face", "shaft", "grip", "butt"])),
                task("poke", strings(["point", "shank", "shaft", "grip", "end"])),
            ],
            families: vec![
                family(
                    "disk",
                    vec![
                        ("pour", strings(["north", "east", "south", "west", "center"])),
                        ("scoop", strings(["north", "east", "south", "west", "center"])),
                    ],
                ),
                family(
                    "wedge",
                    vec![
                        ("pour", strings(["apex", "right", "base", "left", "middle"])),
                        ("scoop", strings(["right", "base", "left", "middle", "apex"])),
                    ],
                ),
                family(
                    "lshape",
                    vec![
                        ("pour", strings(["top", "toe", "corner", "shin", "heel"])),
                        ("scoop", strings(["corner", "shin", "heel", "top", "toe"])),
                    ],
                ),
                family(
                    "bar",
                    vec![
                        ("pound", strings(["tip", "neck", "mid", "grip", "tail"])),
                        ("poke", strings(["tip", "neck", "mid", "grip", "tail"])),
                    ],
                ),
                family(
                    "tee",
                    vec![
                        ("pound", strings(["joint", "right", "waist", "left", "foot"])),
                        ("poke", strings(["right", "waist", "left", "foot", "joint"])),
                    ],
                ),
                family(
                    "ring",
                    vec![
                        ("pound", strings(["north", "east", "south", "west", "northeast"])),
                        ("poke", strings(["south", "west", "northeast", "north", "east"])),
                    ],
                ),
            ],
            instances: 50,
            size: [14.0, 18.0],
            rotation: 20.0,
            translation: 7.0,
            hue_range: 360.0,
            distractors: 3,
            test_fraction: 0.2,
            fewshot: FewshotSpec::default(),
            seed: 0,
        }
    }
}

/// Largest canonical radius of any annotated or few-shot family.
const MAX_EXTENT: f64 = 1.3;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.canvas < 16 || self.instances == 0 {
            return cfg("canvas must be at least 16 px and instances positive".into());
        }
        if !(self.size[0] > 0.0 && self.size[0] <= self.size[1]) {
            return cfg(format!("invalid size range {:?}", self.size));
        }
        let margin = self.canvas as f64 / 2.0 - self.translation - MAX_EXTENT * self.size[1];
        if margin < 0.0 || self.translation < 0.0 || self.rotation < 0.0 {
            return cfg("objects at the largest size and offset would leave the canvas".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return cfg(format!("test fraction {} outside [0, 1)", self.test_fraction));
        }
        if self.tasks.is_empty() {
            return cfg("no tasks".into());
        }
        let k = self.tasks[0].roles.len();
        for t in &self.tasks {
            if t.roles.len() != k || k == 0 {
                return cfg(format!("task `{}` must list {k} roles like the others", t.name));
            }
        }
        for f in &self.families {
            let (_, parts) = shapes::family_geometry(&f.name)
                .ok_or_else(|| Error::Config(format!("unknown shape family `{}`", f.name)))?;
            for (task, table) in &f.tables {
                let spec = self
                    .tasks
                    .iter()
                    .find(|t| &t.name == task)
                    .ok_or_else(|| Error::Config(format!("family `{}` names unknown task `{task}`", f.name)))?;
                if table.len() != spec.roles.len() {
                    return cfg(format!(
                        "family `{}` task `{task}`: {} parts for {} roles",
                        f.name,
                        table.len(),
                        spec.roles.len()
                    ));
                }
                if let Some(p) = table.iter().find(|p| !parts.iter().any(|(n, _)| n == p)) {
                    return cfg(format!("family `{}` has no part `{p}`", f.name));
                }
            }
        }
        for t in &self.tasks {
            let n = self.families.iter().filter(|f| f.tables.contains_key(&t.name)).count();
            if n < 2 {
                return cfg(format!("task `{}` is supported by {n} famil(ies), need at least 2", t.name));
            }
        }
        for name in &self.fewshot.families {
            if shapes::family_geometry(name).is_none() {
                return cfg(format!("unknown few-shot family `{name}`"));
            }
            if self.families.iter().any(|f| &f.name == name) {
                return cfg(format!("few-shot family `{name}` also appears in the annotated world"));
            }
        }
        Ok(())
    }

    pub fn keypoints_per_task(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.roles.len())
    }

    pub fn family(&self, name: &str) -> Option<&FamilySpec> {
        self.families.iter().find(|f| f.name == name)
    }
}

/// One rendered object: family, placement and colours.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub family: String,
    pub placement: Placement,
    pub color: [u8; 3],
    pub background: [u8; 3],
    /// `(placement, colour)` of small discs drawn under the object.
    pub distractors: Vec<(Placement, [u8; 3])>,
}

impl Instance {
    /// Draws every random quantity for instance `index` of the world.
    pub fn draw(config: &SynthConfig, family: &str, label: &str, index: u64) -> Self {
        let mut r = rng::indexed(config.seed, label, index);
        let c = config.canvas as f64;
        let mut unit = || r.random::<f64>();
        let size = config.size[0] + unit() * (config.size[1] - config.size[0]);
        let angle = (2.0 * unit() - 1.0) * config.rotation.to_radians();
        let cx = c / 2.0 + (2.0 * unit() - 1.0) * config.translation;
        let cy = c / 2.0 + (2.0 * unit() - 1.0) * config.translation;
        let color = shapes::hsv(unit() * config.hue_range, 0.55 + 0.45 * unit(), 0.7 + 0.3 * unit());
        let background = shapes::hsv(unit() * 360.0, 0.3 * unit(), 0.1 + 0.3 * unit());
        let distractors = (0..config.distractors)
            .map(|_| {
                let at = Placement {
                    cx: unit() * c,
                    cy: unit() * c,
                    size: c * (0.03 + 0.03 * unit()),
                    angle: 0.0,
                };
                (at, shapes::hsv(unit() * 360.0, 0.3 + 0.5 * unit(), 0.3 + 0.5 * unit()))
            })
            .collect();
        Instance {
            family: family.to_string(),
            placement: Placement { cx, cy, size, angle },
            color,
            background,
            distractors,
        }
    }

    pub fn difficulty(&self) -> Difficulty {
        let deg = self.placement.angle.to_degrees().abs();
        if deg < 7.0 {
            Difficulty::Easy
        } else if deg < 14.0 {
            Difficulty::Medium
        } else {
            Difficulty::Hard
        }
    }

    /// Image and the object's coverage mask.
    pub fn render(&self, canvas: usize) -> Result<(RgbImage, Vec<f32>)> {
        let (shape, _) = shapes::family_geometry(&self.family)
            .ok_or_else(|| Error::Config(format!("unknown shape family `{}`", self.family)))?;
        let mut img = RgbImage::filled(canvas, canvas, self.background);
        let (blob, _) = shapes::family_geometry("disk").expect("builtin");
        for (at, rgb) in &self.distractors {
            shapes::composite(&mut img, &shapes::coverage(&blob, at, canvas, canvas), *rgb);
        }
        let mask = shapes::coverage(&shape, &self.placement, canvas, canvas);
        shapes::composite(&mut img, &mask, self.color);
        Ok((img, mask))
    }
}

/// Image position of a named part.
pub fn part_position(inst: &Instance, part: &str) -> Result<Keypoint> {
    let (_, parts) = shapes::family_geometry(&inst.family)
        .ok_or_else(|| Error::Config(format!("unknown shape family `{}`", inst.family)))?;
    let p = parts
        .iter()
        .find(|(n, _)| *n == part)
        .ok_or_else(|| Error::contract(format!("family `{}` has no part `{part}`", inst.family)))?;
    Ok(inst.placement.to_image(p.1))
}

/// Keypoints of `task` on `inst`, in role order.
pub fn analytic_keypoints(config: &SynthConfig, inst: &Instance, task: &str) -> Result<Vec<Keypoint>> {
    let table = config
        .family(&inst.family)
        .and_then(|f| f.tables.get(task))
        .ok_or_else(|| Error::contract(format!("family `{}` does not support task `{task}`", inst.family)))?;
    table.iter().map(|part| part_position(inst, part)).collect()
}

/// True when the pixel under `k` is mostly covered by the object.
pub fn on_mask(mask: &[f32], canvas: usize, k: &Keypoint) -> bool {
    let (x, y) = (k.x.floor(), k.y.floor());
    if x < 0.0 || y < 0.0 || x >= canvas as f64 || y >= canvas as f64 {
        return false;
    }
    mask[y as usize * canvas + x as usize] >= 0.5
}

struct Rendered {
    image: ImageRecord,
    annotations: Vec<Annotation>,
}

/// Instance indices of one family that go to the test split.
fn test_instances(config: &SynthConfig, family: usize) -> Vec<bool> {
    let n = config.instances;
    let n_test = (n as f64 * config.test_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::indexed(config.seed, "split", family as u64));
    let mut test = vec![false; n];
    for &i in &order[..n_test] {
        test[i] = true;
    }
    test
}

/// Renders the annotated world into `out_dir` and returns its index.
pub fn gen_synthetic(config: &SynthConfig, out_dir: &Path) -> Result<DatasetIndex> {
    gen_synthetic_with(config, out_dir, Execution::default())
}

pub fn gen_synthetic_with(config: &SynthConfig, out_dir: &Path, exec: Execution) -> Result<DatasetIndex> {
    config.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let splits: Vec<Vec<bool>> = (0..config.families.len()).map(|f| test_instances(config, f)).collect();
    let n = config.instances;
    let rendered = par::try_map_range(exec, config.families.len() * n, |g| {
        let (fi, i) = (g / n, g % n);
        let family = &config.families[fi];
        let inst = Instance::draw(config, &family.name, "synth", g as u64);
        let (img, mask) = inst.render(config.canvas)?;
        let id = format!("{}_{i:03}", family.name);
        let rel = format!("images/{id}.png");
        img.save_png(&out_dir.join(&rel))?;
        let split = if splits[fi][i] { Split::Test } else { Split::Train };
        let mut annotations = Vec::new();
        for task in &config.tasks {
            if !family.tables.contains_key(&task.name) {
                continue;
            }
            let keypoints = analytic_keypoints(config, &inst, &task.name)?;
            if let Some(k) = keypoints.iter().find(|k| !on_mask(&mask, config.canvas, k)) {
                return Err(Error::contract(format!(
                    "{id}: `{}` keypoint ({:.2}, {:.2}) is off the object",
                    task.name, k.x, k.y
                )));
            }
            annotations.push(Annotation {
                image_id: id.clone(),
                task: task.name.clone(),
                keypoints,
                difficulty: inst.difficulty(),
                split,
            });
        }
        Ok(Rendered {
            image: ImageRecord {
                id,
                path: rel,
                width: config.canvas,
                height: config.canvas,
                category: family.name.clone(),
            },
            annotations,
        })
    })?;

    let mut task_categories: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for t in &config.tasks {
        let fams = config
            .families
            .iter()
            .filter(|f| f.tables.contains_key(&t.name))
            .map(|f| f.name.clone())
            .collect();
        task_categories.insert(t.name.clone(), fams);
    }
    let mut images = Vec::with_capacity(rendered.len());
    let mut annotations = Vec::new();
    for r in rendered {
        images.push(r.image);
        annotations.extend(r.annotations);
    }
    let file = AnnotationFile {
        version: FORMAT_VERSION,
        tasks: config.tasks.iter().map(|t| t.name.clone()).collect(),
        categories: config.families.iter().map(|f| f.name.clone()).collect(),
        task_categories,
        images,
        annotations,
        gating_overrides: BTreeMap::new(),
    };
    let opts = LoadOptions {
        keypoints: config.keypoints_per_task(),
        check_images: true,
    };
    let index = DatasetIndex::new(file, out_dir.to_path_buf(), &opts)?;
    index.save(&out_dir.join(ANNOTATIONS_FILE))?;
    if config.fewshot.images > 0 && !config.fewshot.families.is_empty() {
        gen_fewshot_with(config, out_dir, exec)?;
    }
    Ok(index)
}

/// Renders the held-out families into `out_dir/fewshot` and writes an index
/// with images only.
pub fn gen_fewshot_with(config: &SynthConfig, out_dir: &Path, exec: Execution) -> Result<DatasetIndex> {
    config.validate()?;
    let dir = out_dir.join("fewshot");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let n = config.fewshot.images;
    let images = par::try_map_range(exec, config.fewshot.families.len() * n, |g| {
        let (fi, i) = (g / n, g % n);
        let family = &config.fewshot.families[fi];
        let inst = Instance::draw(config, family, "fewshot", g as u64);
        let (img, _) = inst.render(config.canvas)?;
        let id = format!("{family}_{i:03}");
        let rel = format!("fewshot/{id}.png");
        img.save_png(&out_dir.join(&rel))?;
        Ok::<_, Error>(ImageRecord {
            id,
            path: rel,
            width: config.canvas,
            height: config.canvas,
            category: family.clone(),
        })
    })?;
    let file = AnnotationFile {
        version: FORMAT_VERSION,
        tasks: Vec::new(),
        categories: config.fewshot.families.clone(),
        task_categories: BTreeMap::new(),
        images,
        annotations: Vec::new(),
        gating_overrides: BTreeMap::new(),
    };
    let index = DatasetIndex::new(file, out_dir.to_path_buf(), &LoadOptions::default())?;
    index.save(&out_dir.join(FEWSHOT_FILE))?;
    Ok(index)
}
