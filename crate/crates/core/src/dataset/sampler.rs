use rand::Rng as _;

use super::{DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Two annotations of one task, as positions into the index's annotation list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairSample {
    pub task: usize,
    pub source: usize,
    pub target: usize,
}

/// Uniform task, then two distinct annotations of that task.
#[derive(Clone, Debug)]
pub struct PairSampler {
    pools: Vec<Vec<usize>>,
}

impl PairSampler {
    /// Every task in the vocabulary needs at least two annotations in `split`.
    pub fn new(index: &DatasetIndex, split: Split) -> Result<Self> {
        let pools: Vec<Vec<usize>> = index.tasks().iter().map(|t| index.annotations_for(split, t)).collect();
        if let Some((t, pool)) = index.tasks().iter().zip(&pools).find(|(_, p)| p.len() < 2) {
            return Err(Error::Sampling {
                task: t.clone(),
                count: pool.len(),
            });
        }
        if pools.is_empty() {
            return Err(Error::contract("no tasks to sample from"));
        }
        Ok(PairSampler { pools })
    }

    pub fn draw(&self, rng: &mut Rng) -> PairSample {
        let task = rng.random_range(0..self.pools.len());
        let pool = &self.pools[task];
        let a = rng.random_range(0..pool.len());
        let mut b = rng.random_range(0..pool.len() - 1);
        if b >= a {
            b += 1;
        }
        PairSample {
            task,
            source: pool[a],
            target: pool[b],
        }
    }

    pub fn batch(&self, rng: &mut Rng, n: usize) -> Vec<PairSample> {
        (0..n).map(|_| self.draw(rng)).collect()
    }
}

pub fn sample_pair_batch(index: &DatasetIndex, split: Split, batch: usize, seed: u64) -> Result<Vec<PairSample>> {
    let sampler = PairSampler::new(index, split)?;
    Ok(sampler.batch(&mut rng::stream(seed, "pairs"), batch))
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;
    use crate::objective::Keypoint;
    use std::collections::BTreeMap;

    fn index(tasks: &[&str], per_task: usize) -> DatasetIndex {
        let mut images = Vec::new();
        let mut annotations = Vec::new();
        for i in 0..per_task {
            images.push(ImageRecord {
                id: format!("img{i}"),
                path: format!("img{i}.png"),
                width: 16,
                height: 16,
                category: "thing".into(),
            });
            for t in tasks {
                annotations.push(Annotation {
                    image_id: format!("img{i}"),
                    task: t.to_string(),
                    keypoints: vec![Keypoint::new(1.0, 1.0); 5],
                    difficulty: Difficulty::Medium,
                    split: Split::Train,
                });
            }
        }
        let file = AnnotationFile {
            version: 1,
            tasks: tasks.iter().map(|s| s.to_string()).collect(),
            categories: vec!["thing".into()],
            task_categories: tasks.iter().map(|t| (t.to_string(), vec!["thing".into()])).collect::<BTreeMap<_, _>>(),
            images,
            annotations,
            gating_overrides: BTreeMap::new(),
        };
        let opts = LoadOptions {
            check_images: false,
            ..LoadOptions::default()
        };
        DatasetIndex::new(file, "/".into(), &opts).unwrap()
    }

    #[test]
    fn two_images_give_one_of_two_orders() {
        let idx = index(&["pour"], 2);
        for seed in 0..20 {
            let b = sample_pair_batch(&idx, Split::Train, 1, seed).unwrap();
            let p = b[0];
            assert!(matches!((p.source, p.target), (0, 1) | (1, 0)));
        }
    }

    #[test]
    fn seeded_batches_repeat() {
        let idx = index(&["pour", "poke"], 10);
        let a = sample_pair_batch(&idx, Split::Train, 32, 1).unwrap();
        assert_eq!(a, sample_pair_batch(&idx, Split::Train, 32, 1).unwrap());
        assert_ne!(a, sample_pair_batch(&idx, Split::Train, 32, 2).unwrap());
        for p in &a {
            assert_ne!(p.source, p.target);
            assert_eq!(idx.annotations()[p.source].task, idx.tasks()[p.task]);
            assert_eq!(idx.annotations()[p.target].task, idx.tasks()[p.task]);
        }
    }

    #[test]
    fn tasks_are_drawn_evenly() {
        let idx = index(&["pour", "poke"], 5);
        let b = sample_pair_batch(&idx, Split::Train, 10_000, 3).unwrap();
        let share = b.iter().filter(|p| p.task == 0).count() as f64 / 10_000.0;
        assert!((share - 0.5).abs() < 0.02, "{share}");
    }

    #[test]
    fn lonely_task_is_a_sampling_error() {
        let idx = index(&["pour"], 1);
        match sample_pair_batch(&idx, Split::Train, 1, 0) {
            Err(Error::Sampling { task, count }) => assert_eq!((task.as_str(), count), ("pour", 1)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            sample_pair_batch(&idx, Split::Test, 1, 0),
            Err(Error::Sampling { count: 0, .. })
        ));
    }
}
