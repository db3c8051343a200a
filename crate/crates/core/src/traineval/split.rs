use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Scene;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

/// Scene indices per partition, each in ascending order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Groups scenes that share an aircraft of the same source over overlapping
/// steps, shuffles the groups and fills train, val and test in that order.
///
/// Whole groups move together, so overlapping windows never straddle a split.
pub fn split_scenes(scenes: &[Scene], fractions: SplitFractions, seed: u64) -> Result<DataSplit> {
    let parts = [fractions.train, fractions.val, fractions.test];
    if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {parts:?} must be in [0, 1] and sum to 1")));
    }
    let mut sets = DisjointSet((0..scenes.len()).collect());
    let mut tracks: BTreeMap<(&str, u32), Vec<usize>> = BTreeMap::new();
    for (k, s) in scenes.iter().enumerate() {
        for &a in &s.aircraft {
            tracks.entry((s.source.as_str(), a)).or_default().push(k);
        }
    }
    for members in tracks.values_mut() {
        members.sort_by_key(|&k| scenes[k].start_step);
        let mut reach = i64::MIN;
        let mut prev = None;
        for &k in members.iter() {
            let s = &scenes[k];
            if let Some(p) = prev.filter(|_| s.start_step < reach) {
                sets.union(p, k);
            }
            reach = reach.max(s.start_step + s.steps() as i64);
            prev = Some(k);
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for k in 0..scenes.len() {
        groups.entry(sets.find(k)).or_default().push(k);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total = scenes.len() as f64;
    let train_end = fractions.train * total;
    let val_end = (fractions.train + fractions.val) * total;
    let mut split = DataSplit::default();
    let mut assigned = 0usize;
    for g in groups {
        let at = assigned as f64;
        let bucket = if at < train_end {
            &mut split.train
        } else if at < val_end {
            &mut split.val
        } else {
            &mut split.test
        };
        assigned += g.len();
        bucket.extend(g);
    }
    for part in [&mut split.train, &mut split.val, &mut split.test] {
        part.sort_unstable();
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scene(source: &str, start: i64, aircraft: Vec<u32>) -> Scene {
        let n = aircraft.len();
        let positions = Tensor::from_fn(&[3, 10, n], |k| k as f64);
        Scene::from_positions(positions, 4, 6, aircraft, start, source).unwrap()
    }

    #[test]
    fn overlapping_windows_stay_together() {
        let mut scenes = Vec::new();
        for src in 0..20 {
            for start in 0..5 {
                scenes.push(scene(&format!("s{src}"), start, vec![0, 1]));
            }
        }
        let split = split_scenes(&scenes, SplitFractions::default(), 3).unwrap();
        assert_eq!(split.train.len() + split.val.len() + split.test.len(), 100);
        for part in [&split.train, &split.val, &split.test] {
            for &k in part.iter() {
                let src = &scenes[k].source;
                assert!(part.iter().filter(|&&j| &scenes[j].source == src).count() == 5);
            }
        }
        assert_eq!(split.train.len(), 70);
        assert_eq!(split.val.len(), 10);
        assert_eq!(split.test.len(), 20);
    }

    #[test]
    fn disjoint_windows_may_separate() {
        let scenes: Vec<Scene> = (0..10).map(|k| scene("one", k * 10, vec![0, 1])).collect();
        let split = split_scenes(&scenes, SplitFractions::default(), 1).unwrap();
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (7, 1, 2));
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let f = SplitFractions { train: 0.9, val: 0.2, test: 0.1 };
        assert!(split_scenes(&[], f, 0).is_err());
    }
}
