//! Generalised zero-shot split protocol.
//!
//! Categories are partitioned into seen, validation and unseen groups. Each
//! seen category contributes `instance_ratio` of its instances to training
//! and validation (`train_val_ratio` of those to training), and the rest to
//! test. Validation-category instances form the unseen part of the
//! validation set; unseen-category instances all go to test.

use serde::{Deserialize, Serialize};

use super::{Bundle, DataError};
use crate::numerics::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// `(seen, validation, unseen)` category counts.
    pub category_counts: (usize, usize, usize),
    pub instance_ratio: f64,
    pub train_val_ratio: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            category_counts: (4, 4, 4),
            instance_ratio: 0.70,
            train_val_ratio: 0.90,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GzslSplit {
    pub seed: u64,
    pub seen_categories: Vec<usize>,
    pub validation_categories: Vec<usize>,
    pub unseen_categories: Vec<usize>,
    /// Sample indices, each list sorted.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// `(train, val, test)` instance counts for a seen category of size `n`.
fn seen_cells(n: usize, instance_ratio: f64, train_val_ratio: f64) -> Result<(usize, usize, usize), DataError> {
    if n < 4 {
        return Err(DataError::Split(format!(
            "a seen category needs at least 4 instances to fill train/val/test, got {n}"
        )));
    }
    // The small epsilon keeps exact products such as 100 * 0.7 = 70 from
    // flooring to 69.
    let floor = |x: f64| (x + 1e-9).floor() as usize;
    let selected = floor(n as f64 * instance_ratio).clamp(2, n - 1);
    let train = floor(selected as f64 * train_val_ratio).clamp(1, selected - 1);
    Ok((train, selected - train, n - selected))
}

pub fn gzsl_split(bundle: &Bundle, config: &SplitConfig) -> Result<GzslSplit, DataError> {
    let (ns, nv, nu) = config.category_counts;
    let c = bundle.num_categories();
    if ns + nv + nu != c {
        return Err(DataError::Split(format!(
            "category counts {ns}+{nv}+{nu} do not sum to {c} categories"
        )));
    }
    if ns == 0 {
        return Err(DataError::Split("at least one seen category is required".into()));
    }
    for (name, r) in [("instance_ratio", config.instance_ratio), ("train_val_ratio", config.train_val_ratio)] {
        if !(r > 0.0 && r < 1.0) {
            return Err(DataError::Split(format!("{name} must lie in (0, 1), got {r}")));
        }
    }

    let mut rng = SeededRng::new(config.seed);
    let mut order: Vec<usize> = (0..c).collect();
    rng.shuffle(&mut order);
    let mut seen = order[..ns].to_vec();
    let mut validation = order[ns..ns + nv].to_vec();
    let mut unseen = order[ns + nv..].to_vec();
    seen.sort_unstable();
    validation.sort_unstable();
    unseen.sort_unstable();

    let by_cat = bundle.indices_by_category();
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for &cat in &seen {
        let mut idx = by_cat[cat].clone();
        let (nt, nval, _) = seen_cells(idx.len(), config.instance_ratio, config.train_val_ratio)
            .map_err(|e| DataError::Split(format!("category `{}`: {e}", bundle.prototypes.names()[cat])))?;
        rng.shuffle(&mut idx);
        train.extend_from_slice(&idx[..nt]);
        val.extend_from_slice(&idx[nt..nt + nval]);
        test.extend_from_slice(&idx[nt + nval..]);
    }
    for &cat in &validation {
        val.extend_from_slice(&by_cat[cat]);
    }
    for &cat in &unseen {
        test.extend_from_slice(&by_cat[cat]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    let split = GzslSplit {
        seed: config.seed,
        seen_categories: seen,
        validation_categories: validation,
        unseen_categories: unseen,
        train,
        val,
        test,
    };
    split.check(bundle)?;
    Ok(split)
}

impl GzslSplit {
    pub fn part_of(&self, sample: usize) -> Option<Part> {
        if self.train.binary_search(&sample).is_ok() {
            Some(Part::Train)
        } else if self.val.binary_search(&sample).is_ok() {
            Some(Part::Val)
        } else if self.test.binary_search(&sample).is_ok() {
            Some(Part::Test)
        } else {
            None
        }
    }

    pub fn is_seen(&self, category: usize) -> bool {
        self.seen_categories.binary_search(&category).is_ok()
    }

    /// Verifies the partition invariants against `bundle`.
    pub fn check(&self, bundle: &Bundle) -> Result<(), DataError> {
        let c = bundle.num_categories();
        let mut owner = vec![0u8; c];
        for (tag, cats) in [(1u8, &self.seen_categories), (2, &self.validation_categories), (3, &self.unseen_categories)] {
            for &cat in cats {
                if cat >= c || owner[cat] != 0 {
                    return Err(DataError::Split(format!("category {cat} is out of range or assigned twice")));
                }
                owner[cat] = tag;
            }
        }
        if owner.contains(&0) {
            return Err(DataError::Split("category subsets do not cover every category".into()));
        }
        let mut count = vec![0u8; bundle.samples.len()];
        for (part, list) in [(Part::Train, &self.train), (Part::Val, &self.val), (Part::Test, &self.test)] {
            for &i in list {
                let Some(slot) = count.get_mut(i) else {
                    return Err(DataError::Split(format!("sample index {i} out of range")));
                };
                *slot += 1;
                let group = owner[bundle.samples[i].label];
                let allowed = match part {
                    Part::Train => group == 1,
                    Part::Val => group == 1 || group == 2,
                    Part::Test => group == 1 || group == 3,
                };
                if !allowed {
                    return Err(DataError::Split(format!(
                        "sample {i} of category {} cannot be in {part:?}",
                        bundle.samples[i].label
                    )));
                }
            }
        }
        if let Some(i) = count.iter().position(|&n| n != 1) {
            return Err(DataError::Split(format!("sample {i} appears {} times", count[i])));
        }
        Ok(())
    }
}
