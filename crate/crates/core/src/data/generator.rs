//! Synthetic embedding corpus.
//!
//! Each category `y` has a latent prototype `p_y ~ s N(0, I)`. A sample
//! draws a base `b ~ N(p_y, sw^2 I)`. Token rows are `b` plus noise. Patch
//! rows mix `b` with category-free noise, with weight `rho` on `b`. The
//! published prototype row is `p_y` with a little extra noise. Values are
//! rounded to `f32` so that a bundle survives serialisation unchanged.

use serde::{Deserialize, Serialize};

use super::{Bundle, DataError, EmbeddedSample};
use crate::fusion::{PrototypeSet, TaskKind};
use crate::numerics::{SeededRng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub task: TaskKind,
    pub num_categories: usize,
    /// Defaults to `category_00`, `category_01`, ...
    pub category_names: Option<Vec<String>>,
    pub d: usize,
    pub samples_per_category: usize,
    /// Inclusive `[min, max]` token count, including the marker rows.
    pub tokens: (usize, usize),
    pub patches: (usize, usize),
    pub prototype_scale: f64,
    pub spread: f64,
    pub coupling: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::Met,
            num_categories: 4,
            category_names: None,
            d: 16,
            samples_per_category: 20,
            tokens: (4, 10),
            patches: (2, 6),
            prototype_scale: 1.0,
            spread: 0.125,
            coupling: 0.8,
            seed: 0,
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> DataError {
    DataError::InvalidSpec {
        field,
        reason: reason.into(),
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_categories == 0 {
            return Err(invalid("num_categories", "must be at least 1"));
        }
        if let Some(names) = &self.category_names {
            if names.len() != self.num_categories {
                return Err(invalid(
                    "category_names",
                    format!("{} names for {} categories", names.len(), self.num_categories),
                ));
            }
        }
        if self.d == 0 {
            return Err(invalid("d", "must be at least 1"));
        }
        if self.samples_per_category == 0 {
            return Err(invalid("samples_per_category", "must be at least 1"));
        }
        // CLS, E1, (E2,) SEP.
        let min_tokens = match self.task {
            TaskKind::Met => 3,
            TaskKind::Mre => 4,
        };
        let (lo, hi) = self.tokens;
        if lo < min_tokens || hi < lo {
            return Err(invalid(
                "tokens",
                format!("range [{lo}, {hi}] must satisfy {min_tokens} <= min <= max for {}", self.task),
            ));
        }
        let (lo, hi) = self.patches;
        if lo == 0 || hi < lo {
            return Err(invalid("patches", format!("range [{lo}, {hi}] must satisfy 1 <= min <= max")));
        }
        if !(self.prototype_scale > 0.0 && self.prototype_scale.is_finite()) {
            return Err(invalid("prototype_scale", format!("must be positive, got {}", self.prototype_scale)));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(invalid("spread", format!("must be positive, got {}", self.spread)));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(invalid("coupling", format!("must lie in [0, 1], got {}", self.coupling)));
        }
        Ok(())
    }

    fn names(&self) -> Vec<String> {
        self.category_names
            .clone()
            .unwrap_or_else(|| (0..self.num_categories).map(|i| format!("category_{i:02}")).collect())
    }
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

fn gaussian_row(rng: &mut SeededRng, mean: &[f64], sd: f64) -> Vec<f64> {
    mean.iter().map(|&m| m + sd * rng.standard_normal()).collect()
}

fn generate_sample(spec: &GeneratorSpec, label: usize, index: usize, prototype: &[f64]) -> EmbeddedSample {
    let mut rng = SeededRng::derived(spec.seed, index as u64);
    let sw = spec.spread;
    let rho = spec.coupling;
    let t = rng.range_inclusive(spec.tokens.0, spec.tokens.1);
    let v = rng.range_inclusive(spec.patches.0, spec.patches.1);
    let base = gaussian_row(&mut rng, prototype, sw);

    let mut tokens = Vec::with_capacity(t * spec.d);
    for _ in 0..t {
        tokens.extend(gaussian_row(&mut rng, &base, sw).into_iter().map(round32));
    }
    let mut patches = Vec::with_capacity(v * spec.d);
    for _ in 0..v {
        for &b in &base {
            let x = rho * b + (1.0 - rho) * rng.standard_normal() + sw * rng.standard_normal();
            patches.push(round32(x));
        }
    }

    // CLS first, SEP last, entity markers strictly inside.
    let marker_e1 = rng.range_inclusive(1, t - 2);
    let marker_e2 = match spec.task {
        TaskKind::Met => None,
        TaskKind::Mre => {
            let mut e2 = rng.range_inclusive(1, t - 3);
            if e2 >= marker_e1 {
                e2 += 1;
            }
            Some(e2)
        }
    };
    EmbeddedSample {
        sample_id: format!("s{index:06}"),
        label,
        tokens: Tensor::matrix(t, spec.d, tokens).expect("token shape"),
        patches: Tensor::matrix(v, spec.d, patches).expect("patch shape"),
        marker_cls: 0,
        marker_e1,
        marker_e2,
    }
}

/// Builds a bundle fully determined by `spec` (including its seed).
pub fn generate_synthetic_corpus(spec: &GeneratorSpec) -> Result<Bundle, DataError> {
    spec.validate()?;
    let (c, d) = (spec.num_categories, spec.d);
    let mut rng = SeededRng::new(spec.seed);
    let latent: Vec<Vec<f64>> = (0..c)
        .map(|_| gaussian_row(&mut rng, &vec![0.0; d], spec.prototype_scale))
        .collect();
    let mut published = Vec::with_capacity(c * d);
    for p in &latent {
        published.extend(gaussian_row(&mut rng, p, spec.spread / 4.0).into_iter().map(round32));
    }
    let prototypes = PrototypeSet::new(spec.names(), Tensor::matrix(c, d, published).expect("prototype shape"))
        .map_err(|e| invalid("category_names", e.to_string()))?;

    let n = spec.samples_per_category;
    let samples = (0..c * n)
        .map(|i| generate_sample(spec, i / n, i, &latent[i / n]))
        .collect();
    let bundle = Bundle {
        task: spec.task,
        d,
        samples,
        prototypes,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::entity_representation;

    #[test]
    fn deterministic() {
        let spec = GeneratorSpec {
            seed: 17,
            ..GeneratorSpec::default()
        };
        assert_eq!(generate_synthetic_corpus(&spec).unwrap(), generate_synthetic_corpus(&spec).unwrap());
        let other = GeneratorSpec { seed: 18, ..spec.clone() };
        assert_ne!(generate_synthetic_corpus(&spec).unwrap(), generate_synthetic_corpus(&other).unwrap());
    }

    #[test]
    fn bundle_invariants_and_markers() {
        for task in [TaskKind::Met, TaskKind::Mre] {
            let b = generate_synthetic_corpus(&GeneratorSpec {
                task,
                num_categories: 3,
                samples_per_category: 30,
                ..GeneratorSpec::default()
            })
            .unwrap();
            assert_eq!(b.samples.len(), 90);
            for s in &b.samples {
                let t = s.token_count();
                assert!((4..=10).contains(&t) && (2..=6).contains(&s.patch_count()));
                assert_eq!(s.marker_cls, 0);
                assert!(s.marker_e1 >= 1 && s.marker_e1 < t - 1);
                if let Some(e2) = s.marker_e2 {
                    assert!(e2 >= 1 && e2 < t - 1 && e2 != s.marker_e1);
                }
                assert!(entity_representation(s, task).is_ok());
                assert!(s.tokens.data().iter().all(|&v| v == v as f32 as f64));
            }
        }
    }

    #[test]
    fn validation_names_the_field() {
        let bad = GeneratorSpec {
            coupling: 2.0,
            ..GeneratorSpec::default()
        };
        let err = generate_synthetic_corpus(&bad).unwrap_err();
        assert!(err.to_string().contains("coupling"), "{err}");
        let bad = GeneratorSpec {
            spread: 0.0,
            ..GeneratorSpec::default()
        };
        assert!(generate_synthetic_corpus(&bad).unwrap_err().to_string().contains("spread"));
        let bad = GeneratorSpec {
            task: TaskKind::Mre,
            tokens: (3, 5),
            ..GeneratorSpec::default()
        };
        assert!(generate_synthetic_corpus(&bad).unwrap_err().to_string().contains("tokens"));
    }

    #[test]
    fn full_coupling_tracks_token_base() {
        let b = generate_synthetic_corpus(&GeneratorSpec {
            coupling: 1.0,
            spread: 1e-6,
            ..GeneratorSpec::default()
        })
        .unwrap();
        for s in &b.samples {
            for i in 0..s.patch_count() {
                for (p, t) in s.patches.row_slice(i).iter().zip(s.tokens.row_slice(0)) {
                    assert!((p - t).abs() < 1e-4);
                }
            }
        }
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn zero_coupling_decouples_patches() {
        let spec = GeneratorSpec {
            coupling: 0.0,
            num_categories: 6,
            samples_per_category: 200,
            d: 4,
            prototype_scale: 3.0,
            ..GeneratorSpec::default()
        };
        let b = generate_synthetic_corpus(&spec).unwrap();
        let proto: Vec<f64> = b.samples.iter().map(|s| b.prototypes.row(s.label)[0]).collect();
        let patch: Vec<f64> = b.samples.iter().map(|s| s.patches.get(0, 0)).collect();
        let token: Vec<f64> = b.samples.iter().map(|s| s.tokens.get(0, 0)).collect();
        assert!(pearson(&proto, &patch).abs() < 0.1);
        assert!(pearson(&proto, &token) > 0.9);
    }

    #[test]
    fn nearest_prototype_separates_categories() {
        let b = generate_synthetic_corpus(&GeneratorSpec {
            num_categories: 8,
            samples_per_category: 100,
            d: 32,
            prototype_scale: 1.0,
            spread: 0.1,
            seed: 3,
            ..GeneratorSpec::default()
        })
        .unwrap();
        let correct = b
            .samples
            .iter()
            .filter(|s| {
                let cls = s.token_row(s.marker_cls);
                let dist = |j: usize| -> f64 { cls.iter().zip(b.prototypes.row(j)).map(|(a, p)| (a - p) * (a - p)).sum() };
                let best = (0..8).min_by(|&i, &j| dist(i).total_cmp(&dist(j))).unwrap();
                best == s.label
            })
            .count();
        assert!(correct as f64 / b.samples.len() as f64 > 0.9);
    }
}
