//! Reverse-mode gradients of every objective term against central
//! differences on a small random instance.

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::{init_params, overall_loss, prepare_bundle, Dims, LossBreakdown, ObjectiveContext, PreparedSample, Weights, TERM_NAMES};
use super::EngineError;
use crate::data::{generate_synthetic_corpus, GeneratorSpec};
use crate::fusion::TaskKind;
use crate::numerics::{
    compare_gradients_with_floor, evaluate_with_gradients, Gradients, Graph, ModelParams, NumericsError, SeededRng, Tensor, GRADCHECK_FLOOR,
    GRADCHECK_STEP,
};

/// Largest accepted relative error.
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub task: TaskKind,
    pub d: usize,
    pub h: usize,
    pub batch: usize,
    /// `(seen, unseen)` category counts.
    pub categories: (usize, usize),
    /// Synthetic draws per unseen category.
    pub k: usize,
    /// Test hook: perturbs the analytic gradient of the named term.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskKind::Met,
            d: 8,
            h: 8,
            batch: 4,
            categories: (3, 2),
            k: 2,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub value: f64,
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub entries: Vec<GradcheckEntry>,
    pub passed: bool,
}

fn term_value(b: &LossBreakdown, name: &str) -> f64 {
    match name {
        "L_reg" => b.reg,
        "L_cl" => b.cl,
        "L_rank" => b.rank,
        "L_vae" => b.vae,
        "L_ce" => b.ce,
        "L_align" => b.align,
        _ => b.total,
    }
}

/// Checks the six terms and the weighted total. A single central-difference
/// sweep evaluates all seven values per perturbation; the noise stream is
/// replayed from the same state for every evaluation.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport, EngineError> {
    let (ns, nu) = opts.categories;
    if ns == 0 || nu == 0 || opts.batch == 0 || opts.k == 0 {
        return Err(EngineError::Invalid {
            op: "gradcheck",
            detail: "needs seen and unseen categories, a batch and k >= 1".into(),
        });
    }
    let bundle = generate_synthetic_corpus(&GeneratorSpec {
        task: opts.task,
        num_categories: ns + nu,
        d: opts.d,
        samples_per_category: opts.batch.div_ceil(ns),
        seed: opts.seed,
        ..GeneratorSpec::default()
    })?;
    let prepared = prepare_bundle(&bundle)?;
    let batch: Vec<&PreparedSample> = prepared.iter().filter(|s| s.label < ns).take(opts.batch).collect();
    let seen: Vec<usize> = (0..ns).collect();
    let unseen: Vec<usize> = (ns..ns + nu).collect();
    let seen_prototypes = bundle.prototypes.subset(&seen).embeddings().clone();
    let unseen_prototypes = bundle.prototypes.subset(&unseen).embeddings().clone();
    let seen_index: Vec<Option<usize>> = (0..ns + nu).map(|c| (c < ns).then_some(c)).collect();
    let config = TrainConfig {
        h: opts.h,
        k: opts.k,
        eta: 1.5,
        zeta: 0.7,
        ib_beta: 1.0,
        task: opts.task,
        seed: opts.seed,
        ..TrainConfig::default()
    };
    let ctx = ObjectiveContext {
        config: &config,
        seen_prototypes: &seen_prototypes,
        seen_index: &seen_index,
        synth_prototypes: &unseen_prototypes,
    };
    let params = init_params(&Dims::new(opts.task, opts.d, opts.h), &mut SeededRng::derived(opts.seed, 1));
    let noise = SeededRng::derived(opts.seed, 2);

    let forward = |p: &ModelParams| -> Result<LossBreakdown, NumericsError> {
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let w = Weights::bind(&bound)?;
        let terms = overall_loss(&mut g, &w, &batch, &ctx, &mut noise.clone())?;
        g.ensure_finite()?;
        Ok(terms.values(&g))
    };

    // Central differences for all terms at once.
    let mut numeric: Vec<Vec<Tensor>> = vec![Vec::with_capacity(params.len()); TERM_NAMES.len()];
    let mut probe = params.clone();
    for pi in 0..params.len() {
        let shape = params.by_index(pi).value().shape().to_vec();
        let mut grads: Vec<Tensor> = (0..TERM_NAMES.len()).map(|_| Tensor::zeros(&shape)).collect();
        for k in 0..params.by_index(pi).value().len() {
            let x0 = params.by_index(pi).value().data()[k];
            probe.by_index_mut(pi).value_mut().data_mut()[k] = x0 + GRADCHECK_STEP;
            let fp = forward(&probe)?;
            probe.by_index_mut(pi).value_mut().data_mut()[k] = x0 - GRADCHECK_STEP;
            let fm = forward(&probe)?;
            probe.by_index_mut(pi).value_mut().data_mut()[k] = x0;
            for (t, name) in TERM_NAMES.iter().enumerate() {
                grads[t].data_mut()[k] = (term_value(&fp, name) - term_value(&fm, name)) / (2.0 * GRADCHECK_STEP);
            }
        }
        for (t, g) in grads.into_iter().enumerate() {
            numeric[t].push(g);
        }
    }

    let mut entries = Vec::with_capacity(TERM_NAMES.len());
    for (t, name) in TERM_NAMES.iter().enumerate() {
        let (value, mut analytic) = evaluate_with_gradients::<_, NumericsError>(
            |g, bound| {
                let w = Weights::bind(bound)?;
                let terms = overall_loss(g, &w, &batch, &ctx, &mut noise.clone())?;
                Ok(terms.by_name(name).expect("known term"))
            },
            &params,
        )?;
        if opts.corrupt.as_deref() == Some(*name) {
            corrupt(&mut analytic);
        }
        let floor = GRADCHECK_FLOOR * value.abs().max(1.0);
        let numeric = Gradients(std::mem::take(&mut numeric[t]));
        let comparisons = compare_gradients_with_floor(&params, &analytic, &numeric, floor);
        let worst = comparisons
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .expect("parameters exist");
        entries.push(GradcheckEntry {
            name: name.to_string(),
            value,
            max_rel_error: worst.max_rel_error,
            worst_parameter: worst.parameter.clone(),
            passed: worst.max_rel_error < GRADCHECK_THRESHOLD,
        });
    }
    Ok(GradcheckReport {
        threshold: GRADCHECK_THRESHOLD,
        passed: entries.iter().all(|e| e.passed),
        entries,
    })
}

fn corrupt(grads: &mut Gradients) {
    for g in &mut grads.0 {
        let v = &mut g.data_mut()[0];
        *v += 0.1 * v.abs().max(1.0);
    }
}
