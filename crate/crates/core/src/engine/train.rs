//! Mini-batch training with per-epoch validation, checkpointing and
//! multi-seed summaries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{SynthSource, TrainConfig};
use super::export::FeatureMatrix;
use super::metrics::{calibrated_predictions, evaluate_predictions, gamma_grid, select_gamma, sweep_gamma, EvalReport, GammaSweep};
use super::model::{init_params, overall_loss, prepare_bundle, score_and_features, Dims, LossBreakdown, ObjectiveContext, PreparedSample, Weights};
use super::EngineError;
use crate::data::{Bundle, GzslSplit};
use crate::hmcvae::{synthesize_unseen, Decoder};
use crate::lorentz::Curvature;
use crate::numerics::{evaluate_with_gradients, Graph, ModelParams, NumericsError, OptimizerState, RngState, SeededRng, Tensor};

/// Samples scored per worker chunk.
const SCORE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestState {
    pub epoch: usize,
    pub gamma: f64,
    /// Validation harmonic-mean accuracy at `gamma`.
    pub harmonic: f64,
    pub grid: Vec<f64>,
    pub params: ModelParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: LossBreakdown,
    pub validation: EvalReport,
    pub sweep: GammaSweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    /// Completed epochs.
    pub epoch: usize,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub best: Option<BestState>,
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<LossBreakdown>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), EngineError> {
        let json = serde_json::to_vec(self).map_err(|e| EngineError::Format {
            what: "checkpoint",
            detail: e.to_string(),
        })?;
        std::fs::write(path, json).map_err(|e| EngineError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let bytes = std::fs::read(path).map_err(|e| EngineError::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| EngineError::Format {
            what: "checkpoint",
            detail: format!("{}: {e}", path.display()),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub report: EvalReport,
    /// Sweep over the selection grid on the test scores, for the
    /// monotonicity check.
    pub sweep: GammaSweep,
}

pub struct TrainSession {
    config: TrainConfig,
    split: GzslSplit,
    prepared: Vec<PreparedSample>,
    /// Indexed by global category.
    is_seen: Vec<bool>,
    prototypes: Tensor,
    seen_prototypes: Tensor,
    seen_index: Vec<Option<usize>>,
    synth_prototypes: Tensor,
    params: ModelParams,
    optimizer: OptimizerState,
    rng: SeededRng,
    epoch: usize,
    best: Option<BestState>,
    history: Vec<EpochRecord>,
    step_losses: Vec<LossBreakdown>,
}

fn config_error(field: &'static str, reason: impl Into<String>) -> EngineError {
    EngineError::Config {
        field,
        reason: reason.into(),
    }
}

impl TrainSession {
    /// Fresh session: parameters from `derived(seed, 0)`, the shuffling and
    /// noise stream from `new(seed)`.
    pub fn new(bundle: &Bundle, split: &GzslSplit, config: &TrainConfig) -> Result<Self, EngineError> {
        let dims = Dims::new(config.task, bundle.d, config.h);
        let params = init_params(&dims, &mut SeededRng::derived(config.seed, 0));
        let optimizer = OptimizerState::new(config.optimizer, &params, config.lr);
        let mut s = Self::assemble(bundle, split, config, params, optimizer)?;
        s.rng = SeededRng::new(config.seed);
        Ok(s)
    }

    /// Continues from `checkpoint`. The bundle and split must be the ones it
    /// was trained on.
    pub fn resume(bundle: &Bundle, split: &GzslSplit, checkpoint: Checkpoint) -> Result<Self, EngineError> {
        let expected = checkpoint.config.hash();
        if expected != checkpoint.config_hash {
            return Err(EngineError::ConfigMismatch {
                expected,
                found: checkpoint.config_hash,
            });
        }
        let mut s = Self::assemble(bundle, split, &checkpoint.config, checkpoint.params, checkpoint.optimizer)?;
        s.rng = SeededRng::from_state(&checkpoint.rng).ok_or_else(|| EngineError::Format {
            what: "checkpoint",
            detail: format!("unsupported rng algorithm `{}`", checkpoint.rng.algorithm),
        })?;
        s.epoch = checkpoint.epoch;
        s.best = checkpoint.best;
        s.history = checkpoint.history;
        s.step_losses = checkpoint.step_losses;
        Ok(s)
    }

    fn assemble(
        bundle: &Bundle,
        split: &GzslSplit,
        config: &TrainConfig,
        params: ModelParams,
        optimizer: OptimizerState,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        if config.task != bundle.task {
            return Err(config_error("task", format!("config says {:?}, bundle holds {:?}", config.task, bundle.task)));
        }
        split.check(bundle)?;
        if split.train.is_empty() {
            return Err(EngineError::Invalid {
                op: "train",
                detail: "split has no training instances".into(),
            });
        }
        let c = bundle.num_categories();
        let mut is_seen = vec![false; c];
        let mut seen_index = vec![None; c];
        for (i, &cat) in split.seen_categories.iter().enumerate() {
            is_seen[cat] = true;
            seen_index[cat] = Some(i);
        }
        if !split.val.iter().any(|&i| !is_seen[bundle.samples[i].label]) {
            return Err(EngineError::NoValidationUnseen);
        }
        let synth_cats = match config.synth_source {
            SynthSource::All => {
                let mut all = split.validation_categories.clone();
                all.extend_from_slice(&split.unseen_categories);
                all.sort_unstable();
                all
            }
            SynthSource::Test => split.unseen_categories.clone(),
            SynthSource::Validation => split.validation_categories.clone(),
        };
        if config.synthesize && synth_cats.is_empty() {
            return Err(config_error("synth_source", "selected category group is empty"));
        }
        let expected = Dims::new(config.task, bundle.d, config.h).layout();
        for (name, shape) in &expected {
            match params.value(name) {
                Ok(t) if t.shape() == shape => {}
                _ => return Err(config_error("h", format!("parameter `{name}` does not match the {shape:?} layout"))),
            }
        }
        let prototypes = bundle.prototypes.embeddings().clone();
        Ok(Self {
            config: config.clone(),
            split: split.clone(),
            prepared: prepare_bundle(bundle)?,
            is_seen,
            seen_prototypes: bundle.prototypes.subset(&split.seen_categories).embeddings().clone(),
            synth_prototypes: bundle.prototypes.subset(&synth_cats).embeddings().clone(),
            prototypes,
            seen_index,
            params,
            optimizer,
            rng: SeededRng::new(config.seed),
            epoch: 0,
            best: None,
            history: Vec::new(),
            step_losses: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn best(&self) -> Option<&BestState> {
        self.best.as_ref()
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    /// Loss breakdown of every optimizer step so far.
    pub fn step_losses(&self) -> &[LossBreakdown] {
        &self.step_losses
    }

    /// Total loss of the first optimizer step.
    pub fn initial_loss(&self) -> Option<f64> {
        self.step_losses.first().map(|l| l.total)
    }

    /// Mean total loss over the steps of the last completed epoch.
    pub fn final_loss(&self) -> Option<f64> {
        let steps = self.history.last()?.steps;
        let tail = &self.step_losses[self.step_losses.len() - steps..];
        Some(tail.iter().map(|l| l.total).sum::<f64>() / steps as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            epoch: self.epoch,
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            rng: self.rng.state(),
            best: self.best.clone(),
            history: self.history.clone(),
            step_losses: self.step_losses.clone(),
        }
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self) -> Result<(), EngineError> {
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// One pass over the shuffled training set followed by validation.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord, EngineError> {
        let epoch = self.epoch + 1;
        let mut order = self.split.train.clone();
        self.rng.shuffle(&mut order);
        let mut mean = LossBreakdown::default();
        let batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        let steps = batches.len();
        for (b, chunk) in batches.into_iter().enumerate() {
            let losses = self.step(chunk).map_err(|e| match e {
                EngineError::Numerics(n) => EngineError::Divergence {
                    epoch,
                    batch: b + 1,
                    detail: n.to_string(),
                },
                other => other,
            })?;
            mean.accumulate(&losses, 1.0 / steps as f64);
            self.step_losses.push(losses);
        }

        let (grid, sweep, validation) = self.validate()?;
        let chosen = validation.gamma;
        let harmonic = validation.overall.accuracy;
        self.epoch = epoch;
        if self.best.as_ref().is_none_or(|b| harmonic > b.harmonic) {
            self.best = Some(BestState {
                epoch,
                gamma: chosen,
                harmonic,
                grid,
                params: self.params.clone(),
            });
        }
        self.history.push(EpochRecord {
            epoch,
            steps,
            mean_loss: mean,
            validation,
            sweep,
        });
        Ok(self.history.last().expect("just pushed"))
    }

    fn step(&mut self, indices: &[usize]) -> Result<LossBreakdown, EngineError> {
        let batch: Vec<&PreparedSample> = indices.iter().map(|&i| &self.prepared[i]).collect();
        let ctx = ObjectiveContext {
            config: &self.config,
            seen_prototypes: &self.seen_prototypes,
            seen_index: &self.seen_index,
            synth_prototypes: &self.synth_prototypes,
        };
        let rng = &mut self.rng;
        let mut breakdown = LossBreakdown::default();
        let (_, grads) = evaluate_with_gradients::<_, NumericsError>(
            |g, bound| {
                let w = Weights::bind(bound)?;
                let terms = overall_loss(g, &w, &batch, &ctx, rng)?;
                breakdown = terms.values(g);
                Ok(terms.total)
            },
            &self.params,
        )?;
        let cfg = &self.config;
        let weighted = breakdown.weighted_sum(cfg.ib_beta, cfg.eta, cfg.zeta);
        if (weighted - breakdown.total).abs() > 1e-9 * breakdown.total.abs().max(1.0) {
            return Err(EngineError::Invalid {
                op: "overall_loss",
                detail: format!("weighted terms sum to {weighted}, total is {}", breakdown.total),
            });
        }
        self.optimizer.step(&mut self.params, &grads)?;
        if let Some(p) = self.params.iter().find(|p| !p.value().is_finite()) {
            return Err(NumericsError::NonFinite {
                op: "optimizer step",
                node: self.params.position(p.name()).unwrap_or(0),
            }
            .into());
        }
        Ok(breakdown)
    }

    /// Validation sweep with the current parameters. Candidates are the
    /// seen and validation categories; the latter count as unseen.
    fn validate(&self) -> Result<(Vec<f64>, GammaSweep, EvalReport), EngineError> {
        let mut candidates: Vec<usize> = self.split.seen_categories.clone();
        candidates.extend_from_slice(&self.split.validation_categories);
        candidates.sort_unstable();
        let scores = self.score(&self.params, &self.split.val, &candidates)?;
        let labels: Vec<usize> = self.split.val.iter().map(|&i| self.prepared[i].label).collect();
        let grid = match &self.config.gamma_grid {
            Some(g) => g.clone(),
            None => gamma_grid(&scores, self.config.gamma_points),
        };
        let (gamma, sweep) = select_gamma(&scores, &labels, &candidates, &self.is_seen, &grid)?;
        let preds = calibrated_predictions(&scores, &candidates, &self.is_seen, gamma)?;
        let report = evaluate_predictions(&labels, &preds, &self.is_seen, gamma);
        Ok((grid, sweep, report))
    }

    /// Scores of `samples` against `candidates` using posterior means.
    fn score(&self, params: &ModelParams, samples: &[usize], candidates: &[usize]) -> Result<Tensor, EngineError> {
        Ok(score_parallel(params, &self.prepared, samples, &self.prototypes.subset_rows(candidates), self.config.curvature)?.0)
    }

    /// Parameters used for evaluation: the best validation checkpoint, or
    /// the current ones before any epoch completed.
    pub fn eval_params(&self) -> &ModelParams {
        self.best.as_ref().map_or(&self.params, |b| &b.params)
    }

    /// Test evaluation over seen and unseen categories at `gamma`, or at the
    /// selected gamma when `None`.
    pub fn evaluate_test(&self, gamma: Option<f64>) -> Result<TestOutcome, EngineError> {
        let mut candidates: Vec<usize> = self.split.seen_categories.clone();
        candidates.extend_from_slice(&self.split.unseen_categories);
        candidates.sort_unstable();
        let params = self.eval_params();
        let scores = self.score(params, &self.split.test, &candidates)?;
        let labels: Vec<usize> = self.split.test.iter().map(|&i| self.prepared[i].label).collect();
        let gamma = gamma.or(self.best.as_ref().map(|b| b.gamma)).unwrap_or(0.0);
        if !(gamma >= 0.0) {
            return Err(config_error("gamma", format!("must be non-negative, got {gamma}")));
        }
        let preds = calibrated_predictions(&scores, &candidates, &self.is_seen, gamma)?;
        let report = evaluate_predictions(&labels, &preds, &self.is_seen, gamma);
        let mut grid = match &self.best {
            Some(b) => b.grid.clone(),
            None => gamma_grid(&scores, self.config.gamma_points),
        };
        grid.push(gamma);
        let sweep = sweep_gamma(&scores, &labels, &candidates, &self.is_seen, &grid)?;
        Ok(TestOutcome { report, sweep })
    }

    /// Sample features of every test instance, labelled by category.
    pub fn test_features(&self) -> Result<FeatureMatrix, EngineError> {
        let (_, features) = score_parallel(
            self.eval_params(),
            &self.prepared,
            &self.split.test,
            &self.seen_prototypes,
            self.config.curvature,
        )?;
        Ok(FeatureMatrix {
            labels: self.split.test.iter().map(|&i| self.prepared[i].label as u32).collect(),
            features,
        })
    }

    /// `k` synthetic features per unseen test category from the evaluation
    /// parameters, labelled by category.
    pub fn synthesize(&self, k: usize, seed: u64) -> Result<FeatureMatrix, EngineError> {
        let protos = self.prototypes.subset_rows(&self.split.unseen_categories);
        let features = synthesize_features(self.eval_params(), &protos, k, self.config.h, &mut SeededRng::new(seed))?;
        let labels = self
            .split
            .unseen_categories
            .iter()
            .flat_map(|&c| std::iter::repeat_n(c as u32, k))
            .collect();
        Ok(FeatureMatrix { labels, features })
    }
}

trait SubsetRows {
    fn subset_rows(&self, rows: &[usize]) -> Tensor;
}

impl SubsetRows for Tensor {
    fn subset_rows(&self, rows: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * self.cols());
        for &r in rows {
            data.extend_from_slice(self.row_slice(r));
        }
        Tensor::matrix(rows.len(), self.cols(), data).expect("row subset")
    }
}

/// Scores and features of `samples`, split across threads. Each sample is
/// scored independently, so chunking does not change any value.
fn score_parallel(
    params: &ModelParams,
    prepared: &[PreparedSample],
    samples: &[usize],
    prototypes: &Tensor,
    c: Curvature,
) -> Result<(Tensor, Tensor), NumericsError> {
    let chunks: Vec<&[usize]> = samples.chunks(SCORE_CHUNK).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(chunks.len()).max(1);
    let run = |chunk: &[usize]| {
        let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &prepared[i]).collect();
        score_and_features(params, &batch, prototypes, c)
    };
    let parts: Vec<Result<(Tensor, Tensor), NumericsError>> = if workers <= 1 {
        chunks.iter().map(|c| run(c)).collect()
    } else {
        std::thread::scope(|s| {
            let per = chunks.len().div_ceil(workers);
            let handles: Vec<_> = chunks
                .chunks(per)
                .map(|group| s.spawn(move || group.iter().map(|c| run(c)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("scoring worker panicked")).collect()
        })
    };
    let (mut scores, mut feats) = (Vec::new(), Vec::new());
    let (mut sc, mut fc) = (prototypes.rows(), 0);
    for part in parts {
        let (s, f) = part?;
        sc = s.cols();
        fc = f.cols();
        scores.extend_from_slice(s.data());
        feats.extend_from_slice(f.data());
    }
    let n = samples.len();
    Ok((Tensor::matrix(n, sc, scores)?, Tensor::matrix(n, fc, feats)?))
}

/// Decodes `k` prior draws per prototype row with the trained decoder.
pub fn synthesize_features(
    params: &ModelParams,
    prototypes: &Tensor,
    k: usize,
    h: usize,
    rng: &mut SeededRng,
) -> Result<Tensor, EngineError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let dec = Decoder {
        w1: bound.var("hmcvae.dec.w1")?,
        b1: bound.var("hmcvae.dec.b1")?,
        w2: bound.var("hmcvae.dec.w2")?,
        b2: bound.var("hmcvae.dec.b2")?,
    };
    let batch = synthesize_unseen(&mut g, prototypes, k, h, &dec, rng)?;
    g.ensure_finite()?;
    Ok(g.value(batch.features).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation, 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub report: EvalReport,
    pub best_epoch: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Monotonicity held on every validation and test sweep.
    pub monotone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub runs: Vec<SeedRun>,
    pub seen_accuracy: MeanStd,
    pub unseen_accuracy: MeanStd,
    /// Per-seed harmonic means, then averaged.
    pub overall_accuracy: MeanStd,
    pub overall_f1: MeanStd,
}

/// Trains and tests one model per seed on a fixed split.
pub fn run_seeds(bundle: &Bundle, split: &GzslSplit, config: &TrainConfig, seeds: &[u64]) -> Result<SeedSummary, EngineError> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..config.clone() };
        let mut session = TrainSession::new(bundle, split, &cfg)?;
        session.run()?;
        let test = session.evaluate_test(None)?;
        runs.push(SeedRun {
            seed,
            best_epoch: session.best().map_or(0, |b| b.epoch),
            initial_loss: session.initial_loss().unwrap_or(f64::NAN),
            final_loss: session.final_loss().unwrap_or(f64::NAN),
            monotone: test.sweep.monotone && session.history().iter().all(|r| r.sweep.monotone),
            report: test.report,
        });
    }
    let collect = |f: &dyn Fn(&SeedRun) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(SeedSummary {
        seen_accuracy: collect(&|r| r.report.seen.accuracy.unwrap_or(0.0)),
        unseen_accuracy: collect(&|r| r.report.unseen.accuracy.unwrap_or(0.0)),
        overall_accuracy: collect(&|r| r.report.overall.accuracy),
        overall_f1: collect(&|r| r.report.overall.f1),
        runs,
    })
}
