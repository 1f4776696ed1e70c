//! Acceptance criteria, run in order with one PASS/FAIL line each.
//!
//! Runs without the libtest harness so that criteria execute sequentially
//! and wall-clock budgets are measured without competing test threads.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use hmgrl::data::{decode_bundle, encode_bundle, generate_synthetic_corpus, gzsl_split, Bundle, GeneratorSpec, GzslSplit, Part, SplitConfig};
use hmgrl::engine::{run_gradcheck, EvalReport, GradcheckOptions, LossBreakdown, TrainConfig, TrainSession};
use hmgrl::fusion::{ranking_loss, TaskKind};
use hmgrl::hmcvae::alignment_loss;
use hmgrl::hvib::{contrastive_loss, gaussian_kl_value};
use hmgrl::lorentz::{exp_at_origin, lift_to_tangent, log_at_origin, lorentz_linear_layer, Curvature};
use hmgrl::numerics::{Graph, SeededRng, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn random_vector(rng: &mut SeededRng, n: usize, max_norm: f64) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let len = max_norm * rng.uniform();
    v.into_iter().map(|x| x / norm * len).collect()
}

fn geometry() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(1);
    let (mut residual, mut round_trip, mut lll) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..1000 {
        let c = Curvature::new([-0.5, -1.0, -2.0][i % 3]).unwrap();
        let n = rng.range_inclusive(1, 64);
        let z = lift_to_tangent(&random_vector(&mut rng, n, 5.0)).unwrap();
        let p = exp_at_origin(z.coords(), c).unwrap();
        residual = residual.max(p.manifold_residual(c));
        let back = log_at_origin(p.coords(), c).unwrap();
        for (a, b) in back.coords().iter().zip(z.coords()) {
            round_trip = round_trip.max((a - b).abs());
        }
        let m_rows = rng.range_inclusive(1, 64);
        let scale = 1.0 / (n as f64).sqrt();
        let m = Tensor::matrix(m_rows, n, (0..m_rows * n).map(|_| scale * rng.standard_normal()).collect()).unwrap();
        let x = Tensor::row(random_vector(&mut rng, n, 3.0));
        let hyper = lorentz_linear_layer(&x, &m, c).unwrap();
        lll = lll.max(hyper.max_abs_diff(&x.matmul_t(&m).unwrap()));
    }
    let t = start.elapsed();
    outcome(
        residual < 1e-9 && round_trip < 1e-8 && lll < 1e-6 && t < Duration::from_secs(5),
        format!("residual {residual:.2e}, round trip {round_trip:.2e}, LLL {lll:.2e}, {:.2}s", secs(t)),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut passed = true;
    for (seed, task) in [(0, TaskKind::Met), (1, TaskKind::Mre)] {
        let report = run_gradcheck(&GradcheckOptions {
            seed,
            task,
            d: 8,
            h: 8,
            batch: 4,
            categories: (3, 2),
            ..GradcheckOptions::default()
        })
        .unwrap();
        passed &= report.passed && report.entries.len() == 7;
        for e in report.entries {
            if e.max_rel_error > worst.0 {
                worst = (e.max_rel_error, format!("{} ({task:?})", e.name));
            }
        }
    }
    let t = start.elapsed();
    outcome(
        passed && t < Duration::from_secs(60),
        format!("max rel error {:.2e} at {}, {:.1}s", worst.0, worst.1, secs(t)),
    )
}

/// Monte Carlo estimate of `KL(N(mu, sigma^2) || N(0, I))`.
fn kl_monte_carlo(mu: &[f64], sigma: &[f64], draws: usize, rng: &mut SeededRng) -> f64 {
    let mut acc = 0.0;
    for _ in 0..draws {
        for (&m, &s) in mu.iter().zip(sigma) {
            let e = rng.standard_normal();
            let z = m + s * e;
            acc += 0.5 * (z * z - e * e) - s.ln();
        }
    }
    acc / draws as f64
}

fn closed_forms() -> Outcome {
    let mut failures = Vec::new();
    let mut rng = SeededRng::new(3);

    let mut kl_err = 0.0f64;
    for _ in 0..3 {
        let mu: Vec<f64> = (0..4).map(|_| 2.0 * rng.standard_normal()).collect();
        let sigma: Vec<f64> = (0..4).map(|_| 0.3 + 2.0 * rng.uniform()).collect();
        let closed = gaussian_kl_value(&Tensor::row(mu.clone()), &Tensor::row(sigma.clone())).unwrap();
        let mc = kl_monte_carlo(&mu, &sigma, 1_000_000, &mut rng);
        kl_err = kl_err.max((mc - closed).abs() / closed);
    }
    if kl_err >= 0.01 {
        failures.push(format!("KL rel error {kl_err:.3e}"));
    }

    let mut cl_err = 0.0f64;
    for n in [1usize, 2, 3, 5, 8, 16] {
        let row = random_vector(&mut rng, 6, 2.0);
        let z = Tensor::from_rows(&vec![row; n]).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(z.clone()), g.constant(z));
        let l = contrastive_loss(&mut g, a, b).unwrap();
        cl_err = cl_err.max((g.scalar_value(l) - n as f64 * (n as f64).ln()).abs());
    }
    if cl_err >= 1e-6 {
        failures.push(format!("contrastive error {cl_err:.3e}"));
    }

    let rank = |scores: &[f64], t: usize| {
        let mut g = Graph::new();
        let s = g.constant(Tensor::row(scores.to_vec()));
        let l = ranking_loss(&mut g, s, &[t], false).unwrap();
        g.scalar_value(l)
    };
    let ranking = [(rank(&[2.0, 0.5, -1.0], 0), 1.0), (rank(&[0.7; 4], 1), 4.0), (rank(&[0.0, 5.0], 0), 7.0)];
    if ranking.iter().any(|(got, want)| got != want) {
        failures.push(format!("ranking {ranking:?}"));
    }

    let align = |m: Tensor| {
        let mut g = Graph::new();
        let s = g.constant(m);
        let l = alignment_loss(&mut g, s).unwrap();
        g.scalar_value(l)
    };
    let ln2 = 2f64.ln();
    let fixtures = [
        (align(Tensor::from_rows(&[vec![ln2, 0.3], vec![-1.0, 0.0]]).unwrap()), 2.0 / 3.0 * (4.0f64 / 3.0).ln() + (2.0f64 / 3.0).ln() / 3.0),
        (align(Tensor::from_rows(&[vec![1.5, 9.0], vec![-4.0, 1.5]]).unwrap()), 0.0),
        (align(Tensor::zeros(&[3, 3])), 0.0),
    ];
    let align_err = fixtures.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if align_err >= 1e-9 {
        failures.push(format!("alignment error {align_err:.3e}"));
    }

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("KL {kl_err:.2e}, contrastive {cl_err:.2e}, ranking exact, alignment {align_err:.2e}")
        } else {
            failures.join("; ")
        },
    )
}

fn split_protocol() -> Outcome {
    let bundle = generate_synthetic_corpus(&GeneratorSpec {
        num_categories: 12,
        samples_per_category: 100,
        d: 4,
        seed: 5,
        ..GeneratorSpec::default()
    })
    .unwrap();
    let mut violations = Vec::new();
    for seed in 0..100 {
        let split = gzsl_split(
            &bundle,
            &SplitConfig {
                category_counts: (4, 4, 4),
                seed,
                ..SplitConfig::default()
            },
        )
        .unwrap();
        if let Some(v) = split_violation(&bundle, &split) {
            violations.push(format!("seed {seed}: {v}"));
        }
    }
    outcome(
        violations.is_empty(),
        violations.first().cloned().unwrap_or_else(|| "100 splits, 63/7/30 per seen category".into()),
    )
}

fn split_violation(bundle: &Bundle, split: &GzslSplit) -> Option<String> {
    if let Err(e) = split.check(bundle) {
        return Some(e.to_string());
    }
    let groups = [&split.seen_categories, &split.validation_categories, &split.unseen_categories];
    if groups.iter().any(|g| g.len() != 4) {
        return Some("category groups are not 4/4/4".into());
    }
    let mut counts = vec![[0usize; 3]; bundle.num_categories()];
    for (part, list) in [(Part::Train, &split.train), (Part::Val, &split.val), (Part::Test, &split.test)] {
        for &i in list {
            counts[bundle.samples[i].label][part as usize] += 1;
        }
    }
    let assigned = split.train.len() + split.val.len() + split.test.len();
    if assigned != bundle.samples.len() {
        return Some(format!("{assigned} of {} samples assigned", bundle.samples.len()));
    }
    for &c in &split.seen_categories {
        if counts[c] != [63, 7, 30] {
            return Some(format!("seen category {c} has {:?}", counts[c]));
        }
    }
    for &c in &split.unseen_categories {
        if counts[c] != [0, 0, 100] {
            return Some(format!("unseen category {c} has {:?}", counts[c]));
        }
    }
    for &c in &split.validation_categories {
        if counts[c][0] != 0 || counts[c][2] != 0 {
            return Some(format!("validation category {c} has {:?}", counts[c]));
        }
    }
    None
}

const SEEDS: [u64; 3] = [0, 1, 2];
const BUDGET: Duration = Duration::from_secs(300);

fn desk_corpus() -> (Bundle, GzslSplit) {
    // s = 1 with spread 1/8 gives s / sigma_w = 8.
    let bundle = generate_synthetic_corpus(&GeneratorSpec {
        task: TaskKind::Met,
        num_categories: 8,
        d: 32,
        samples_per_category: 200,
        prototype_scale: 1.0,
        spread: 0.125,
        coupling: 0.8,
        seed: 0,
        ..GeneratorSpec::default()
    })
    .unwrap();
    let split = gzsl_split(
        &bundle,
        &SplitConfig {
            category_counts: (4, 2, 2),
            seed: 0,
            ..SplitConfig::default()
        },
    )
    .unwrap();
    (bundle, split)
}

fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        h: 32,
        lr: 1e-3,
        epochs: 200,
        batch_size: 32,
        eta: 1.0,
        zeta: 1.0,
        seed,
        ..TrainConfig::default()
    }
}

fn ablated(config: &TrainConfig) -> TrainConfig {
    TrainConfig {
        eta: 0.0,
        zeta: 0.0,
        synthesize: false,
        ..config.clone()
    }
}

struct Run {
    elapsed: Duration,
    initial: f64,
    last: f64,
    unseen: f64,
    monotone: bool,
    sweeps: usize,
    losses: Vec<LossBreakdown>,
    report: EvalReport,
}

fn train(bundle: &Bundle, split: &GzslSplit, config: &TrainConfig) -> Run {
    let start = Instant::now();
    let mut session = TrainSession::new(bundle, split, config).unwrap();
    session.run().unwrap();
    let test = session.evaluate_test(None).unwrap();
    let elapsed = start.elapsed();
    Run {
        elapsed,
        initial: session.initial_loss().unwrap(),
        last: session.final_loss().unwrap(),
        unseen: test.report.unseen.accuracy.unwrap_or(0.0),
        monotone: test.sweep.monotone && session.history().iter().all(|r| r.sweep.monotone),
        sweeps: session.history().len() + 1,
        losses: session.step_losses().to_vec(),
        report: test.report,
    }
}

fn fields(l: &LossBreakdown) -> [f64; 7] {
    [l.reg, l.cl, l.rank, l.vae, l.ce, l.align, l.total]
}

fn main() -> ExitCode {
    let mut lines: Vec<(String, Outcome)> = Vec::new();
    let mut record = |name: &str, o: Outcome| {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        lines.push((name.to_string(), o));
    };

    record("1 geometry", geometry());
    record("2 gradients", gradients());
    record("3 closed forms", closed_forms());
    record("4 split protocol", split_protocol());

    let (bundle, split) = desk_corpus();
    let full: Vec<Run> = SEEDS.iter().map(|&s| train(&bundle, &split, &desk_config(s))).collect();
    let base: Vec<Run> = SEEDS.iter().map(|&s| train(&bundle, &split, &ablated(&desk_config(s)))).collect();

    let timing: Vec<f64> = full.iter().chain(&base).map(|r| secs(r.elapsed)).collect();
    record(
        "5 time per seed",
        outcome(
            full.iter().chain(&base).all(|r| r.elapsed < BUDGET),
            format!("{:.1}s max of {timing:.1?}", timing.iter().cloned().fold(0.0, f64::max)),
        ),
    );
    let ratios: Vec<f64> = full.iter().map(|r| r.last / r.initial).collect();
    record(
        "5a loss halves",
        outcome(ratios.iter().all(|&r| r < 0.5), format!("final/initial {ratios:.3?}")),
    );
    let wins = full.iter().zip(&base).filter(|(f, b)| f.unseen > b.unseen).count();
    let pairs: Vec<(f64, f64)> = full.iter().zip(&base).map(|(f, b)| (f.unseen, b.unseen)).collect();
    record(
        "5b synthesis beats ablation on unseen",
        outcome(wins >= 2, format!("{wins}/3 seeds, (full, ablated) unseen accuracy {pairs:.4?}")),
    );
    let sweeps: usize = full.iter().chain(&base).map(|r| r.sweeps).sum();
    record(
        "5c calibration monotone",
        outcome(
            full.iter().chain(&base).all(|r| r.monotone),
            format!("{sweeps} sweeps"),
        ),
    );

    let again = train(&bundle, &split, &desk_config(SEEDS[0]));
    let first = &full[0];
    let drift = first
        .losses
        .iter()
        .zip(&again.losses)
        .map(|(a, b)| {
            let (a, b) = (fields(a), fields(b));
            a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    record(
        "6 determinism",
        outcome(
            first.losses.len() == again.losses.len() && drift <= 1e-9 && first.report == again.report,
            format!("{} steps, max loss drift {drift:.1e}, reports equal: {}", again.losses.len(), first.report == again.report),
        ),
    );

    record("7 serialization", serialization());

    let failed: Vec<&str> = lines.iter().filter(|(_, o)| !o.passed).map(|(n, _)| n.as_str()).collect();
    println!("{} of {} criteria passed", lines.len() - failed.len(), lines.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}

fn serialization() -> Outcome {
    let mut rng = SeededRng::new(7);
    let mut mismatches = 0;
    for seed in 0..1000 {
        let tokens_min = rng.range_inclusive(4, 7);
        let patches_min = rng.range_inclusive(1, 3);
        let spec = GeneratorSpec {
            task: if rng.uniform() < 0.5 { TaskKind::Met } else { TaskKind::Mre },
            num_categories: rng.range_inclusive(1, 4),
            d: rng.range_inclusive(1, 8),
            samples_per_category: rng.range_inclusive(1, 4),
            tokens: (tokens_min, tokens_min + rng.range_inclusive(0, 4)),
            patches: (patches_min, patches_min + rng.range_inclusive(0, 3)),
            seed,
            ..GeneratorSpec::default()
        };
        let bundle = generate_synthetic_corpus(&spec).unwrap();
        let bytes = encode_bundle(&bundle).unwrap();
        let back = decode_bundle(&bytes).unwrap();
        if back != bundle || encode_bundle(&back).unwrap() != bytes {
            mismatches += 1;
        }
    }

    let bundle = generate_synthetic_corpus(&GeneratorSpec::default()).unwrap();
    let bytes = encode_bundle(&bundle).unwrap();
    let code = |b: &[u8]| decode_bundle(b).err().map(|e| e.code());
    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"HMGX");
    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&99u32.to_le_bytes());
    let mut trailing = bytes.clone();
    trailing.extend_from_slice(&[0; 4]);
    let fixtures = [
        ("magic", code(&magic), "bad_magic"),
        ("version", code(&version), "version_mismatch"),
        ("truncated", code(&bytes[..bytes.len() - 3]), "truncated"),
        ("width", code(&trailing), "inconsistent_width"),
    ];
    let wrong: Vec<String> = fixtures
        .iter()
        .filter(|(_, got, want)| *got != Some(*want))
        .map(|(name, got, want)| format!("{name}: {got:?} != {want}"))
        .collect();
    outcome(
        mismatches == 0 && wrong.is_empty(),
        format!("{mismatches} of 1000 round trips differ; header fixtures {}", if wrong.is_empty() { "ok".into() } else { wrong.join(", ") }),
    )
}
