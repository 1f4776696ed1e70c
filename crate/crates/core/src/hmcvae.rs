//! Prototype-conditioned VAE over sample features.
//!
//! The encoder maps a sample feature to a Gaussian latent through two
//! Lorentz linear layers. The decoder reconstructs the feature from
//! `[condition ; z]`, where the condition is the entity token embedding for
//! seen samples and a category prototype at synthesis time. Synthetic
//! unseen features feed a cross-entropy and a distribution-alignment loss.

use crate::data::EmbeddedSample;
use crate::fusion::{e1_row, e2_row, FusionError, TaskKind};
use crate::hvib::{gaussian_kl, positive_scale, reparameterize, LatentGaussian};
use crate::lorentz::{lorentz_linear, Curvature};
use crate::numerics::{sample_standard_normal, Graph, NumericsError, SeededRng, Tensor, Var};

pub type VaeLatent = LatentGaussian;

/// `m_mu`, `m_sigma` are `h x F` Lorentz maps over features of width `F`.
pub fn encode_vae(
    g: &mut Graph,
    feature: Var,
    m_mu: Var,
    m_sigma: Var,
    c: Curvature,
    rng: Option<&mut SeededRng>,
) -> Result<VaeLatent, NumericsError> {
    let mu = lorentz_linear(g, feature, m_mu, c)?;
    let pre = lorentz_linear(g, feature, m_sigma, c)?;
    let sigma = positive_scale(g, pre);
    let z = reparameterize(g, mu, sigma, rng)?;
    Ok(LatentGaussian { mu, sigma, z })
}

/// `t_E1` for MET, `(t_E1 + t_E2) / 2` for MRE, as a `1 x d` row.
pub fn conditional_prototype(sample: &EmbeddedSample, task: TaskKind) -> Result<Tensor, FusionError> {
    let e1 = e1_row(sample)?;
    let p = match task {
        TaskKind::Met => e1.to_vec(),
        TaskKind::Mre => {
            let e2 = e2_row(sample)?;
            e1.iter().zip(e2).map(|(a, b)| 0.5 * (a + b)).collect()
        }
    };
    Ok(Tensor::row(p))
}

/// Two affine layers with `tanh` between them: `d + h -> h -> F`.
#[derive(Clone, Copy, Debug)]
pub struct Decoder {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn decode(g: &mut Graph, condition: Var, z: Var, dec: &Decoder) -> Result<Var, NumericsError> {
    let input = g.concat_cols(&[condition, z])?;
    let hidden = g.affine(input, dec.w1, dec.b1)?;
    let hidden = g.tanh(hidden);
    g.affine(hidden, dec.w2, dec.b2)
}

/// Mean squared reconstruction norm per row.
pub fn reconstruction_loss(g: &mut Graph, target: Var, recon: Var) -> Result<Var, NumericsError> {
    let diff = g.sub(target, recon)?;
    let sq = g.square(diff);
    let rows = g.sum_cols(sq);
    Ok(g.mean(rows))
}

/// `KL(q || N(0, I)) + ||e - e_hat||^2`, both averaged over rows.
pub fn vae_loss(g: &mut Graph, target: Var, recon: Var, latent: &VaeLatent) -> Result<Var, NumericsError> {
    let kl = gaussian_kl(g, latent.mu, latent.sigma)?;
    let rec = reconstruction_loss(g, target, recon)?;
    g.add(kl, rec)
}

/// Decoded unseen features, `k` consecutive rows per category.
#[derive(Clone, Debug)]
pub struct SyntheticBatch {
    pub features: Var,
    pub labels: Vec<usize>,
    pub per_category: usize,
}

/// Decodes `k` draws `z ~ N(0, I_h)` per unseen prototype row.
pub fn synthesize_unseen(
    g: &mut Graph,
    prototypes: &Tensor,
    k: usize,
    h: usize,
    dec: &Decoder,
    rng: &mut SeededRng,
) -> Result<SyntheticBatch, NumericsError> {
    let u = prototypes.rows();
    if u == 0 || k == 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "synthesize_unseen",
            detail: format!("{u} unseen categories, k = {k}"),
        });
    }
    let d = prototypes.cols();
    let mut cond = Vec::with_capacity(u * k * d);
    let mut labels = Vec::with_capacity(u * k);
    for cat in 0..u {
        for _ in 0..k {
            cond.extend_from_slice(prototypes.row_slice(cat));
            labels.push(cat);
        }
    }
    let cond = g.constant(Tensor::matrix(u * k, d, cond)?);
    let z = g.constant(sample_standard_normal(rng, &[u * k, h]));
    let features = decode(g, cond, z, dec)?;
    Ok(SyntheticBatch {
        features,
        labels,
        per_category: k,
    })
}

/// `-sum_rows log softmax(row)[label]` with the softmax over unseen
/// categories only.
pub fn unseen_ce_loss(g: &mut Graph, scores: Var, labels: &[usize]) -> Result<Var, NumericsError> {
    let lsm = g.log_softmax_rows(scores);
    let picked = g.gather(lsm, labels)?;
    let total = g.sum(picked);
    Ok(g.neg(total))
}

/// `KL(softmax(v) || uniform)` for a `1 x n` row `v`.
pub fn alignment_from_diagonal(g: &mut Graph, diag: Var) -> Result<Var, NumericsError> {
    let n = g.value(diag).len();
    if n == 0 {
        return Err(NumericsError::ShapeMismatch {
            op: "alignment_loss",
            detail: "empty diagonal".into(),
        });
    }
    let p = g.softmax_rows(diag);
    let lp = g.log_softmax_rows(diag);
    let plp = g.mul(p, lp)?;
    let s = g.sum(plp);
    Ok(g.add_scalar(s, (n as f64).ln()))
}

/// Alignment of the diagonal of a square `n x n` score matrix with the
/// uniform distribution.
pub fn alignment_loss(g: &mut Graph, scores: Var) -> Result<Var, NumericsError> {
    let d = g.diag(scores)?;
    alignment_from_diagonal(g, d)
}

/// Per-category mean of each synthetic row's score against its own
/// category, `1 x U`. Reduces to the diagonal when `k = 1`.
pub fn mean_true_scores(g: &mut Graph, scores: Var, batch: &SyntheticBatch) -> Result<Var, NumericsError> {
    let u = g.value(scores).cols();
    let own = g.gather(scores, &batch.labels)?;
    let rows = batch.labels.len();
    let mut avg = Tensor::zeros(&[u, rows]);
    for (r, &cat) in batch.labels.iter().enumerate() {
        avg.set(cat, r, 1.0 / batch.per_category as f64);
    }
    let avg = g.constant(avg);
    let means = g.matmul(avg, own)?;
    Ok(g.transpose(means))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{evaluate_with_gradients, gradient_check, Bound, ModelParams};
    use proptest::prelude::*;

    fn val(f: impl FnOnce(&mut Graph) -> Result<Var, NumericsError>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.scalar_value(v)
    }

    fn decoder(g: &mut Graph, rng: &mut SeededRng, d: usize, h: usize, f: usize, zero_last: bool) -> Decoder {
        let mut r = |s: &[usize], zero: bool| {
            let t = if zero { Tensor::zeros(s) } else { sample_standard_normal(rng, s).map(|v| 0.3 * v) };
            g.constant(t)
        };
        Decoder {
            w1: r(&[h, d + h], false),
            b1: r(&[1, h], false),
            w2: r(&[f, h], zero_last),
            b2: r(&[1, f], zero_last),
        }
    }

    #[test]
    fn vae_encoder_contract() {
        let mut rng = SeededRng::new(3);
        let mut g = Graph::new();
        let f = g.constant(sample_standard_normal(&mut rng, &[2, 6]));
        let mm = g.constant(sample_standard_normal(&mut rng, &[4, 6]).map(|v| 0.2 * v));
        let ms = g.constant(Tensor::zeros(&[4, 6]));
        let lat = encode_vae(&mut g, f, mm, ms, Curvature::default(), None).unwrap();
        assert_eq!(g.value(lat.z), g.value(lat.mu));
        assert_eq!(g.value(lat.mu).shape(), &[2, 4]);
        for &s in g.value(lat.sigma).data() {
            assert!((s - 2f64.ln() - 1e-6).abs() < 1e-15);
        }
        let mz = g.constant(Tensor::zeros(&[4, 6]));
        let lat = encode_vae(&mut g, f, mz, ms, Curvature::default(), None).unwrap();
        assert!(g.value(lat.mu).data().iter().all(|&v| v == 0.0));
    }

    fn sample(e1: Vec<f64>, e2: Option<Vec<f64>>) -> EmbeddedSample {
        let mut rows = vec![vec![0.0; e1.len()], e1];
        let marker_e2 = e2.map(|r| {
            rows.push(r);
            2
        });
        EmbeddedSample {
            sample_id: "x".into(),
            label: 0,
            tokens: Tensor::from_rows(&rows).unwrap(),
            patches: Tensor::zeros(&[1, rows[0].len()]),
            marker_cls: 0,
            marker_e1: 1,
            marker_e2,
        }
    }

    #[test]
    fn condition_vectors() {
        let s = sample(vec![1.0, 2.0], None);
        assert_eq!(conditional_prototype(&s, TaskKind::Met).unwrap().data(), &[1.0, 2.0]);
        let s = sample(vec![2.0, 0.0], Some(vec![0.0, 2.0]));
        assert_eq!(conditional_prototype(&s, TaskKind::Mre).unwrap().data(), &[1.0, 1.0]);
        let s = sample(vec![0.5, -3.0], Some(vec![0.5, -3.0]));
        assert_eq!(conditional_prototype(&s, TaskKind::Mre).unwrap().data(), &[0.5, -3.0]);
        let s = sample(vec![1.0, 2.0], None);
        assert!(conditional_prototype(&s, TaskKind::Mre).is_err());
    }

    #[test]
    fn decoder_contract() {
        let mut rng = SeededRng::new(9);
        let (d, h) = (3, 4);
        for (task, f) in [(TaskKind::Met, 2 * d + h), (TaskKind::Mre, 3 * d + h)] {
            assert_eq!(task.entity_width(d) + h, f);
            let mut g = Graph::new();
            let dec = decoder(&mut g, &mut rng, d, h, f, false);
            let p = g.constant(Tensor::row(vec![0.1, 0.2, 0.3]));
            let z = g.constant(Tensor::row(vec![1.0, -1.0, 0.5, 0.0]));
            let a = decode(&mut g, p, z, &dec).unwrap();
            let b = decode(&mut g, p, z, &dec).unwrap();
            assert_eq!(g.value(a).shape(), &[1, f]);
            assert_eq!(g.value(a), g.value(b));
            let zero = decoder(&mut g, &mut rng, d, h, f, true);
            let c = decode(&mut g, p, z, &zero).unwrap();
            assert!(g.value(c).data().iter().all(|&v| v == 0.0));
            let bad = g.constant(Tensor::row(vec![0.0; 5]));
            assert!(decode(&mut g, bad, z, &dec).is_err());
        }
    }

    fn vae(target: &[f64], recon: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
        val(|g| {
            let t = g.constant(Tensor::row(target.to_vec()));
            let r = g.constant(Tensor::row(recon.to_vec()));
            let mu = g.constant(Tensor::row(mu.to_vec()));
            let sigma = g.constant(Tensor::row(sigma.to_vec()));
            vae_loss(g, t, r, &LatentGaussian { mu, sigma, z: mu })
        })
    }

    #[test]
    fn vae_loss_fixtures() {
        assert_eq!(vae(&[1.0, 2.0], &[1.0, 2.0], &[0.0], &[1.0]), 0.0);
        assert!((vae(&[1.0, 2.0], &[0.0, 1.0], &[0.0], &[1.0]) - 2.0).abs() < 1e-15);
        assert!((vae(&[3.0], &[3.0], &[1.0], &[1.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_is_gaussian_negative_log_likelihood() {
        // -2 ln N(x; x_hat, I) = ||x - x_hat||^2 + F ln(2 pi).
        let x = [0.3, -1.2, 2.0, 0.7];
        let x_hat = [0.1, -1.0, 1.5, 1.7];
        let log_lik: f64 = x
            .iter()
            .zip(&x_hat)
            .map(|(a, b)| -0.5 * (a - b) * (a - b) - 0.5 * (2.0 * std::f64::consts::PI).ln())
            .sum();
        let constant = x.len() as f64 * (2.0 * std::f64::consts::PI).ln();
        let rec = vae(&x, &x_hat, &[0.0], &[1.0]);
        assert!((rec - (-2.0 * log_lik - constant)).abs() < 1e-12);
    }

    #[test]
    fn synthesis_contract() {
        let (d, h, f) = (3, 2, 8);
        let protos = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let run = |seed: u64, k: usize| {
            let mut g = Graph::new();
            let dec = decoder(&mut g, &mut SeededRng::new(1), d, h, f, false);
            let batch = synthesize_unseen(&mut g, &protos, k, h, &dec, &mut SeededRng::new(seed)).unwrap();
            (g.value(batch.features).clone(), batch.labels)
        };
        let (a, labels) = run(4, 1);
        assert_eq!(a.shape(), &[4, f]);
        assert_eq!(labels, vec![0, 1, 2, 3]);
        assert_eq!(run(4, 1).0, a);
        let (b, labels) = run(4, 3);
        assert_eq!(b.rows(), 12);
        for cat in 0..4 {
            assert_eq!(labels.iter().filter(|&&l| l == cat).count(), 3);
        }
        let mut g = Graph::new();
        let dec = decoder(&mut g, &mut SeededRng::new(1), d, h, f, false);
        let empty = Tensor::zeros(&[0, d]);
        assert!(synthesize_unseen(&mut g, &empty, 1, h, &dec, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn identical_conditions_and_noise_decode_identically() {
        let (d, h, f) = (2, 3, 5);
        let mut g = Graph::new();
        let dec = decoder(&mut g, &mut SeededRng::new(8), d, h, f, false);
        let p = g.constant(Tensor::from_rows(&[vec![0.4, 0.4], vec![0.4, 0.4]]).unwrap());
        let z = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).unwrap());
        let out = decode(&mut g, p, z, &dec).unwrap();
        assert_eq!(g.value(out).row_slice(0), g.value(out).row_slice(1));
    }

    fn ce(m: &Tensor, labels: &[usize]) -> f64 {
        val(|g| {
            let s = g.constant(m.clone());
            unseen_ce_loss(g, s, labels)
        })
    }

    fn align(m: &Tensor) -> f64 {
        val(|g| {
            let s = g.constant(m.clone());
            alignment_loss(g, s)
        })
    }

    #[test]
    fn cross_entropy_fixtures() {
        assert!((ce(&Tensor::zeros(&[2, 2]), &[0, 1]) - 2.0 * 2f64.ln()).abs() < 1e-15);
        let ten = Tensor::identity(2).map(|v| 10.0 * v);
        let expected = 2.0 * (1.0 + (-10f64).exp()).ln();
        assert!((ce(&ten, &[0, 1]) - expected).abs() < 1e-12 * expected);
        assert!((expected - 9.08e-5).abs() < 1e-7);
        let mut shifted = ten.clone();
        for v in shifted.row_slice_mut(1) {
            *v += 3.5;
        }
        assert!((ce(&shifted, &[0, 1]) - ce(&ten, &[0, 1])).abs() < 1e-12 * expected);
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[2, 2]));
        assert!(unseen_ce_loss(&mut g, s, &[0, 2]).is_err());
        for n in [1usize, 3, 6] {
            assert!((ce(&Tensor::zeros(&[n, n]), &(0..n).collect::<Vec<_>>()) - n as f64 * (n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_fixtures() {
        assert!(align(&Tensor::identity(3).map(|v| 7.0 * v)).abs() < 1e-15);
        assert!(align(&Tensor::zeros(&[4, 4])).abs() < 1e-15);
        let m = Tensor::from_rows(&[vec![2f64.ln(), 9.0], vec![-4.0, 0.0]]).unwrap();
        let expected = 2.0 / 3.0 * (4.0f64 / 3.0).ln() + 1.0 / 3.0 * (2.0f64 / 3.0).ln();
        assert!((align(&m) - expected).abs() < 1e-9);
        assert!((expected - 0.0566).abs() < 5e-5);
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[2, 3]));
        assert!(alignment_loss(&mut g, s).is_err());
    }

    #[test]
    fn mean_true_scores_reduce_to_diagonal() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let batch = SyntheticBatch { features: s, labels: vec![0, 1], per_category: 1 };
        let m = mean_true_scores(&mut g, s, &batch).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 4.0]);
        let s = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0], vec![0.0, 5.0], vec![0.0, 7.0]]).unwrap());
        let batch = SyntheticBatch { features: s, labels: vec![0, 0, 1, 1], per_category: 2 };
        let m = mean_true_scores(&mut g, s, &batch).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 6.0]);
    }

    #[test]
    fn gradients_flow_through_synthesis() {
        let mut rng = SeededRng::new(21);
        let (d, h, f) = (3, 2, 5);
        let protos = sample_standard_normal(&mut rng, &[2, d]);
        let feat = sample_standard_normal(&mut rng, &[3, f]);
        let cond = sample_standard_normal(&mut rng, &[3, d]);
        let proj = sample_standard_normal(&mut rng, &[f, d]).map(|v| 0.5 * v);
        let mut params = ModelParams::new();
        params.insert("w1", sample_standard_normal(&mut rng, &[h, d + h]).map(|v| 0.5 * v)).unwrap();
        params.insert("b1", sample_standard_normal(&mut rng, &[1, h])).unwrap();
        params.insert("w2", sample_standard_normal(&mut rng, &[f, h])).unwrap();
        params.insert("b2", sample_standard_normal(&mut rng, &[1, f])).unwrap();
        params.insert("mm", sample_standard_normal(&mut rng, &[h, f]).map(|v| 0.3 * v)).unwrap();
        params.insert("ms", sample_standard_normal(&mut rng, &[h, f]).map(|v| 0.3 * v)).unwrap();
        let noise = SeededRng::new(4);
        let loss = |g: &mut Graph, b: &Bound| -> Result<Var, NumericsError> {
            let mut rng = noise.clone();
            let dec = Decoder { w1: b.var("w1")?, b1: b.var("b1")?, w2: b.var("w2")?, b2: b.var("b2")? };
            let x = g.constant(feat.clone());
            let lat = encode_vae(g, x, b.var("mm")?, b.var("ms")?, Curvature::new(-1.5).unwrap(), Some(&mut rng))?;
            let c = g.constant(cond.clone());
            let rec = decode(g, c, lat.z, &dec)?;
            let lv = vae_loss(g, x, rec, &lat)?;
            let batch = synthesize_unseen(g, &protos, 2, h, &dec, &mut rng)?;
            let pm = g.constant(proj.clone());
            let pt = g.constant(protos.clone());
            let pp = g.matmul_t(pt, pm)?;
            let scores = g.matmul_t(batch.features, pp)?;
            let lce = unseen_ce_loss(g, scores, &batch.labels)?;
            let diag = mean_true_scores(g, scores, &batch)?;
            let la = alignment_from_diagonal(g, diag)?;
            let t = g.add(lv, lce)?;
            g.add(t, la)
        };
        let check = gradient_check(loss, &params).unwrap();
        assert!(check.max_rel_error() < 1e-5, "{check:?}");
        let (_, grads) = evaluate_with_gradients(loss, &params).unwrap();
        assert!(grads.get(&params, "w2").unwrap().data().iter().any(|&v| v != 0.0));
    }

    proptest! {
        #[test]
        fn alignment_non_negative_and_shift_invariant(
            diag in proptest::collection::vec(-5.0f64..5.0, 1..6),
            shift in -10.0f64..10.0,
        ) {
            let n = diag.len();
            let mut m = Tensor::zeros(&[n, n]);
            let mut ms = Tensor::zeros(&[n, n]);
            for (i, &v) in diag.iter().enumerate() {
                m.set(i, i, v);
                ms.set(i, i, v + shift);
            }
            let a = align(&m);
            prop_assert!(a >= -1e-15);
            prop_assert!((a - align(&ms)).abs() < 1e-12);
            if diag.iter().all(|&v| v == diag[0]) {
                prop_assert!(a.abs() < 1e-15);
            } else {
                prop_assert!(a > 0.0);
            }
        }

        #[test]
        fn vae_loss_non_negative(
            t in proptest::collection::vec(-3.0f64..3.0, 4),
            r in proptest::collection::vec(-3.0f64..3.0, 4),
            mu in -2.0f64..2.0,
            ls in -1.5f64..1.5,
        ) {
            let l = vae(&t, &r, &[mu], &[ls.exp()]);
            prop_assert!(l >= 0.0);
            let rec = val(|g| {
                let a = g.constant(Tensor::row(t.clone()));
                let b = g.constant(Tensor::row(r.clone()));
                reconstruction_loss(g, a, b)
            });
            prop_assert!(rec >= 0.0);
            prop_assert_eq!(rec == 0.0, t == r);
        }
    }
}
