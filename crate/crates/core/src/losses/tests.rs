use rand::Rng as _;

use super::*;
use crate::data::{make_synthetic, PretextTransform};
use crate::dataset::{Dataset, ImageShape};
use crate::nets::gradcheck::{central_difference, relative_error};
use crate::nets::{draw_noise, Gradients};

const LN2: f64 = std::f64::consts::LN_2;

fn tiny_cfg() -> ALConfig {
    ALConfig {
        latent_dim: 3,
        enc_width: 2,
        proxy_hidden: 4,
        disc_hidden: 4,
        target_width: 2,
        ..ALConfig::default()
    }
}

struct Fixture {
    arch: Architecture,
    bundle: ModelBundle,
    data: Dataset,
}

impl Fixture {
    fn new() -> Self {
        let cfg = tiny_cfg();
        let arch = Architecture::new(ImageShape::square(3, 8), 3, &cfg).unwrap();
        let bundle = arch.init_bundle(&mut Rng::new(5, "init"));
        let data = make_synthetic(3, 4, 8, &mut Rng::new(5, "data")).unwrap();
        Fixture { arch, bundle, data }
    }

    fn labeled(&self) -> Batch {
        Batch::gather(&self.data, &[0, 1, 2, 3, 4], true, None).unwrap()
    }

    fn unlabeled(&self) -> Batch {
        let t = vec![
            PretextTransform::ALL[0],
            PretextTransform::ALL[1],
            PretextTransform::ALL[4],
            PretextTransform::ALL[5],
        ];
        Batch::gather(&self.data, &[6, 7, 9, 11], false, Some(t)).unwrap()
    }
}

fn var(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> Var {
    g.param(Tensor::new(shape, data))
}

fn is_zero(grads: &Gradients, vars: &[Var]) -> bool {
    vars.iter()
        .all(|&v| grads.get(v).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)))
}

fn is_nonzero(grads: &Gradients, vars: &[Var]) -> bool {
    vars.iter()
        .any(|&v| grads.get(v).is_some_and(|t| t.data().iter().any(|&x| x != 0.0)))
}

#[test]
fn kl_fixed_points() {
    let mut g = Graph::new();
    let mu = var(&mut g, vec![2, 3], vec![0.0; 6]);
    let lv = var(&mut g, vec![2, 3], vec![0.0; 6]);
    let kl = kl_unit_gaussian(&mut g, mu, lv);
    assert_eq!(g.value(kl).item(), 0.0);

    let mu = var(&mut g, vec![1, 1], vec![1.0]);
    let lv = var(&mut g, vec![1, 1], vec![0.0]);
    let kl = kl_unit_gaussian(&mut g, mu, lv);
    assert!((g.value(kl).item() - 0.5).abs() < 1e-15);
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = Rng::new(3, "kl-mc");
    let mu: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let lv: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let m = var(&mut g, vec![1, 4], mu.clone());
    let l = var(&mut g, vec![1, 4], lv.clone());
    let kl = kl_unit_gaussian(&mut g, m, l);
    let analytic = g.value(kl).item();

    let samples = 200_000;
    let eps = draw_noise(&[samples, 4], &mut rng);
    let mut acc = 0.0;
    for s in 0..samples {
        for i in 0..4 {
            let e = eps.row(s)[i];
            let z = mu[i] + (0.5 * lv[i]).exp() * e;
            // log q(z) - log p(z), constants cancel
            acc += -0.5 * lv[i] - 0.5 * e * e + 0.5 * z * z;
        }
    }
    let mc = acc / samples as f64;
    assert!((mc - analytic).abs() / analytic < 0.02, "mc {mc} vs {analytic}");
}

#[test]
fn reconstruction_values_and_gradient() {
    let mut g = Graph::new();
    let x = var(&mut g, vec![1, 1, 1, 1], vec![1.0]);
    let xh = var(&mut g, vec![1, 1, 1, 1], vec![0.0]);
    let r = reconstruction_loss(&mut g, x, xh).unwrap();
    assert_eq!(g.value(r).item(), 1.0);
    let same = reconstruction_loss(&mut g, x, x).unwrap();
    assert_eq!(g.value(same).item(), 0.0);

    let xs = vec![0.1, 0.5, 0.9, 0.3, 0.2, 0.7];
    let hs = vec![0.0, 0.6, 0.4, 0.3, 0.9, 0.1];
    let mut g = Graph::new();
    let x = var(&mut g, vec![2, 1, 1, 3], xs.clone());
    let xh = var(&mut g, vec![2, 1, 1, 3], hs.clone());
    let r = reconstruction_loss(&mut g, x, xh).unwrap();
    let grads = g.backward(r);
    for (i, gv) in grads.get(xh).unwrap().data().iter().enumerate() {
        assert!((gv - (hs[i] - xs[i])).abs() < 1e-14);
    }
}

#[test]
fn reconstruction_rejects_shape_mismatch() {
    let mut g = Graph::new();
    let x = var(&mut g, vec![1, 1, 2, 2], vec![0.0; 4]);
    let xh = var(&mut g, vec![1, 1, 1, 4], vec![0.0; 4]);
    assert!(matches!(
        reconstruction_loss(&mut g, x, xh),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn squared_logit_distance_examples() {
    let mut g = Graph::new();
    let t = var(&mut g, vec![1, 2], vec![1.0, 0.0]);
    let c = var(&mut g, vec![1, 2], vec![0.0, 0.0]);
    let d = squared_logit_distance(&mut g, t, c).unwrap();
    assert_eq!(g.value(d).item(), 1.0);
    let zero = squared_logit_distance(&mut g, t, t).unwrap();
    assert_eq!(g.value(zero).item(), 0.0);
    let wide = var(&mut g, vec![1, 3], vec![0.0; 3]);
    assert!(squared_logit_distance(&mut g, t, wide).is_err());
}

fn codes_for(g: &mut Graph, f: &Fixture, b: &BoundBundle, batch: &Batch, seed: u64) -> PoolCodes {
    encode_pool(g, &f.arch, b, batch, &mut Rng::new(seed, "noise")).unwrap()
}

#[test]
fn url_is_sum_of_independent_pool_terms() {
    let f = Fixture::new();
    let (lb, ub) = (f.labeled(), f.unlabeled());
    let beta = 0.7;
    let mut g = Graph::new();
    let b = BoundBundle::bind_bundle(&mut g, &f.bundle, Tracking::ALL);
    let lc = codes_for(&mut g, &f, &b, &lb, 1);
    let uc = codes_for(&mut g, &f, &b, &ub, 2);
    let url = url_loss(&mut g, &f.arch, &b, &lc, &uc, beta).unwrap();
    let url = g.value(url).item();

    // Plain arrays through the no-grad wrappers.
    let mut expect = 0.0;
    for (batch, codes) in [(&lb, &lc), (&ub, &uc)] {
        let (mu, lv) = f.arch.encode(&f.bundle.vae.encoder, &batch.images).unwrap();
        let n = batch.len() as f64;
        let mut kl = 0.0;
        let mut z = Vec::new();
        for ((m, l), e) in mu.data().iter().zip(lv.data()).zip(codes.noise.data()) {
            kl += 0.5 * (m * m + l.exp() - l - 1.0);
            z.push(m + (0.5 * l).exp() * e);
        }
        let z = Tensor::new(mu.shape().to_vec(), z);
        let xh = f.arch.decode(&f.bundle.vae.generator, &z).unwrap();
        let rec: f64 = xh
            .data()
            .iter()
            .zip(batch.images.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        expect += rec / n + beta * kl / n;
    }
    assert!((url - expect).abs() < 1e-10 * expect.abs().max(1.0), "{url} vs {expect}");
}

#[test]
fn url_without_beta_is_reconstruction_only() {
    let f = Fixture::new();
    let (lb, ub) = (f.labeled(), f.unlabeled());
    let mut g = Graph::new();
    let b = BoundBundle::bind_bundle(&mut g, &f.bundle, Tracking::ALL);
    let lc = codes_for(&mut g, &f, &b, &lb, 1);
    let uc = codes_for(&mut g, &f, &b, &ub, 2);
    let url = url_loss(&mut g, &f.arch, &b, &lc, &uc, 0.0).unwrap();
    let mut rec = 0.0;
    for c in [&lc, &uc] {
        let xh = f.arch.generator.forward(&mut g, &b.generator, c.z).unwrap();
        let r = reconstruction_loss(&mut g, c.x, xh).unwrap();
        rec += g.value(r).item();
    }
    assert!((g.value(url).item() - rec).abs() < 1e-12);
}

fn zero_classifier(f: &mut Fixture) {
    f.bundle.vae.classifier = ParamSet::zeros(f.arch.classifier.layout().clone());
}

#[test]
fn proxy_losses_with_uniform_logits() {
    let mut f = Fixture::new();
    zero_classifier(&mut f);
    let (lb, ub) = (f.labeled(), f.unlabeled());
    let mut g = Graph::new();
    let b = BoundBundle::bind_bundle(&mut g, &f.bundle, Tracking::ALL);
    let lc = codes_for(&mut g, &f, &b, &lb, 1);
    let uc = codes_for(&mut g, &f, &b, &ub, 2);
    let sup = proxy_sup_loss(&mut g, &f.arch, &b, &lb, &lc, None).unwrap();
    assert!((g.value(sup).item() - 3f64.ln()).abs() < 1e-12);
    let ssl = proxy_ssl_loss(&mut g, &f.arch, &b, &ub, &uc, None).unwrap();
    assert!((g.value(ssl).item() - 6f64.ln()).abs() < 1e-12);

    let kl = kl_unit_gaussian(&mut g, lc.mu, lc.logvar);
    let with = proxy_sup_loss(&mut g, &f.arch, &b, &lb, &lc, Some(kl)).unwrap();
    let expect = 3f64.ln() + g.value(kl).item();
    assert!((g.value(with).item() - expect).abs() < 1e-12);
}

#[test]
fn proxy_sup_matches_independent_ce() {
    let f = Fixture::new();
    let lb = f.labeled();
    let mut g = Graph::new();
    let b = BoundBundle::bind_bundle(&mut g, &f.bundle, Tracking::ALL);
    let lc = codes_for(&mut g, &f, &b, &lb, 1);
    let sup = proxy_sup_loss(&mut g, &f.arch, &b, &lb, &lc, None).unwrap();
    let sup = g.value(sup).item();
    let z = g.value(lc.z).clone();
    let logits = f.arch.classify_proxy(&f.bundle.vae.classifier, &z, Head::Label).unwrap();
    let labels = lb.labels.as_ref().unwrap();
    let ce: f64 = (0..lb.len())
        .map(|i| crate::nets::tape::log_sum_exp(logits.row(i)) - logits.row(i)[labels[i]])
        .sum::<f64>()
        / lb.len() as f64;
    assert!((sup - ce).abs() < 1e-12);
}

#[test]
fn proxy_losses_require_their_labels() {
    let f = Fixture::new();
    let (lb, ub) = (f.labeled(), f.unlabeled());
    let mut g = Graph::new();
    let b = BoundBundle::bind_bundle(&mut g, &f.bundle, Tracking::ALL);
    let lc = codes_for(&mut g, &f, &b, &lb, 1);
    let uc = codes_for(&mut g, &f, &b, &ub, 2);
    assert!(matches!(
        proxy_sup_loss(&mut g, &f.arch, &b, &ub, &uc, None),
        Err(Error::InvalidArgument(_))
    ));
    assert!(matches!(
        proxy_ssl_loss(&mut g, &f.arch, &b, &lb, &lc, None),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn adversarial_losses_at_half() {
    let mut f = Fixture::new();
    f.bundle.discriminator = ParamSet::zeros(f.arch.discriminator.layout().clone());
    let (lb, ub) = (f.labeled(), f.unlabeled());
    let mut g = Graph::new();
    let b = BoundBundle::bind_bundle(&mut g, &f.bundle, Tracking::ALL);
    let lc = codes_for(&mut g, &f, &b, &lb, 1);
    let uc = codes_for(&mut g, &f, &b, &ub, 2);
    let adv = adv_gen_loss(&mut g, &f.arch, &b, &lc, &uc).unwrap();
    assert!((g.value(adv).item() - 2.0 * LN2).abs() < 1e-12);
    let d = disc_loss(&mut g, &f.arch, &b, lc.mu, uc.mu).unwrap();
    assert!((g.value(d).item() - 2.0 * LN2).abs() < 1e-12);
}

#[test]
fn adversarial_losses_match_direct_formula() {
    let f = Fixture::new();
    let (lb, ub) = (f.labeled(), f.unlabeled());
    let mut g = Graph::new();
    let b = BoundBundle::bind_bundle(&mut g, &f.bundle, Tracking::ALL);
    let lc = codes_for(&mut g, &f, &b, &lb, 1);
    let uc = codes_for(&mut g, &f, &b, &ub, 2);
    let adv = adv_gen_loss(&mut g, &f.arch, &b, &lc, &uc).unwrap();
    let adv = g.value(adv).item();
    let dl_loss = disc_loss(&mut g, &f.arch, &b, lc.mu, uc.mu).unwrap();
    let dl_loss = g.value(dl_loss).item();

    let dl = f.arch.discriminate(&f.bundle.discriminator, g.value(lc.mu)).unwrap();
    let du = f.arch.discriminate(&f.bundle.discriminator, g.value(uc.mu)).unwrap();
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let lnl = mean(dl.iter().map(|p| p.ln()).collect());
    let expect_adv = -lnl - mean(du.iter().map(|p| p.ln()).collect());
    let expect_disc = -lnl - mean(du.iter().map(|p| (1.0 - p).ln()).collect());
    assert!((adv - expect_adv).abs() < 1e-12);
    assert!((dl_loss - expect_disc).abs() < 1e-12);
}

#[test]
fn gradient_stops_hold_even_when_everything_is_tracked() {
    let f = Fixture::new();
    let (lb, ub) = (f.labeled(), f.unlabeled());
    let mut g = Graph::new();
    let b = BoundBundle::bind_bundle(&mut g, &f.bundle, Tracking::ALL);
    let lc = codes_for(&mut g, &f, &b, &lb, 1);
    let uc = codes_for(&mut g, &f, &b, &ub, 2);
    let vae: Vec<Var> = [&b.encoder, &b.generator, &b.classifier]
        .into_iter()
        .flatten()
        .copied()
        .collect();

    let kd = kd_loss(&mut g, &f.arch, &b, &lc, &uc).unwrap();
    let grads = g.backward(kd);
    assert!(is_zero(&grads, &b.target));
    assert!(is_nonzero(&grads, &b.classifier));

    let adv = adv_gen_loss(&mut g, &f.arch, &b, &lc, &uc).unwrap();
    let grads = g.backward(adv);
    assert!(is_zero(&grads, &b.discriminator));
    assert!(is_nonzero(&grads, &b.encoder));

    let d = disc_loss(&mut g, &f.arch, &b, lc.mu, uc.mu).unwrap();
    let grads = g.backward(d);
    assert!(is_zero(&grads, &vae));
    assert!(is_nonzero(&grads, &b.discriminator));
}

/// Every value perturbed, so no pre-activation sits exactly on a rectifier kink.
fn jittered(bundle: &ModelBundle) -> ModelBundle {
    let mut rng = Rng::new(11, "jitter");
    let mut out = bundle.clone();
    let [e, g, c] = out.vae.parts_mut();
    for p in [e, g, c, &mut out.discriminator, &mut out.target] {
        p.values_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    out
}

/// Analytic gradient of `loss` w.r.t. one parameter group against central differences.
fn check_group(
    f: &Fixture,
    pick: fn(&mut ModelBundle) -> &mut ParamSet,
    bound: fn(&BoundBundle) -> &[Var],
    loss: impl Fn(&mut Graph, &BoundBundle) -> Var,
) {
    let mut bundle = jittered(&f.bundle);
    let p = pick(&mut bundle).clone();
    let mut g = Graph::new();
    let b = BoundBundle::bind_bundle(&mut g, &bundle, Tracking::ALL);
    let out = loss(&mut g, &b);
    let analytic = p.gather(bound(&b), &g.backward(out));
    let numeric = central_difference(&p, 1e-5, |q| {
        let mut bundle = bundle.clone();
        *pick(&mut bundle) = q.clone();
        let mut g = Graph::new();
        let b = BoundBundle::bind_bundle(&mut g, &bundle, Tracking::ALL);
        let out = loss(&mut g, &b);
        g.value(out).item()
    });
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn kd_gradient_wrt_classifier() {
    let f = Fixture::new();
    let (lb, ub) = (f.labeled(), f.unlabeled());
    check_group(
        &f,
        |m| &mut m.vae.classifier,
        |b| &b.classifier,
        |g, b| {
            let lc = codes_for(g, &f, b, &lb, 1);
            let uc = codes_for(g, &f, b, &ub, 2);
            kd_loss(g, &f.arch, b, &lc, &uc).unwrap()
        },
    );
}

#[test]
fn disc_gradient_wrt_discriminator() {
    let f = Fixture::new();
    let (lb, ub) = (f.labeled(), f.unlabeled());
    check_group(
        &f,
        |m| &mut m.discriminator,
        |b| &b.discriminator,
        |g, b| {
            let lc = codes_for(g, &f, b, &lb, 1);
            let uc = codes_for(g, &f, b, &ub, 2);
            disc_loss(g, &f.arch, b, lc.mu, uc.mu).unwrap()
        },
    );
}

#[test]
fn kd_single_labeled_sample_with_empty_unlabeled() {
    let mut f = Fixture::new();
    zero_classifier(&mut f);
    let lb = Batch::gather(&f.data, &[0], true, None).unwrap();
    let mut g = Graph::new();
    let b = BoundBundle::bind_bundle(&mut g, &f.bundle, Tracking::ALL);
    let lc = codes_for(&mut g, &f, &b, &lb, 1);
    let uc = PoolCodes {
        len: 0,
        ..lc.clone()
    };
    let kd = kd_loss(&mut g, &f.arch, &b, &lc, &uc).unwrap();
    let kd = g.value(kd).item();
    let t = f.arch.target_forward(&f.bundle.target, &lb.images, Head::Label).unwrap();
    let expect: f64 = t.data().iter().map(|v| v * v).sum();
    assert!((kd - expect).abs() < 1e-12);
}

#[test]
fn total_weights_components() {
    let b = LossBreakdown::combine(1.0, 2.0, 3.0, 4.0, 5.0, [1.0, 0.5, 0.5, 1.0]);
    assert_eq!(b.total, 11.5);
    let b = LossBreakdown::combine(1.0, 2.0, 3.0, 4.0, 5.0, [0.0; 4]);
    assert_eq!(b.total, 1.0);
    assert_eq!(
        b.csv_row(2, 7),
        "2,7,1,2,3,4,5,1,0",
    );
    let header: Vec<&str> = LossBreakdown::CSV_HEADER.split(',').collect();
    assert_eq!(header.len(), b.csv_row(0, 0).split(',').count());
}

#[test]
fn shared_total_matches_separate_recomputation() {
    let f = Fixture::new();
    let (lb, ub) = (f.labeled(), f.unlabeled());
    let cfg = tiny_cfg();
    let mut g = Graph::new();
    let b = BoundBundle::bind_bundle(&mut g, &f.bundle, Tracking::VAE);
    let obj = total_vae_loss(&mut g, &f.arch, &b, &lb, &ub, &cfg, &mut Rng::new(9, "noise")).unwrap();
    let shared = obj.breakdown(&g, cfg.lambdas());

    // Every term from its own graph and its own encoder passes, same noise.
    let term = |which: usize| -> f64 {
        let mut g = Graph::new();
        let b = BoundBundle::bind_bundle(&mut g, &f.bundle, Tracking::VAE);
        let mut rng = Rng::new(9, "noise");
        let lc = encode_pool(&mut g, &f.arch, &b, &lb, &mut rng).unwrap();
        let uc = encode_pool(&mut g, &f.arch, &b, &ub, &mut rng).unwrap();
        let v = match which {
            0 => url_loss(&mut g, &f.arch, &b, &lc, &uc, cfg.beta).unwrap(),
            1 => {
                let kl = kl_unit_gaussian(&mut g, lc.mu, lc.logvar);
                proxy_sup_loss(&mut g, &f.arch, &b, &lb, &lc, Some(kl)).unwrap()
            }
            2 => {
                let kl = kl_unit_gaussian(&mut g, uc.mu, uc.logvar);
                proxy_ssl_loss(&mut g, &f.arch, &b, &ub, &uc, Some(kl)).unwrap()
            }
            3 => kd_loss(&mut g, &f.arch, &b, &lc, &uc).unwrap(),
            _ => adv_gen_loss(&mut g, &f.arch, &b, &lc, &uc).unwrap(),
        };
        g.value(v).item()
    };
    let separate = LossBreakdown::combine(term(0), term(1), term(2), term(3), term(4), cfg.lambdas());
    assert!((shared.total - separate.total).abs() < 1e-10, "{shared:?} vs {separate:?}");
    assert!((shared.url - separate.url).abs() < 1e-10);
    assert!(shared.total >= 0.0);

    let zero = ALConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        lambda4: 0.0,
        ..cfg.clone()
    };
    let mut g = Graph::new();
    let b = BoundBundle::bind_bundle(&mut g, &f.bundle, Tracking::VAE);
    let obj = total_vae_loss(&mut g, &f.arch, &b, &lb, &ub, &zero, &mut Rng::new(9, "noise")).unwrap();
    assert_eq!(g.value(obj.total).item(), g.value(obj.url).item());
}

#[test]
fn target_loss_uniform_logits_and_xi() {
    let mut f = Fixture::new();
    f.bundle.target = ParamSet::zeros(f.arch.target.layout().clone());
    let (lb, ub) = (f.labeled(), f.unlabeled());
    let mut g = Graph::new();
    let t = f.bundle.target.bind(&mut g, true);
    let xi = 0.3;
    let obj = target_loss(&mut g, &f.arch, &t, &lb, Some(&ub), xi).unwrap();
    let expect = 3f64.ln() + xi * 6f64.ln();
    assert!((g.value(obj.total).item() - expect).abs() < 1e-12);
    let obj = target_loss(&mut g, &f.arch, &t, &lb, Some(&ub), 0.0).unwrap();
    assert_eq!(g.value(obj.total).item(), g.value(obj.sup).item());
}

#[test]
fn target_loss_gradient() {
    let f = Fixture::new();
    let (lb, ub) = (f.labeled(), f.unlabeled());
    check_group(
        &f,
        |m| &mut m.target,
        |b| &b.target,
        |g, b| target_loss(g, &f.arch, &b.target, &lb, Some(&ub), 1.0).unwrap().total,
    );
}

#[test]
fn disc_loss_ignores_batch_order() {
    let f = Fixture::new();
    let (lb, ub) = (f.labeled(), f.unlabeled());
    let value = |l: &Batch, u: &Batch| {
        let mut g = Graph::new();
        let b = BoundBundle::bind_bundle(&mut g, &f.bundle, Tracking::DISCRIMINATOR);
        let lc = codes_for(&mut g, &f, &b, l, 1);
        let uc = codes_for(&mut g, &f, &b, u, 2);
        let d = disc_loss(&mut g, &f.arch, &b, lc.mu, uc.mu).unwrap();
        g.value(d).item()
    };
    let rev = |batch: &Batch| {
        let idx: Vec<usize> = batch.indices.iter().rev().copied().collect();
        let t = batch.pretext.as_ref().map(|t| t.iter().rev().copied().collect());
        Batch::gather(&f.data, &idx, batch.labels.is_some(), t).unwrap()
    };
    let a = value(&lb, &ub);
    let b = value(&rev(&lb), &rev(&ub));
    assert!((a - b).abs() < 1e-12);
}

