//! Scalar objectives of the VAE, the proxy classifier, the discriminator and the
//! target learner. Every function returns the quantity to be minimized.
//!
//! Gradient stops live inside the losses themselves: [`kd_loss`] detaches the
//! target parameters, [`adv_gen_loss`] the discriminator parameters and
//! [`disc_loss`] the latent codes, regardless of how the caller bound them.

use crate::config::ALConfig;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::nets::{reparameterize_on, Architecture, Graph, Head, ModelBundle, ParamSet, Tensor, Var, VaeParams};
use crate::rng::Rng;

/// Parameters of every network, bound into one graph.
#[derive(Clone, Debug)]
pub struct BoundBundle {
    pub encoder: Vec<Var>,
    pub generator: Vec<Var>,
    pub classifier: Vec<Var>,
    pub discriminator: Vec<Var>,
    pub target: Vec<Var>,
}

/// Which parameter groups record gradients when bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tracking {
    pub vae: bool,
    pub discriminator: bool,
    pub target: bool,
}

impl Tracking {
    pub const ALL: Tracking = Tracking {
        vae: true,
        discriminator: true,
        target: true,
    };
    pub const VAE: Tracking = Tracking {
        vae: true,
        discriminator: false,
        target: false,
    };
    pub const DISCRIMINATOR: Tracking = Tracking {
        vae: false,
        discriminator: true,
        target: false,
    };
}

impl BoundBundle {
    pub fn bind(g: &mut Graph, vae: &VaeParams, disc: &ParamSet, target: &ParamSet, track: Tracking) -> Self {
        BoundBundle {
            encoder: vae.encoder.bind(g, track.vae),
            generator: vae.generator.bind(g, track.vae),
            classifier: vae.classifier.bind(g, track.vae),
            discriminator: disc.bind(g, track.discriminator),
            target: target.bind(g, track.target),
        }
    }

    pub fn bind_bundle(g: &mut Graph, bundle: &ModelBundle, track: Tracking) -> Self {
        Self::bind(g, &bundle.vae, &bundle.discriminator, &bundle.target, track)
    }
}

/// One encoder pass over a batch: the shared input of every VAE-side term.
#[derive(Clone, Debug)]
pub struct PoolCodes {
    pub x: Var,
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    /// Reparameterization noise used for `z`.
    pub noise: Tensor,
    pub len: usize,
}

pub fn encode_pool(
    g: &mut Graph,
    arch: &Architecture,
    b: &BoundBundle,
    batch: &Batch,
    rng: &mut Rng,
) -> Result<PoolCodes> {
    let x = g.constant(batch.images.clone());
    let (mu, logvar) = arch.encoder.forward(g, &b.encoder, x)?;
    let (z, noise) = reparameterize_on(g, mu, logvar, rng);
    Ok(PoolCodes {
        x,
        mu,
        logvar,
        z,
        noise,
        len: batch.len(),
    })
}

fn batch_mean(g: &mut Graph, per_batch_sum: Var, n: usize) -> Var {
    g.scale(per_batch_sum, 1.0 / n.max(1) as f64)
}

/// `0.5 * sum_i (mu_i^2 + exp(lv_i) - lv_i - 1)`, averaged over rows.
pub fn kl_unit_gaussian(g: &mut Graph, mu: Var, logvar: Var) -> Var {
    let n = g.shape(mu)[0];
    let m2 = g.square(mu);
    let e = g.exp(logvar);
    let a = g.add(m2, e);
    let b = g.sub(a, logvar);
    let c = g.add_scalar(b, -1.0);
    let s = g.sum(c);
    let half = g.scale(s, 0.5);
    batch_mean(g, half, n)
}

/// Squared error summed over pixels, averaged over the batch.
pub fn reconstruction_loss(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    if g.shape(x) != g.shape(x_hat) {
        return Err(Error::invalid(format!(
            "reconstruction shape {:?} != input shape {:?}",
            g.shape(x_hat),
            g.shape(x)
        )));
    }
    let n = g.shape(x)[0];
    let d = g.sub(x_hat, x);
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(batch_mean(g, s, n))
}

/// `recon + beta * KL` for one pool.
pub fn url_pool_term(
    g: &mut Graph,
    arch: &Architecture,
    b: &BoundBundle,
    codes: &PoolCodes,
    kl: Var,
    beta: f64,
) -> Result<Var> {
    let x_hat = arch.generator.forward(g, &b.generator, codes.z)?;
    let rec = reconstruction_loss(g, codes.x, x_hat)?;
    let wkl = g.scale(kl, beta);
    Ok(g.add(rec, wkl))
}

/// Unified representation loss over both pools.
pub fn url_loss(
    g: &mut Graph,
    arch: &Architecture,
    b: &BoundBundle,
    labeled: &PoolCodes,
    unlabeled: &PoolCodes,
    beta: f64,
) -> Result<Var> {
    if labeled.len == 0 || unlabeled.len == 0 {
        return Err(Error::invalid("both batches must be non-empty"));
    }
    let kl_l = kl_unit_gaussian(g, labeled.mu, labeled.logvar);
    let kl_u = kl_unit_gaussian(g, unlabeled.mu, unlabeled.logvar);
    let l = url_pool_term(g, arch, b, labeled, kl_l, beta)?;
    let u = url_pool_term(g, arch, b, unlabeled, kl_u, beta)?;
    Ok(g.add(l, u))
}

fn with_optional_kl(g: &mut Graph, ce: Var, kl: Option<Var>) -> Var {
    match kl {
        Some(kl) => g.add(ce, kl),
        None => ce,
    }
}

/// Label-head cross-entropy on sampled codes, plus the encoder KL when `kl` is given.
pub fn proxy_sup_loss(
    g: &mut Graph,
    arch: &Architecture,
    b: &BoundBundle,
    batch: &Batch,
    codes: &PoolCodes,
    kl: Option<Var>,
) -> Result<Var> {
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("proxy supervised loss needs labels"))?;
    let logits = arch.classifier.forward(g, &b.classifier, codes.z, Head::Label)?;
    let ce = g.softmax_cross_entropy(logits, labels);
    Ok(with_optional_kl(g, ce, kl))
}

/// Rotation-head cross-entropy on the pretext codes, plus the encoder KL when given.
pub fn proxy_ssl_loss(
    g: &mut Graph,
    arch: &Architecture,
    b: &BoundBundle,
    batch: &Batch,
    codes: &PoolCodes,
    kl: Option<Var>,
) -> Result<Var> {
    let targets = batch
        .pretext_codes()
        .ok_or_else(|| Error::invalid("proxy self-supervised loss needs pretext labels"))?;
    let logits = arch.classifier.forward(g, &b.classifier, codes.z, Head::Rotation)?;
    let ce = g.softmax_cross_entropy(logits, &targets);
    Ok(with_optional_kl(g, ce, kl))
}

/// Mean over rows of `||teacher - student||^2`; zero for an empty batch.
pub fn squared_logit_distance(g: &mut Graph, teacher: Var, student: Var) -> Result<Var> {
    if g.shape(teacher) != g.shape(student) {
        return Err(Error::invalid(format!(
            "teacher logits {:?} vs student logits {:?}",
            g.shape(teacher),
            g.shape(student)
        )));
    }
    let n = g.shape(teacher)[0];
    let d = g.sub(teacher, student);
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(batch_mean(g, s, n))
}

/// Distillation from the frozen target learner into the proxy heads (fed encoder means).
pub fn kd_loss(
    g: &mut Graph,
    arch: &Architecture,
    b: &BoundBundle,
    labeled: &PoolCodes,
    unlabeled: &PoolCodes,
) -> Result<Var> {
    let frozen: Vec<Var> = b.target.iter().map(|&v| g.detach(v)).collect();
    let term = |g: &mut Graph, codes: &PoolCodes, head: Head| -> Result<Option<Var>> {
        if codes.len == 0 {
            return Ok(None);
        }
        let teacher = arch.target.forward(g, &frozen, codes.x, head)?;
        let student = arch.classifier.forward(g, &b.classifier, codes.mu, head)?;
        squared_logit_distance(g, teacher, student).map(Some)
    };
    let l = term(g, labeled, Head::Label)?;
    let u = term(g, unlabeled, Head::Rotation)?;
    Ok(match (l, u) {
        (Some(l), Some(u)) => g.add(l, u),
        (Some(t), None) | (None, Some(t)) => t,
        (None, None) => g.constant(Tensor::scalar(0.0)),
    })
}

/// `-mean log p` or `-mean log (1 - p)` over a column of probabilities.
fn neg_mean_log(g: &mut Graph, probs: Var, complement: bool) -> Var {
    let n = g.shape(probs)[0];
    let p = if complement {
        let neg = g.scale(probs, -1.0);
        g.add_scalar(neg, 1.0)
    } else {
        probs
    };
    let l = g.ln(p);
    let s = g.sum(l);
    g.scale(s, -1.0 / n.max(1) as f64)
}

/// Generator side of the adversarial game: both pools should look labeled.
pub fn adv_gen_loss(
    g: &mut Graph,
    arch: &Architecture,
    b: &BoundBundle,
    labeled: &PoolCodes,
    unlabeled: &PoolCodes,
) -> Result<Var> {
    let frozen: Vec<Var> = b.discriminator.iter().map(|&v| g.detach(v)).collect();
    let dl = arch.discriminator.forward(g, &frozen, labeled.mu)?;
    let du = arch.discriminator.forward(g, &frozen, unlabeled.mu)?;
    let a = neg_mean_log(g, dl, false);
    let c = neg_mean_log(g, du, false);
    Ok(g.add(a, c))
}

/// Discriminator objective: labeled codes are class 1, unlabeled class 0.
/// `labeled_codes` / `unlabeled_codes` are detached before use.
pub fn disc_loss(
    g: &mut Graph,
    arch: &Architecture,
    b: &BoundBundle,
    labeled_codes: Var,
    unlabeled_codes: Var,
) -> Result<Var> {
    let zl = g.detach(labeled_codes);
    let zu = g.detach(unlabeled_codes);
    let dl = arch.discriminator.forward(g, &b.discriminator, zl)?;
    let du = arch.discriminator.forward(g, &b.discriminator, zu)?;
    let a = neg_mean_log(g, dl, false);
    let c = neg_mean_log(g, du, true);
    Ok(g.add(a, c))
}

/// Scalar values of every objective at one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub url: f64,
    pub proxy_sup: f64,
    pub proxy_ssl: f64,
    pub kd: f64,
    pub adv_gen: f64,
    pub total: f64,
    pub disc: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "epoch,step,url,proxy_sup,proxy_ssl,kd,adv_gen,total,disc";

    /// Weighted total `url + l1 sup + l2 ssl + l3 kd + l4 adv`.
    pub fn combine(url: f64, proxy_sup: f64, proxy_ssl: f64, kd: f64, adv_gen: f64, lambdas: [f64; 4]) -> Self {
        let [l1, l2, l3, l4] = lambdas;
        LossBreakdown {
            url,
            proxy_sup,
            proxy_ssl,
            kd,
            adv_gen,
            total: url + l1 * proxy_sup + l2 * proxy_ssl + l3 * kd + l4 * adv_gen,
            disc: 0.0,
        }
    }

    pub fn all_finite(&self) -> bool {
        [self.url, self.proxy_sup, self.proxy_ssl, self.kd, self.adv_gen, self.total, self.disc]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn csv_row(&self, epoch: usize, step: usize) -> String {
        let vals = [self.url, self.proxy_sup, self.proxy_ssl, self.kd, self.adv_gen, self.total, self.disc];
        let mut row = format!("{epoch},{step}");
        for v in vals {
            row.push_str(&format!(",{v}"));
        }
        row
    }
}

/// Graph nodes of the weighted VAE objective and its parts.
#[derive(Clone, Debug)]
pub struct VaeObjective {
    pub total: Var,
    pub url: Var,
    pub proxy_sup: Var,
    pub proxy_ssl: Var,
    pub kd: Var,
    pub adv_gen: Var,
    pub labeled: PoolCodes,
    pub unlabeled: PoolCodes,
}

impl VaeObjective {
    pub fn breakdown(&self, g: &Graph, lambdas: [f64; 4]) -> LossBreakdown {
        let v = |x: Var| g.value(x).item();
        let mut b = LossBreakdown::combine(v(self.url), v(self.proxy_sup), v(self.proxy_ssl), v(self.kd), v(self.adv_gen), lambdas);
        b.total = v(self.total);
        b
    }
}

/// The weighted sum of all VAE-side objectives, with one encoder pass per pool
/// feeding every term.
pub fn total_vae_loss(
    g: &mut Graph,
    arch: &Architecture,
    b: &BoundBundle,
    labeled: &Batch,
    unlabeled: &Batch,
    cfg: &ALConfig,
    rng: &mut Rng,
) -> Result<VaeObjective> {
    let lambdas = cfg.lambdas();
    if lambdas.iter().any(|&l| l < 0.0) {
        return Err(Error::invalid("loss weights must be non-negative"));
    }
    let lc = encode_pool(g, arch, b, labeled, rng)?;
    let uc = encode_pool(g, arch, b, unlabeled, rng)?;
    let kl_l = kl_unit_gaussian(g, lc.mu, lc.logvar);
    let kl_u = kl_unit_gaussian(g, uc.mu, uc.logvar);
    let url_l = url_pool_term(g, arch, b, &lc, kl_l, cfg.beta)?;
    let url_u = url_pool_term(g, arch, b, &uc, kl_u, cfg.beta)?;
    let url = g.add(url_l, url_u);
    let sup = proxy_sup_loss(g, arch, b, labeled, &lc, cfg.proxy_kl.then_some(kl_l))?;
    let ssl = proxy_ssl_loss(g, arch, b, unlabeled, &uc, cfg.proxy_kl.then_some(kl_u))?;
    let kd = kd_loss(g, arch, b, &lc, &uc)?;
    let adv = adv_gen_loss(g, arch, b, &lc, &uc)?;
    let total = weighted_total(g, url, [sup, ssl, kd, adv], lambdas);
    Ok(VaeObjective {
        total,
        url,
        proxy_sup: sup,
        proxy_ssl: ssl,
        kd,
        adv_gen: adv,
        labeled: lc,
        unlabeled: uc,
    })
}

/// `base + sum_k lambda_k * term_k` on the graph.
pub fn weighted_total(g: &mut Graph, base: Var, terms: [Var; 4], lambdas: [f64; 4]) -> Var {
    let mut total = base;
    for (t, l) in terms.into_iter().zip(lambdas) {
        let w = g.scale(t, l);
        total = g.add(total, w);
    }
    total
}

/// Graph nodes of the target learner objective.
#[derive(Clone, Copy, Debug)]
pub struct TargetObjective {
    pub total: Var,
    pub sup: Var,
    pub ssl: Option<Var>,
}

/// `CE(y, T_label(x_L)) + xi * CE(r, T_rotation(x_U))`. Without an unlabeled
/// batch only the supervised term remains.
pub fn target_loss(
    g: &mut Graph,
    arch: &Architecture,
    target: &[Var],
    labeled: &Batch,
    unlabeled: Option<&Batch>,
    xi: f64,
) -> Result<TargetObjective> {
    let labels = labeled
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("target loss needs a labeled batch"))?;
    let xl = g.constant(labeled.images.clone());
    let logits = arch.target.forward(g, target, xl, Head::Label)?;
    let sup = g.softmax_cross_entropy(logits, labels);
    let Some(unlabeled) = unlabeled else {
        return Ok(TargetObjective {
            total: sup,
            sup,
            ssl: None,
        });
    };
    let rot = unlabeled
        .pretext_codes()
        .ok_or_else(|| Error::invalid("target loss needs pretext labels on the unlabeled batch"))?;
    let xu = g.constant(unlabeled.images.clone());
    let rlogits = arch.target.forward(g, target, xu, Head::Rotation)?;
    let ssl = g.softmax_cross_entropy(rlogits, &rot);
    let w = g.scale(ssl, xi);
    Ok(TargetObjective {
        total: g.add(sup, w),
        sup,
        ssl: Some(ssl),
    })
}

#[cfg(test)]
mod tests;
