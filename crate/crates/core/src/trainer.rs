//! Optimizers and the two training procedures: the target learner on its own,
//! and the VAE and discriminator trained against each other.

use std::time::{Duration, Instant};

use crate::config::ALConfig;
use crate::data::{batches, paired_epoch, BatchOptions, BatchStreams};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::{disc_loss, target_loss, total_vae_loss, BoundBundle, LossBreakdown, Tracking};
use crate::nets::{Architecture, Graph, ParamSet, Tensor, VaeParams};
use crate::pool::PoolState;
use crate::rng::{fnv1a, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64, weight_decay: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Optimizer hyperparameters and moment buffers for one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Global-norm clip threshold; zero disables clipping.
    pub clip: f64,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn sgd(len: usize, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::SgdMomentum { momentum, weight_decay },
            lr,
            clip: 0.0,
            step: 0,
            first: vec![0.0; len],
            second: Vec::new(),
        }
    }

    pub fn adam(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::Adam { beta1, beta2, eps },
            lr,
            clip: 0.0,
            step: 0,
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip = clip;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer for {} values got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        let scale = clip_scale(grads, self.clip);
        self.step += 1;
        match self.kind {
            OptimizerKind::SgdMomentum { momentum, weight_decay } => {
                for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    *v = momentum * *v + (scale * g + weight_decay * *p);
                    *p -= self.lr * *v;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, &g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let g = scale * g;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// Treats several parameter sets as one concatenated vector.
    pub fn step_sets(&mut self, sets: &mut [&mut ParamSet], grads: &[Vec<f64>]) -> Result<()> {
        let mut flat: Vec<f64> = sets.iter().flat_map(|s| s.values().iter().copied()).collect();
        let g: Vec<f64> = grads.iter().flatten().copied().collect();
        self.step(&mut flat, &g)?;
        let mut off = 0;
        for s in sets.iter_mut() {
            let n = s.len();
            s.values_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

fn clip_scale(grads: &[f64], clip: f64) -> f64 {
    if clip <= 0.0 {
        return 1.0;
    }
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

/// `v <- m v + (g + wd p); p <- p - lr v`.
pub fn sgd_momentum_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    if !matches!(state.kind, OptimizerKind::SgdMomentum { .. }) {
        return Err(Error::invalid("state is not an SGD state"));
    }
    state.step(params, grads)
}

/// Bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    if !matches!(state.kind, OptimizerKind::Adam { .. }) {
        return Err(Error::invalid("state is not an Adam state"));
    }
    state.step(params, grads)
}

/// A row of a per-step loss log.
pub trait CsvRow {
    fn header() -> &'static str;
    fn to_csv(&self) -> String;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetRow {
    pub epoch: usize,
    pub step: usize,
    pub sup: f64,
    pub ssl: f64,
    pub total: f64,
}

impl CsvRow for TargetRow {
    fn header() -> &'static str {
        "epoch,step,sup,ssl,total"
    }

    fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.step, self.sup, self.ssl, self.total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub losses: LossBreakdown,
}

impl CsvRow for LossRow {
    fn header() -> &'static str {
        LossBreakdown::CSV_HEADER
    }

    fn to_csv(&self) -> String {
        self.losses.csv_row(self.epoch, self.step)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport<R> {
    pub rows: Vec<R>,
    pub wall_time: Duration,
    pub checksum: u64,
}

/// Receives every row as soon as its step finishes.
pub type RowSink<'a, R> = &'a mut dyn FnMut(&R) -> Result<()>;

/// Random streams of one training phase: parameter init, the two pools' batch
/// order and pretext draws, and reparameterization noise.
#[derive(Clone, Debug)]
pub struct TrainStreams {
    pub init: Rng,
    pub labeled: BatchStreams,
    pub unlabeled: BatchStreams,
    pub noise: Rng,
}

impl TrainStreams {
    pub fn new(seed: u64, phase: &str) -> Self {
        TrainStreams {
            init: Rng::stream(seed, &[phase, "init"]),
            labeled: BatchStreams::new(seed, &format!("{phase}/labeled")),
            unlabeled: BatchStreams::new(seed, &format!("{phase}/unlabeled")),
            noise: Rng::stream(seed, &[phase, "noise"]),
        }
    }
}

/// What every training run reads.
#[derive(Clone, Copy, Debug)]
pub struct TrainContext<'a> {
    pub dataset: &'a Dataset,
    pub pool: &'a PoolState,
    pub arch: &'a Architecture,
    pub cfg: &'a ALConfig,
}

fn diverged(phase: &str, epoch: usize, step: usize) -> Error {
    Error::Divergence(format!("non-finite {phase} loss at epoch {epoch}, step {step}"))
}

/// Target learner from a fresh initialization drawn from `streams.init`.
pub fn train_target(
    ctx: TrainContext<'_>,
    streams: &mut TrainStreams,
    sink: RowSink<'_, TargetRow>,
) -> Result<(ParamSet, TrainReport<TargetRow>)> {
    let init = ctx.arch.init_target(&mut streams.init);
    train_target_from(ctx, init, streams, sink)
}

/// Target learner trained with SGD momentum from `init`. Each epoch pairs
/// labeled batches with pretext-transformed unlabeled batches; with an empty
/// unlabeled pool only the supervised term is used.
pub fn train_target_from(
    ctx: TrainContext<'_>,
    init: ParamSet,
    streams: &mut TrainStreams,
    sink: RowSink<'_, TargetRow>,
) -> Result<(ParamSet, TrainReport<TargetRow>)> {
    let TrainContext { dataset, pool, arch, cfg } = ctx;
    if pool.labeled().is_empty() {
        return Err(Error::state("target training needs labeled examples"));
    }
    let start = Instant::now();
    let mut params = init;
    let mut opt = OptimizerState::sgd(params.len(), cfg.lr_target, cfg.momentum, cfg.weight_decay).with_clip(cfg.grad_clip);
    let mut rows = Vec::new();
    for epoch in 0..cfg.epochs_target {
        let pairs = if pool.unlabeled().is_empty() {
            let opts = BatchOptions {
                batch_size: cfg.batch_size,
                labels: true,
                pretext: false,
            };
            batches(dataset, pool.labeled(), opts, &mut streams.labeled)?
                .into_iter()
                .map(|b| (b, None))
                .collect::<Vec<_>>()
        } else {
            paired_epoch(
                dataset,
                pool.labeled(),
                pool.unlabeled(),
                cfg.batch_size,
                &mut streams.labeled,
                &mut streams.unlabeled,
            )?
            .into_iter()
            .map(|(l, u)| (l, Some(u)))
            .collect()
        };
        for (step, (lb, ub)) in pairs.iter().enumerate() {
            let mut g = Graph::new();
            let vars = params.bind(&mut g, true);
            let obj = target_loss(&mut g, arch, &vars, lb, ub.as_ref(), cfg.xi)?;
            let row = TargetRow {
                epoch,
                step,
                sup: g.value(obj.sup).item(),
                ssl: obj.ssl.map_or(0.0, |v| g.value(v).item()),
                total: g.value(obj.total).item(),
            };
            if !row.total.is_finite() {
                return Err(diverged("target", epoch, step));
            }
            let grads = params.gather(&vars, &g.backward(obj.total));
            opt.step(params.values_mut(), &grads)?;
            sink(&row)?;
            rows.push(row);
        }
    }
    if !params.all_finite() {
        return Err(Error::Divergence("target parameters became non-finite".into()));
    }
    let checksum = params.checksum();
    Ok((
        params,
        TrainReport {
            rows,
            wall_time: start.elapsed(),
            checksum,
        },
    ))
}

/// Checksum over the VAE and discriminator parameters together.
pub fn adversarial_checksum(vae: &VaeParams, disc: &ParamSet) -> u64 {
    let mut bytes = vae.checksum().to_le_bytes().to_vec();
    bytes.extend_from_slice(&disc.checksum().to_le_bytes());
    fnv1a(&bytes)
}

/// VAE and discriminator from a fresh initialization drawn from `streams.init`.
pub fn train_adroit(
    ctx: TrainContext<'_>,
    target: &ParamSet,
    streams: &mut TrainStreams,
    sink: RowSink<'_, LossRow>,
) -> Result<(VaeParams, ParamSet, TrainReport<LossRow>)> {
    let (vae, disc) = ctx.arch.init_adversarial(&mut streams.init);
    train_adroit_from(ctx, vae, disc, target, streams, sink)
}

/// Per step: one Adam step on the VAE against the weighted total, then one
/// Adam step on the discriminator using codes from the just-updated encoder.
/// `target` is only read.
pub fn train_adroit_from(
    ctx: TrainContext<'_>,
    vae: VaeParams,
    disc: ParamSet,
    target: &ParamSet,
    streams: &mut TrainStreams,
    sink: RowSink<'_, LossRow>,
) -> Result<(VaeParams, ParamSet, TrainReport<LossRow>)> {
    let TrainContext { dataset, pool, arch, cfg } = ctx;
    let start = Instant::now();
    let (mut vae, mut disc) = (vae, disc);
    let lambdas = cfg.lambdas();
    let vae_len: usize = vae.parts().iter().map(|p| p.len()).sum();
    let adam = |len, lr| OptimizerState::adam(len, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps).with_clip(cfg.grad_clip);
    let mut vae_opt = adam(vae_len, cfg.lr_vae);
    let mut disc_opt = adam(disc.len(), cfg.lr_disc);
    let mut rows = Vec::new();
    for epoch in 0..cfg.epochs_vae {
        let pairs = paired_epoch(
            dataset,
            pool.labeled(),
            pool.unlabeled(),
            cfg.batch_size,
            &mut streams.labeled,
            &mut streams.unlabeled,
        )?;
        for (step, (lb, ub)) in pairs.iter().enumerate() {
            let mut g = Graph::new();
            let b = BoundBundle::bind(&mut g, &vae, &disc, target, Tracking::VAE);
            let obj = total_vae_loss(&mut g, arch, &b, lb, ub, cfg, &mut streams.noise)?;
            let mut losses = obj.breakdown(&g, lambdas);
            if !losses.total.is_finite() {
                return Err(diverged("VAE", epoch, step));
            }
            let tape = g.backward(obj.total);
            let grads = vec![
                vae.encoder.gather(&b.encoder, &tape),
                vae.generator.gather(&b.generator, &tape),
                vae.classifier.gather(&b.classifier, &tape),
            ];
            drop(tape);
            drop(g);
            vae_opt.step_sets(&mut vae.parts_mut(), &grads)?;

            let (mu_l, _) = arch.encode(&vae.encoder, &lb.images)?;
            let (mu_u, _) = arch.encode(&vae.encoder, &ub.images)?;
            losses.disc = disc_step(arch, &vae, &mut disc, target, &mut disc_opt, mu_l, mu_u)?;
            if !losses.all_finite() {
                return Err(diverged("discriminator", epoch, step));
            }
            let row = LossRow { epoch, step, losses };
            sink(&row)?;
            rows.push(row);
        }
    }
    if !(vae.parts().iter().all(|p| p.all_finite()) && disc.all_finite()) {
        return Err(Error::Divergence("adversarial parameters became non-finite".into()));
    }
    let checksum = adversarial_checksum(&vae, &disc);
    Ok((
        vae,
        disc,
        TrainReport {
            rows,
            wall_time: start.elapsed(),
            checksum,
        },
    ))
}

fn disc_step(
    arch: &Architecture,
    vae: &VaeParams,
    disc: &mut ParamSet,
    target: &ParamSet,
    opt: &mut OptimizerState,
    mu_l: Tensor,
    mu_u: Tensor,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = BoundBundle::bind(&mut g, vae, disc, target, Tracking::DISCRIMINATOR);
    let zl = g.constant(mu_l);
    let zu = g.constant(mu_u);
    let loss = disc_loss(&mut g, arch, &b, zl, zu)?;
    let value = g.value(loss).item();
    let grads = disc.gather(&b.discriminator, &g.backward(loss));
    opt.step(disc.values_mut(), &grads)?;
    Ok(value)
}
