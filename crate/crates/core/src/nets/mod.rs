//! The five networks: encoder, generator, proxy classifier, state discriminator
//! and target learner.
//!
//! Every network owns a [`Layout`] and exposes a `forward` that records onto a
//! [`Graph`]. Parameters are bound with [`ParamSet::bind`]; binding them as
//! constants is how frozen networks are evaluated.

pub mod gradcheck;
pub mod params;
pub mod tape;

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

pub use params::{Init, Layout, ParamSet, ParamSpec};
pub use tape::{ConvSpec, Gradients, Graph, Tensor, Var};

use crate::config::ALConfig;
use crate::dataset::ImageShape;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Bounds applied to the encoder's log-variance before exponentiation.
pub const LOGVAR_CLAMP: f64 = 10.0;
/// Discriminator probabilities are kept in `[DISC_EPS, 1 - DISC_EPS]`.
pub const DISC_EPS: f64 = 1e-7;
/// Number of pretext transforms, i.e. the rotation-head width.
pub const PRETEXT_CLASSES: usize = 6;

const LEAKY_SLOPE: f64 = 0.2;
const DOWN: ConvSpec = ConvSpec {
    kernel: 4,
    stride: 2,
    padding: 1,
};
const SAME: ConvSpec = ConvSpec {
    kernel: 3,
    stride: 1,
    padding: 1,
};

/// Which output head of a two-headed classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Label,
    Rotation,
}

fn weight(name: &str, shape: Vec<usize>, fan_in: usize, init: Init) -> ParamSpec {
    ParamSpec {
        name: name.to_string(),
        shape,
        fan_in,
        init,
    }
}

fn bias(name: &str, n: usize) -> ParamSpec {
    weight(name, vec![n], 1, Init::Zero)
}

fn conv(name: &str, cin: usize, cout: usize, k: usize) -> [ParamSpec; 2] {
    [
        weight(&format!("{name}.w"), vec![cout, cin, k, k], cin * k * k, Init::He),
        bias(&format!("{name}.b"), cout),
    ]
}

fn linear(name: &str, fan_in: usize, out: usize, init: Init) -> [ParamSpec; 2] {
    [
        weight(&format!("{name}.w"), vec![fan_in, out], fan_in, init),
        bias(&format!("{name}.b"), out),
    ]
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let m = g.matmul(x, w);
    g.add_bias(m, b)
}

fn check_images(g: &Graph, x: Var, shape: ImageShape) -> Result<usize> {
    let s = g.shape(x);
    if s.len() != 4 || s[1..] != [shape.channels, shape.height, shape.width] {
        return Err(Error::invalid(format!("expected images [n, {shape:?}], got {s:?}")));
    }
    Ok(s[0])
}

/// Maps pixel values from [0, 1] to [-1, 1].
fn centered(g: &mut Graph, x: Var) -> Var {
    let h = g.scale(x, 2.0);
    g.add_scalar(h, -1.0)
}

fn check_codes(g: &Graph, z: Var, d: usize) -> Result<usize> {
    let s = g.shape(z);
    if s.len() != 2 || s[1] != d {
        return Err(Error::invalid(format!("expected codes [n, {d}], got {s:?}")));
    }
    Ok(s[0])
}

/// Three stride-2 convolutions, then linear maps to mean and log-variance.
#[derive(Clone, Debug)]
pub struct Encoder {
    image: ImageShape,
    width: usize,
    latent: usize,
    layout: Arc<Layout>,
}

impl Encoder {
    pub fn new(image: ImageShape, width: usize, latent: usize) -> Self {
        let w = width;
        let flat = 4 * w * (image.height / 8) * (image.width / 8);
        let mut specs = Vec::new();
        specs.extend(conv("enc.conv1", image.channels, w, 4));
        specs.extend(conv("enc.conv2", w, 2 * w, 4));
        specs.extend(conv("enc.conv3", 2 * w, 4 * w, 4));
        specs.extend(linear("enc.mu", flat, latent, Init::LeCun));
        specs.extend(linear("enc.logvar", flat, latent, Init::LeCun));
        Encoder {
            image,
            width,
            latent,
            layout: Layout::new(specs),
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// Returns `(mean, clamped log-variance)`, each `[n, latent]`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<(Var, Var)> {
        let n = check_images(g, x, self.image)?;
        let mut h = x;
        for l in 0..3 {
            h = g.conv2d(h, p[2 * l], p[2 * l + 1], DOWN);
            h = g.relu(h);
        }
        let flat = g.value(h).len() / n.max(1);
        let h = g.reshape(h, vec![n, flat]);
        let mu = affine(g, h, p[6], p[7]);
        let lv = affine(g, h, p[8], p[9]);
        let lv = g.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
        Ok((mu, lv))
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Linear projection followed by three stride-2 transposed convolutions and a sigmoid.
#[derive(Clone, Debug)]
pub struct Generator {
    image: ImageShape,
    width: usize,
    latent: usize,
    layout: Arc<Layout>,
}

impl Generator {
    pub fn new(image: ImageShape, width: usize, latent: usize) -> Self {
        let w = width;
        let (h0, w0) = (image.height / 8, image.width / 8);
        let mut specs = Vec::new();
        specs.extend(linear("gen.fc", latent, 4 * w * h0 * w0, Init::He));
        let mut tconv = |name: &str, cin: usize, cout: usize| {
            specs.push(weight(&format!("{name}.w"), vec![cin, cout, 4, 4], cin * 4, Init::He));
            specs.push(bias(&format!("{name}.b"), cout));
        };
        tconv("gen.up1", 4 * w, 2 * w);
        tconv("gen.up2", 2 * w, w);
        tconv("gen.up3", w, image.channels);
        Generator {
            image,
            width,
            latent,
            layout: Layout::new(specs),
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// Reconstructions in `[0, 1]`, shaped `[n, c, h, w]`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], z: Var) -> Result<Var> {
        let n = check_codes(g, z, self.latent)?;
        let h = affine(g, z, p[0], p[1]);
        let h = g.relu(h);
        let mut h = g.reshape(
            h,
            vec![n, 4 * self.width, self.image.height / 8, self.image.width / 8],
        );
        for l in 1..4 {
            h = g.conv_transpose2d(h, p[2 * l], p[2 * l + 1], DOWN);
            if l < 3 {
                h = g.relu(h);
            }
        }
        Ok(g.sigmoid(h))
    }
}

/// Two-hidden-layer perceptron on latent codes with label and rotation heads.
#[derive(Clone, Debug)]
pub struct ProxyClassifier {
    latent: usize,
    num_classes: usize,
    layout: Arc<Layout>,
}

impl ProxyClassifier {
    pub fn new(latent: usize, hidden: usize, num_classes: usize) -> Self {
        let mut specs = Vec::new();
        specs.extend(linear("cls.fc1", latent, hidden, Init::He));
        specs.extend(linear("cls.fc2", hidden, hidden, Init::He));
        specs.extend(linear("cls.label", hidden, num_classes, Init::LeCun));
        specs.extend(linear("cls.rotation", hidden, PRETEXT_CLASSES, Init::LeCun));
        ProxyClassifier {
            latent,
            num_classes,
            layout: Layout::new(specs),
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn head_width(&self, head: Head) -> usize {
        match head {
            Head::Label => self.num_classes,
            Head::Rotation => PRETEXT_CLASSES,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], z: Var, head: Head) -> Result<Var> {
        check_codes(g, z, self.latent)?;
        let h = affine(g, z, p[0], p[1]);
        let h = g.relu(h);
        let h = affine(g, h, p[2], p[3]);
        let h = g.relu(h);
        Ok(match head {
            Head::Label => affine(g, h, p[4], p[5]),
            Head::Rotation => affine(g, h, p[6], p[7]),
        })
    }
}

/// Five linear layers with leaky rectifiers; outputs P(labeled).
#[derive(Clone, Debug)]
pub struct Discriminator {
    latent: usize,
    layout: Arc<Layout>,
}

impl Discriminator {
    pub const LAYERS: usize = 5;

    pub fn new(latent: usize, hidden: usize) -> Self {
        let mut specs = Vec::new();
        let mut fan_in = latent;
        for l in 0..Self::LAYERS {
            let last = l + 1 == Self::LAYERS;
            let out = if last { 1 } else { hidden };
            let init = if last { Init::LeCun } else { Init::He };
            specs.extend(linear(&format!("disc.fc{}", l + 1), fan_in, out, init));
            fan_in = out;
        }
        Discriminator {
            latent,
            layout: Layout::new(specs),
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// Probabilities `[n, 1]`, clamped to `[DISC_EPS, 1 - DISC_EPS]`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], z: Var) -> Result<Var> {
        let s = self.logit(g, p, z)?;
        let s = g.sigmoid(s);
        Ok(g.clamp(s, DISC_EPS, 1.0 - DISC_EPS))
    }

    /// Pre-sigmoid score.
    pub fn logit(&self, g: &mut Graph, p: &[Var], z: Var) -> Result<Var> {
        check_codes(g, z, self.latent)?;
        let mut h = z;
        for l in 0..Self::LAYERS {
            h = affine(g, h, p[2 * l], p[2 * l + 1]);
            if l + 1 < Self::LAYERS {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }
}

/// Four-convolution image classifier with label and rotation heads.
#[derive(Clone, Debug)]
pub struct TargetNet {
    image: ImageShape,
    num_classes: usize,
    layout: Arc<Layout>,
}

impl TargetNet {
    pub fn new(image: ImageShape, width: usize, num_classes: usize) -> Self {
        let w = width;
        let flat = 4 * w * (image.height / 8) * (image.width / 8);
        let mut specs = Vec::new();
        specs.extend(conv("tgt.conv1", image.channels, w, 4));
        specs.extend(conv("tgt.conv2", w, 2 * w, 3));
        specs.extend(conv("tgt.conv3", 2 * w, 2 * w, 4));
        specs.extend(conv("tgt.conv4", 2 * w, 4 * w, 4));
        specs.extend(linear("tgt.label", flat, num_classes, Init::LeCun));
        specs.extend(linear("tgt.rotation", flat, PRETEXT_CLASSES, Init::LeCun));
        TargetNet {
            image,
            num_classes,
            layout: Layout::new(specs),
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn head_width(&self, head: Head) -> usize {
        match head {
            Head::Label => self.num_classes,
            Head::Rotation => PRETEXT_CLASSES,
        }
    }

    /// Shared convolutional trunk, flattened to `[n, features]`.
    pub fn trunk(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let n = check_images(g, x, self.image)?;
        let specs = [DOWN, SAME, DOWN, DOWN];
        let mut h = centered(g, x);
        for (l, spec) in specs.into_iter().enumerate() {
            h = g.conv2d(h, p[2 * l], p[2 * l + 1], spec);
            h = g.relu(h);
        }
        let flat = g.value(h).len() / n.max(1);
        Ok(g.reshape(h, vec![n, flat]))
    }

    pub fn head(&self, g: &mut Graph, p: &[Var], features: Var, head: Head) -> Var {
        match head {
            Head::Label => affine(g, features, p[8], p[9]),
            Head::Rotation => affine(g, features, p[10], p[11]),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var, head: Head) -> Result<Var> {
        let f = self.trunk(g, p, x)?;
        Ok(self.head(g, p, f, head))
    }
}

/// All five networks for one dataset geometry.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub image: ImageShape,
    pub num_classes: usize,
    pub latent_dim: usize,
    pub encoder: Encoder,
    pub generator: Generator,
    pub classifier: ProxyClassifier,
    pub discriminator: Discriminator,
    pub target: TargetNet,
}

impl Architecture {
    pub fn new(image: ImageShape, num_classes: usize, cfg: &ALConfig) -> Result<Self> {
        if !image.height.is_multiple_of(8) || !image.width.is_multiple_of(8) || image.height == 0 {
            return Err(Error::invalid(format!(
                "image sides must be positive multiples of 8, got {}x{}",
                image.height, image.width
            )));
        }
        let d = cfg.latent_dim;
        Ok(Architecture {
            image,
            num_classes,
            latent_dim: d,
            encoder: Encoder::new(image, cfg.enc_width, d),
            generator: Generator::new(image, cfg.enc_width, d),
            classifier: ProxyClassifier::new(d, cfg.proxy_hidden, num_classes),
            discriminator: Discriminator::new(d, cfg.disc_hidden),
            target: TargetNet::new(image, cfg.target_width, num_classes),
        })
    }

    pub fn init_target(&self, rng: &mut Rng) -> ParamSet {
        ParamSet::init(self.target.layout().clone(), rng)
    }

    /// Fresh encoder, generator and classifier parameters, then the discriminator.
    pub fn init_adversarial(&self, rng: &mut Rng) -> (VaeParams, ParamSet) {
        let vae = VaeParams {
            encoder: ParamSet::init(self.encoder.layout().clone(), rng),
            generator: ParamSet::init(self.generator.layout().clone(), rng),
            classifier: ParamSet::init(self.classifier.layout().clone(), rng),
        };
        let disc = ParamSet::init(self.discriminator.layout().clone(), rng);
        (vae, disc)
    }

    pub fn init_bundle(&self, rng: &mut Rng) -> ModelBundle {
        let (vae, discriminator) = self.init_adversarial(rng);
        ModelBundle {
            vae,
            discriminator,
            target: self.init_target(rng),
        }
    }

    /// Encoder mean and log-variance for a batch of images (no gradients).
    pub fn encode(&self, enc: &ParamSet, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = enc.bind(&mut g, false);
        let x = g.constant(images.clone());
        let (mu, lv) = self.encoder.forward(&mut g, &p, x)?;
        Ok((g.value(mu).clone(), g.value(lv).clone()))
    }

    pub fn decode(&self, gen: &ParamSet, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = gen.bind(&mut g, false);
        let z = g.constant(z.clone());
        let out = self.generator.forward(&mut g, &p, z)?;
        Ok(g.value(out).clone())
    }

    pub fn classify_proxy(&self, cls: &ParamSet, z: &Tensor, head: Head) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = cls.bind(&mut g, false);
        let z = g.constant(z.clone());
        let out = self.classifier.forward(&mut g, &p, z, head)?;
        Ok(g.value(out).clone())
    }

    /// Clamped P(labeled) per code.
    pub fn discriminate(&self, disc: &ParamSet, z: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = disc.bind(&mut g, false);
        let z = g.constant(z.clone());
        let out = self.discriminator.forward(&mut g, &p, z)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn target_forward(&self, tgt: &ParamSet, images: &Tensor, head: Head) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = tgt.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = self.target.forward(&mut g, &p, x, head)?;
        Ok(g.value(out).clone())
    }
}

/// Encoder, generator and proxy classifier: everything the VAE optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeParams {
    pub encoder: ParamSet,
    pub generator: ParamSet,
    pub classifier: ParamSet,
}

impl VaeParams {
    pub fn parts(&self) -> [&ParamSet; 3] {
        [&self.encoder, &self.generator, &self.classifier]
    }

    pub fn parts_mut(&mut self) -> [&mut ParamSet; 3] {
        [&mut self.encoder, &mut self.generator, &mut self.classifier]
    }

    pub fn checksum(&self) -> u64 {
        crate::rng::fnv1a(
            &self
                .parts()
                .iter()
                .flat_map(|p| p.checksum().to_le_bytes())
                .collect::<Vec<u8>>(),
        )
    }
}

/// Parameters of all five networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub vae: VaeParams,
    pub discriminator: ParamSet,
    pub target: ParamSet,
}

/// Mean, log-variance, recorded noise and sample of a batch of codes.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mean: Tensor,
    pub log_variance: Tensor,
    pub noise: Tensor,
    pub sample: Tensor,
}

/// Draws standard-normal noise shaped like `mean`.
pub fn draw_noise(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// `z = mu + exp(0.5 * log_variance) * eps`, with `eps` recorded.
pub fn reparameterize(mean: &Tensor, log_variance: &Tensor, rng: &mut Rng) -> Result<LatentCode> {
    if mean.shape() != log_variance.shape() {
        return Err(Error::invalid("mean and log-variance shapes differ"));
    }
    let noise = draw_noise(mean.shape(), rng);
    let sample = mean
        .data()
        .iter()
        .zip(log_variance.data())
        .zip(noise.data())
        .map(|((&m, &lv), &e)| m + (0.5 * lv.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)).exp() * e)
        .collect();
    Ok(LatentCode {
        sample: Tensor::new(mean.shape().to_vec(), sample),
        mean: mean.clone(),
        log_variance: log_variance.clone(),
        noise,
    })
}

/// Differentiable reparameterization on the tape; returns `(z, eps)`.
pub fn reparameterize_on(g: &mut Graph, mu: Var, logvar: Var, rng: &mut Rng) -> (Var, Tensor) {
    let eps = draw_noise(g.shape(mu), rng);
    let e = g.constant(eps.clone());
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let noise = g.mul(std, e);
    (g.add(mu, noise), eps)
}
