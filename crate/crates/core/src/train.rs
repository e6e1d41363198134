//! Two-phase optimisation: joint ELBO updates, then alternating adversarial
//! encoder/decoder updates with margin-hinged KL terms.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hvae::net::{hwc_to_chw, Source};
use crate::hvae::tape::{Id, Tape};
use crate::hvae::{ArchConfig, ModelParams, Real};
use crate::ingest::{StandardizationParams, TimeSeries};
use crate::par::{self, Parallelism};
use crate::pipeline::{encode_windows, prepare_values, WindowSet};

/// Samples per ordered gradient reduction; bounds memory held by per-sample gradients.
const REDUCE_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total epochs, adversarial ones included.
    pub epoch: usize,
    pub epoch_gan: usize,
    pub batch_size: usize,
    pub lr_vae: f64,
    pub lr_gan: f64,
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
    pub seed: u64,
    pub parallelism: Parallelism,
    /// Write a checkpoint every this many epochs (0 disables intermediate checkpoints).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epoch: 50,
            epoch_gan: 5,
            batch_size: 128,
            lr_vae: 1e-3,
            lr_gan: 1e-4,
            alpha: 0.005,
            beta: 0.1,
            margin: 10.0,
            seed: 0,
            parallelism: Parallelism::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epoch_gan > self.epoch {
            return bad(format!("epoch_gan ({}) exceeds epoch ({})", self.epoch_gan, self.epoch));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [
            ("lr_vae", self.lr_vae),
            ("lr_gan", self.lr_gan),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("margin", self.margin),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    pub fn vae_epochs(&self) -> usize {
        self.epoch - self.epoch_gan
    }
}

/// Adamax with bias-corrected first moment and an infinity-norm second moment.
#[derive(Debug, Clone)]
pub struct Adamax<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<T>,
    u: Vec<T>,
}

impl<T: Real> Adamax<T> {
    pub fn new(len: usize, lr: f64) -> Self {
        Adamax { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![T::zero(); len], u: vec![T::zero(); len] }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Updates `params[i]` for every `i` with `select(i)`.
    pub fn step(&mut self, params: &mut [T], grads: &[T], select: impl Fn(usize) -> bool) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let (b1, b2, eps) = (T::of(self.beta1), T::of(self.beta2), T::of(self.eps));
        let step = T::of(self.lr / (1.0 - self.beta1.powi(self.t)));
        for i in 0..params.len() {
            if !select(i) {
                continue;
            }
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.u[i] = (b2 * self.u[i]).max(g.abs() + eps);
            params[i] -= step * self.m[i] / self.u[i];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Vae,
    Gan,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Vae => "vae",
            Phase::Gan => "gan",
        }
    }
}

/// Per-epoch means over samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub phase: Phase,
    pub mean_lr: f64,
    pub mean_kl: f64,
    pub mean_ld: Option<f64>,
    pub mean_lg: Option<f64>,
}

impl EpochRecord {
    /// Reconstruction plus KL, the joint objective.
    pub fn mean_elbo(&self) -> f64 {
        self.mean_lr + self.mean_kl
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub const HEADER: &'static str = "epoch,phase,mean_lr,mean_kl,mean_ld,mean_lg";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch,
                r.phase.as_str(),
                r.mean_lr,
                r.mean_kl,
                opt(r.mean_ld),
                opt(r.mean_lg)
            );
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Loss terms of one sample under the joint objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VaeTerms<T> {
    pub lr: T,
    pub kl: T,
}

fn input_node<T: Real>(model: &ModelParams<T>, t: &mut Tape<'_, T>, x_hwc: &[T]) -> Id {
    let n = model.window();
    t.input(hwc_to_chw(x_hwc, n, crate::encode2d::CHANNELS), model.net().input_shape(), false)
}

/// Joint objective of one sample; its gradient is added into `grad`.
///
/// `noise` of `None` uses posterior means.
pub fn vae_sample_grad<T: Real>(
    model: &ModelParams<T>,
    x_hwc: &[T],
    noise: Option<&[Vec<T>]>,
    grad: &mut [T],
) -> VaeTerms<T> {
    let net = model.net();
    let mut t = Tape::new(&model.params);
    let xi = input_node(model, &mut t, x_hwc);
    let feats = net.bottom_up(&mut t, xi);
    let td = net.top_down(&mut t, Source::Posterior { feats: &feats, noise }, true);
    let out = td.out.expect("output requested");
    let r = t.half_sq_err(out, xi);
    let kl = td.kl.expect("posterior pass has KL");
    t.backward(&[(r, T::one()), (kl, T::one())], true, &|_| true, grad);
    VaeTerms { lr: t.scalar(r), kl: t.scalar(kl) }
}

/// Noise for one adversarial sample: the real pass, the re-encoding of its
/// reconstruction, the prior draw, and the re-encoding of the prior sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvNoise<T> {
    pub real: Vec<Vec<T>>,
    pub rec: Vec<Vec<T>>,
    pub prior: Vec<Vec<T>>,
    pub prior_rec: Vec<Vec<T>>,
}

impl<T: Real> AdvNoise<T> {
    pub fn draw(model: &ModelParams<T>, rng: &mut dyn RngCore) -> Self {
        AdvNoise {
            real: model.draw_noise(rng),
            rec: model.draw_noise(rng),
            prior: model.draw_noise(rng),
            prior_rec: model.draw_noise(rng),
        }
    }
}

/// Per-sample quantities of the adversarial objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvTerms<T> {
    pub lr: T,
    /// KL of the real input's posterior.
    pub kl_real: T,
    /// KL of the re-encoded reconstruction.
    pub kl_rec: T,
    /// KL of the re-encoded prior sample.
    pub kl_prior: T,
}

/// Which margin hinges are active for the current batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hinge {
    pub rec: bool,
    pub prior: bool,
}

impl Hinge {
    /// Hinges are active while the batch-summed KL sits below the margin.
    pub fn from_batch(kl_rec_sum: f64, kl_prior_sum: f64, margin: f64) -> Self {
        Hinge { rec: margin - kl_rec_sum > 0.0, prior: margin - kl_prior_sum > 0.0 }
    }
}

/// Decoder outputs to feed the re-encoding branches in place of the
/// stop-gradient nodes, as `[2][n][n]` tensors.
pub struct Frozen<'a, T> {
    pub x_hat: &'a [T],
    pub x_hat_prior: &'a [T],
}

struct AdvGraph {
    r: Id,
    kl_real: Id,
    kl_rec: Id,
    kl_prior: Id,
    x_hat: Id,
    x_hat_prior: Id,
}

fn build_adversarial<T: Real>(
    model: &ModelParams<T>,
    t: &mut Tape<'_, T>,
    x_hwc: &[T],
    noise: &AdvNoise<T>,
    frozen: Option<&Frozen<'_, T>>,
) -> AdvGraph {
    let net = model.net();
    let shape = net.input_shape();
    let xi = input_node(model, t, x_hwc);
    let feats = net.bottom_up(t, xi);
    let td = net.top_down(t, Source::Posterior { feats: &feats, noise: Some(&noise.real) }, true);
    let x_hat = td.out.expect("output requested");
    let r = t.half_sq_err(x_hat, xi);

    let rec_in = match frozen {
        Some(f) => t.input(f.x_hat.to_vec(), shape, false),
        None => t.stop_grad(x_hat),
    };
    let f_rec = net.bottom_up(t, rec_in);
    let td_rec = net.top_down(t, Source::Posterior { feats: &f_rec, noise: Some(&noise.rec) }, false);

    let td_p = net.top_down(t, Source::Prior { noise: Some(&noise.prior) }, true);
    let x_hat_prior = td_p.out.expect("output requested");
    let p_in = match frozen {
        Some(f) => t.input(f.x_hat_prior.to_vec(), shape, false),
        None => t.stop_grad(x_hat_prior),
    };
    let f_p = net.bottom_up(t, p_in);
    let td_pr = net.top_down(t, Source::Posterior { feats: &f_p, noise: Some(&noise.prior_rec) }, false);

    AdvGraph {
        r,
        kl_real: td.kl.expect("posterior pass has KL"),
        kl_rec: td_rec.kl.expect("posterior pass has KL"),
        kl_prior: td_pr.kl.expect("posterior pass has KL"),
        x_hat,
        x_hat_prior,
    }
}

fn terms_of<T: Real>(t: &Tape<'_, T>, g: &AdvGraph) -> AdvTerms<T> {
    AdvTerms {
        lr: t.scalar(g.r),
        kl_real: t.scalar(g.kl_real),
        kl_rec: t.scalar(g.kl_rec),
        kl_prior: t.scalar(g.kl_prior),
    }
}

/// Forward-only adversarial terms of one sample, plus the two decoder outputs
/// (`[2][n][n]`) that the re-encoding branches consumed.
pub fn adversarial_terms<T: Real>(
    model: &ModelParams<T>,
    x_hwc: &[T],
    noise: &AdvNoise<T>,
    frozen: Option<&Frozen<'_, T>>,
) -> (AdvTerms<T>, Vec<T>, Vec<T>) {
    let mut t = Tape::new(&model.params);
    let g = build_adversarial(model, &mut t, x_hwc, noise, frozen);
    (terms_of(&t, &g), t.value(g.x_hat).to_vec(), t.value(g.x_hat_prior).to_vec())
}

/// Per-sample gradients of the discriminator loss w.r.t. encoder parameters
/// (stop-gradients honoured) and of the generator loss w.r.t. decoder
/// parameters (no stop-gradient), both at the current parameters.
pub fn adversarial_sample_grads<T: Real>(
    model: &ModelParams<T>,
    x_hwc: &[T],
    noise: &AdvNoise<T>,
    alpha: f64,
    beta: f64,
    hinge: Hinge,
    grad_enc: &mut [T],
    grad_dec: &mut [T],
) -> AdvTerms<T> {
    let net = model.net();
    let mut t = Tape::new(&model.params);
    let g = build_adversarial(model, &mut t, x_hwc, noise, None);
    let a = T::of(alpha);
    let mut seeds_d = vec![(g.r, T::one()), (g.kl_real, T::of(beta))];
    if hinge.rec {
        seeds_d.push((g.kl_rec, -a));
    }
    if hinge.prior {
        seeds_d.push((g.kl_prior, -a));
    }
    t.backward(&seeds_d, true, &|s| net.is_encoder(s.offset), grad_enc);
    let seeds_g = [(g.r, T::one()), (g.kl_rec, a), (g.kl_prior, a)];
    t.backward(&seeds_g, false, &|s| !net.is_encoder(s.offset), grad_dec);
    terms_of(&t, &g)
}

/// Batch discriminator loss from summed terms.
pub fn discriminator_loss(lr: f64, kl_real: f64, kl_rec: f64, kl_prior: f64, cfg: &TrainConfig) -> f64 {
    lr + cfg.beta * kl_real
        + cfg.alpha * (cfg.margin - kl_rec).max(0.0)
        + cfg.alpha * (cfg.margin - kl_prior).max(0.0)
}

/// Batch generator loss from summed terms.
pub fn generator_loss(lr: f64, kl_rec: f64, kl_prior: f64, cfg: &TrainConfig) -> f64 {
    lr + cfg.alpha * kl_rec + cfg.alpha * kl_prior
}

/// Summed losses of one mini-batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLoss {
    pub lr: f64,
    pub kl: f64,
    pub ld: Option<f64>,
    pub lg: Option<f64>,
}

fn add_into(acc: &mut [f32], g: &[f32]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += *b;
    }
}

fn non_finite(epoch: usize, batch: usize, phase: Phase, components: String) -> Error {
    Error::NonFinite { epoch, batch, phase: phase.as_str(), components }
}

/// Where a batch sits in the run, for diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct BatchPos {
    pub epoch: usize,
    pub batch: usize,
}

/// One joint update on the samples `idx` of `data`.
pub fn vae_step(
    model: &mut ModelParams<f32>,
    opt: &mut Adamax<f32>,
    data: &WindowSet,
    idx: &[usize],
    rng: &mut dyn RngCore,
    mode: Parallelism,
    pos: BatchPos,
) -> Result<BatchLoss> {
    let noise: Vec<Vec<Vec<f32>>> = idx.iter().map(|_| model.draw_noise(rng)).collect();
    let total = model.params.len();
    let mut grad = vec![0f32; total];
    let mut loss = BatchLoss::default();
    for (ci, chunk) in idx.chunks(REDUCE_CHUNK).enumerate() {
        let m: &ModelParams<f32> = model;
        let results = par::map(mode, chunk, |j, &i| {
            let mut g = vec![0f32; total];
            let terms = vae_sample_grad(m, data.sample(i), Some(&noise[ci * REDUCE_CHUNK + j]), &mut g);
            (terms, g)
        });
        for (terms, g) in results {
            loss.lr += terms.lr as f64;
            loss.kl += terms.kl as f64;
            add_into(&mut grad, &g);
        }
    }
    if !(loss.lr + loss.kl).is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(non_finite(pos.epoch, pos.batch, Phase::Vae, format!("L_r={}, L_KL={}", loss.lr, loss.kl)));
    }
    opt.step(&mut model.params, &grad, |_| true);
    Ok(loss)
}

/// One adversarial update: the encoder steps on the discriminator loss, then
/// the decoder on the generator loss, both from the same forward pass.
pub fn adversarial_step(
    model: &mut ModelParams<f32>,
    enc_opt: &mut Adamax<f32>,
    dec_opt: &mut Adamax<f32>,
    data: &WindowSet,
    idx: &[usize],
    cfg: &TrainConfig,
    rng: &mut dyn RngCore,
    pos: BatchPos,
) -> Result<BatchLoss> {
    let mode = cfg.parallelism;
    let noise: Vec<AdvNoise<f32>> = idx.iter().map(|_| AdvNoise::draw(model, rng)).collect();
    let m: &ModelParams<f32> = model;

    // The hinges depend on batch sums, so a forward pass settles them first.
    let kls = par::map(mode, idx, |j, &i| {
        let (terms, _, _) = adversarial_terms(m, data.sample(i), &noise[j], None);
        (terms.kl_rec as f64, terms.kl_prior as f64)
    });
    let kl_rec: f64 = kls.iter().map(|k| k.0).sum();
    let kl_prior: f64 = kls.iter().map(|k| k.1).sum();
    let hinge = Hinge::from_batch(kl_rec, kl_prior, cfg.margin);

    let total = m.params.len();
    let mut g_enc = vec![0f32; total];
    let mut g_dec = vec![0f32; total];
    let (mut lr, mut kl_real) = (0.0, 0.0);
    for (ci, chunk) in idx.chunks(REDUCE_CHUNK).enumerate() {
        let results = par::map(mode, chunk, |j, &i| {
            let mut ge = vec![0f32; total];
            let mut gd = vec![0f32; total];
            let terms = adversarial_sample_grads(
                m,
                data.sample(i),
                &noise[ci * REDUCE_CHUNK + j],
                cfg.alpha,
                cfg.beta,
                hinge,
                &mut ge,
                &mut gd,
            );
            (terms, ge, gd)
        });
        for (terms, ge, gd) in results {
            lr += terms.lr as f64;
            kl_real += terms.kl_real as f64;
            add_into(&mut g_enc, &ge);
            add_into(&mut g_dec, &gd);
        }
    }
    let ld = discriminator_loss(lr, kl_real, kl_rec, kl_prior, cfg);
    let lg = generator_loss(lr, kl_rec, kl_prior, cfg);
    if !(ld.is_finite() && lg.is_finite())
        || g_enc.iter().chain(&g_dec).any(|g| !g.is_finite())
    {
        return Err(non_finite(
            pos.epoch,
            pos.batch,
            Phase::Gan,
            format!("L_r={lr}, L_KL={kl_real}, L_KL(rec)={kl_rec}, L_KL(prior)={kl_prior}, L_d={ld}, L_g={lg}"),
        ));
    }
    let net = model.net().clone();
    enc_opt.step(&mut model.params, &g_enc, |i| net.is_encoder(i));
    dec_opt.step(&mut model.params, &g_dec, |i| !net.is_encoder(i));
    Ok(BatchLoss { lr, kl: kl_real, ld: Some(ld), lg: Some(lg) })
}

/// Called after each epoch with the record and current parameters.
pub type EpochObserver<'a> = dyn FnMut(&EpochRecord, &ModelParams<f32>) -> Result<()> + 'a;

/// Runs the VAE epochs then the adversarial epochs on encoded windows.
pub fn train_windows(
    model: &mut ModelParams<f32>,
    data: &WindowSet,
    cfg: &TrainConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no training windows"));
    }
    if data.size != model.window() {
        return Err(Error::shape(format!("window {}", model.window()), format!("window {}", data.size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_7A11);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainingLog::default();
    let total = model.params.len();
    let count = data.len() as f64;

    let mut vae_opt = Adamax::new(total, cfg.lr_vae);
    for e in 0..cfg.vae_epochs() {
        order.shuffle(&mut rng);
        let (mut lr, mut kl) = (0.0, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let pos = BatchPos { epoch: e + 1, batch: b };
            let l = vae_step(model, &mut vae_opt, data, idx, &mut rng, cfg.parallelism, pos)?;
            lr += l.lr;
            kl += l.kl;
        }
        let rec = EpochRecord { epoch: e + 1, phase: Phase::Vae, mean_lr: lr / count, mean_kl: kl / count, mean_ld: None, mean_lg: None };
        observer(&rec, model)?;
        log.records.push(rec);
    }

    let mut enc_opt = Adamax::new(total, cfg.lr_gan);
    let mut dec_opt = Adamax::new(total, cfg.lr_gan);
    for e in cfg.vae_epochs()..cfg.epoch {
        order.shuffle(&mut rng);
        let mut sum = BatchLoss { ld: Some(0.0), lg: Some(0.0), ..Default::default() };
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let pos = BatchPos { epoch: e + 1, batch: b };
            let l = adversarial_step(model, &mut enc_opt, &mut dec_opt, data, idx, cfg, &mut rng, pos)?;
            sum.lr += l.lr;
            sum.kl += l.kl;
            sum.ld = sum.ld.zip(l.ld).map(|(a, b)| a + b);
            sum.lg = sum.lg.zip(l.lg).map(|(a, b)| a + b);
        }
        let rec = EpochRecord {
            epoch: e + 1,
            phase: Phase::Gan,
            mean_lr: sum.lr / count,
            mean_kl: sum.kl / count,
            mean_ld: sum.ld.map(|v| v / count),
            mean_lg: sum.lg.map(|v| v / count),
        };
        observer(&rec, model)?;
        log.records.push(rec);
    }
    Ok(log)
}

/// VAE-phase training only (`cfg.epoch - cfg.epoch_gan` epochs).
pub fn train_vae_phase(model: &ModelParams<f32>, data: &WindowSet, cfg: &TrainConfig) -> Result<(ModelParams<f32>, TrainingLog)> {
    let mut m = model.clone();
    let vae_only = TrainConfig { epoch: cfg.vae_epochs(), epoch_gan: 0, ..cfg.clone() };
    let log = train_windows(&mut m, data, &vae_only, &mut |_, _| Ok(()))?;
    Ok((m, log))
}

/// Result of training on one series.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: ModelParams<f32>,
    pub log: TrainingLog,
    pub standardization: StandardizationParams,
}

/// Standardizes, windows (centre stride `step`) and encodes the series, then trains a fresh model.
pub fn fit_with(
    series: &TimeSeries,
    cfg: &TrainConfig,
    arch: &ArchConfig,
    step: usize,
    observer: &mut EpochObserver<'_>,
) -> Result<Fitted> {
    cfg.validate()?;
    let (values, standardization) = prepare_values(series, None)?;
    let data = encode_windows(&values, arch.window, step, cfg.parallelism)?;
    let mut model = ModelParams::init(arch, cfg.seed)?;
    let log = train_windows(&mut model, &data, cfg, observer)?;
    Ok(Fitted { model, log, standardization })
}

pub fn fit(series: &TimeSeries, cfg: &TrainConfig, arch: &ArchConfig) -> Result<Fitted> {
    fit_with(series, cfg, arch, 1, &mut |_, _| Ok(()))
}
