//! Hierarchical VAE over `[N, N, 2]` window images.
//!
//! Latents are split into groups ordered from most abstract to closest to the
//! data. Each group's prior `N(mu, sigma)` is produced by the top-down network
//! from the groups above it (the top group uses `N(0, I)`); the posterior is
//! the residual `N(mu + dmu, sigma * dsigma)`.

pub mod checkpoint;
pub mod loss;
pub mod net;
pub mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use loss::{elbo_loss, kl_total, kl_variable, recon_loss};
pub use net::{ArchConfig, GroupPlacement, Net, Role};
use net::{chw_to_hwc, hwc_to_chw, Source};
use tape::Tape;

/// Floating-point element type the model can run in.
pub trait Real:
    num_traits::Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a · b + beta · c` for an `m x k` by `k x n` product with row-major `c`.
    /// `a` and `b` are addressed through (row, column) strides.
    fn gemm(dims: (usize, usize, usize), a: (&[Self], isize, isize), b: (&[Self], isize, isize), beta: Self, c: &mut [Self]);
}

/// Panics unless every element an `rows x cols` strided view touches lies in `data`.
fn check_view<T>(data: &[T], rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < data.len(), "strided view exceeds buffer");
}

macro_rules! impl_gemm {
    ($t:ty, $f:path) => {
        fn gemm(
            (m, k, n): (usize, usize, usize),
            (a, rsa, csa): (&[$t], isize, isize),
            (b, rsb, csb): (&[$t], isize, isize),
            beta: $t,
            c: &mut [$t],
        ) {
            check_view(a, m, k, rsa, csa);
            check_view(b, k, n, rsb, csb);
            assert!(c.len() >= m * n, "output too small");
            // SAFETY: all three views were bounds-checked above and `c` does not alias `a` or `b`.
            unsafe {
                $f(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
            }
        }
    };
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    impl_gemm!(f32, matrixmultiply::sgemm);
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    impl_gemm!(f64, matrixmultiply::dgemm);
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentGroupSpec {
    pub dims: Vec<usize>,
}

impl LatentGroupSpec {
    pub fn group_count(&self) -> usize {
        self.dims.len()
    }
}

/// A batch of `[N, N, 2]` tensors, row-major per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<T> {
    pub batch: usize,
    pub size: usize,
    pub data: Vec<T>,
}

impl<T: Real> ImageBatch<T> {
    pub fn new(batch: usize, size: usize, data: Vec<T>) -> Result<Self> {
        let expect = batch * size * size * crate::encode2d::CHANNELS;
        if data.len() != expect {
            return Err(Error::shape(expect, data.len()));
        }
        Ok(ImageBatch { batch, size, data })
    }

    pub fn sample_len(&self) -> usize {
        self.size * self.size * crate::encode2d::CHANNELS
    }

    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }
}

/// Per-group distribution parameters, each `[B * I_g]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDistribution<T> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
    pub delta_mu: Vec<T>,
    pub delta_sigma: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState<T> {
    pub batch: usize,
    pub dims: Vec<usize>,
    /// `samples[g]` holds `batch * dims[g]` values, sample-major.
    pub samples: Vec<Vec<T>>,
    pub group_dists: Vec<GroupDistribution<T>>,
}

impl<T: Real> LatentState<T> {
    fn empty(batch: usize, dims: &[usize]) -> Self {
        let mk = || dims.iter().map(|d| Vec::with_capacity(batch * d)).collect::<Vec<Vec<T>>>();
        LatentState {
            batch,
            dims: dims.to_vec(),
            samples: mk(),
            group_dists: dims
                .iter()
                .map(|d| GroupDistribution {
                    mu: Vec::with_capacity(batch * d),
                    sigma: Vec::with_capacity(batch * d),
                    delta_mu: Vec::with_capacity(batch * d),
                    delta_sigma: Vec::with_capacity(batch * d),
                })
                .collect(),
        }
    }
}

/// How latents are drawn.
pub enum Sampling<'a> {
    /// Use distribution means (noise fixed at zero).
    Mean,
    Random(&'a mut dyn RngCore),
}

#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub arch: ArchConfig,
    pub params: Vec<T>,
    net: Net,
}

impl<T: PartialEq> PartialEq for ModelParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params == other.params
    }
}

impl<T: Real> ModelParams<T> {
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let net = Net::new(arch)?;
        let params = net.init_params(seed);
        Ok(ModelParams { arch: arch.clone(), params, net })
    }

    pub fn from_params(arch: &ArchConfig, params: Vec<T>) -> Result<Self> {
        let net = Net::new(arch)?;
        if params.len() != net.total {
            return Err(Error::shape(format!("{} parameters", net.total), params.len()));
        }
        Ok(ModelParams { arch: arch.clone(), params, net })
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn window(&self) -> usize {
        self.arch.window
    }

    pub fn latent_spec(&self) -> LatentGroupSpec {
        LatentGroupSpec { dims: self.arch.group_dims() }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            params: self.params.iter().map(|v| U::of(v.as_f64())).collect(),
            net: self.net.clone(),
        }
    }

    /// Standard-normal noise for one sample, one vector per group.
    pub fn draw_noise(&self, rng: &mut dyn RngCore) -> Vec<Vec<T>> {
        self.arch
            .group_dims()
            .iter()
            .map(|&d| {
                (0..d)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(rng);
                        T::of(v)
                    })
                    .collect()
            })
            .collect()
    }

    fn check_batch(&self, x: &ImageBatch<T>) -> Result<()> {
        if x.size != self.arch.window {
            return Err(Error::shape(
                format!("window {}", self.arch.window),
                format!("window {}", x.size),
            ));
        }
        Ok(())
    }

    fn noise_for(&self, sampling: &mut Sampling<'_>) -> Option<Vec<Vec<T>>> {
        match sampling {
            Sampling::Mean => None,
            Sampling::Random(rng) => Some(self.draw_noise(*rng)),
        }
    }

    fn input_node(&self, t: &mut Tape<T>, x_hwc: &[T]) -> usize {
        let n = self.arch.window;
        t.input(hwc_to_chw(x_hwc, n, crate::encode2d::CHANNELS), self.net.input_shape(), false)
    }

    fn collect_latents(&self, t: &Tape<T>, td: &net::TopDown, state: &mut LatentState<T>) {
        for g in 0..td.z.len() {
            state.samples[g].extend_from_slice(t.value(td.z[g]));
            let d = &td.dists[g];
            let gd = &mut state.group_dists[g];
            gd.mu.extend_from_slice(t.value(d.mu));
            gd.sigma.extend_from_slice(t.value(d.sigma));
            gd.delta_mu.extend_from_slice(t.value(d.dmu));
            gd.delta_sigma.extend_from_slice(t.value(d.dsigma));
        }
    }

    /// Posterior latents for each sample, drawn auto-regressively over groups.
    pub fn encode(&self, x: &ImageBatch<T>, mut sampling: Sampling<'_>) -> Result<LatentState<T>> {
        self.check_batch(x)?;
        let mut state = LatentState::empty(x.batch, &self.arch.group_dims());
        for b in 0..x.batch {
            let noise = self.noise_for(&mut sampling);
            let mut t = Tape::new(&self.params);
            let xi = self.input_node(&mut t, x.sample(b));
            let feats = self.net.bottom_up(&mut t, xi);
            let td = self.net.top_down(
                &mut t,
                Source::Posterior { feats: &feats, noise: noise.as_deref() },
                false,
            );
            self.collect_latents(&t, &td, &mut state);
        }
        Ok(state)
    }

    /// Ancestral samples from the prior.
    pub fn sample_prior(&self, batch: usize, mut sampling: Sampling<'_>) -> LatentState<T> {
        let mut state = LatentState::empty(batch, &self.arch.group_dims());
        for _ in 0..batch {
            let noise = self.noise_for(&mut sampling);
            let mut t = Tape::new(&self.params);
            let td = self.net.top_down(&mut t, Source::Prior { noise: noise.as_deref() }, false);
            self.collect_latents(&t, &td, &mut state);
        }
        state
    }

    /// Deterministic reconstruction from latent samples.
    pub fn decode(&self, z: &LatentState<T>) -> Result<ImageBatch<T>> {
        let dims = self.arch.group_dims();
        if z.dims != dims || z.samples.len() != dims.len() {
            return Err(Error::shape(format!("{dims:?}"), format!("{:?}", z.dims)));
        }
        for (g, s) in z.samples.iter().enumerate() {
            if s.len() != z.batch * dims[g] {
                return Err(Error::shape(z.batch * dims[g], s.len()));
            }
        }
        let n = self.arch.window;
        let mut data = Vec::with_capacity(z.batch * self.arch.input_len());
        for b in 0..z.batch {
            let mut t = Tape::new(&self.params);
            let ids: Vec<usize> = (0..dims.len())
                .map(|g| {
                    let v = z.samples[g][b * dims[g]..(b + 1) * dims[g]].to_vec();
                    t.input(v, self.net.latent_shape(g), false)
                })
                .collect();
            let td = self.net.top_down(&mut t, Source::Given(&ids), true);
            let out = td.out.expect("output requested");
            data.extend(chw_to_hwc(t.value(out), n, crate::encode2d::CHANNELS));
        }
        ImageBatch::new(z.batch, n, data)
    }

    /// Reconstruction of one `[N, N, 2]` sample; `noise` of `None` uses posterior means.
    pub fn reconstruct_sample(&self, x_hwc: &[T], noise: Option<&[Vec<T>]>) -> Result<Vec<T>> {
        if x_hwc.len() != self.arch.input_len() {
            return Err(Error::shape(self.arch.input_len(), x_hwc.len()));
        }
        let mut t = Tape::new(&self.params);
        let xi = self.input_node(&mut t, x_hwc);
        let feats = self.net.bottom_up(&mut t, xi);
        let td = self.net.top_down(&mut t, Source::Posterior { feats: &feats, noise }, true);
        let out = td.out.expect("output requested");
        Ok(chw_to_hwc(t.value(out), self.arch.window, crate::encode2d::CHANNELS))
    }

    /// Fused encode + decode.
    pub fn reconstruct(&self, x: &ImageBatch<T>, mut sampling: Sampling<'_>) -> Result<(ImageBatch<T>, LatentState<T>)> {
        self.check_batch(x)?;
        let n = self.arch.window;
        let mut state = LatentState::empty(x.batch, &self.arch.group_dims());
        let mut data = Vec::with_capacity(x.data.len());
        for b in 0..x.batch {
            let noise = self.noise_for(&mut sampling);
            let mut t = Tape::new(&self.params);
            let xi = self.input_node(&mut t, x.sample(b));
            let feats = self.net.bottom_up(&mut t, xi);
            let td = self.net.top_down(
                &mut t,
                Source::Posterior { feats: &feats, noise: noise.as_deref() },
                true,
            );
            self.collect_latents(&t, &td, &mut state);
            data.extend(chw_to_hwc(t.value(td.out.expect("output requested")), n, crate::encode2d::CHANNELS));
        }
        Ok((ImageBatch::new(x.batch, n, data)?, state))
    }
}
