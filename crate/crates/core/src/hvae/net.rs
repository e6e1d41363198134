//! Architecture of the hierarchical VAE and its per-sample forward graph.
//!
//! Bottom-up encoder: at each level a 2x2 space-to-depth followed by a 1x1
//! convolution halves the resolution, then residual cells refine it. The
//! top-down network starts from a learned constant at the coarsest level,
//! attaches latent groups in order (coarse first), and upsamples with a 1x1
//! convolution plus depth-to-space. The same top-down network serves
//! inference (posterior residuals from encoder features) and generation
//! (prior only).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Conv, Id, ParamSlot, Shape, Tape};
use super::Real;
use crate::encode2d::CHANNELS;
use crate::error::{Error, Result};

/// Where a latent group attaches: spatial resolution and channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPlacement {
    pub resolution: usize,
    pub channels: usize,
}

impl GroupPlacement {
    pub fn dim(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Window size `N`; input tensors are `[N, N, 2]`.
    pub window: usize,
    /// Channel width per level; level `l` runs at resolution `N / 2^(l+1)`.
    pub widths: Vec<usize>,
    pub cells_per_scale: usize,
    /// Kernel of the posterior/prior heads and the output head.
    pub head_kernel: usize,
    /// Latent groups, top (most abstract) first.
    pub groups: Vec<GroupPlacement>,
}

impl Default for ArchConfig {
    /// Three groups of 512, 256 and 128 variables on 64-step windows.
    fn default() -> Self {
        ArchConfig {
            window: 64,
            widths: vec![16, 32, 64, 64],
            cells_per_scale: 2,
            head_kernel: 3,
            groups: vec![
                GroupPlacement { resolution: 4, channels: 32 },
                GroupPlacement { resolution: 8, channels: 4 },
                GroupPlacement { resolution: 8, channels: 2 },
            ],
        }
    }
}

impl ArchConfig {
    /// Same latent groups and 3x3 heads as the default, with the two coarsest
    /// levels at 32 channels and one cell per scale. Trains the default
    /// schedule on a 2000-step series in about ten minutes on one core.
    pub fn compact() -> Self {
        ArchConfig {
            widths: vec![16, 32, 32, 32],
            cells_per_scale: 1,
            ..ArchConfig::default()
        }
    }

    /// N = 8, two groups of 4 and 2 variables; used for gradient checks.
    pub fn miniature() -> Self {
        ArchConfig {
            window: 8,
            widths: vec![4, 4, 4],
            cells_per_scale: 1,
            head_kernel: 3,
            groups: vec![
                GroupPlacement { resolution: 1, channels: 4 },
                GroupPlacement { resolution: 1, channels: 2 },
            ],
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        self.window >> (level + 1)
    }

    pub fn group_dims(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.dim()).collect()
    }

    pub fn input_len(&self) -> usize {
        self.window * self.window * CHANNELS
    }

    fn level_of(&self, resolution: usize) -> Option<usize> {
        (0..self.levels()).find(|&l| self.level_resolution(l) == resolution)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.window < 4 || !self.window.is_power_of_two() {
            return bad(format!("window {} must be a power of two >= 4", self.window));
        }
        if self.groups.is_empty() {
            return bad("at least one latent group is required".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be nonempty and positive".into());
        }
        if self.cells_per_scale == 0 {
            return bad("cells_per_scale must be at least 1".into());
        }
        if self.head_kernel.is_multiple_of(2) {
            return bad("head_kernel must be odd".into());
        }
        let top = self.groups[0].resolution;
        if self.level_resolution(self.levels() - 1) != top || top == 0 {
            return bad(format!(
                "{} levels from window {} end at resolution {}, but the top group sits at {}",
                self.levels(),
                self.window,
                self.window >> self.levels(),
                top
            ));
        }
        let mut prev = 0;
        for (g, gp) in self.groups.iter().enumerate() {
            if gp.channels == 0 {
                return bad(format!("group {g} has zero channels"));
            }
            if self.level_of(gp.resolution).is_none() {
                return bad(format!("group {g} resolution {} matches no level", gp.resolution));
            }
            if gp.resolution < prev {
                return bad("group resolutions must not decrease from top to bottom".into());
            }
            prev = gp.resolution;
        }
        Ok(())
    }
}

/// Which sub-network owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// Bottom-up network and posterior heads.
    Encoder,
    /// Top-down network, prior heads, and output head.
    Decoder,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct SlotInfo {
    pub name: String,
    pub slot: ParamSlot,
    pub role: Role,
    init: Init,
}

#[derive(Debug, Clone)]
pub(crate) struct Cell {
    gain: ParamSlot,
    dw: Conv,
    pw: Conv,
}

#[derive(Debug, Clone)]
struct Stage {
    conv: Conv,
    cells: Vec<Cell>,
}

#[derive(Debug, Clone)]
struct GroupNet {
    level: usize,
    channels: usize,
    res: usize,
    posterior: Conv,
    prior: Option<Conv>,
    combine: Conv,
    cell: Cell,
}

/// Parameter layout and wiring derived deterministically from an [`ArchConfig`].
#[derive(Debug, Clone)]
pub struct Net {
    pub arch: ArchConfig,
    pub slots: Vec<SlotInfo>,
    pub total: usize,
    /// Per-element role mask, true for encoder parameters.
    encoder_mask: Vec<bool>,
    h0: ParamSlot,
    h0_shape: Shape,
    enc: Vec<Stage>,
    ups: Vec<Stage>,
    groups: Vec<GroupNet>,
    out: Conv,
}

struct Builder {
    slots: Vec<SlotInfo>,
    total: usize,
}

impl Builder {
    fn alloc(&mut self, name: String, len: usize, role: Role, init: Init) -> ParamSlot {
        let slot = ParamSlot { offset: self.total, len };
        self.total += len;
        self.slots.push(SlotInfo { name, slot, role, init });
        slot
    }

    fn conv(&mut self, name: &str, role: Role, cin: usize, cout: usize, k: usize, groups: usize, gain: f64) -> Conv {
        let fan_in = (cin / groups) * k * k;
        let std = gain / (fan_in as f64).sqrt();
        let weight = self.alloc(format!("{name}.weight"), cout * (cin / groups) * k * k, role, Init::Normal(std));
        let bias = self.alloc(format!("{name}.bias"), cout, role, Init::Zeros);
        Conv { weight, bias, cin, cout, k, groups }
    }

    fn cell(&mut self, name: &str, role: Role, c: usize) -> Cell {
        let gain = self.alloc(format!("{name}.norm"), c, role, Init::Ones);
        let dw = self.conv(&format!("{name}.dw"), role, c, c, 3, c, 1.0);
        let pw = self.conv(&format!("{name}.pw"), role, c, c, 1, 1, 0.1);
        Cell { gain, dw, pw }
    }
}

impl Net {
    pub fn new(arch: &ArchConfig) -> Result<Net> {
        arch.validate()?;
        let mut b = Builder { slots: Vec::new(), total: 0 };
        let levels = arch.levels();
        let w = &arch.widths;

        let mut enc = Vec::with_capacity(levels);
        for l in 0..levels {
            let cin = if l == 0 { CHANNELS * 4 } else { w[l - 1] * 4 };
            let conv = b.conv(&format!("enc.{l}.down"), Role::Encoder, cin, w[l], 1, 1, 1.0);
            let cells = (0..arch.cells_per_scale)
                .map(|i| b.cell(&format!("enc.{l}.cell{i}"), Role::Encoder, w[l]))
                .collect();
            enc.push(Stage { conv, cells });
        }

        let top = levels - 1;
        let h0_shape = Shape::new(w[top], arch.groups[0].resolution, arch.groups[0].resolution);
        let h0 = b.alloc("dec.h0".into(), h0_shape.len(), Role::Decoder, Init::Normal(0.1));

        let mut groups = Vec::with_capacity(arch.groups.len());
        let hk = arch.head_kernel;
        for (g, gp) in arch.groups.iter().enumerate() {
            let level = arch.level_of(gp.resolution).expect("validated");
            let c = gp.channels;
            let posterior = b.conv(&format!("group.{g}.posterior"), Role::Encoder, 2 * w[level], 2 * c, hk, 1, 0.1);
            let prior = (g > 0).then(|| b.conv(&format!("group.{g}.prior"), Role::Decoder, w[level], 2 * c, hk, 1, 0.1));
            let combine = b.conv(&format!("group.{g}.combine"), Role::Decoder, c, w[level], 1, 1, 1.0);
            let cell = b.cell(&format!("group.{g}.cell"), Role::Decoder, w[level]);
            groups.push(GroupNet { level, channels: c, res: gp.resolution, posterior, prior, combine, cell });
        }

        let mut ups = Vec::with_capacity(levels.saturating_sub(1));
        for l in 0..levels - 1 {
            let conv = b.conv(&format!("dec.{l}.up"), Role::Decoder, w[l + 1], 4 * w[l], 1, 1, 1.0);
            let cells = (0..arch.cells_per_scale)
                .map(|i| b.cell(&format!("dec.{l}.cell{i}"), Role::Decoder, w[l]))
                .collect();
            ups.push(Stage { conv, cells });
        }
        let out = b.conv("dec.out", Role::Decoder, w[0], 4 * CHANNELS, hk, 1, 1.0);

        let mut encoder_mask = vec![false; b.total];
        for s in &b.slots {
            if s.role == Role::Encoder {
                encoder_mask[s.slot.range()].fill(true);
            }
        }
        Ok(Net {
            arch: arch.clone(),
            slots: b.slots,
            total: b.total,
            encoder_mask,
            h0,
            h0_shape,
            enc,
            ups,
            groups,
            out,
        })
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![T::zero(); self.total];
        for s in &self.slots {
            let dst = &mut p[s.slot.range()];
            match s.init {
                Init::Zeros => dst.fill(T::zero()),
                Init::Ones => dst.fill(T::one()),
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).expect("finite std");
                    dst.iter_mut().for_each(|v| *v = T::of(d.sample(&mut rng)));
                }
            }
        }
        p
    }

    pub fn role_of(&self, slot: ParamSlot) -> Role {
        if self.encoder_mask[slot.offset] {
            Role::Encoder
        } else {
            Role::Decoder
        }
    }

    pub fn is_encoder(&self, index: usize) -> bool {
        self.encoder_mask[index]
    }

    fn cell<T: Real>(&self, t: &mut Tape<T>, x: Id, c: &Cell) -> Id {
        let n = t.pixel_norm(x, c.gain);
        let d = t.conv(n, c.dw);
        let a = t.swish(d);
        let p = t.conv(a, c.pw);
        t.add(x, p)
    }

    fn stage<T: Real>(&self, t: &mut Tape<T>, x: Id, s: &Stage) -> Id {
        s.cells.iter().fold(x, |h, c| self.cell(t, h, c))
    }

    /// Encoder features, one per level (finest first). `x` is `[2, N, N]`.
    pub fn bottom_up<T: Real>(&self, t: &mut Tape<T>, x: Id) -> Vec<Id> {
        let mut h = x;
        let mut feats = Vec::with_capacity(self.enc.len());
        for st in &self.enc {
            let d = t.space_to_depth(h);
            let c = t.conv(d, st.conv);
            h = self.stage(t, c, st);
            feats.push(h);
        }
        feats
    }

    fn upsample<T: Real>(&self, t: &mut Tape<T>, h: Id, to_level: usize) -> Id {
        let st = &self.ups[to_level];
        let u = t.conv(h, st.conv);
        let u = t.depth_to_space(u);
        self.stage(t, u, st)
    }

    /// Runs the top-down network. Returns latent samples, distribution
    /// parameters, the KL node (posterior source only), and the `[2, N, N]`
    /// reconstruction when `emit_output` is set.
    pub fn top_down<T: Real>(&self, t: &mut Tape<T>, src: Source<'_, T>, emit_output: bool) -> TopDown {
        let top = self.enc.len() - 1;
        let mut level = top;
        let mut h = t.param(self.h0, self.h0_shape);
        let mut z_ids = Vec::with_capacity(self.groups.len());
        let mut dists = Vec::with_capacity(self.groups.len());
        let mut kls = Vec::new();
        for (g, gn) in self.groups.iter().enumerate() {
            while level > gn.level {
                h = self.upsample(t, h, level - 1);
                level -= 1;
            }
            let zshape = Shape::new(gn.channels, gn.res, gn.res);
            let z = match &src {
                Source::Given(zs) => zs[g],
                Source::Posterior { feats, noise } => {
                    let (mu, sigma) = self.prior_params(t, h, gn, zshape);
                    let cat = t.concat(h, feats[level]);
                    let q = t.conv(cat, gn.posterior);
                    let dmu = t.slice(q, 0, gn.channels);
                    let ls = t.slice(q, gn.channels, gn.channels);
                    let dsigma = t.exp_floor(ls);
                    let mean = t.add(mu, dmu);
                    let z = match noise {
                        Some(eps) => {
                            let scale = t.mul(sigma, dsigma);
                            let e = t.input(eps[g].clone(), zshape, false);
                            let se = t.mul(scale, e);
                            t.add(mean, se)
                        }
                        None => mean,
                    };
                    kls.push(t.kl(dmu, sigma, dsigma));
                    dists.push(DistIds { mu, sigma, dmu, dsigma });
                    z
                }
                Source::Prior { noise } => {
                    let (mu, sigma) = self.prior_params(t, h, gn, zshape);
                    let z = match noise {
                        Some(eps) => {
                            let e = t.input(eps[g].clone(), zshape, false);
                            let se = t.mul(sigma, e);
                            t.add(mu, se)
                        }
                        None => mu,
                    };
                    let dmu = t.input(vec![T::zero(); zshape.len()], zshape, false);
                    let dsigma = t.input(vec![T::one(); zshape.len()], zshape, false);
                    dists.push(DistIds { mu, sigma, dmu, dsigma });
                    z
                }
            };
            z_ids.push(z);
            let zc = t.conv(z, gn.combine);
            let hz = t.add(h, zc);
            h = self.cell(t, hz, &gn.cell);
        }
        let kl = (!kls.is_empty()).then(|| t.add_scalars(&kls));
        let out = emit_output.then(|| {
            while level > 0 {
                h = self.upsample(t, h, level - 1);
                level -= 1;
            }
            let o = t.conv(h, self.out);
            t.depth_to_space(o)
        });
        TopDown { z: z_ids, dists, kl, out }
    }

    fn prior_params<T: Real>(&self, t: &mut Tape<T>, h: Id, gn: &GroupNet, zshape: Shape) -> (Id, Id) {
        match gn.prior {
            Some(conv) => {
                let p = t.conv(h, conv);
                let mu = t.slice(p, 0, gn.channels);
                let ls = t.slice(p, gn.channels, gn.channels);
                (mu, t.exp_floor(ls))
            }
            None => (
                t.input(vec![T::zero(); zshape.len()], zshape, false),
                t.input(vec![T::one(); zshape.len()], zshape, false),
            ),
        }
    }

    pub fn latent_shape(&self, g: usize) -> Shape {
        let gn = &self.groups[g];
        Shape::new(gn.channels, gn.res, gn.res)
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(CHANNELS, self.arch.window, self.arch.window)
    }
}

/// Where the top-down pass takes its latents from.
pub enum Source<'a, T> {
    /// Posterior from encoder features; `noise` of `None` uses the means.
    Posterior {
        feats: &'a [Id],
        noise: Option<&'a [Vec<T>]>,
    },
    /// Prior ancestral sampling; `noise` of `None` uses the means.
    Prior { noise: Option<&'a [Vec<T>]> },
    /// Fixed latent nodes (decoding).
    Given(&'a [Id]),
}

#[derive(Debug, Clone, Copy)]
pub struct DistIds {
    pub mu: Id,
    pub sigma: Id,
    pub dmu: Id,
    pub dsigma: Id,
}

#[derive(Debug, Clone)]
pub struct TopDown {
    pub z: Vec<Id>,
    pub dists: Vec<DistIds>,
    pub kl: Option<Id>,
    pub out: Option<Id>,
}

/// `[N][N][C]` to `[C][N][N]`.
pub fn hwc_to_chw<T: Copy>(src: &[T], n: usize, c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        out.extend((0..n * n).map(|p| src[p * c + ch]));
    }
    out
}

/// `[C][N][N]` to `[N][N][C]`.
pub fn chw_to_hwc<T: Copy + Default>(src: &[T], n: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::default(); src.len()];
    for ch in 0..c {
        for p in 0..n * n {
            out[p * c + ch] = src[ch * n * n + p];
        }
    }
    out
}
