//! Compact 3D UNet denoiser with sinusoidal time embeddings.
//!
//! Input is the noisy patch concatenated channel-wise with the degraded
//! conditioning patch; output is a clean-sample estimate of the same spatial
//! shape. Every residual block receives its own (N, time_dim) embedding row
//! per sample, which is how structural modulation plugs in: with modulation
//! off all blocks see the same sinusoidal embedding.

use ndarray::{Array2, Array5};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::nn::ops::{
    concat_channels, silu, silu_backward, split_channels, upsample_nearest2,
    upsample_nearest2_backward,
};
use crate::nn::{
    Conv3d, Conv3dCache, GroupNorm, GroupNormCache, Init, Linear, LinearCache, ParamVisitor,
    Parameterized, Scalar,
};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub level_mults: Vec<usize>,
    pub blocks_per_level: usize,
    pub time_dim: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_channels: 32,
            level_mults: vec![1, 2, 4],
            blocks_per_level: 2,
            time_dim: 128,
            norm_groups: 8,
        }
    }
}

pub const IN_CHANNELS: usize = 2; // x_t concatenated with y
pub const OUT_CHANNELS: usize = 1;

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.level_mults.len()
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.level_mults
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    /// Input patch dims must be divisible by this.
    pub fn spatial_factor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    /// Total residual blocks: blocks_per_level on every encoder level plus
    /// blocks_per_level on every decoder level.
    pub fn num_blocks(&self) -> usize {
        self.blocks_per_level * (2 * self.levels() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_mults.is_empty() {
            return Err(invalid("level_mults must be non-empty"));
        }
        if self.blocks_per_level == 0 {
            return Err(invalid("blocks_per_level must be >= 1"));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(invalid("time_dim must be even and >= 2"));
        }
        if self.norm_groups == 0 {
            return Err(invalid("norm_groups must be >= 1"));
        }
        for (l, c) in self.level_channels().iter().enumerate() {
            if c % self.norm_groups != 0 {
                return Err(invalid(format!(
                    "level {l} channels {c} not divisible by norm_groups {}",
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }
}

/// Sinusoidal embedding: `e[2i] = sin(t / 10000^(2i/d))`, `e[2i+1] = cos(...)`.
pub fn sinusoidal_embed<T: Scalar>(t: usize, d: usize) -> Result<Vec<T>> {
    if d < 2 || !d.is_multiple_of(2) {
        return Err(invalid(format!("embedding dim {d} must be even and >= 2")));
    }
    let mut e = vec![T::zero(); d];
    let tf = t as f64;
    for i in 0..d / 2 {
        let freq = (-(2.0 * i as f64 / d as f64) * 10000f64.ln()).exp();
        e[2 * i] = T::from_f64((tf * freq).sin());
        e[2 * i + 1] = T::from_f64((tf * freq).cos());
    }
    Ok(e)
}

/// One embedding row per timestep.
pub fn embed_timesteps<T: Scalar>(ts: &[usize], d: usize) -> Result<Array2<T>> {
    let mut out = Array2::zeros((ts.len(), d));
    for (n, &t) in ts.iter().enumerate() {
        let e = sinusoidal_embed::<T>(t, d)?;
        out.row_mut(n).iter_mut().zip(e).for_each(|(o, v)| *o = v);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ResBlock<T: Scalar> {
    gn1: GroupNorm<T>,
    conv1: Conv3d<T>,
    tproj: Linear<T>,
    gn2: GroupNorm<T>,
    conv2: Conv3d<T>,
    skip: Option<Conv3d<T>>,
}

struct ResBlockCache<T: Scalar> {
    block_index: usize,
    gn1c: GroupNormCache<T>,
    a1: Array5<T>,
    conv1c: Conv3dCache<T>,
    linc: LinearCache<T>,
    gn2c: GroupNormCache<T>,
    a5: Array5<T>,
    conv2c: Conv3dCache<T>,
    skipc: Option<Conv3dCache<T>>,
}

impl<T: Scalar> ResBlock<T> {
    fn new(c_in: usize, c_out: usize, time_dim: usize, groups: usize, rng: &mut SeededRng) -> Self {
        ResBlock {
            gn1: GroupNorm::new(c_in, groups),
            conv1: Conv3d::new(c_in, c_out, 3, 1, 1, Init::VarianceScaling, rng),
            tproj: Linear::new(time_dim, c_out, Init::VarianceScaling, rng),
            gn2: GroupNorm::new(c_out, groups),
            conv2: Conv3d::new(c_out, c_out, 3, 1, 1, Init::Zero, rng),
            skip: (c_in != c_out)
                .then(|| Conv3d::new(c_in, c_out, 1, 1, 0, Init::VarianceScaling, rng)),
        }
    }

    fn add_time(h: &mut Array5<T>, tb: &Array2<T>) {
        for (n, mut sample) in h.outer_iter_mut().enumerate() {
            for (c, mut chan) in sample.outer_iter_mut().enumerate() {
                let b = tb[[n, c]];
                chan.mapv_inplace(|v| v + b);
            }
        }
    }

    fn forward(&self, x: &Array5<T>, temb: &Array2<T>) -> Array5<T> {
        let a2 = silu(&self.gn1.forward(x));
        let mut h = self.conv1.forward(&a2);
        let tb = self.tproj.forward(temb);
        Self::add_time(&mut h, &tb);
        let a6 = silu(&self.gn2.forward(&h));
        let h2 = self.conv2.forward(&a6);
        let skipx = match &self.skip {
            Some(s) => s.forward(x),
            None => x.clone(),
        };
        skipx + &h2
    }

    fn forward_t(
        &self,
        x: &Array5<T>,
        temb: &Array2<T>,
        block_index: usize,
    ) -> (Array5<T>, ResBlockCache<T>) {
        let (a1, gn1c) = self.gn1.forward_t(x);
        let a2 = silu(&a1);
        let (mut h, conv1c) = self.conv1.forward_t(&a2);
        let (tb, linc) = self.tproj.forward_t(temb);
        Self::add_time(&mut h, &tb);
        let (a5, gn2c) = self.gn2.forward_t(&h);
        let a6 = silu(&a5);
        let (h2, conv2c) = self.conv2.forward_t(&a6);
        let (skipx, skipc) = match &self.skip {
            Some(s) => {
                let (y, c) = s.forward_t(x);
                (y, Some(c))
            }
            None => (x.clone(), None),
        };
        let y = skipx + &h2;
        (
            y,
            ResBlockCache {
                block_index,
                gn1c,
                a1,
                conv1c,
                linc,
                gn2c,
                a5,
                conv2c,
                skipc,
            },
        )
    }

    /// Returns (dx, dtemb).
    fn backward(&mut self, cache: &ResBlockCache<T>, dy: &Array5<T>) -> (Array5<T>, Array2<T>) {
        let da6 = self.conv2.backward(&cache.conv2c, dy);
        let da5 = silu_backward(&cache.a5, &da6);
        let da4 = self.gn2.backward(&cache.gn2c, &da5);
        // Time-projection gradient: sum the hidden grad over space per (n, c).
        let (n, c, _, _, _) = da4.dim();
        let mut dtb = Array2::zeros((n, c));
        for (ni, sample) in da4.outer_iter().enumerate() {
            for (ci, chan) in sample.outer_iter().enumerate() {
                let mut acc = T::zero();
                for &v in chan.iter() {
                    acc += v;
                }
                dtb[[ni, ci]] = acc;
            }
        }
        let dtemb = self.tproj.backward(&cache.linc, &dtb);
        let da2 = self.conv1.backward(&cache.conv1c, &da4);
        let da1 = silu_backward(&cache.a1, &da2);
        let mut dx = self.gn1.backward(&cache.gn1c, &da1);
        match (&mut self.skip, &cache.skipc) {
            (Some(s), Some(sc)) => {
                let dskip = s.backward(sc, dy);
                dx += &dskip;
            }
            _ => {
                dx += dy;
            }
        }
        (dx, dtemb)
    }
}

impl<T: Scalar> Parameterized<T> for ResBlock<T> {
    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<'_, T>) {
        self.gn1.visit_params(&format!("{prefix}.gn1"), f);
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.tproj.visit_params(&format!("{prefix}.tproj"), f);
        self.gn2.visit_params(&format!("{prefix}.gn2"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_params(&format!("{prefix}.skip"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// UNet
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct EncLevel<T: Scalar> {
    blocks: Vec<ResBlock<T>>,
    down: Option<Conv3d<T>>,
}

#[derive(Debug, Clone)]
struct DecLevel<T: Scalar> {
    up_conv: Conv3d<T>,
    blocks: Vec<ResBlock<T>>,
}

#[derive(Debug, Clone)]
pub struct UNet3d<T: Scalar> {
    cfg: UNetConfig,
    stem: Conv3d<T>,
    enc: Vec<EncLevel<T>>,
    dec: Vec<DecLevel<T>>,
    out_gn: GroupNorm<T>,
    out_conv: Conv3d<T>,
}

struct EncLevelCache<T: Scalar> {
    blocks: Vec<ResBlockCache<T>>,
    downc: Option<Conv3dCache<T>>,
}

struct DecLevelCache<T: Scalar> {
    pre_up_dims: (usize, usize, usize, usize, usize),
    upc: Conv3dCache<T>,
    skip_channels: usize,
    blocks: Vec<ResBlockCache<T>>,
}

pub struct UNetCache<T: Scalar> {
    stem: Conv3dCache<T>,
    enc: Vec<EncLevelCache<T>>,
    dec: Vec<DecLevelCache<T>>,
    out_gnc: GroupNormCache<T>,
    out_a: Array5<T>,
    out_convc: Conv3dCache<T>,
    num_blocks: usize,
}

impl<T: Scalar> UNet3d<T> {
    pub fn new(cfg: &UNetConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.level_channels();
        let levels = cfg.levels();
        let groups = cfg.norm_groups;
        let stem = Conv3d::new(IN_CHANNELS, ch[0], 3, 1, 1, Init::VarianceScaling, rng);
        let mut enc = Vec::with_capacity(levels);
        for l in 0..levels {
            let blocks = (0..cfg.blocks_per_level)
                .map(|_| ResBlock::new(ch[l], ch[l], cfg.time_dim, groups, rng))
                .collect();
            let down = (l + 1 < levels)
                .then(|| Conv3d::new(ch[l], ch[l + 1], 3, 2, 1, Init::VarianceScaling, rng));
            enc.push(EncLevel { blocks, down });
        }
        // Decoder from the deepest level upward.
        let mut dec = Vec::with_capacity(levels.saturating_sub(1));
        for l in (0..levels - 1).rev() {
            let up_conv = Conv3d::new(ch[l + 1], ch[l], 3, 1, 1, Init::VarianceScaling, rng);
            let mut blocks = Vec::with_capacity(cfg.blocks_per_level);
            blocks.push(ResBlock::new(2 * ch[l], ch[l], cfg.time_dim, groups, rng));
            for _ in 1..cfg.blocks_per_level {
                blocks.push(ResBlock::new(ch[l], ch[l], cfg.time_dim, groups, rng));
            }
            dec.push(DecLevel { up_conv, blocks });
        }
        let out_gn = GroupNorm::new(ch[0], groups);
        let out_conv = Conv3d::new(ch[0], OUT_CHANNELS, 3, 1, 1, Init::Zero, rng);
        Ok(UNet3d {
            cfg: cfg.clone(),
            stem,
            enc,
            dec,
            out_gn,
            out_conv,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn num_blocks(&self) -> usize {
        self.cfg.num_blocks()
    }

    fn check_input(&self, x: &Array5<T>, temb: &[Array2<T>]) -> Result<()> {
        let (n, c, d, h, w) = x.dim();
        if c != IN_CHANNELS {
            return Err(shape_err(format!(
                "expected {IN_CHANNELS} input channels, got {c}"
            )));
        }
        let f = self.cfg.spatial_factor();
        if d % f != 0 || h % f != 0 || w % f != 0 {
            return Err(invalid(format!(
                "patch dims ({d},{h},{w}) must be divisible by {f} for {} levels",
                self.cfg.levels()
            )));
        }
        if temb.len() != self.num_blocks() {
            return Err(shape_err(format!(
                "expected {} per-block embeddings, got {}",
                self.num_blocks(),
                temb.len()
            )));
        }
        for (k, e) in temb.iter().enumerate() {
            if e.dim() != (n, self.cfg.time_dim) {
                return Err(shape_err(format!(
                    "embedding {k} has shape {:?}, expected ({n}, {})",
                    e.dim(),
                    self.cfg.time_dim
                )));
            }
        }
        Ok(())
    }

    /// Inference pass; `temb[k]` conditions residual block k.
    pub fn forward(&self, x: &Array5<T>, temb: &[Array2<T>]) -> Result<Array5<T>> {
        self.check_input(x, temb)?;
        let mut k = 0usize;
        let mut h = self.stem.forward(x);
        let mut skips: Vec<Array5<T>> = Vec::new();
        for level in &self.enc {
            for b in &level.blocks {
                h = b.forward(&h, &temb[k]);
                k += 1;
            }
            if let Some(down) = &level.down {
                skips.push(h.clone());
                h = down.forward(&h);
            }
        }
        for dl in &self.dec {
            h = upsample_nearest2(&h);
            h = dl.up_conv.forward(&h);
            let s = skips.pop().expect("skip stack underflow");
            h = concat_channels(&h, &s);
            for b in &dl.blocks {
                h = b.forward(&h, &temb[k]);
                k += 1;
            }
        }
        Ok(self.out_conv.forward(&silu(&self.out_gn.forward(&h))))
    }

    /// Training pass returning the cache consumed by [`UNet3d::backward`].
    pub fn forward_t(
        &self,
        x: &Array5<T>,
        temb: &[Array2<T>],
    ) -> Result<(Array5<T>, UNetCache<T>)> {
        self.check_input(x, temb)?;
        let mut k = 0usize;
        let (mut h, stemc) = self.stem.forward_t(x);
        let mut skips: Vec<Array5<T>> = Vec::new();
        let mut encc = Vec::with_capacity(self.enc.len());
        for level in &self.enc {
            let mut bc = Vec::with_capacity(level.blocks.len());
            for b in &level.blocks {
                let (y, c) = b.forward_t(&h, &temb[k], k);
                h = y;
                bc.push(c);
                k += 1;
            }
            let downc = if let Some(down) = &level.down {
                skips.push(h.clone());
                let (y, c) = down.forward_t(&h);
                h = y;
                Some(c)
            } else {
                None
            };
            encc.push(EncLevelCache { blocks: bc, downc });
        }
        let mut decc = Vec::with_capacity(self.dec.len());
        for dl in &self.dec {
            let pre_up_dims = h.dim();
            let up = upsample_nearest2(&h);
            let (upped, upc) = dl.up_conv.forward_t(&up);
            let s = skips.pop().expect("skip stack underflow");
            let skip_channels = s.dim().1;
            h = concat_channels(&upped, &s);
            let mut bc = Vec::with_capacity(dl.blocks.len());
            for b in &dl.blocks {
                let (y, c) = b.forward_t(&h, &temb[k], k);
                h = y;
                bc.push(c);
                k += 1;
            }
            decc.push(DecLevelCache {
                pre_up_dims,
                upc,
                skip_channels,
                blocks: bc,
            });
        }
        let (out_a, out_gnc) = self.out_gn.forward_t(&h);
        let act = silu(&out_a);
        let (y, out_convc) = self.out_conv.forward_t(&act);
        Ok((
            y,
            UNetCache {
                stem: stemc,
                enc: encc,
                dec: decc,
                out_gnc,
                out_a,
                out_convc,
                num_blocks: k,
            },
        ))
    }

    /// Accumulates parameter gradients; returns (dL/dx, per-block dL/dtemb).
    pub fn backward(
        &mut self,
        cache: &UNetCache<T>,
        dy: &Array5<T>,
    ) -> (Array5<T>, Vec<Array2<T>>) {
        let mut dtembs: Vec<Option<Array2<T>>> = (0..cache.num_blocks).map(|_| None).collect();
        let dact = self.out_conv.backward(&cache.out_convc, dy);
        let d_out_a = silu_backward(&cache.out_a, &dact);
        let mut dh = self.out_gn.backward(&cache.out_gnc, &d_out_a);

        // Gradients feeding each encoder skip, collected while walking the
        // decoder backwards (dec[0] is the deepest level).
        let n_enc = self.enc.len();
        let mut dskips: Vec<Option<Array5<T>>> =
            (0..n_enc.saturating_sub(1)).map(|_| None).collect();
        for (i, dl) in self.dec.iter_mut().enumerate().rev() {
            let cachel = &cache.dec[i];
            for (b, bc) in dl.blocks.iter_mut().zip(&cachel.blocks).rev() {
                let (dx, dtemb) = b.backward(bc, &dh);
                dtembs[bc.block_index] = Some(dtemb);
                dh = dx;
            }
            let up_channels = dh.dim().1 - cachel.skip_channels;
            let (d_upped, d_skip) = split_channels(&dh, up_channels);
            // dec[i] corresponds to encoder level (levels - 2 - i).
            let enc_level = n_enc - 2 - i;
            dskips[enc_level] = Some(d_skip);
            let d_up = dl.up_conv.backward(&cachel.upc, &d_upped);
            dh = upsample_nearest2_backward(&d_up, cachel.pre_up_dims);
        }

        for (l, level) in self.enc.iter_mut().enumerate().rev() {
            let cachel = &cache.enc[l];
            if let (Some(down), Some(downc)) = (&mut level.down, &cachel.downc) {
                let mut d = down.backward(downc, &dh);
                if let Some(ds) = dskips[l].take() {
                    d += &ds;
                }
                dh = d;
            }
            for (b, bc) in level.blocks.iter_mut().zip(&cachel.blocks).rev() {
                let (dx, dtemb) = b.backward(bc, &dh);
                dtembs[bc.block_index] = Some(dtemb);
                dh = dx;
            }
        }
        let dx = self.stem.backward(&cache.stem, &dh);
        let dtembs = dtembs
            .into_iter()
            .map(|d| d.expect("all blocks visited"))
            .collect();
        (dx, dtembs)
    }
}

impl<T: Scalar> Parameterized<T> for UNet3d<T> {
    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<'_, T>) {
        self.stem.visit_params(&format!("{prefix}.stem"), f);
        for (l, level) in self.enc.iter_mut().enumerate() {
            for (b, block) in level.blocks.iter_mut().enumerate() {
                block.visit_params(&format!("{prefix}.enc{l}.block{b}"), f);
            }
            if let Some(d) = &mut level.down {
                d.visit_params(&format!("{prefix}.enc{l}.down"), f);
            }
        }
        for (l, dl) in self.dec.iter_mut().enumerate() {
            dl.up_conv.visit_params(&format!("{prefix}.dec{l}.up"), f);
            for (b, block) in dl.blocks.iter_mut().enumerate() {
                block.visit_params(&format!("{prefix}.dec{l}.block{b}"), f);
            }
        }
        self.out_gn.visit_params(&format!("{prefix}.out_gn"), f);
        self.out_conv.visit_params(&format!("{prefix}.out_conv"), f);
    }
}
