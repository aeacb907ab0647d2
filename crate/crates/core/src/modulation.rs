//! Structure-conditioned time-embedding modulation (STM).
//!
//! A lightweight tri-planar encoder summarizes the degraded conditioning
//! patch into a compact code: one 3D convolutional branch over the raw patch
//! and two 2D branches over its coronal and sagittal mean projections, each
//! globally average-pooled, concatenated, and fused by a two-layer MLP.
//! Per residual block, a dedicated head maps the code to affine parameters
//! (gamma_k, beta_k) that recalibrate the sinusoidal time embedding:
//! `t_mod = (1 + gamma_k) * e_t + beta_k`. Heads are zero-initialized, so a
//! freshly built model is exactly its modulation-free counterpart.

use ndarray::{Array2, Array4, Array5};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::nn::ops::{
    gap2d, gap2d_backward, gap3d, gap3d_backward, mean_over_axis, silu, silu2, silu2_backward,
    silu4, silu4_backward, silu_backward,
};
use crate::nn::{
    Conv2d, Conv2dCache, Conv3d, Conv3dCache, Init, Linear, LinearCache, ParamVisitor,
    Parameterized, Scalar,
};
use crate::rng::SeededRng;

/// Spatial axis a planar branch averages over, in (depth, height, width)
/// patch convention: height is anterior-posterior, width is lateral.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionAxis {
    /// Average over height -> coronal plane (depth x width).
    AnteriorPosterior,
    /// Average over width -> sagittal plane (depth x height).
    Lateral,
}

/// Mean projection of a (N,1,D,H,W) patch along the named axis.
pub fn mean_projection<T: Scalar>(y: &Array5<T>, axis: ProjectionAxis) -> Array4<T> {
    match axis {
        ProjectionAxis::AnteriorPosterior => mean_over_axis(y, 3),
        ProjectionAxis::Lateral => mean_over_axis(y, 4),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StmConfig {
    /// Length of the fused structural code.
    pub code_dim: usize,
    /// Channel widths of the two strided convolutions in every branch.
    pub branch_channels: (usize, usize),
    /// Hidden width of the fusion MLP.
    pub fuse_hidden: usize,
    /// Hidden width of each per-block modulation head.
    pub head_hidden: usize,
}

impl Default for StmConfig {
    fn default() -> Self {
        StmConfig {
            code_dim: 128,
            branch_channels: (8, 16),
            fuse_hidden: 256,
            head_hidden: 64,
        }
    }
}

// ---------------------------------------------------------------------------
// Structural encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StructureEncoder<T: Scalar> {
    vol_a: Conv3d<T>,
    vol_b: Conv3d<T>,
    cor_a: Conv2d<T>,
    cor_b: Conv2d<T>,
    sag_a: Conv2d<T>,
    sag_b: Conv2d<T>,
    fuse1: Linear<T>,
    fuse2: Linear<T>,
    cfg: StmConfig,
}

pub struct EncoderCache<T: Scalar> {
    y_dims: (usize, usize, usize, usize, usize),
    vol_ac: Conv3dCache<T>,
    vol_a_out: Array5<T>,
    vol_bc: Conv3dCache<T>,
    vol_b_out: Array5<T>,
    vol_gap_dims: (usize, usize, usize, usize, usize),
    cor_ac: Conv2dCache<T>,
    cor_a_out: Array4<T>,
    cor_bc: Conv2dCache<T>,
    cor_b_out: Array4<T>,
    cor_gap_dims: (usize, usize, usize, usize),
    sag_ac: Conv2dCache<T>,
    sag_a_out: Array4<T>,
    sag_bc: Conv2dCache<T>,
    sag_b_out: Array4<T>,
    sag_gap_dims: (usize, usize, usize, usize),
    fuse1c: LinearCache<T>,
    fuse1_out: Array2<T>,
    fuse2c: LinearCache<T>,
}

impl<T: Scalar> StructureEncoder<T> {
    pub fn new(cfg: &StmConfig, rng: &mut SeededRng) -> Self {
        let (b0, b1) = cfg.branch_channels;
        StructureEncoder {
            vol_a: Conv3d::new(1, b0, 3, 2, 1, Init::VarianceScaling, rng),
            vol_b: Conv3d::new(b0, b1, 3, 2, 1, Init::VarianceScaling, rng),
            cor_a: Conv2d::new(1, b0, 3, 2, 1, Init::VarianceScaling, rng),
            cor_b: Conv2d::new(b0, b1, 3, 2, 1, Init::VarianceScaling, rng),
            sag_a: Conv2d::new(1, b0, 3, 2, 1, Init::VarianceScaling, rng),
            sag_b: Conv2d::new(b0, b1, 3, 2, 1, Init::VarianceScaling, rng),
            fuse1: Linear::new(3 * b1, cfg.fuse_hidden, Init::VarianceScaling, rng),
            fuse2: Linear::new(cfg.fuse_hidden, cfg.code_dim, Init::VarianceScaling, rng),
            cfg: cfg.clone(),
        }
    }

    fn check_dims(&self, y: &Array5<T>) -> Result<()> {
        let (_, c, d, h, w) = y.dim();
        if c != 1 {
            return Err(shape_err(format!(
                "structural encoder expects 1 channel, got {c}"
            )));
        }
        if d < 4 || h < 4 || w < 4 {
            return Err(invalid(format!(
                "patch dims ({d},{h},{w}) too small for two stride-2 reductions (need >= 4)"
            )));
        }
        Ok(())
    }

    /// Fused structural code of shape (N, code_dim). Depends on the
    /// conditioning patch only.
    pub fn encode(&self, y: &Array5<T>) -> Result<Array2<T>> {
        self.check_dims(y)?;
        let v = gap3d(&silu(&self.vol_b.forward(&silu(&self.vol_a.forward(y)))));
        let cor = mean_projection(y, ProjectionAxis::AnteriorPosterior);
        let c = gap2d(&silu4(
            &self.cor_b.forward(&silu4(&self.cor_a.forward(&cor))),
        ));
        let sag = mean_projection(y, ProjectionAxis::Lateral);
        let s = gap2d(&silu4(
            &self.sag_b.forward(&silu4(&self.sag_a.forward(&sag))),
        ));
        let cat = ndarray::concatenate(ndarray::Axis(1), &[v.view(), c.view(), s.view()])
            .expect("branch concat");
        Ok(self.fuse2.forward(&silu2(&self.fuse1.forward(&cat))))
    }

    pub fn encode_t(&self, y: &Array5<T>) -> Result<(Array2<T>, EncoderCache<T>)> {
        self.check_dims(y)?;
        let (va, vol_ac) = self.vol_a.forward_t(y);
        let va_s = silu(&va);
        let (vb, vol_bc) = self.vol_b.forward_t(&va_s);
        let vb_s = silu(&vb);
        let v = gap3d(&vb_s);

        let cor = mean_projection(y, ProjectionAxis::AnteriorPosterior);
        let (ca, cor_ac) = self.cor_a.forward_t(&cor);
        let ca_s = silu4(&ca);
        let (cb, cor_bc) = self.cor_b.forward_t(&ca_s);
        let cb_s = silu4(&cb);
        let c = gap2d(&cb_s);

        let sag = mean_projection(y, ProjectionAxis::Lateral);
        let (sa, sag_ac) = self.sag_a.forward_t(&sag);
        let sa_s = silu4(&sa);
        let (sb, sag_bc) = self.sag_b.forward_t(&sa_s);
        let sb_s = silu4(&sb);
        let s = gap2d(&sb_s);

        let cat = ndarray::concatenate(ndarray::Axis(1), &[v.view(), c.view(), s.view()])
            .expect("branch concat");
        let (f1, fuse1c) = self.fuse1.forward_t(&cat);
        let f1_s = silu2(&f1);
        let (code, fuse2c) = self.fuse2.forward_t(&f1_s);
        Ok((
            code,
            EncoderCache {
                y_dims: y.dim(),
                vol_ac,
                vol_a_out: va,
                vol_bc,
                vol_b_out: vb,
                vol_gap_dims: vb_s.dim(),
                cor_ac,
                cor_a_out: ca,
                cor_bc,
                cor_b_out: cb,
                cor_gap_dims: cb_s.dim(),
                sag_ac,
                sag_a_out: sa,
                sag_bc,
                sag_b_out: sb,
                sag_gap_dims: sb_s.dim(),
                fuse1c,
                fuse1_out: f1,
                fuse2c,
            },
        ))
    }

    /// Accumulates parameter gradients given dL/dcode. The gradient with
    /// respect to the conditioning patch is discarded (y is data).
    pub fn backward(&mut self, cache: &EncoderCache<T>, dcode: &Array2<T>) {
        let df1_s = self.fuse2.backward(&cache.fuse2c, dcode);
        let df1 = silu2_backward(&cache.fuse1_out, &df1_s);
        let dcat = self.fuse1.backward(&cache.fuse1c, &df1);
        let b1 = self.cfg.branch_channels.1;
        let dv = dcat.slice(ndarray::s![.., ..b1]).to_owned();
        let dc = dcat.slice(ndarray::s![.., b1..2 * b1]).to_owned();
        let ds = dcat.slice(ndarray::s![.., 2 * b1..]).to_owned();

        let dvb_s = gap3d_backward(&dv, cache.vol_gap_dims);
        let dvb = silu_backward(&cache.vol_b_out, &dvb_s);
        let dva_s = self.vol_b.backward(&cache.vol_bc, &dvb);
        let dva = silu_backward(&cache.vol_a_out, &dva_s);
        let _ = self.vol_a.backward(&cache.vol_ac, &dva);

        let dcb_s = gap2d_backward(&dc, cache.cor_gap_dims);
        let dcb = silu4_backward(&cache.cor_b_out, &dcb_s);
        let dca_s = self.cor_b.backward(&cache.cor_bc, &dcb);
        let dca = silu4_backward(&cache.cor_a_out, &dca_s);
        let _ = self.cor_a.backward(&cache.cor_ac, &dca);

        let dsb_s = gap2d_backward(&ds, cache.sag_gap_dims);
        let dsb = silu4_backward(&cache.sag_b_out, &dsb_s);
        let dsa_s = self.sag_b.backward(&cache.sag_bc, &dsb);
        let dsa = silu4_backward(&cache.sag_a_out, &dsa_s);
        let _ = self.sag_a.backward(&cache.sag_ac, &dsa);
        let _ = cache.y_dims;
    }
}

impl<T: Scalar> Parameterized<T> for StructureEncoder<T> {
    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<'_, T>) {
        self.vol_a.visit_params(&format!("{prefix}.vol_a"), f);
        self.vol_b.visit_params(&format!("{prefix}.vol_b"), f);
        self.cor_a.visit_params(&format!("{prefix}.cor_a"), f);
        self.cor_b.visit_params(&format!("{prefix}.cor_b"), f);
        self.sag_a.visit_params(&format!("{prefix}.sag_a"), f);
        self.sag_b.visit_params(&format!("{prefix}.sag_b"), f);
        self.fuse1.visit_params(&format!("{prefix}.fuse1"), f);
        self.fuse2.visit_params(&format!("{prefix}.fuse2"), f);
    }
}

// ---------------------------------------------------------------------------
// Per-block modulation heads
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ModulationHead<T: Scalar> {
    l1: Linear<T>,
    l2: Linear<T>,
}

pub struct HeadCache<T: Scalar> {
    l1c: LinearCache<T>,
    l1_out: Array2<T>,
    l2c: LinearCache<T>,
}

impl<T: Scalar> ModulationHead<T> {
    fn new(cfg: &StmConfig, time_dim: usize, rng: &mut SeededRng) -> Self {
        ModulationHead {
            l1: Linear::new(cfg.code_dim, cfg.head_hidden, Init::VarianceScaling, rng),
            // Zero-initialized: gamma = beta = 0 at the start, identity modulation.
            l2: Linear::new(cfg.head_hidden, 2 * time_dim, Init::Zero, rng),
        }
    }

    fn forward(&self, code: &Array2<T>) -> Array2<T> {
        self.l2.forward(&silu2(&self.l1.forward(code)))
    }

    fn forward_t(&self, code: &Array2<T>) -> (Array2<T>, HeadCache<T>) {
        let (h, l1c) = self.l1.forward_t(code);
        let hs = silu2(&h);
        let (gb, l2c) = self.l2.forward_t(&hs);
        (
            gb,
            HeadCache {
                l1c,
                l1_out: h,
                l2c,
            },
        )
    }

    fn backward(&mut self, cache: &HeadCache<T>, dgb: &Array2<T>) -> Array2<T> {
        let dhs = self.l2.backward(&cache.l2c, dgb);
        let dh = silu2_backward(&cache.l1_out, &dhs);
        self.l1.backward(&cache.l1c, &dh)
    }
}

impl<T: Scalar> Parameterized<T> for ModulationHead<T> {
    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<'_, T>) {
        self.l1.visit_params(&format!("{prefix}.l1"), f);
        self.l2.visit_params(&format!("{prefix}.l2"), f);
    }
}

// ---------------------------------------------------------------------------
// Full module
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Stm<T: Scalar> {
    pub encoder: StructureEncoder<T>,
    heads: Vec<ModulationHead<T>>,
    cfg: StmConfig,
    time_dim: usize,
}

pub struct StmCache<T: Scalar> {
    enc: EncoderCache<T>,
    heads: Vec<HeadCache<T>>,
    e_base: Array2<T>,
}

impl<T: Scalar> Stm<T> {
    pub fn new(cfg: &StmConfig, num_blocks: usize, time_dim: usize, rng: &mut SeededRng) -> Self {
        let encoder = StructureEncoder::new(cfg, rng);
        let heads = (0..num_blocks)
            .map(|_| ModulationHead::new(cfg, time_dim, rng))
            .collect();
        Stm {
            encoder,
            heads,
            cfg: cfg.clone(),
            time_dim,
        }
    }

    pub fn config(&self) -> &StmConfig {
        &self.cfg
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// (gamma_k, beta_k) for block `k` (0-based), each (N, time_dim).
    pub fn head_params(&self, code: &Array2<T>, k: usize) -> Result<(Array2<T>, Array2<T>)> {
        let head = self.heads.get(k).ok_or_else(|| {
            invalid(format!(
                "block index {k} out of range (have {})",
                self.heads.len()
            ))
        })?;
        let gb = head.forward(code);
        Ok(split_gamma_beta(&gb, self.time_dim))
    }

    /// Recalibrate the time embedding for block `k`:
    /// `(1 + gamma_k) * e + beta_k`.
    pub fn modulate(&self, e: &Array2<T>, code: &Array2<T>, k: usize) -> Result<Array2<T>> {
        if e.dim().1 != self.time_dim {
            return Err(shape_err(format!(
                "embedding dim {} does not match time_dim {}",
                e.dim().1,
                self.time_dim
            )));
        }
        let (gamma, beta) = self.head_params(code, k)?;
        Ok(apply_affine(e, &gamma, &beta))
    }

    /// Per-block modulated embeddings for the whole network.
    pub fn modulate_all(&self, e: &Array2<T>, code: &Array2<T>) -> Result<Vec<Array2<T>>> {
        (0..self.heads.len())
            .map(|k| self.modulate(e, code, k))
            .collect()
    }

    pub fn modulate_all_t(
        &self,
        e: &Array2<T>,
        y: &Array5<T>,
    ) -> Result<(Vec<Array2<T>>, StmCache<T>)> {
        let (code, enc) = self.encoder.encode_t(y)?;
        let mut heads = Vec::with_capacity(self.heads.len());
        let mut out = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (gb, hc) = head.forward_t(&code);
            let (gamma, beta) = split_gamma_beta(&gb, self.time_dim);
            out.push(apply_affine(e, &gamma, &beta));
            heads.push(hc);
        }
        Ok((
            out,
            StmCache {
                enc,
                heads,
                e_base: e.clone(),
            },
        ))
    }

    /// Backward from per-block embedding gradients into head and encoder
    /// parameters. The sinusoidal base embedding carries no parameters.
    pub fn backward(&mut self, cache: &StmCache<T>, dtembs: &[Array2<T>]) {
        assert_eq!(dtembs.len(), self.heads.len(), "per-block gradient count");
        let (n, dt) = cache.e_base.dim();
        let mut dcode: Option<Array2<T>> = None;
        for (k, head) in self.heads.iter_mut().enumerate() {
            let dtm = &dtembs[k];
            // t_mod = (1 + gamma) .* e + beta
            //   dgamma = dtm .* e ; dbeta = dtm
            let mut dgb = Array2::zeros((n, 2 * dt));
            for i in 0..n {
                for j in 0..dt {
                    dgb[[i, j]] = dtm[[i, j]] * cache.e_base[[i, j]];
                    dgb[[i, dt + j]] = dtm[[i, j]];
                }
            }
            let dc = head.backward(&cache.heads[k], &dgb);
            dcode = Some(match dcode.take() {
                Some(acc) => acc + &dc,
                None => dc,
            });
        }
        if let Some(dc) = dcode {
            self.encoder.backward(&cache.enc, &dc);
        }
    }
}

fn split_gamma_beta<T: Scalar>(gb: &Array2<T>, time_dim: usize) -> (Array2<T>, Array2<T>) {
    let gamma = gb.slice(ndarray::s![.., ..time_dim]).to_owned();
    let beta = gb.slice(ndarray::s![.., time_dim..]).to_owned();
    (gamma, beta)
}

/// `(1 + gamma) .* e + beta`, element-wise per sample.
pub fn apply_affine<T: Scalar>(e: &Array2<T>, gamma: &Array2<T>, beta: &Array2<T>) -> Array2<T> {
    let mut out = e.clone();
    ndarray::Zip::from(&mut out)
        .and(gamma)
        .and(beta)
        .for_each(|o, &g, &b| {
            *o = (T::one() + g) * *o + b;
        });
    out
}

impl<T: Scalar> Parameterized<T> for Stm<T> {
    fn visit_params(&mut self, prefix: &str, f: ParamVisitor<'_, T>) {
        self.encoder.visit_params(&format!("{prefix}.encoder"), f);
        for (k, head) in self.heads.iter_mut().enumerate() {
            head.visit_params(&format!("{prefix}.head{k}"), f);
        }
    }
}
