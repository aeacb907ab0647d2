//! Volume representation, the VVOL file format, normalization, and
//! overlapping-patch extraction/stitching.
//!
//! VVOL layout (little-endian): bytes 0..4 magic `VVOL`, 4..8 version u32 = 1,
//! 8..20 D,H,W as u32, byte 20 dtype code u8 = 1 (f32), bytes 21..24 zero
//! padding, then D*H*W f32 values in row-major order with D slowest.
//! Total size is 24 + 4*D*H*W bytes.

use std::path::Path;

use crate::error::{format_err, invalid, shape_err, Result};

pub const VVOL_MAGIC: &[u8; 4] = b"VVOL";
pub const VVOL_VERSION: u32 = 1;
pub const VVOL_HEADER_LEN: usize = 24;
const VVOL_DTYPE_F32: u8 = 1;

/// A dense 3D scalar field. `data` is row-major with the depth axis slowest,
/// i.e. index `(z, y, x)` maps to `z*H*W + y*W + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    data: Vec<f32>,
    /// Value range (lo, hi) this volume was normalized from, if any.
    range: Option<(f32, f32)>,
}

impl Volume {
    /// Build a volume, validating the length and finiteness invariants.
    pub fn new(dims: (usize, usize, usize), data: Vec<f32>) -> Result<Self> {
        let (d, h, w) = dims;
        if d == 0 || h == 0 || w == 0 {
            return Err(invalid(format!(
                "volume dims must be positive, got {dims:?}"
            )));
        }
        let n = d
            .checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .ok_or_else(|| invalid("volume dims overflow"))?;
        if data.len() != n {
            return Err(shape_err(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                n
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite voxel at linear index {bad}")));
        }
        Ok(Volume {
            dims,
            data,
            range: None,
        })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        Volume::new(dims, vec![0.0; n])
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn range(&self) -> Option<(f32, f32)> {
        self.range
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        let (_, h, w) = self.dims;
        self.data[(z * h + y) * w + x]
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Parse a volume from raw VVOL bytes. All validation happens before any
    /// payload-sized allocation, so hostile headers cannot trigger OOM.
    pub fn from_vvol_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < VVOL_HEADER_LEN {
            return Err(format_err(format!(
                "file too short for VVOL header: {} bytes",
                bytes.len()
            )));
        }
        if &bytes[0..4] != VVOL_MAGIC {
            return Err(format_err("bad magic, not a VVOL file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VVOL_VERSION {
            return Err(format_err(format!("unsupported VVOL version {version}")));
        }
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        if d == 0 || h == 0 || w == 0 {
            return Err(format_err(format!(
                "zero dimension in header ({d},{h},{w})"
            )));
        }
        if bytes[20] != VVOL_DTYPE_F32 {
            return Err(format_err(format!("unsupported dtype code {}", bytes[20])));
        }
        if bytes[21..24] != [0, 0, 0] {
            return Err(format_err("non-zero header padding"));
        }
        let n = (d as u64) * (h as u64) * (w as u64);
        let expected = (VVOL_HEADER_LEN as u64).checked_add(
            n.checked_mul(4)
                .ok_or_else(|| format_err("payload size overflow"))?,
        );
        match expected {
            Some(e) if e == bytes.len() as u64 => {}
            _ => {
                return Err(format_err(format!(
                    "declared {n} voxels but file holds {} payload bytes",
                    bytes.len() - VVOL_HEADER_LEN
                )))
            }
        }
        let mut data = Vec::with_capacity(n as usize);
        for chunk in bytes[VVOL_HEADER_LEN..].chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(format_err("non-finite voxel value in payload"));
            }
            data.push(v);
        }
        Volume::new((d, h, w), data)
    }

    /// Serialize to VVOL bytes. Deterministic: equal volumes yield equal bytes.
    pub fn to_vvol_bytes(&self) -> Result<Vec<u8>> {
        if let Some(bad) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "refusing to write non-finite voxel at {bad}"
            )));
        }
        let (d, h, w) = self.dims;
        let mut out = Vec::with_capacity(VVOL_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(VVOL_MAGIC);
        out.extend_from_slice(&VVOL_VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(h as u32).to_le_bytes());
        out.extend_from_slice(&(w as u32).to_le_bytes());
        out.push(VVOL_DTYPE_F32);
        out.extend_from_slice(&[0, 0, 0]);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }
}

/// Read a volume from a VVOL file.
pub fn read_vvol(path: impl AsRef<Path>) -> Result<Volume> {
    let bytes = std::fs::read(path.as_ref())?;
    Volume::from_vvol_bytes(&bytes)
}

/// Write a volume to a VVOL file. The invariants are checked before the file
/// is created, so an invalid volume leaves no partial output behind.
pub fn write_vvol(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let bytes = v.to_vvol_bytes()?;
    std::fs::write(path.as_ref(), bytes)?;
    Ok(())
}

/// Affine-map `[lo, hi]` to `[-1, 1]` with clamping; the range is recorded in
/// the output's metadata.
pub fn normalize(v: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(lo < hi) {
        return Err(invalid(format!(
            "normalize requires lo < hi, got {lo} >= {hi}"
        )));
    }
    let scale = 2.0 / (hi as f64 - lo as f64);
    let data = v
        .data
        .iter()
        .map(|&x| (((x as f64 - lo as f64) * scale - 1.0) as f32).clamp(-1.0, 1.0))
        .collect();
    let mut out = Volume::new(v.dims, data)?;
    out.range = Some((lo, hi));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Patch grids
// ---------------------------------------------------------------------------

/// Blending window applied per axis when stitching patches back together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Window {
    Uniform,
    /// Hann window with an additive 1e-3 floor, so boundary voxels (where the
    /// raw window is zero) still receive weight.
    #[default]
    Hann,
}

/// The set of overlapping patch origins covering a volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    patch: (usize, usize, usize),
    stride: (usize, usize, usize),
    origins: Vec<(usize, usize, usize)>,
    volume_dims: (usize, usize, usize),
}

impl PatchGrid {
    /// Assemble a grid from parts. Origins must be lexicographically
    /// non-decreasing and in bounds; duplicates are allowed (fully
    /// overlapping patches are meaningful for stitching).
    pub fn from_parts(
        patch: (usize, usize, usize),
        stride: (usize, usize, usize),
        origins: Vec<(usize, usize, usize)>,
        volume_dims: (usize, usize, usize),
    ) -> Result<Self> {
        if origins.is_empty() {
            return Err(invalid("patch grid needs at least one origin"));
        }
        for axis in 0..3 {
            let (p, s, v) = (ax(patch, axis), ax(stride, axis), ax(volume_dims, axis));
            if !(1 <= s && s <= p && p <= v) {
                return Err(invalid(format!(
                    "axis {axis}: need 1 <= stride <= patch <= dim, got stride {s}, patch {p}, dim {v}"
                )));
            }
        }
        for win in origins.windows(2) {
            if win[1] < win[0] {
                return Err(invalid("patch origins must be sorted"));
            }
        }
        for &o in &origins {
            for axis in 0..3 {
                if ax(o, axis) + ax(patch, axis) > ax(volume_dims, axis) {
                    return Err(invalid(format!("origin {o:?} overruns the volume")));
                }
            }
        }
        Ok(PatchGrid {
            patch,
            stride,
            origins,
            volume_dims,
        })
    }

    pub fn patch_size(&self) -> (usize, usize, usize) {
        self.patch
    }

    pub fn stride(&self) -> (usize, usize, usize) {
        self.stride
    }

    pub fn origins(&self) -> &[(usize, usize, usize)] {
        &self.origins
    }

    pub fn volume_dims(&self) -> (usize, usize, usize) {
        self.volume_dims
    }

    pub fn num_patches(&self) -> usize {
        self.origins.len()
    }
}

fn ax(t: (usize, usize, usize), axis: usize) -> usize {
    match axis {
        0 => t.0,
        1 => t.1,
        _ => t.2,
    }
}

/// Origins along one axis: multiples of `stride` up to `dim - patch`, plus a
/// final origin clamped to `dim - patch` so the boundary is always covered.
pub fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = dim - patch;
    let mut out = Vec::new();
    let mut o = 0;
    while o < last {
        out.push(o);
        o += stride;
    }
    out.push(last);
    out
}

/// Split a volume into overlapping patches covering every voxel.
pub fn extract_patches(
    v: &Volume,
    size: (usize, usize, usize),
    stride: (usize, usize, usize),
) -> Result<(PatchGrid, Vec<Volume>)> {
    let dims = v.dims;
    for axis in 0..3 {
        if ax(size, axis) > ax(dims, axis) {
            return Err(invalid(format!(
                "patch {size:?} larger than volume {dims:?} along axis {axis}"
            )));
        }
        if ax(stride, axis) == 0 {
            return Err(invalid("stride must be >= 1"));
        }
        if ax(stride, axis) > ax(size, axis) {
            return Err(invalid(format!(
                "stride {stride:?} exceeds patch {size:?} along axis {axis}; coverage would have gaps"
            )));
        }
    }
    let zs = axis_origins(dims.0, size.0, stride.0);
    let ys = axis_origins(dims.1, size.1, stride.1);
    let xs = axis_origins(dims.2, size.2, stride.2);
    let mut origins = Vec::with_capacity(zs.len() * ys.len() * xs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                origins.push((z, y, x));
            }
        }
    }
    let grid = PatchGrid::from_parts(size, stride, origins, dims)?;
    let patches = grid
        .origins
        .iter()
        .map(|&o| copy_patch(v, o, size))
        .collect::<Result<Vec<_>>>()?;
    Ok((grid, patches))
}

fn copy_patch(
    v: &Volume,
    origin: (usize, usize, usize),
    size: (usize, usize, usize),
) -> Result<Volume> {
    let (_, h, w) = v.dims;
    let mut data = Vec::with_capacity(size.0 * size.1 * size.2);
    for z in 0..size.0 {
        for y in 0..size.1 {
            let base = ((origin.0 + z) * h + origin.1 + y) * w + origin.2;
            data.extend_from_slice(&v.data[base..base + size.2]);
        }
    }
    Volume::new(size, data)
}

fn axis_window(n: usize, window: Window) -> Vec<f64> {
    match window {
        Window::Uniform => vec![1.0; n],
        Window::Hann => {
            if n == 1 {
                return vec![1.0];
            }
            (0..n)
                .map(|i| {
                    let phase = 2.0 * std::f64::consts::PI * i as f64 / (n as f64 - 1.0);
                    0.5 * (1.0 - phase.cos()) + 1e-3
                })
                .collect()
        }
    }
}

/// Reassemble patches into a volume by windowed weighted averaging. For
/// unmodified patches this inverts [`extract_patches`] to within 1e-6.
pub fn stitch(grid: &PatchGrid, patches: &[Volume], window: Window) -> Result<Volume> {
    if patches.is_empty() {
        return Err(invalid("stitch requires at least one patch"));
    }
    if patches.len() != grid.num_patches() {
        return Err(shape_err(format!(
            "grid has {} origins but {} patches were provided",
            grid.num_patches(),
            patches.len()
        )));
    }
    for (i, p) in patches.iter().enumerate() {
        if p.dims != grid.patch {
            return Err(shape_err(format!(
                "patch {i} has dims {:?}, grid expects {:?}",
                p.dims, grid.patch
            )));
        }
    }
    let (pd, ph, pw) = grid.patch;
    let wz = axis_window(pd, window);
    let wy = axis_window(ph, window);
    let wx = axis_window(pw, window);

    let dims = grid.volume_dims;
    let (_, h, w) = dims;
    let n = dims.0 * dims.1 * dims.2;
    let mut acc = vec![0.0f64; n];
    let mut wsum = vec![0.0f64; n];
    // Accumulate in origin order: the reduction is deterministic.
    for (patch, &(oz, oy, ox)) in patches.iter().zip(grid.origins.iter()) {
        let mut idx = 0;
        for z in 0..pd {
            let wz_z = wz[z];
            for y in 0..ph {
                let wzy = wz_z * wy[y];
                let base = ((oz + z) * h + oy + y) * w + ox;
                for x in 0..pw {
                    let weight = wzy * wx[x];
                    acc[base + x] += weight * patch.data[idx] as f64;
                    wsum[base + x] += weight;
                    idx += 1;
                }
            }
        }
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        if wsum[i] <= 0.0 {
            return Err(shape_err(format!("voxel {i} not covered by any patch")));
        }
        data.push((acc[i] / wsum[i]) as f32);
    }
    Volume::new(dims, data)
}
