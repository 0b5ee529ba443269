//! Volumetric data model: scalar grids, label grids, probability stacks,
//! plane slicing and the axial augmentation group.
//!
//! Every grid uses one canonical memory layout: row-major with x fastest,
//! `index = x + nx * (y + ny * z)`. The on-disk format and all slicing code
//! share this layout.

use thiserror::Error;

/// Voxel counts along (x, y, z).
pub type Dims = (usize, usize, usize);
/// Millimetres per voxel along (x, y, z).
pub type Spacing = (f64, f64, f64);

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("dims must be positive, got {0:?}")]
    BadDims(Dims),
    #[error("spacing must be positive, got {0:?}")]
    BadSpacing(Spacing),
    #[error("data length {got} does not match dims product {want}")]
    DataLength { got: usize, want: usize },
    #[error("volume contains a non-finite scalar at index {0}")]
    NonFinite(usize),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u8, num_classes: usize },
    #[error("num_classes must be >= 2, got {0}")]
    TooFewClasses(usize),
    #[error("voxel {index} probabilities sum to {sum}, not 1")]
    NotASimplex { index: usize, sum: f64 },
    #[error("voxel {index} has negative probability {value}")]
    NegativeProbability { index: usize, value: f64 },
    #[error("volume has zero variance (constant input)")]
    ConstantVolume,
    #[error("slice {index} dims {got:?} disagree with source dims {want:?}")]
    InconsistentStack {
        index: usize,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("dims mismatch: {0:?} vs {1:?}")]
    DimsMismatch(Dims, Dims),
}

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims.0 * dims.1 * dims.2
}

#[inline]
pub fn voxel_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    debug_assert!(x < dims.0 && y < dims.1 && z < dims.2);
    x + dims.0 * (y + dims.1 * z)
}

fn check_dims(dims: Dims) -> Result<(), VolumeError> {
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(VolumeError::BadDims(dims));
    }
    Ok(())
}

fn check_spacing(spacing: Spacing) -> Result<(), VolumeError> {
    if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0) {
        return Err(VolumeError::BadSpacing(spacing));
    }
    Ok(())
}

/// Dense 3D scalar grid with physical voxel spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self, VolumeError> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        if data.len() != voxel_count(dims) {
            return Err(VolumeError::DataLength {
                got: data.len(),
                want: voxel_count(dims),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Result<Self, VolumeError> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        Ok(Volume {
            dims,
            spacing,
            data: vec![0.0; voxel_count(dims)],
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[voxel_index(self.dims, x, y, z)]
    }

    /// Extracts one 2D slice along the given axis.
    pub fn plane(&self, axis: PlaneAxis, index: usize) -> Slice2d {
        let (nu, nv) = axis.slice_dims(self.dims);
        let mut data = Vec::with_capacity(nu * nv);
        for v in 0..nv {
            for u in 0..nu {
                let (x, y, z) = axis.to_xyz(u, v, index);
                data.push(self.get(x, y, z));
            }
        }
        Slice2d { nu, nv, data }
    }
}

/// Per-voxel class indices in [0, num_classes).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: Spacing,
    labels: Vec<u8>,
    num_classes: usize,
}

impl LabelVolume {
    pub fn new(
        dims: Dims,
        spacing: Spacing,
        labels: Vec<u8>,
        num_classes: usize,
    ) -> Result<Self, VolumeError> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        if num_classes < 2 {
            return Err(VolumeError::TooFewClasses(num_classes));
        }
        if labels.len() != voxel_count(dims) {
            return Err(VolumeError::DataLength {
                got: labels.len(),
                want: voxel_count(dims),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| (l as usize) >= num_classes) {
            return Err(VolumeError::LabelOutOfRange { label, num_classes });
        }
        Ok(LabelVolume {
            dims,
            spacing,
            labels,
            num_classes,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[voxel_index(self.dims, x, y, z)]
    }

    /// Labels of one 2D slice along the given axis, u fastest.
    pub fn plane_labels(&self, axis: PlaneAxis, index: usize) -> Vec<u8> {
        let (nu, nv) = axis.slice_dims(self.dims);
        let mut out = Vec::with_capacity(nu * nv);
        for v in 0..nv {
            for u in 0..nu {
                let (x, y, z) = axis.to_xyz(u, v, index);
                out.push(self.get(x, y, z));
            }
        }
        out
    }
}

/// Per-voxel class-probability stack. Probabilities are stored class-major:
/// `probs[c * nvox + voxel]`, matching the on-disk plane order.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVolume {
    dims: Dims,
    spacing: Spacing,
    num_classes: usize,
    probs: Vec<f64>,
}

/// Tolerance on the per-voxel probability sum.
pub const SIMPLEX_TOL: f64 = 1e-6;

impl ProbVolume {
    pub fn new(
        dims: Dims,
        spacing: Spacing,
        num_classes: usize,
        probs: Vec<f64>,
    ) -> Result<Self, VolumeError> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        if num_classes < 2 {
            return Err(VolumeError::TooFewClasses(num_classes));
        }
        let nvox = voxel_count(dims);
        if probs.len() != nvox * num_classes {
            return Err(VolumeError::DataLength {
                got: probs.len(),
                want: nvox * num_classes,
            });
        }
        for i in 0..nvox {
            let mut sum = 0.0;
            for c in 0..num_classes {
                let p = probs[c * nvox + i];
                if !p.is_finite() || p < 0.0 {
                    return Err(VolumeError::NegativeProbability { index: i, value: p });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(VolumeError::NotASimplex { index: i, sum });
            }
        }
        Ok(ProbVolume {
            dims,
            spacing,
            num_classes,
            probs,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn voxel_count(&self) -> usize {
        voxel_count(self.dims)
    }

    /// Probability of `class` at flat voxel index.
    #[inline]
    pub fn prob_at(&self, class: usize, voxel: usize) -> f64 {
        self.probs[class * self.voxel_count() + voxel]
    }
}

/// Slice orientation: the plane spanned by the named axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PlaneAxis {
    Xy,
    Xz,
    Yz,
}

impl PlaneAxis {
    /// Number of slices a volume of `dims` yields along this axis.
    pub fn slice_count(&self, dims: Dims) -> usize {
        match self {
            PlaneAxis::Xy => dims.2,
            PlaneAxis::Xz => dims.1,
            PlaneAxis::Yz => dims.0,
        }
    }

    /// In-plane dims (nu, nv) of one slice.
    pub fn slice_dims(&self, dims: Dims) -> (usize, usize) {
        match self {
            PlaneAxis::Xy => (dims.0, dims.1),
            PlaneAxis::Xz => (dims.0, dims.2),
            PlaneAxis::Yz => (dims.1, dims.2),
        }
    }

    /// Maps in-plane coordinates (u, v) on slice `index` to (x, y, z).
    #[inline]
    pub fn to_xyz(&self, u: usize, v: usize, index: usize) -> (usize, usize, usize) {
        match self {
            PlaneAxis::Xy => (u, v, index),
            PlaneAxis::Xz => (u, index, v),
            PlaneAxis::Yz => (index, u, v),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            PlaneAxis::Xy => "xy",
            PlaneAxis::Xz => "xz",
            PlaneAxis::Yz => "yz",
        }
    }
}

/// One 2D grid, u fastest: `data[u + nu * v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice2d {
    pub nu: usize,
    pub nv: usize,
    pub data: Vec<f64>,
}

/// Ordered stack of parallel 2D slices carved from one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneStack {
    pub axis: PlaneAxis,
    pub slices: Vec<Slice2d>,
    pub source_dims: Dims,
    pub source_spacing: Spacing,
}

/// Rescales to zero mean and unit variance (population standard deviation,
/// computed per volume).
pub fn normalize(v: &Volume) -> Result<Volume, VolumeError> {
    let n = v.data.len();
    if n < 2 {
        return Err(VolumeError::ConstantVolume);
    }
    let mean = v.data.iter().sum::<f64>() / n as f64;
    let var = v.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std == 0.0 {
        return Err(VolumeError::ConstantVolume);
    }
    let data = v.data.iter().map(|x| (x - mean) / std).collect();
    Volume::new(v.dims, v.spacing, data)
}

/// Carves a volume into an ordered stack of 2D slices. Lossless: see
/// [`reassemble`].
pub fn slice(v: &Volume, axis: PlaneAxis) -> PlaneStack {
    let slices = (0..axis.slice_count(v.dims))
        .map(|i| v.plane(axis, i))
        .collect();
    PlaneStack {
        axis,
        slices,
        source_dims: v.dims,
        source_spacing: v.spacing,
    }
}

/// Exact inverse of [`slice`] for the same axis.
pub fn reassemble(s: &PlaneStack) -> Result<Volume, VolumeError> {
    let want = s.axis.slice_dims(s.source_dims);
    let mut out = Volume::zeros(s.source_dims, s.source_spacing)?;
    if s.slices.len() != s.axis.slice_count(s.source_dims) {
        return Err(VolumeError::InconsistentStack {
            index: s.slices.len(),
            got: (0, 0),
            want,
        });
    }
    for (i, sl) in s.slices.iter().enumerate() {
        if (sl.nu, sl.nv) != want || sl.data.len() != sl.nu * sl.nv {
            return Err(VolumeError::InconsistentStack {
                index: i,
                got: (sl.nu, sl.nv),
                want,
            });
        }
        for v in 0..sl.nv {
            for u in 0..sl.nu {
                let (x, y, z) = s.axis.to_xyz(u, v, i);
                out.data[voxel_index(s.source_dims, x, y, z)] = sl.data[u + sl.nu * v];
            }
        }
    }
    Ok(out)
}

/// Axial augmentation group: rotations about z by multiples of 90 degrees
/// and flips within the xy plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentOp {
    Rot90,
    Rot180,
    Rot270,
    FlipX,
    FlipY,
}

impl AugmentOp {
    /// All ops, in a fixed order usable for seeded sampling.
    pub const ALL: [AugmentOp; 5] = [
        AugmentOp::Rot90,
        AugmentOp::Rot180,
        AugmentOp::Rot270,
        AugmentOp::FlipX,
        AugmentOp::FlipY,
    ];

    /// Output dims for input dims.
    pub(crate) fn out_dims(&self, d: Dims) -> Dims {
        match self {
            AugmentOp::Rot90 | AugmentOp::Rot270 => (d.1, d.0, d.2),
            _ => d,
        }
    }

    /// Maps a source voxel (x, y) to its target position in the output grid.
    #[inline]
    pub(crate) fn map_xy(&self, x: usize, y: usize, d: Dims) -> (usize, usize) {
        match self {
            // counterclockwise quarter turn about z
            AugmentOp::Rot90 => (y, d.0 - 1 - x),
            AugmentOp::Rot180 => (d.0 - 1 - x, d.1 - 1 - y),
            AugmentOp::Rot270 => (d.1 - 1 - y, x),
            AugmentOp::FlipX => (d.0 - 1 - x, y),
            AugmentOp::FlipY => (x, d.1 - 1 - y),
        }
    }
}

/// Applies one augmentation op to an image and its annotation identically.
pub fn augment(
    v: &Volume,
    l: &LabelVolume,
    op: AugmentOp,
) -> Result<(Volume, LabelVolume), VolumeError> {
    if v.dims != l.dims {
        return Err(VolumeError::DimsMismatch(v.dims, l.dims));
    }
    let d = v.dims;
    let od = op.out_dims(d);
    let mut data = vec![0.0; voxel_count(od)];
    let mut labels = vec![0u8; voxel_count(od)];
    for z in 0..d.2 {
        for y in 0..d.1 {
            for x in 0..d.0 {
                let (tx, ty) = op.map_xy(x, y, d);
                let src = voxel_index(d, x, y, z);
                let dst = voxel_index(od, tx, ty, z);
                data[dst] = v.data[src];
                labels[dst] = l.labels[src];
            }
        }
    }
    // spacing follows the axis permutation
    let spacing = match op {
        AugmentOp::Rot90 | AugmentOp::Rot270 => (v.spacing.1, v.spacing.0, v.spacing.2),
        _ => v.spacing,
    };
    Ok((
        Volume::new(od, spacing, data)?,
        LabelVolume::new(od, spacing, labels, l.num_classes)?,
    ))
}

/// Per-voxel class with maximal probability; ties break toward the lowest
/// class index.
pub fn argmax_labels(p: &ProbVolume) -> LabelVolume {
    let nvox = p.voxel_count();
    let mut labels = vec![0u8; nvox];
    for i in 0..nvox {
        let mut best = 0usize;
        let mut best_p = p.probs[i];
        for c in 1..p.num_classes {
            let v = p.probs[c * nvox + i];
            if v > best_p {
                best_p = v;
                best = c;
            }
        }
        labels[i] = best as u8;
    }
    LabelVolume::new(p.dims, p.spacing, labels, p.num_classes).expect("argmax labels are valid")
}
