//! Minimal deterministic neural-network layers with explicit backward
//! passes.
//!
//! Everything is generic over `f32`/`f64` so the same graph can be trained
//! in single precision and gradient-checked against central finite
//! differences in double precision. Feature maps are stored as
//! `(channels, voxels)` matrices with the spatial shape carried separately;
//! convolutions run as im2col + GEMM in fixed-size voxel chunks (the chunk
//! partition does not depend on thread count, so results are bit-stable
//! under rayon).

use ndarray::{Array2, NdFloat};
use num_traits::FromPrimitive;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub mod conv;

pub use conv::{Conv, MaxPool, UpConv};

/// Scalar type bound for network code.
pub trait Float: NdFloat + FromPrimitive + std::iter::Sum {}
impl Float for f32 {}
impl Float for f64 {}

/// Voxel chunk length for parallel GEMM; fixed so that the summation
/// partition (and therefore rounding) is independent of thread count.
pub(crate) const CHUNK: usize = 4096;

/// A real feature map: `(channels, voxels)` with row-major spatial layout.
#[derive(Debug, Clone)]
pub struct FeatureMap<T> {
    pub data: Array2<T>,
    pub shape: Vec<usize>,
}

impl<T: Float> FeatureMap<T> {
    pub fn zeros(channels: usize, shape: &[usize]) -> Self {
        let voxels: usize = shape.iter().product();
        FeatureMap { data: Array2::zeros((channels, voxels)), shape: shape.to_vec() }
    }

    pub fn channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn voxels(&self) -> usize {
        self.data.ncols()
    }

    pub fn assert_shape(&self) -> Result<()> {
        let v: usize = self.shape.iter().product();
        if v != self.voxels() {
            return Err(Error::Shape(format!(
                "feature map shape {:?} does not match {} voxels",
                self.shape,
                self.voxels()
            )));
        }
        Ok(())
    }
}

/// Visitor over named parameter/gradient pairs, in a stable order.
pub trait ParamVisitor<T> {
    fn visit(&mut self, name: &str, param: &mut [T], grad: &mut [T]);
}

/// ReLU forward in place; returns the activation (also the backward mask).
pub fn relu_forward<T: Float>(x: &mut FeatureMap<T>) {
    x.data.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// `dx = dy .* (y > 0)` where `y` is the ReLU output.
pub fn relu_backward<T: Float>(y: &FeatureMap<T>, dy: &mut FeatureMap<T>) {
    dy.data.zip_mut_with(&y.data, |d, &yv| {
        if yv <= T::zero() {
            *d = T::zero();
        }
    });
}

/// Channel concatenation `[a; b]`.
pub fn concat<T: Float>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!("concat shapes differ: {:?} vs {:?}", a.shape, b.shape)));
    }
    let mut out = FeatureMap::zeros(a.channels() + b.channels(), &a.shape);
    out.data.slice_mut(ndarray::s![..a.channels(), ..]).assign(&a.data);
    out.data.slice_mut(ndarray::s![a.channels().., ..]).assign(&b.data);
    Ok(out)
}

/// Split the gradient of a concatenation back into both halves.
pub fn concat_backward<T: Float>(
    dy: &FeatureMap<T>,
    ca: usize,
) -> (FeatureMap<T>, FeatureMap<T>) {
    let da = FeatureMap {
        data: dy.data.slice(ndarray::s![..ca, ..]).to_owned(),
        shape: dy.shape.clone(),
    };
    let db = FeatureMap {
        data: dy.data.slice(ndarray::s![ca.., ..]).to_owned(),
        shape: dy.shape.clone(),
    };
    (da, db)
}

/// Reflection padding of every spatial axis up to `target` (no edge
/// duplication). Requires `pad <= n - 1` per side.
#[derive(Debug, Clone)]
pub struct PadSpec {
    pub original: Vec<usize>,
    pub padded: Vec<usize>,
    pub left: Vec<usize>,
}

pub fn pad_plan(shape: &[usize], multiple: usize) -> Result<PadSpec> {
    let mut padded = Vec::with_capacity(shape.len());
    let mut left = Vec::with_capacity(shape.len());
    for &n in shape {
        let target = n.div_ceil(multiple) * multiple;
        let total = target - n;
        let l = total / 2;
        let r = total - l;
        if l >= n || r >= n {
            return Err(Error::Config(format!(
                "axis of size {n} cannot be reflection-padded to {target}"
            )));
        }
        padded.push(target);
        left.push(l);
    }
    Ok(PadSpec { original: shape.to_vec(), padded, left })
}

fn reflect_index(i: isize, n: isize) -> usize {
    // no edge duplication: -1 -> 1, n -> n-2
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Source voxel index of every padded voxel.
fn pad_gather_indices(spec: &PadSpec) -> Vec<usize> {
    let rank = spec.original.len();
    let padded_voxels: usize = spec.padded.iter().product();
    let mut src = vec![0usize; padded_voxels];
    let mut coords = vec![0usize; rank];
    for (v, s) in src.iter_mut().enumerate() {
        // decode padded coordinates
        let mut rem = v;
        for a in (0..rank).rev() {
            coords[a] = rem % spec.padded[a];
            rem /= spec.padded[a];
        }
        let mut idx = 0usize;
        for a in 0..rank {
            let orig = reflect_index(
                coords[a] as isize - spec.left[a] as isize,
                spec.original[a] as isize,
            );
            idx = idx * spec.original[a] + orig;
        }
        *s = idx;
    }
    src
}

pub fn reflect_pad<T: Float>(x: &FeatureMap<T>, spec: &PadSpec) -> FeatureMap<T> {
    let src = pad_gather_indices(spec);
    let mut out = FeatureMap::zeros(x.channels(), &spec.padded);
    for c in 0..x.channels() {
        let xi = x.data.row(c);
        let mut oi = out.data.row_mut(c);
        for (v, &s) in src.iter().enumerate() {
            oi[v] = xi[s];
        }
    }
    out
}

/// Adjoint of [`reflect_pad`]: fold padded-region gradients back onto their
/// source voxels.
pub fn reflect_pad_adjoint<T: Float>(dy: &FeatureMap<T>, spec: &PadSpec) -> FeatureMap<T> {
    let src = pad_gather_indices(spec);
    let mut out = FeatureMap::zeros(dy.channels(), &spec.original);
    for c in 0..dy.channels() {
        let di = dy.data.row(c);
        let mut oi = out.data.row_mut(c);
        for (v, &s) in src.iter().enumerate() {
            oi[s] = oi[s] + di[v];
        }
    }
    out
}

/// Extract the original-shape window (inverse of padding on the forward
/// path, applied to the network output).
pub fn crop_to<T: Float>(x: &FeatureMap<T>, spec: &PadSpec) -> FeatureMap<T> {
    let rank = spec.original.len();
    let out_voxels: usize = spec.original.iter().product();
    let mut out = FeatureMap::zeros(x.channels(), &spec.original);
    let mut coords = vec![0usize; rank];
    for v in 0..out_voxels {
        let mut rem = v;
        for a in (0..rank).rev() {
            coords[a] = rem % spec.original[a];
            rem /= spec.original[a];
        }
        let mut idx = 0usize;
        for a in 0..rank {
            idx = idx * spec.padded[a] + coords[a] + spec.left[a];
        }
        for c in 0..x.channels() {
            out.data[[c, v]] = x.data[[c, idx]];
        }
    }
    out
}

/// Adjoint of [`crop_to`]: zero-extend into the padded shape.
pub fn crop_adjoint<T: Float>(dy: &FeatureMap<T>, spec: &PadSpec) -> FeatureMap<T> {
    let rank = spec.original.len();
    let out_voxels: usize = spec.original.iter().product();
    let mut out = FeatureMap::zeros(dy.channels(), &spec.padded);
    let mut coords = vec![0usize; rank];
    for v in 0..out_voxels {
        let mut rem = v;
        for a in (0..rank).rev() {
            coords[a] = rem % spec.original[a];
            rem /= spec.original[a];
        }
        let mut idx = 0usize;
        for a in 0..rank {
            idx = idx * spec.padded[a] + coords[a] + spec.left[a];
        }
        for c in 0..dy.channels() {
            out.data[[c, idx]] = dy.data[[c, v]];
        }
    }
    out
}

/// Deterministic parallel map over fixed-size column chunks of a matrix.
pub(crate) fn par_column_chunks<T: Float, F>(out: &mut Array2<T>, f: F)
where
    F: Fn(usize, &mut ndarray::ArrayViewMut2<T>) + Sync,
{
    let chunks: Vec<(usize, ndarray::ArrayViewMut2<T>)> = out
        .axis_chunks_iter_mut(ndarray::Axis(1), CHUNK)
        .enumerate()
        .map(|(i, c)| (i * CHUNK, c))
        .collect();
    chunks.into_par_iter().for_each(|(start, mut chunk)| f(start, &mut chunk));
}

/// Sum of `|a|` over a feature map (used by L1 losses in tests).
pub fn abs_sum<T: Float>(x: &FeatureMap<T>) -> T {
    x.data.iter().map(|v| v.abs()).sum()
}
