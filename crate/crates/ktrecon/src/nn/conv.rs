//! Convolution, max-pooling and up-convolution with explicit backward
//! passes. Spatial rank is generic (2-D or 3-D), stride is 1 with "same"
//! zero padding for odd kernels; up-convolution is kernel 2 / stride 2.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{par_column_chunks, FeatureMap, Float, ParamVisitor, CHUNK};
use crate::error::{Error, Result};

/// Per-kernel-tap spatial offsets (already centered by the padding).
fn kernel_offsets(kernel: &[usize]) -> Vec<Vec<isize>> {
    let mut offs: Vec<Vec<isize>> = vec![vec![]];
    for &k in kernel {
        let pad = (k / 2) as isize;
        let mut next = Vec::with_capacity(offs.len() * k);
        for base in &offs {
            for d in 0..k as isize {
                let mut o = base.clone();
                o.push(d - pad);
                next.push(o);
            }
        }
        offs = next;
    }
    offs
}

/// Gather `col[ch*K + k, local] = src[ch, voxel + offsets[k]]` (zero outside
/// bounds) for voxels `v0..v0+len`. Interior voxels, where every tap is in
/// bounds, are filled with contiguous slice copies along the innermost
/// axis; only the thin boundary shell takes the per-voxel checked path.
fn build_cols<T: Float>(
    src: &Array2<T>,
    shape: &[usize],
    offsets: &[Vec<isize>],
    negate: bool,
    v0: usize,
    len: usize,
) -> Array2<T> {
    let rank = shape.len();
    let channels = src.nrows();
    let k_total = offsets.len();
    let voxels: usize = shape.iter().product();
    let mut col = Array2::<T>::zeros((channels * k_total, len));

    // effective offsets and their linear strides
    let eff: Vec<Vec<isize>> = offsets
        .iter()
        .map(|o| o.iter().map(|&v| if negate { -v } else { v }).collect())
        .collect();
    let mut strides = vec![1isize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1] as isize;
    }
    let lin: Vec<isize> = eff
        .iter()
        .map(|o| o.iter().zip(&strides).map(|(&d, &s)| d * s).sum())
        .collect();
    // per-axis interior margins
    let mut lo = vec![0isize; rank];
    let mut hi = vec![0isize; rank];
    for o in &eff {
        for a in 0..rank {
            lo[a] = lo[a].max(-o[a]);
            hi[a] = hi[a].max(o[a]);
        }
    }

    // interior spans along the innermost axis plus boundary voxels
    let w = shape[rank - 1];
    let w_lo = lo[rank - 1] as usize;
    let w_hi = w - hi[rank - 1] as usize;
    let mut spans: Vec<(usize, usize)> = Vec::new(); // (local start, length)
    let mut boundary: Vec<usize> = Vec::new(); // local indices
    let mut row_start = v0 - v0 % w;
    while row_start < v0 + len {
        // leading coordinates of this row
        let mut rem = row_start / w;
        let mut interior_row = true;
        for a in (0..rank - 1).rev() {
            let c = (rem % shape[a]) as isize;
            rem /= shape[a];
            if c < lo[a] || c >= shape[a] as isize - hi[a] {
                interior_row = false;
            }
        }
        let row_end = (row_start + w).min(voxels);
        let chunk_lo = v0.max(row_start);
        let chunk_hi = (v0 + len).min(row_end);
        if interior_row && w_hi > w_lo {
            let span_lo = chunk_lo.max(row_start + w_lo);
            let span_hi = chunk_hi.min(row_start + w_hi);
            if span_lo < span_hi {
                spans.push((span_lo - v0, span_hi - span_lo));
            }
            for v in chunk_lo..span_lo.max(chunk_lo) {
                boundary.push(v - v0);
            }
            for v in span_hi.max(chunk_lo)..chunk_hi {
                boundary.push(v - v0);
            }
        } else {
            for v in chunk_lo..chunk_hi {
                boundary.push(v - v0);
            }
        }
        row_start = row_end;
    }

    let mut coords = vec![0isize; rank];
    for ch in 0..channels {
        let s = src.row(ch);
        let s = s.as_slice().expect("contiguous feature map row");
        for k in 0..k_total {
            let dst_row = ch * k_total + k;
            let mut out = col.row_mut(dst_row);
            let out = out.as_slice_mut().expect("contiguous col row");
            // interior: straight copies shifted by the linear tap offset
            let off = lin[k];
            for &(start, n) in &spans {
                let src_start = (v0 + start) as isize + off;
                out[start..start + n]
                    .copy_from_slice(&s[src_start as usize..src_start as usize + n]);
            }
            // boundary: per-voxel bounds check
            let o = &eff[k];
            for &local in &boundary {
                let mut rem = v0 + local;
                for a in (0..rank).rev() {
                    coords[a] = (rem % shape[a]) as isize;
                    rem /= shape[a];
                }
                let mut idx = 0usize;
                let mut ok = true;
                for a in 0..rank {
                    let c = coords[a] + o[a];
                    if c < 0 || c >= shape[a] as isize {
                        ok = false;
                        break;
                    }
                    idx = idx * shape[a] + c as usize;
                }
                if ok {
                    out[local] = s[idx];
                }
            }
        }
    }
    col
}

/// Stride-1 convolution with "same" zero padding.
#[derive(Debug, Clone)]
pub struct Conv<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
    pub gw: Array2<T>,
    pub gb: Array1<T>,
    c_in: usize,
    c_out: usize,
    kernel: Vec<usize>,
    offsets: Vec<Vec<isize>>,
}

impl<T: Float> Conv<T> {
    pub fn new(c_in: usize, c_out: usize, kernel: &[usize], rng: &mut impl Rng) -> Self {
        let k_total: usize = kernel.iter().product();
        let fan_in = (c_in * k_total) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let w = Array2::from_shape_simple_fn((c_out, c_in * k_total), || {
            T::from_f64(normal.sample(rng)).unwrap()
        });
        Conv {
            w,
            b: Array1::zeros(c_out),
            gw: Array2::zeros((c_out, c_in * k_total)),
            gb: Array1::zeros(c_out),
            c_in,
            c_out,
            kernel: kernel.to_vec(),
            offsets: kernel_offsets(kernel),
        }
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        if x.channels() != self.c_in {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.c_in,
                x.channels()
            )));
        }
        let mut y = FeatureMap::zeros(self.c_out, &x.shape);
        let shape = x.shape.clone();
        par_column_chunks(&mut y.data, |v0, chunk| {
            let len = chunk.ncols();
            let col = build_cols(&x.data, &shape, &self.offsets, false, v0, len);
            let prod = self.w.dot(&col);
            chunk.assign(&prod);
        });
        for (c, mut row) in y.data.outer_iter_mut().enumerate() {
            let b = self.b[c];
            row.mapv_inplace(|v| v + b);
        }
        Ok(y)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &FeatureMap<T>, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let shape = x.shape.clone();
        let voxels = x.voxels();
        let k_total: usize = self.kernel.iter().product();

        // weight gradient: parallel partials summed in fixed chunk order
        let n_chunks = voxels.div_ceil(CHUNK);
        use rayon::prelude::*;
        let partials: Vec<Array2<T>> = (0..n_chunks)
            .into_par_iter()
            .map(|i| {
                let v0 = i * CHUNK;
                let len = CHUNK.min(voxels - v0);
                let col = build_cols(&x.data, &shape, &self.offsets, false, v0, len);
                let dchunk = dy.data.slice(ndarray::s![.., v0..v0 + len]);
                dchunk.dot(&col.t())
            })
            .collect();
        for p in partials {
            self.gw += &p;
        }
        self.gb += &dy.data.sum_axis(Axis(1));

        // input gradient: correlate dy with the flipped kernel
        // w2[ci, co*K + k] = w[co, ci*K + k]
        let mut w2 = Array2::<T>::zeros((self.c_in, self.c_out * k_total));
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                for k in 0..k_total {
                    w2[[ci, co * k_total + k]] = self.w[[co, ci * k_total + k]];
                }
            }
        }
        let mut dx = FeatureMap::zeros(self.c_in, &shape);
        par_column_chunks(&mut dx.data, |v0, chunk| {
            let len = chunk.ncols();
            let col_dy = build_cols(&dy.data, &shape, &self.offsets, true, v0, len);
            let prod = w2.dot(&col_dy);
            chunk.assign(&prod);
        });
        Ok(dx)
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(T::zero());
        self.gb.fill(T::zero());
    }

    pub fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        v.visit(
            &format!("{prefix}.w"),
            self.w.as_slice_mut().expect("contiguous"),
            self.gw.as_slice_mut().expect("contiguous"),
        );
        v.visit(
            &format!("{prefix}.b"),
            self.b.as_slice_mut().expect("contiguous"),
            self.gb.as_slice_mut().expect("contiguous"),
        );
    }
}

/// 2x max pooling per spatial axis; remembers argmax indices for backward.
#[derive(Debug, Clone)]
pub struct MaxPool;

impl MaxPool {
    pub fn out_shape(shape: &[usize]) -> Result<Vec<usize>> {
        shape
            .iter()
            .map(|&n| {
                if n % 2 != 0 {
                    Err(Error::Shape(format!("max pool needs even axis, got {n}")))
                } else {
                    Ok(n / 2)
                }
            })
            .collect()
    }

    pub fn forward<T: Float>(x: &FeatureMap<T>) -> Result<(FeatureMap<T>, Array2<u32>)> {
        let out_shape = Self::out_shape(&x.shape)?;
        let rank = x.shape.len();
        let out_voxels: usize = out_shape.iter().product();
        let channels = x.channels();
        let mut y = FeatureMap::zeros(channels, &out_shape);
        let mut argmax = Array2::<u32>::zeros((channels, out_voxels));
        let n_corners = 1usize << rank;
        let mut coords = vec![0usize; rank];
        for u in 0..out_voxels {
            let mut rem = u;
            for a in (0..rank).rev() {
                coords[a] = rem % out_shape[a];
                rem /= out_shape[a];
            }
            for corner in 0..n_corners {
                let mut idx = 0usize;
                for a in 0..rank {
                    let bit = (corner >> (rank - 1 - a)) & 1;
                    idx = idx * x.shape[a] + coords[a] * 2 + bit;
                }
                for c in 0..channels {
                    let v = x.data[[c, idx]];
                    if corner == 0 || v > y.data[[c, u]] {
                        y.data[[c, u]] = v;
                        argmax[[c, u]] = idx as u32;
                    }
                }
            }
        }
        Ok((y, argmax))
    }

    pub fn backward<T: Float>(
        dy: &FeatureMap<T>,
        argmax: &Array2<u32>,
        in_shape: &[usize],
    ) -> FeatureMap<T> {
        let mut dx = FeatureMap::zeros(dy.channels(), in_shape);
        for c in 0..dy.channels() {
            for u in 0..dy.voxels() {
                let idx = argmax[[c, u]] as usize;
                dx.data[[c, idx]] = dx.data[[c, idx]] + dy.data[[c, u]];
            }
        }
        dx
    }
}

/// Transposed convolution, kernel 2 / stride 2 (non-overlapping blocks).
#[derive(Debug, Clone)]
pub struct UpConv<T> {
    /// layout `(c_in, c_out * P)` with `P = 2^rank` corner offsets
    pub w: Array2<T>,
    pub b: Array1<T>,
    pub gw: Array2<T>,
    pub gb: Array1<T>,
    c_in: usize,
    c_out: usize,
    rank: usize,
}

impl<T: Float> UpConv<T> {
    pub fn new(c_in: usize, c_out: usize, rank: usize, rng: &mut impl Rng) -> Self {
        let p = 1usize << rank;
        let normal = Normal::new(0.0, (2.0 / c_in as f64).sqrt()).unwrap();
        let w = Array2::from_shape_simple_fn((c_in, c_out * p), || {
            T::from_f64(normal.sample(rng)).unwrap()
        });
        UpConv {
            w,
            b: Array1::zeros(c_out),
            gw: Array2::zeros((c_in, c_out * p)),
            gb: Array1::zeros(c_out),
            c_in,
            c_out,
            rank,
        }
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn scatter_index(&self, in_shape: &[usize], u: usize, corner: usize) -> usize {
        let rank = self.rank;
        let mut rem = u;
        let mut coords = [0usize; 3];
        for a in (0..rank).rev() {
            coords[a] = rem % in_shape[a];
            rem /= in_shape[a];
        }
        let mut idx = 0usize;
        for a in 0..rank {
            let bit = (corner >> (rank - 1 - a)) & 1;
            idx = idx * (in_shape[a] * 2) + coords[a] * 2 + bit;
        }
        idx
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        if x.channels() != self.c_in {
            return Err(Error::Shape(format!(
                "upconv expects {} input channels, got {}",
                self.c_in,
                x.channels()
            )));
        }
        let out_shape: Vec<usize> = x.shape.iter().map(|&n| n * 2).collect();
        let mut y = FeatureMap::zeros(self.c_out, &out_shape);
        let p = 1usize << self.rank;
        for corner in 0..p {
            // (c_out, V_in) block for this corner
            let wv = self.w.slice(ndarray::s![.., corner..; p]);
            let block = wv.t().dot(&x.data);
            for u in 0..x.voxels() {
                let idx = self.scatter_index(&x.shape, u, corner);
                for c in 0..self.c_out {
                    y.data[[c, idx]] = block[[c, u]] + self.b[c];
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &FeatureMap<T>, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let p = 1usize << self.rank;
        let mut dx = FeatureMap::zeros(self.c_in, &x.shape);
        for corner in 0..p {
            // gather this corner's output gradients
            let mut dyc = Array2::<T>::zeros((self.c_out, x.voxels()));
            for u in 0..x.voxels() {
                let idx = self.scatter_index(&x.shape, u, corner);
                for c in 0..self.c_out {
                    dyc[[c, u]] = dy.data[[c, idx]];
                }
            }
            let dw = x.data.dot(&dyc.t()); // (c_in, c_out)
            {
                let mut gws = self.gw.slice_mut(ndarray::s![.., corner..; p]);
                gws += &dw;
            }
            let wv = self.w.slice(ndarray::s![.., corner..; p]);
            dx.data += &wv.dot(&dyc);
            self.gb += &dyc.sum_axis(Axis(1));
        }
        Ok(dx)
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(T::zero());
        self.gb.fill(T::zero());
    }

    pub fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        v.visit(
            &format!("{prefix}.w"),
            self.w.as_slice_mut().expect("contiguous"),
            self.gw.as_slice_mut().expect("contiguous"),
        );
        v.visit(
            &format!("{prefix}.b"),
            self.b.as_slice_mut().expect("contiguous"),
            self.gb.as_slice_mut().expect("contiguous"),
        );
    }
}
