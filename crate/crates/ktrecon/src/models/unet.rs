//! Encoder-decoder network: kernel-3 convolutions, four 2x max-pooling
//! steps with channel doubling, up-convolutions with skip concatenation.
//! Inputs are reflection-padded to the next multiple of `2^depth` and the
//! output is cropped back.

use rand::Rng;

use crate::error::Result;
use crate::nn::{
    concat, concat_backward, crop_adjoint, crop_to, pad_plan, reflect_pad, reflect_pad_adjoint,
    relu_backward, relu_forward, Conv, FeatureMap, Float, MaxPool, PadSpec, ParamVisitor, UpConv,
};

#[derive(Debug, Clone)]
pub struct UNet<T> {
    rank: usize,
    depth: usize,
    enc: Vec<(Conv<T>, Conv<T>)>,
    bott: (Conv<T>, Conv<T>),
    ups: Vec<UpConv<T>>,
    dec: Vec<(Conv<T>, Conv<T>)>,
    out: Conv<T>,
}

pub struct UNetCache<T> {
    pad: Option<PadSpec>,
    /// per encoder level: input to conv_a, relu(a) activation, skip
    /// activation, pool argmax and pre-pool shape
    enc: Vec<(FeatureMap<T>, FeatureMap<T>, FeatureMap<T>, ndarray::Array2<u32>)>,
    bott: (FeatureMap<T>, FeatureMap<T>, FeatureMap<T>),
    /// per decoder level: upconv input, concat result, relu(a), output act
    dec: Vec<(FeatureMap<T>, FeatureMap<T>, FeatureMap<T>, FeatureMap<T>)>,
    out_in: FeatureMap<T>,
}

impl<T: Float> UNet<T> {
    /// `rank` is the spatial rank (2 or 3); kernel size is 3 on every axis.
    pub fn new(
        c_in: usize,
        c_out: usize,
        base: usize,
        depth: usize,
        rank: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let k: Vec<usize> = vec![3; rank];
        let k1: Vec<usize> = vec![1; rank];
        let width = |level: usize| base << level;

        let mut enc = Vec::with_capacity(depth);
        for i in 0..depth {
            let cin = if i == 0 { c_in } else { width(i - 1) };
            enc.push((
                Conv::new(cin, width(i), &k, rng),
                Conv::new(width(i), width(i), &k, rng),
            ));
        }
        let bott = (
            Conv::new(width(depth - 1), width(depth), &k, rng),
            Conv::new(width(depth), width(depth), &k, rng),
        );
        let mut ups = Vec::with_capacity(depth);
        let mut dec = Vec::with_capacity(depth);
        for i in (0..depth).rev() {
            ups.push(UpConv::new(width(i + 1), width(i), rank, rng));
            dec.push((
                Conv::new(2 * width(i), width(i), &k, rng),
                Conv::new(width(i), width(i), &k, rng),
            ));
        }
        let out = Conv::new(base, c_out, &k1, rng);
        UNet { rank, depth, enc, bott, ups, dec, out }
    }

    pub fn n_params(&self) -> usize {
        let mut n = self.out.n_params();
        for (a, b) in self.enc.iter().chain(std::iter::once(&self.bott)) {
            n += a.n_params() + b.n_params();
        }
        for u in &self.ups {
            n += u.n_params();
        }
        for (a, b) in &self.dec {
            n += a.n_params() + b.n_params();
        }
        n
    }

    pub fn forward(&self, input: &FeatureMap<T>) -> Result<(FeatureMap<T>, UNetCache<T>)> {
        debug_assert_eq!(input.shape.len(), self.rank);
        let multiple = 1usize << self.depth;
        let spec = pad_plan(&input.shape, multiple)?;
        let needs_pad = spec.padded != spec.original;
        let mut x = if needs_pad { reflect_pad(input, &spec) } else { input.clone() };

        let mut enc_cache = Vec::with_capacity(self.depth);
        for (ca, cb) in &self.enc {
            let x_in = x;
            let mut a = ca.forward(&x_in)?;
            relu_forward(&mut a);
            let mut s = cb.forward(&a)?;
            relu_forward(&mut s);
            let (pooled, argmax) = MaxPool::forward(&s)?;
            enc_cache.push((x_in, a, s, argmax));
            x = pooled;
        }

        let bott_in = x;
        let mut a = self.bott.0.forward(&bott_in)?;
        relu_forward(&mut a);
        let mut x = self.bott.1.forward(&a)?;
        relu_forward(&mut x);
        let bott_cache = (bott_in, a, x.clone());

        let mut dec_cache = Vec::with_capacity(self.depth);
        for (j, (up, (ca, cb))) in self.ups.iter().zip(self.dec.iter()).enumerate() {
            let skip = &enc_cache[self.depth - 1 - j].2;
            let up_in = x;
            let u = up.forward(&up_in)?;
            let cat = concat(skip, &u)?;
            let mut a = ca.forward(&cat)?;
            relu_forward(&mut a);
            let mut o = cb.forward(&a)?;
            relu_forward(&mut o);
            dec_cache.push((up_in, cat, a, o.clone()));
            x = o;
        }

        let out_in = x;
        let y_full = self.out.forward(&out_in)?;
        let y = if needs_pad { crop_to(&y_full, &spec) } else { y_full };
        Ok((
            y,
            UNetCache {
                pad: if needs_pad { Some(spec) } else { None },
                enc: enc_cache,
                bott: bott_cache,
                dec: dec_cache,
                out_in,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, cache: &UNetCache<T>, dy: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let mut d = match &cache.pad {
            Some(spec) => crop_adjoint(dy, spec),
            None => dy.clone(),
        };
        d = self.out.backward(&cache.out_in, &d)?;

        let mut dskips: Vec<Option<FeatureMap<T>>> = vec![None; self.depth];
        for j in (0..self.depth).rev() {
            let (up_in, cat, a, o) = &cache.dec[j];
            let (ca, cb) = &mut self.dec[j];
            relu_backward(o, &mut d);
            let mut da = cb.backward(a, &d)?;
            relu_backward(a, &mut da);
            let dcat = ca.backward(cat, &da)?;
            let skip_ch = cache.enc[self.depth - 1 - j].2.channels();
            let (dskip, du) = concat_backward(&dcat, skip_ch);
            dskips[self.depth - 1 - j] = Some(dskip);
            d = self.ups[j].backward(up_in, &du)?;
        }

        {
            let (bott_in, a, o) = &cache.bott;
            relu_backward(o, &mut d);
            let mut da = self.bott.1.backward(a, &d)?;
            relu_backward(a, &mut da);
            d = self.bott.0.backward(bott_in, &da)?;
        }

        for i in (0..self.depth).rev() {
            let (x_in, a, s, argmax) = &cache.enc[i];
            let mut ds = MaxPool::backward(&d, argmax, &s.shape);
            if let Some(dskip) = &dskips[i] {
                ds.data += &dskip.data;
            }
            relu_backward(s, &mut ds);
            let (ca, cb) = &mut self.enc[i];
            let mut da = cb.backward(a, &ds)?;
            relu_backward(a, &mut da);
            d = ca.backward(x_in, &da)?;
        }

        Ok(match &cache.pad {
            Some(spec) => reflect_pad_adjoint(&d, spec),
            None => d,
        })
    }

    pub fn zero_grad(&mut self) {
        for (a, b) in self.enc.iter_mut() {
            a.zero_grad();
            b.zero_grad();
        }
        self.bott.0.zero_grad();
        self.bott.1.zero_grad();
        for u in self.ups.iter_mut() {
            u.zero_grad();
        }
        for (a, b) in self.dec.iter_mut() {
            a.zero_grad();
            b.zero_grad();
        }
        self.out.zero_grad();
    }

    pub fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        for (i, (a, b)) in self.enc.iter_mut().enumerate() {
            a.visit_params(&format!("{prefix}.enc{i}a"), v);
            b.visit_params(&format!("{prefix}.enc{i}b"), v);
        }
        self.bott.0.visit_params(&format!("{prefix}.botta"), v);
        self.bott.1.visit_params(&format!("{prefix}.bottb"), v);
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.visit_params(&format!("{prefix}.up{i}"), v);
        }
        for (i, (a, b)) in self.dec.iter_mut().enumerate() {
            a.visit_params(&format!("{prefix}.dec{i}a"), v);
            b.visit_params(&format!("{prefix}.dec{i}b"), v);
        }
        self.out.visit_params(&format!("{prefix}.out"), v);
    }
}
