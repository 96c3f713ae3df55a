use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{gemm, FeatureMap, ParamId, ParamSet, Real, Tensor};

/// Square-kernel 2-D convolution with zero padding, lowered to GEMM via
/// im2col.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    /// im2col matrix, `(in·k·k) × (out_h·out_w)`.
    cols: Vec<T>,
    in_height: usize,
    in_width: usize,
}

impl Conv2d {
    /// Registers `<name>.weight` and `<name>.bias`; weights ~ N(0, std²)
    /// where `std` defaults to He initialization when `None`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: Option<f64>,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = std.unwrap_or_else(|| (2.0 / fan_in as f64).sqrt());
        let normal = Normal::new(0.0, std).expect("valid std");
        let weight = Tensor {
            shape: vec![out_channels, in_channels, kernel, kernel],
            data: (0..out_channels * fan_in)
                .map(|_| T::of(normal.sample(rng)))
                .collect(),
        };
        let weight = params.insert(format!("{name}.weight"), weight);
        let bias = params.insert(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        }
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col<T: Real>(&self, x: &FeatureMap<T>, oh: usize, ow: usize) -> Vec<T> {
        if self.is_pointwise() {
            return x.data.clone();
        }
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let (h, w) = (x.height as isize, x.width as isize);
        let npix = oh * ow;
        let mut cols = vec![T::zero(); self.in_channels * k * k * npix];
        for ci in 0..self.in_channels {
            let plane = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * npix..(row + 1) * npix];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src = &plane[(iy as usize) * x.width..(iy as usize + 1) * x.width];
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize) -> FeatureMap<T> {
        if self.is_pointwise() {
            return FeatureMap::from_vec(self.in_channels, h, w, cols.to_vec());
        }
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let npix = oh * ow;
        let mut dx = FeatureMap::zeros(self.in_channels, h, w);
        for ci in 0..self.in_channels {
            let plane = &mut dx.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * npix..(row + 1) * npix];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<T: Real>(
        &self,
        params: &ParamSet<T>,
        x: &FeatureMap<T>,
    ) -> (FeatureMap<T>, ConvCache<T>) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (oh, ow) = (self.out_size(x.height), self.out_size(x.width));
        let cols = self.im2col(x, oh, ow);
        let kdim = self.in_channels * self.kernel * self.kernel;
        let npix = oh * ow;
        let mut out = FeatureMap::zeros(self.out_channels, oh, ow);
        gemm(
            self.out_channels,
            kdim,
            npix,
            &params.get(self.weight).data,
            false,
            &cols,
            false,
            &mut out.data,
            false,
        );
        let bias = &params.get(self.bias).data;
        for (co, &b) in bias.iter().enumerate() {
            for v in &mut out.data[co * npix..(co + 1) * npix] {
                *v += b;
            }
        }
        let cache = ConvCache {
            cols,
            in_height: x.height,
            in_width: x.width,
        };
        (out, cache)
    }

    /// Accumulates weight/bias gradients into `grads` and returns the input
    /// gradient when `want_input_grad`.
    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        grads: &mut ParamSet<T>,
        cache: &ConvCache<T>,
        dy: &FeatureMap<T>,
        want_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let (oh, ow) = (dy.height, dy.width);
        let npix = oh * ow;
        let kdim = self.in_channels * self.kernel * self.kernel;
        assert_eq!(dy.channels, self.out_channels);
        gemm(
            self.out_channels,
            npix,
            kdim,
            &dy.data,
            false,
            &cache.cols,
            true,
            &mut grads.get_mut(self.weight).data,
            true,
        );
        let db = &mut grads.get_mut(self.bias).data;
        for (co, b) in db.iter_mut().enumerate() {
            *b += dy.data[co * npix..(co + 1) * npix].iter().copied().sum::<T>();
        }
        if !want_input_grad {
            return None;
        }
        let mut dcols = vec![T::zero(); kdim * npix];
        gemm(
            kdim,
            self.out_channels,
            npix,
            &params.get(self.weight).data,
            true,
            &dy.data,
            false,
            &mut dcols,
            false,
        );
        Some(self.col2im(&dcols, cache.in_height, cache.in_width, oh, ow))
    }
}

/// Fully connected layer over a row-major batch `n × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        std: Option<f64>,
        rng: &mut R,
    ) -> Self {
        let std = std.unwrap_or_else(|| (2.0 / in_features as f64).sqrt());
        let weight = Self::init_weight(in_features, out_features, std, rng);
        let weight = params.insert(format!("{name}.weight"), weight);
        let bias = params.insert(format!("{name}.bias"), Tensor::zeros(&[out_features]));
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn init_weight<T: Real, R: Rng + ?Sized>(
        in_features: usize,
        out_features: usize,
        std: f64,
        rng: &mut R,
    ) -> Tensor<T> {
        let normal = Normal::new(0.0, std).expect("valid std");
        Tensor {
            shape: vec![out_features, in_features],
            data: (0..out_features * in_features)
                .map(|_| T::of(normal.sample(rng)))
                .collect(),
        }
    }

    pub fn forward<T: Real>(&self, params: &ParamSet<T>, x: &[T], n: usize) -> Vec<T> {
        assert_eq!(x.len(), n * self.in_features, "linear input size");
        let mut y = vec![T::zero(); n * self.out_features];
        gemm(
            n,
            self.in_features,
            self.out_features,
            x,
            false,
            &params.get(self.weight).data,
            true,
            &mut y,
            false,
        );
        let bias = &params.get(self.bias).data;
        for row in y.chunks_mut(self.out_features) {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        y
    }

    /// `x` is the forward input. Returns `dx` when requested.
    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        grads: &mut ParamSet<T>,
        x: &[T],
        dy: &[T],
        n: usize,
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        assert_eq!(dy.len(), n * self.out_features);
        gemm(
            self.out_features,
            n,
            self.in_features,
            dy,
            true,
            x,
            false,
            &mut grads.get_mut(self.weight).data,
            true,
        );
        let db = &mut grads.get_mut(self.bias).data;
        for row in dy.chunks(self.out_features) {
            for (b, &g) in db.iter_mut().zip(row) {
                *b += g;
            }
        }
        if !want_input_grad {
            return None;
        }
        let mut dx = vec![T::zero(); n * self.in_features];
        gemm(
            n,
            self.out_features,
            self.in_features,
            dy,
            false,
            &params.get(self.weight).data,
            false,
            &mut dx,
            false,
        );
        Some(dx)
    }
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` by the post-activation output `y`.
pub fn relu_backward<T: Real>(dy: &mut [T], y: &[T]) {
    for (g, &v) in dy.iter_mut().zip(y) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2x<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.plane(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.width + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Real>(dy: &FeatureMap<T>) -> FeatureMap<T> {
    let (h, w) = (dy.height / 2, dy.width / 2);
    let mut dx = FeatureMap::zeros(dy.channels, h, w);
    for c in 0..dy.channels {
        let src = dy.plane(c);
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for y in 0..dy.height {
            for x in 0..dy.width {
                dst[(y / 2) * w + x / 2] += src[y * dy.width + x];
            }
        }
    }
    dx
}

/// Stride-2 subsampling (a 1×1 max-pool with stride 2), used for the
/// coarsest pyramid level.
pub fn subsample2x<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let (h, w) = (x.height.div_ceil(2), x.width.div_ceil(2));
    let mut out = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.plane(c);
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = src[(2 * y) * x.width + 2 * xx];
            }
        }
    }
    out
}

pub fn subsample2x_backward<T: Real>(dy: &FeatureMap<T>, in_h: usize, in_w: usize) -> FeatureMap<T> {
    let mut dx = FeatureMap::zeros(dy.channels, in_h, in_w);
    for c in 0..dy.channels {
        for y in 0..dy.height {
            for x in 0..dy.width {
                dx.data[(c * in_h + 2 * y) * in_w + 2 * x] = dy.at(c, y, x);
            }
        }
    }
    dx
}
