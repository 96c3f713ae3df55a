use super::{FeatureMap, Real};

/// One bilinear/averaging tap: output bin `bin` reads spatial position `pos`
/// (flattened `y * width + x`) with weight `weight`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoolTap {
    pub bin: usize,
    pub pos: usize,
    pub weight: f64,
}

/// A sparse linear map from one feature-map plane to `out × out` bins,
/// applied identically to every channel. RoI-Align and adaptive average
/// pooling are both expressed this way, so their backward pass is the
/// transpose of the same tap list.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolPlan {
    pub out: usize,
    pub map_height: usize,
    pub map_width: usize,
    pub taps: Vec<PoolTap>,
}

impl PoolPlan {
    /// RoI-Align (half-pixel aligned) of `roi = [x1, y1, x2, y2]` given in
    /// input-image pixels, on a map with the given `spatial_scale`
    /// (`1 / stride`), with `sampling × sampling` points per bin.
    pub fn roi_align(
        map_height: usize,
        map_width: usize,
        roi: [f64; 4],
        spatial_scale: f64,
        out: usize,
        sampling: usize,
    ) -> Self {
        let x0 = roi[0] * spatial_scale - 0.5;
        let y0 = roi[1] * spatial_scale - 0.5;
        let roi_w = (roi[2] - roi[0]) * spatial_scale;
        let roi_h = (roi[3] - roi[1]) * spatial_scale;
        let bin_w = roi_w / out as f64;
        let bin_h = roi_h / out as f64;
        let norm = 1.0 / (sampling * sampling) as f64;
        let mut taps = Vec::with_capacity(out * out * sampling * sampling * 4);
        for by in 0..out {
            for bx in 0..out {
                let bin = by * out + bx;
                for sy in 0..sampling {
                    let y = y0 + by as f64 * bin_h + (sy as f64 + 0.5) * bin_h / sampling as f64;
                    for sx in 0..sampling {
                        let x = x0 + bx as f64 * bin_w + (sx as f64 + 0.5) * bin_w / sampling as f64;
                        bilinear_taps(map_height, map_width, y, x, norm, bin, &mut taps);
                    }
                }
            }
        }
        Self {
            out,
            map_height,
            map_width,
            taps,
        }
    }

    /// Adaptive average pooling of the top-left `region_h × region_w` block
    /// of the map down to `out × out` bins. Bin `i` spans
    /// `[floor(i·n/out), ceil((i+1)·n/out))` along each axis.
    pub fn adaptive_avg(
        map_height: usize,
        map_width: usize,
        region_h: usize,
        region_w: usize,
        out: usize,
    ) -> Self {
        assert!(region_h >= 1 && region_w >= 1 && region_h <= map_height && region_w <= map_width);
        let span = |i: usize, n: usize| ((i * n) / out, ((i + 1) * n).div_ceil(out));
        let mut taps = Vec::new();
        for by in 0..out {
            let (ys, ye) = span(by, region_h);
            for bx in 0..out {
                let (xs, xe) = span(bx, region_w);
                let weight = 1.0 / ((ye - ys) * (xe - xs)) as f64;
                for y in ys..ye {
                    for x in xs..xe {
                        taps.push(PoolTap {
                            bin: by * out + bx,
                            pos: y * map_width + x,
                            weight,
                        });
                    }
                }
            }
        }
        Self {
            out,
            map_height,
            map_width,
            taps,
        }
    }

    pub fn bins(&self) -> usize {
        self.out * self.out
    }

    /// Output laid out channel-major: `channels × out × out`.
    pub fn apply<T: Real>(&self, map: &FeatureMap<T>) -> Vec<T> {
        assert_eq!((map.height, map.width), (self.map_height, self.map_width));
        let bins = self.bins();
        let mut out = vec![T::zero(); map.channels * bins];
        let taps: Vec<(usize, usize, T)> = self
            .taps
            .iter()
            .map(|t| (t.bin, t.pos, T::of(t.weight)))
            .collect();
        for c in 0..map.channels {
            let plane = map.plane(c);
            let dst = &mut out[c * bins..(c + 1) * bins];
            for &(bin, pos, w) in &taps {
                dst[bin] += w * plane[pos];
            }
        }
        out
    }

    /// Scatter-adds the gradient of `apply` into `dmap`.
    pub fn backprop<T: Real>(&self, dout: &[T], dmap: &mut FeatureMap<T>) {
        assert_eq!((dmap.height, dmap.width), (self.map_height, self.map_width));
        let bins = self.bins();
        assert_eq!(dout.len(), dmap.channels * bins);
        let hw = self.map_height * self.map_width;
        let taps: Vec<(usize, usize, T)> = self
            .taps
            .iter()
            .map(|t| (t.bin, t.pos, T::of(t.weight)))
            .collect();
        for c in 0..dmap.channels {
            let src = &dout[c * bins..(c + 1) * bins];
            let dst = &mut dmap.data[c * hw..(c + 1) * hw];
            for &(bin, pos, w) in &taps {
                dst[pos] += w * src[bin];
            }
        }
    }
}

fn bilinear_taps(
    height: usize,
    width: usize,
    mut y: f64,
    mut x: f64,
    scale: f64,
    bin: usize,
    taps: &mut Vec<PoolTap>,
) {
    let (h, w) = (height as f64, width as f64);
    if y < -1.0 || y > h || x < -1.0 || x > w {
        return;
    }
    y = y.max(0.0);
    x = x.max(0.0);
    let mut y_low = y.floor() as usize;
    let mut x_low = x.floor() as usize;
    let y_high;
    let x_high;
    if y_low >= height - 1 {
        y_low = height - 1;
        y_high = y_low;
        y = y_low as f64;
    } else {
        y_high = y_low + 1;
    }
    if x_low >= width - 1 {
        x_low = width - 1;
        x_high = x_low;
        x = x_low as f64;
    } else {
        x_high = x_low + 1;
    }
    let ly = y - y_low as f64;
    let lx = x - x_low as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (pos, wgt) in [
        (y_low * width + x_low, hy * hx),
        (y_low * width + x_high, hy * lx),
        (y_high * width + x_low, ly * hx),
        (y_high * width + x_high, ly * lx),
    ] {
        if wgt != 0.0 {
            taps.push(PoolTap {
                bin,
                pos,
                weight: wgt * scale,
            });
        }
    }
}
