//! Differentiable building blocks with explicit forward caches and
//! hand-written backward passes.

use super::{matmul, matmul_views, Init, Mat, ParamId, ParamLayout, ParamSet, Scalar, Tensor, View};

fn sigmoid<T: Scalar>(x: T) -> T {
    x.sigmoid()
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

/// Backward of SiLU given its input.
pub fn silu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * (s + v * s * (T::one() - s))
        })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        layout: &mut ParamLayout,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        zero_init: bool,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let winit = if zero_init { Init::Zeros } else { Init::FanIn(fan_in) };
        Self {
            weight: layout.add(format!("{name}.weight"), &[cout, cin, kernel, kernel], winit),
            bias: layout.add(format!("{name}.bias"), &[cout], Init::Zeros),
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad` is in bounds.
    fn valid_cols(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = (self.pad.saturating_sub(kx) + s - 1) / s;
        let hi = ((w + self.pad - kx + s - 1) / s).min(wo);
        (lo.min(hi), hi)
    }

    fn im2col<T: Scalar>(&self, x: &[T], h: usize, w: usize, col: &mut [T]) {
        let (ho, wo) = self.out_dims(h, w);
        let (k, s) = (self.kernel, self.stride);
        for c in 0..self.cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((c * k + ky) * k + kx) * ho * wo..][..ho * wo];
                    let (lo, hi) = self.valid_cols(kx, w, wo);
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        let ix0 = lo * s + kx - self.pad;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (ho, wo) = self.out_dims(h, w);
        let (k, s) = (self.kernel, self.stride);
        for c in 0..self.cin {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((c * k + ky) * k + kx) * ho * wo..][..ho * wo];
                    let (lo, hi) = self.valid_cols(kx, w, wo);
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src = &row[oy * wo..(oy + 1) * wo];
                        let ix0 = lo * s + kx - self.pad;
                        for j in 0..hi - lo {
                            let d = &mut dst[ix0 + j * s];
                            *d = *d + src[lo + j];
                        }
                    }
                }
            }
        }
    }

    /// Stride-1 kernels larger than 1x1 run as one GEMM per kernel tap over
    /// a zero-padded copy of the input, skipping im2col.
    fn is_shifted(&self) -> bool {
        self.stride == 1 && self.kernel > 1
    }

    /// Zero-padded planes `[cin, (h + 2p) * (w + 2p)]` plus `k - 1` trailing
    /// zeros so every shifted view stays in bounds.
    fn pad_input<T: Scalar>(&self, x: &[T], h: usize, w: usize) -> Vec<T> {
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        let mut xp = vec![T::zero(); self.cin * hp * wp + self.kernel - 1];
        for c in 0..self.cin {
            for r in 0..h {
                let dst = c * hp * wp + (r + self.pad) * wp + self.pad;
                xp[dst..dst + w].copy_from_slice(&x[(c * h + r) * w..(c * h + r + 1) * w]);
            }
        }
        xp
    }

    fn tap_view(&self, ky: usize, kx: usize) -> View {
        let kk = self.kernel * self.kernel;
        View::new(ky * self.kernel + kx, self.cout, self.cin, self.cin * kk, kk)
    }

    fn forward_shifted<T: Scalar>(&self, wt: &[T], b: &[T], x: &Tensor<T>) -> Tensor<T> {
        let (n, _, h, w) = x.dims4();
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        let k = self.kernel;
        let mut y = Tensor::zeros(&[n, self.cout, h, w]);
        // outputs on an h x wp grid; the last 2p columns of each row are discarded
        let mut wide = vec![T::zero(); self.cout * h * wp];
        for i in 0..n {
            let xp = self.pad_input(x.item(i), h, w);
            for ky in 0..k {
                for kx in 0..k {
                    let first = ky == 0 && kx == 0;
                    matmul_views(
                        wt,
                        self.tap_view(ky, kx),
                        &xp,
                        View::new(ky * wp + kx, self.cin, h * wp, hp * wp, 1),
                        &mut wide,
                        View::new(0, self.cout, h * wp, h * wp, 1),
                        !first,
                    );
                }
            }
            let yi = y.item_mut(i);
            for o in 0..self.cout {
                for r in 0..h {
                    let src = &wide[(o * h + r) * wp..(o * h + r) * wp + w];
                    for (d, &v) in yi[(o * h + r) * w..(o * h + r + 1) * w].iter_mut().zip(src) {
                        *d = v + b[o];
                    }
                }
            }
        }
        y
    }

    fn backward_shifted<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>, gy: &Tensor<T>, g: &mut ParamSet<T>) -> Tensor<T> {
        let (n, _, h, w) = x.dims4();
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        let k = self.kernel;
        let wt = p.get(self.weight).data().to_vec();
        let mut dx = Tensor::zeros(x.shape());
        let mut wide = vec![T::zero(); self.cout * h * wp];
        for i in 0..n {
            let gyi = gy.item(i);
            {
                let db = g.get_mut(self.bias).data_mut();
                for (o, d) in db.iter_mut().enumerate() {
                    *d = *d + gyi[o * h * w..(o + 1) * h * w].iter().copied().sum::<T>();
                }
            }
            for o in 0..self.cout {
                for r in 0..h {
                    let row = &mut wide[(o * h + r) * wp..(o * h + r + 1) * wp];
                    row[..w].copy_from_slice(&gyi[(o * h + r) * w..(o * h + r + 1) * w]);
                }
            }
            let xp = self.pad_input(x.item(i), h, w);
            let mut dxp = vec![T::zero(); xp.len()];
            for ky in 0..k {
                for kx in 0..k {
                    let shifted = View::new(ky * wp + kx, self.cin, h * wp, hp * wp, 1);
                    let gwide = View::new(0, self.cout, h * wp, h * wp, 1);
                    let tap = self.tap_view(ky, kx);
                    // dW_tap += gy_wide * x_shifted^T
                    let xt = View::new(shifted.offset, h * wp, self.cin, 1, hp * wp);
                    matmul_views(&wide, gwide, &xp, xt, g.get_mut(self.weight).data_mut(), tap, true);
                    // dx_shifted += W_tap^T * gy_wide
                    let tap_t = View::new(tap.offset, self.cin, self.cout, tap.cs, tap.rs);
                    matmul_views(&wt, tap_t, &wide, gwide, &mut dxp, shifted, true);
                }
            }
            let dxi = dx.item_mut(i);
            for c in 0..self.cin {
                for r in 0..h {
                    let src = c * hp * wp + (r + self.pad) * wp + self.pad;
                    dxi[(c * h + r) * w..(c * h + r + 1) * w].copy_from_slice(&dxp[src..src + w]);
                }
            }
        }
        dx
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.cin, "conv input channels");
        let (ho, wo) = self.out_dims(h, w);
        let ckk = self.cin * self.kernel * self.kernel;
        let wt = p.get(self.weight).data();
        let b = p.get(self.bias).data();
        if self.is_shifted() {
            return self.forward_shifted(wt, b, x);
        }
        let mut y = Tensor::zeros(&[n, self.cout, ho, wo]);
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * ho * wo] };
        for i in 0..n {
            let yi = y.item_mut(i);
            for (o, &bo) in b.iter().enumerate() {
                yi[o * ho * wo..(o + 1) * ho * wo].fill(bo);
            }
            let src: &[T] = if self.is_pointwise() {
                x.item(i)
            } else {
                self.im2col(x.item(i), h, w, &mut col);
                &col
            };
            matmul(Mat::new(wt, self.cout, ckk), Mat::new(src, ckk, ho * wo), yi, true);
        }
        y
    }

    /// Accumulates parameter gradients into `g` and returns the input gradient.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        g: &mut ParamSet<T>,
    ) -> Tensor<T> {
        if self.is_shifted() {
            return self.backward_shifted(p, x, gy, g);
        }
        let (n, _, h, w) = x.dims4();
        let (ho, wo) = self.out_dims(h, w);
        let ckk = self.cin * self.kernel * self.kernel;
        let wt = p.get(self.weight).data().to_vec();
        let mut dx = Tensor::zeros(x.shape());
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * ho * wo] };
        let mut dcol = vec![T::zero(); ckk * ho * wo];
        for i in 0..n {
            let gyi = gy.item(i);
            {
                let db = g.get_mut(self.bias).data_mut();
                for (o, d) in db.iter_mut().enumerate() {
                    *d = *d + gyi[o * ho * wo..(o + 1) * ho * wo].iter().copied().sum::<T>();
                }
            }
            let src: &[T] = if self.is_pointwise() {
                x.item(i)
            } else {
                self.im2col(x.item(i), h, w, &mut col);
                &col
            };
            matmul(
                Mat::new(gyi, self.cout, ho * wo),
                Mat::t(src, ckk, ho * wo),
                g.get_mut(self.weight).data_mut(),
                true,
            );
            if self.is_pointwise() {
                matmul(Mat::t(&wt, self.cout, ckk), Mat::new(gyi, self.cout, ho * wo), dx.item_mut(i), false);
            } else {
                matmul(Mat::t(&wt, self.cout, ckk), Mat::new(gyi, self.cout, ho * wo), &mut dcol, false);
                self.col2im(&dcol, h, w, dx.item_mut(i));
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, din: usize, dout: usize) -> Self {
        Self {
            weight: layout.add(format!("{name}.weight"), &[dout, din], Init::FanIn(din)),
            bias: layout.add(format!("{name}.bias"), &[dout], Init::Zeros),
            din,
            dout,
        }
    }

    /// `x: [N, din] -> [N, dout]`
    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Tensor<T> {
        let n = x.shape()[0];
        let b = p.get(self.bias).data();
        let mut y = Tensor::zeros(&[n, self.dout]);
        for i in 0..n {
            y.item_mut(i).copy_from_slice(b);
        }
        matmul(
            Mat::new(x.data(), n, self.din),
            Mat::t(p.get(self.weight).data(), self.dout, self.din),
            y.data_mut(),
            true,
        );
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        g: &mut ParamSet<T>,
    ) -> Tensor<T> {
        let n = x.shape()[0];
        {
            let db = g.get_mut(self.bias).data_mut();
            for i in 0..n {
                for (d, &v) in db.iter_mut().zip(gy.item(i)) {
                    *d = *d + v;
                }
            }
        }
        matmul(
            Mat::t(gy.data(), n, self.dout),
            Mat::new(x.data(), n, self.din),
            g.get_mut(self.weight).data_mut(),
            true,
        );
        let mut dx = Tensor::zeros(x.shape());
        matmul(
            Mat::new(gy.data(), n, self.dout),
            Mat::new(p.get(self.weight).data(), self.dout, self.din),
            dx.data_mut(),
            false,
        );
        dx
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

pub struct GroupNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

const GN_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "{name}: {channels} channels not divisible into {groups} groups");
        Self {
            gamma: layout.add(format!("{name}.gamma"), &[channels], Init::Ones),
            beta: layout.add(format!("{name}.beta"), &[channels], Init::Zeros),
            channels,
            groups,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> (Tensor<T>, GroupNormCache<T>) {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.channels);
        let per_group = c / self.groups * h * w;
        let gamma = p.get(self.gamma).data();
        let beta = p.get(self.beta).data();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(n * self.groups);
        for i in 0..n {
            let xi = x.item(i);
            for gi in 0..self.groups {
                let range = gi * per_group..(gi + 1) * per_group;
                let seg = &xi[range.clone()];
                let mean = seg.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / per_group as f64;
                let var = seg
                    .iter()
                    .map(|v| {
                        let d = v.to_f64().unwrap() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / per_group as f64;
                let istd = 1.0 / (var + GN_EPS).sqrt();
                inv_std.push(T::of(istd));
                let (mean_t, istd_t) = (T::of(mean), T::of(istd));
                let xh = &mut xhat.item_mut(i)[range.clone()];
                for (d, &v) in xh.iter_mut().zip(seg) {
                    *d = (v - mean_t) * istd_t;
                }
            }
            let xh = xhat.item(i);
            let yi = y.item_mut(i);
            for ch in 0..c {
                for k in ch * h * w..(ch + 1) * h * w {
                    yi[k] = xh[k] * gamma[ch] + beta[ch];
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        cache: &GroupNormCache<T>,
        gy: &Tensor<T>,
        g: &mut ParamSet<T>,
    ) -> Tensor<T> {
        let (n, c, h, w) = gy.dims4();
        let hw = h * w;
        let cpg = c / self.groups;
        let per_group = cpg * hw;
        let gamma = p.get(self.gamma).data().to_vec();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = Tensor::zeros(gy.shape());
        let mut dxhat = vec![T::zero(); c * hw];
        for i in 0..n {
            let gyi = gy.item(i);
            let xh = cache.xhat.item(i);
            for ch in 0..c {
                let r = ch * hw..(ch + 1) * hw;
                let mut sg = T::zero();
                let mut sgx = T::zero();
                for k in r.clone() {
                    sg = sg + gyi[k];
                    sgx = sgx + gyi[k] * xh[k];
                    dxhat[k] = gyi[k] * gamma[ch];
                }
                dbeta[ch] = dbeta[ch] + sg;
                dgamma[ch] = dgamma[ch] + sgx;
            }
            let dxi = dx.item_mut(i);
            for gi in 0..self.groups {
                let r = gi * per_group..(gi + 1) * per_group;
                let m = T::of(per_group as f64);
                let mean_d: T = dxhat[r.clone()].iter().copied().sum::<T>() / m;
                let mean_dx: T = r.clone().map(|k| dxhat[k] * xh[k]).sum::<T>() / m;
                let istd = cache.inv_std[i * self.groups + gi];
                for k in r {
                    dxi[k] = istd * (dxhat[k] - mean_d - xh[k] * mean_dx);
                }
            }
        }
        for (a, b) in g.get_mut(self.gamma).data_mut().iter_mut().zip(dgamma) {
            *a = *a + b;
        }
        for (a, b) in g.get_mut(self.beta).data_mut().iter_mut().zip(dbeta) {
            *a = *a + b;
        }
        dx
    }
}

/// Multi-head self-attention over the spatial positions of a feature map,
/// with a pre-normalization and a residual connection.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub norm: GroupNorm,
    pub qkv: Conv2d,
    pub proj: Conv2d,
    pub channels: usize,
    pub heads: usize,
}

pub struct AttentionCache<T> {
    x: Tensor<T>,
    norm: GroupNormCache<T>,
    normed: Tensor<T>,
    qkv: Tensor<T>,
    /// Softmax probabilities, `[N, heads, L, L]`.
    probs: Vec<T>,
    mixed: Tensor<T>,
}

impl SpatialAttention {
    pub fn new(layout: &mut ParamLayout, name: &str, channels: usize, heads: usize, groups: usize) -> Self {
        assert_eq!(channels % heads, 0, "{name}: heads must divide channels");
        Self {
            norm: GroupNorm::new(layout, &format!("{name}.norm"), channels, groups),
            qkv: Conv2d::new(layout, &format!("{name}.qkv"), channels, 3 * channels, 1, 1, false),
            proj: Conv2d::new(layout, &format!("{name}.proj"), channels, channels, 1, 1, false),
            channels,
            heads,
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> (Tensor<T>, AttentionCache<T>) {
        let (n, c, h, w) = x.dims4();
        let l = h * w;
        let d = c / self.heads;
        let scale = T::of(1.0 / (d as f64).sqrt());
        let (normed, norm_cache) = self.norm.forward(p, x);
        let qkv = self.qkv.forward(p, &normed);
        let mut probs = vec![T::zero(); n * self.heads * l * l];
        let mut mixed = Tensor::zeros(&[n, c, h, w]);
        for i in 0..n {
            let qkv_i = qkv.item(i);
            for hd in 0..self.heads {
                let q = &qkv_i[hd * d * l..(hd + 1) * d * l];
                let k = &qkv_i[(c + hd * d) * l..(c + (hd + 1) * d) * l];
                let v = &qkv_i[(2 * c + hd * d) * l..(2 * c + (hd + 1) * d) * l];
                let pm = &mut probs[(i * self.heads + hd) * l * l..][..l * l];
                // scores[i, j] = q[:, i] . k[:, j]
                matmul(Mat::t(q, d, l), Mat::new(k, d, l), pm, false);
                for row in pm.chunks_mut(l) {
                    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b * scale));
                    let mut s = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v * scale - mx).exp_fast();
                        s = s + *v;
                    }
                    for v in row.iter_mut() {
                        *v = *v / s;
                    }
                }
                // out[:, i] = sum_j v[:, j] P[i, j]
                let out = &mut mixed.item_mut(i)[hd * d * l..(hd + 1) * d * l];
                matmul(Mat::new(v, d, l), Mat::t(pm, l, l), out, false);
            }
        }
        let mut y = self.proj.forward(p, &mixed);
        y.add_assign(x);
        (
            y,
            AttentionCache {
                x: x.clone(),
                norm: norm_cache,
                normed,
                qkv,
                probs,
                mixed,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamSet<T>,
        cache: &AttentionCache<T>,
        gy: &Tensor<T>,
        g: &mut ParamSet<T>,
    ) -> Tensor<T> {
        let (n, c, h, w) = cache.x.dims4();
        let l = h * w;
        let d = c / self.heads;
        let scale = T::of(1.0 / (d as f64).sqrt());
        let dmixed = self.proj.backward(p, &cache.mixed, gy, g);
        let mut dqkv = Tensor::zeros(cache.qkv.shape());
        let mut dp = vec![T::zero(); l * l];
        for i in 0..n {
            let qkv_i = cache.qkv.item(i);
            for hd in 0..self.heads {
                let q = &qkv_i[hd * d * l..(hd + 1) * d * l];
                let k = &qkv_i[(c + hd * d) * l..(c + (hd + 1) * d) * l];
                let v = &qkv_i[(2 * c + hd * d) * l..(2 * c + (hd + 1) * d) * l];
                let pm = &cache.probs[(i * self.heads + hd) * l * l..][..l * l];
                let go = &dmixed.item(i)[hd * d * l..(hd + 1) * d * l];
                let dq_i = dqkv.item_mut(i);
                // dv = go * P
                matmul(Mat::new(go, d, l), Mat::new(pm, l, l), &mut dq_i[(2 * c + hd * d) * l..][..d * l], false);
                // dP = go^T v
                matmul(Mat::t(go, d, l), Mat::new(v, d, l), &mut dp, false);
                // softmax backward, folded with the score scale
                for (prow, drow) in pm.chunks(l).zip(dp.chunks_mut(l)) {
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv, &pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                // dq = k * dS^T ; dk = q * dS
                matmul(Mat::new(k, d, l), Mat::t(&dp, l, l), &mut dq_i[hd * d * l..][..d * l], false);
                matmul(Mat::new(q, d, l), Mat::new(&dp, l, l), &mut dq_i[(c + hd * d) * l..][..d * l], false);
            }
        }
        let dnormed = self.qkv.backward(p, &cache.normed, &dqkv, g);
        let mut dx = self.norm.backward(p, &cache.norm, &dnormed, g);
        dx.add_assign(gy);
        dx
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let mut y = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = y.data_mut();
    for plane in 0..n * c {
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                dst[plane * 4 * h * w + yy * 2 * w + xx] = src[plane * h * w + (yy / 2) * w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Scalar>(gy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h2, w2) = gy.dims4();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let src = gy.data();
    let dst = dx.data_mut();
    for plane in 0..n * c {
        for yy in 0..h2 {
            for xx in 0..w2 {
                let k = plane * h * w + (yy / 2) * w + xx / 2;
                dst[k] = dst[k] + src[plane * h2 * w2 + yy * w2 + xx];
            }
        }
    }
    dx
}

/// Sinusoidal embedding of integer timesteps, `[N, dim]`.
pub fn timestep_embedding<T: Scalar>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[t.len(), dim]);
    for (i, &step) in t.iter().enumerate() {
        let row = out.item_mut(i);
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
            let arg = step as f64 * freq;
            row[j] = T::of(arg.sin());
            row[half + j] = T::of(arg.cos());
        }
    }
    out
}
