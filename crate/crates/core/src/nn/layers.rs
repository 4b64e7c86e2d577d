use rand::Rng;

use super::{join, sgemm, Module, Param, Tensor};

/// Fills `col` (`c*k*k` rows of `h*w`) with zero-padded shifted copies of `x`.
fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, col: &mut [f32]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            let dy = ki as isize - p;
            for kj in 0..k {
                let dx = kj as isize - p;
                let row = ((ci * k + ki) * k + kj) * hw;
                let dst = &mut col[row..row + hw];
                let x0 = (-dx).clamp(0, w as isize) as usize;
                let x1 = (w as isize - dx).clamp(x0 as isize, w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    drow[..x0].fill(0.0);
                    drow[x1..].fill(0.0);
                    let s0 = (x0 as isize + dx) as usize;
                    drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx`.
fn col2im(col: &[f32], c: usize, h: usize, w: usize, k: usize, dx: &mut [f32]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ki in 0..k {
            let dy = ki as isize - p;
            for kj in 0..k {
                let dxo = kj as isize - p;
                let row = ((ci * k + ki) * k + kj) * hw;
                let src = &col[row..row + hw];
                let x0 = (-dxo).clamp(0, w as isize) as usize;
                let x1 = (w as isize - dxo).clamp(x0 as isize, w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dxo) as usize;
                    let drow = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, s) in drow.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution with an odd square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: Param::he_normal(vec![out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: bias.then(|| Param::constant(vec![out_channels], 0.0)),
            input: None,
        }
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_channels, "conv input channels");
        let hw = x.plane();
        let kk = self.fan_in();
        let mut out = Tensor::zeros(x.n, self.out_channels, x.h, x.w);
        let mut col = if self.kernel == 1 {
            Vec::new()
        } else {
            vec![0.0; kk * hw]
        };
        for i in 0..x.n {
            let src = x.image(i);
            let b: &[f32] = if self.kernel == 1 {
                src
            } else {
                im2col(src, x.c, x.h, x.w, self.kernel, &mut col);
                &col
            };
            let dst = out.image_mut(i);
            sgemm(
                self.out_channels,
                kk,
                hw,
                &self.weight.value,
                kk,
                1,
                b,
                hw,
                1,
                0.0,
                dst,
            );
            if let Some(bias) = &self.bias {
                for (o, &bv) in bias.value.iter().enumerate() {
                    for v in &mut dst[o * hw..(o + 1) * hw] {
                        *v += bv;
                    }
                }
            }
        }
        out
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let out = self.forward(x);
        self.input = Some(x.clone());
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("conv backward without forward_train");
        let hw = x.plane();
        let kk = self.fan_in();
        let mut dx = x.zeros_like();
        let mut col = vec![0.0; if self.kernel == 1 { 0 } else { kk * hw }];
        let mut dcol = vec![0.0; kk * hw];
        for i in 0..x.n {
            let g = dy.image(i);
            let src = x.image(i);
            let b: &[f32] = if self.kernel == 1 {
                src
            } else {
                im2col(src, x.c, x.h, x.w, self.kernel, &mut col);
                &col
            };
            // dW += dY * col^T
            sgemm(
                self.out_channels,
                hw,
                kk,
                g,
                hw,
                1,
                b,
                1,
                hw,
                1.0,
                &mut self.weight.grad,
            );
            if let Some(bias) = &mut self.bias {
                for (o, gb) in bias.grad.iter_mut().enumerate() {
                    *gb += g[o * hw..(o + 1) * hw].iter().sum::<f32>();
                }
            }
            // dcol = W^T * dY
            sgemm(
                kk,
                self.out_channels,
                hw,
                &self.weight.value,
                1,
                kk,
                g,
                hw,
                1,
                0.0,
                &mut dcol,
            );
            let dxi = dx.image_mut(i);
            if self.kernel == 1 {
                dxi.copy_from_slice(&dcol);
            } else {
                col2im(&dcol, x.c, x.h, x.w, self.kernel, dxi);
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Per-channel batch normalisation with running statistics for inference.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f32,
    pub eps: f32,
    cache: Option<(Vec<f32>, Vec<f32>)>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::constant(vec![channels], 1.0),
            beta: Param::constant(vec![channels], 0.0),
            running_mean: Param::buffer(vec![channels], 0.0),
            running_var: Param::buffer(vec![channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.channels);
        let mut y = x.clone();
        let p = x.plane();
        for c in 0..self.channels {
            let inv = 1.0 / (self.running_var.value[c] + self.eps).sqrt();
            let scale = self.gamma.value[c] * inv;
            let shift = self.beta.value[c] - self.running_mean.value[c] * scale;
            for i in 0..x.n {
                let o = (i * x.c + c) * p;
                for v in &mut y.data[o..o + p] {
                    *v = *v * scale + shift;
                }
            }
        }
        y
    }

    /// Normalises with batch statistics and updates the running averages.
    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.channels);
        let p = x.plane();
        let m = (x.n * p) as f64;
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut inv_std = vec![0.0f32; self.channels];
        let mut y = x.zeros_like();
        for c in 0..self.channels {
            let mut sum = 0.0f64;
            for i in 0..x.n {
                sum += x.channel(i, c).iter().map(|&v| v as f64).sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0f64;
            for i in 0..x.n {
                sq += x
                    .channel(i, c)
                    .iter()
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>();
            }
            let var = sq / m;
            let inv = 1.0 / (var + self.eps as f64).sqrt();
            inv_std[c] = inv as f32;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for i in 0..x.n {
                let o = (i * x.c + c) * p;
                for j in o..o + p {
                    let h = ((x.data[j] as f64 - mean) * inv) as f32;
                    xhat[j] = h;
                    y.data[j] = g * h + b;
                }
            }
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            let mo = self.momentum;
            self.running_mean.value[c] = (1.0 - mo) * self.running_mean.value[c] + mo * mean as f32;
            self.running_var.value[c] = (1.0 - mo) * self.running_var.value[c] + mo * unbiased as f32;
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("batchnorm backward without forward_train");
        let p = dy.plane();
        let m = (dy.n * p) as f64;
        let mut dx = dy.zeros_like();
        for c in 0..self.channels {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for i in 0..dy.n {
                let o = (i * dy.c + c) * p;
                for j in o..o + p {
                    sum_dy += dy.data[j] as f64;
                    sum_dy_xhat += dy.data[j] as f64 * xhat[j] as f64;
                }
            }
            self.gamma.grad[c] += sum_dy_xhat as f32;
            self.beta.grad[c] += sum_dy as f32;
            let g = self.gamma.value[c] as f64;
            let k = g * inv_std[c] as f64 / m;
            for i in 0..dy.n {
                let o = (i * dy.c + c) * p;
                for j in o..o + p {
                    dx.data[j] =
                        (k * (m * dy.data[j] as f64 - sum_dy - xhat[j] as f64 * sum_dy_xhat)) as f32;
                }
            }
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }
}

fn relu_inplace(t: &mut Tensor) {
    for v in &mut t.data {
        *v = v.max(0.0);
    }
}

fn relu_backward(out: &Tensor, dy: &mut Tensor) {
    for (g, &y) in dy.data.iter_mut().zip(&out.data) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Convolution followed by optional batch norm and optional ReLU. Without
/// normalisation the convolution carries a bias.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm2d>,
    pub relu: bool,
    out: Option<Tensor>,
}

impl ConvUnit {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        batch_norm: bool,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(in_channels, out_channels, kernel, !batch_norm, rng),
            bn: batch_norm.then(|| BatchNorm2d::new(out_channels)),
            relu,
            out: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = self.conv.forward(x);
        if let Some(bn) = &self.bn {
            y = bn.forward(&y);
        }
        if self.relu {
            relu_inplace(&mut y);
        }
        y
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut y = self.conv.forward_train(x);
        if let Some(bn) = &mut self.bn {
            y = bn.forward_train(&y);
        }
        if self.relu {
            relu_inplace(&mut y);
            self.out = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut g = dy.clone();
        if self.relu {
            let out = self.out.take().expect("unit backward without forward_train");
            relu_backward(&out, &mut g);
        }
        if let Some(bn) = &mut self.bn {
            g = bn.backward(&g);
        }
        self.conv.backward(&g)
    }
}

impl Module for ConvUnit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.conv.visit(&join(prefix, "conv"), f);
        if let Some(bn) = &self.bn {
            bn.visit(&join(prefix, "bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        if let Some(bn) = &mut self.bn {
            bn.visit_mut(&join(prefix, "bn"), f);
        }
    }
}

/// Two 3x3 convolutions with a shortcut: `relu(b(a(x)) + s(x))`, where `s`
/// is the identity or a 1x1 projection when channel counts differ.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub a: ConvUnit,
    pub b: ConvUnit,
    pub shortcut: Option<ConvUnit>,
    out: Option<Tensor>,
}

impl ResBlock {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, batch_norm: bool, rng: &mut R) -> Self {
        Self {
            a: ConvUnit::new(in_channels, out_channels, 3, batch_norm, true, rng),
            b: ConvUnit::new(out_channels, out_channels, 3, batch_norm, false, rng),
            shortcut: (in_channels != out_channels)
                .then(|| ConvUnit::new(in_channels, out_channels, 1, batch_norm, false, rng)),
            out: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = self.b.forward(&self.a.forward(x));
        match &self.shortcut {
            Some(s) => y.add_assign(&s.forward(x)),
            None => y.add_assign(x),
        }
        relu_inplace(&mut y);
        y
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let h = self.a.forward_train(x);
        let mut y = self.b.forward_train(&h);
        match &mut self.shortcut {
            Some(s) => y.add_assign(&s.forward_train(x)),
            None => y.add_assign(x),
        }
        relu_inplace(&mut y);
        self.out = Some(y.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let out = self.out.take().expect("block backward without forward_train");
        let mut g = dy.clone();
        relu_backward(&out, &mut g);
        let mut dx = self.a.backward(&self.b.backward(&g));
        match &mut self.shortcut {
            Some(s) => dx.add_assign(&s.backward(&g)),
            None => dx.add_assign(&g),
        }
        dx
    }
}

impl Module for ResBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.a.visit(&join(prefix, "a"), f);
        self.b.visit(&join(prefix, "b"), f);
        if let Some(s) = &self.shortcut {
            s.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.a.visit_mut(&join(prefix, "a"), f);
        self.b.visit_mut(&join(prefix, "b"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

/// 2x2 max pooling; also returns the winning offset (0..4) of each window.
pub fn maxpool2x2(x: &Tensor) -> (Tensor, Vec<u8>) {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "pooling needs even dims");
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u8; out.data.len()];
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        let base = nc * oh * ow;
        for y in 0..oh {
            let r0 = &src[2 * y * x.w..(2 * y + 1) * x.w];
            let r1 = &src[(2 * y + 1) * x.w..(2 * y + 2) * x.w];
            for xx in 0..ow {
                let cand = [r0[2 * xx], r0[2 * xx + 1], r1[2 * xx], r1[2 * xx + 1]];
                let mut best = 0;
                for (k, &v) in cand.iter().enumerate().skip(1) {
                    if v > cand[best] {
                        best = k;
                    }
                }
                out.data[base + y * ow + xx] = cand[best];
                arg[base + y * ow + xx] = best as u8;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2x2_backward(dy: &Tensor, arg: &[u8]) -> Tensor {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for nc in 0..dy.n * dy.c {
        let base = nc * dy.h * dy.w;
        let dst = &mut dx.data[nc * h * w..(nc + 1) * h * w];
        for y in 0..dy.h {
            for x in 0..dy.w {
                let k = arg[base + y * dy.w + x] as usize;
                let (r, c) = (2 * y + k / 2, 2 * x + k % 2);
                dst[r * w + c] = dy.data[base + y * dy.w + x];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        let dst = &mut out.data[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            let srow = &src[(y / 2) * x.w..(y / 2 + 1) * x.w];
            for (xx, d) in dst[y * w..(y + 1) * w].iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for nc in 0..dy.n * dy.c {
        let src = &dy.data[nc * dy.h * dy.w..(nc + 1) * dy.h * dy.w];
        let dst = &mut dx.data[nc * h * w..(nc + 1) * h * w];
        for y in 0..dy.h {
            for x in 0..dy.w {
                dst[(y / 2) * w + x / 2] += src[y * dy.w + x];
            }
        }
    }
    dx
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shapes");
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let dst = out.image_mut(i);
        let la = a.image_len();
        dst[..la].copy_from_slice(a.image(i));
        dst[la..].copy_from_slice(b.image(i));
    }
    out
}

/// Inverse of [`concat_channels`]: splits after the first `ca` channels.
pub fn split_channels(x: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let cb = x.c - ca;
    let mut a = Tensor::zeros(x.n, ca, x.h, x.w);
    let mut b = Tensor::zeros(x.n, cb, x.h, x.w);
    let p = x.plane();
    for i in 0..x.n {
        let src = x.image(i);
        a.image_mut(i).copy_from_slice(&src[..ca * p]);
        b.image_mut(i).copy_from_slice(&src[ca * p..]);
    }
    (a, b)
}

/// Per-pixel softmax across channels.
pub fn softmax_channels(x: &Tensor) -> Tensor {
    let mut out = x.zeros_like();
    let p = x.plane();
    let mut buf = vec![0f64; x.c];
    for i in 0..x.n {
        let src = x.image(i);
        let dst = out.image_mut(i);
        for j in 0..p {
            let mx = (0..x.c).map(|c| src[c * p + j]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for c in 0..x.c {
                buf[c] = ((src[c * p + j] - mx) as f64).exp();
                sum += buf[c];
            }
            for c in 0..x.c {
                dst[c * p + j] = (buf[c] / sum) as f32;
            }
        }
    }
    out
}

/// Gradient with respect to logits given probabilities and `dL/dprob`.
pub fn softmax_channels_backward(probs: &Tensor, dprobs: &Tensor) -> Tensor {
    let mut out = probs.zeros_like();
    let p = probs.plane();
    for i in 0..probs.n {
        let pr = probs.image(i);
        let g = dprobs.image(i);
        let dst = out.image_mut(i);
        for j in 0..p {
            let dot: f32 = (0..probs.c).map(|c| pr[c * p + j] * g[c * p + j]).sum();
            for c in 0..probs.c {
                dst[c * p + j] = pr[c * p + j] * (g[c * p + j] - dot);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * c * h * w).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
        Tensor::from_vec(n, c, h, w, data)
    }

    /// Direct nested-loop convolution.
    fn conv_naive(conv: &Conv2d, x: &Tensor) -> Tensor {
        let k = conv.kernel as isize;
        let p = k / 2;
        let mut out = Tensor::zeros(x.n, conv.out_channels, x.h, x.w);
        for n in 0..x.n {
            for o in 0..conv.out_channels {
                for y in 0..x.h as isize {
                    for xx in 0..x.w as isize {
                        let mut s = conv.bias.as_ref().map_or(0.0, |b| b.value[o]) as f64;
                        for c in 0..x.c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let (sy, sx) = (y + ki - p, xx + kj - p);
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let wi = ((o * x.c + c) * conv.kernel + ki as usize) * conv.kernel
                                        + kj as usize;
                                    s += conv.weight.value[wi] as f64
                                        * x.channel(n, c)[sy as usize * x.w + sx as usize] as f64;
                                }
                            }
                        }
                        let oi = ((n * conv.out_channels + o) * x.h + y as usize) * x.w + xx as usize;
                        out.data[oi] = s as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &k in &[1usize, 3, 5, 7] {
            let mut conv = Conv2d::new(3, 4, k, true, &mut rng);
            conv.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3, 0.0];
            let x = rand_tensor(2, 3, 6, 5, k as u64);
            let fast = conv.forward(&x);
            let slow = conv_naive(&conv, &x);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5, "k={k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let (c, h, w, k) = (2, 5, 4, 5);
        let x = rand_tensor(1, c, h, w, 3).data;
        let cv = rand_tensor(1, c * k * k, h, w, 4).data;
        let mut col = vec![0.0; c * k * k * h * w];
        im2col(&x, c, h, w, k, &mut col);
        let mut back = vec![0.0; c * h * w];
        col2im(&cv, c, h, w, k, &mut back);
        let lhs: f64 = col.iter().zip(&cv).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    fn loss_of(t: &Tensor, r: &Tensor) -> f64 {
        t.data.iter().zip(&r.data).map(|(a, b)| *a as f64 * *b as f64).sum()
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut conv = Conv2d::new(2, 3, 3, true, &mut rng);
        let x = rand_tensor(2, 2, 5, 4, 10);
        let r = rand_tensor(2, 3, 5, 4, 11);
        conv.forward_train(&x);
        let dx = conv.backward(&r);
        let eps = 1e-2f32;
        for idx in [0usize, 7, 19, 33] {
            let mut xp = x.clone();
            xp.data[idx] += eps;
            let mut xm = x.clone();
            xm.data[idx] -= eps;
            let fd = (loss_of(&conv.forward(&xp), &r) - loss_of(&conv.forward(&xm), &r)) / (2.0 * eps as f64);
            assert!((fd - dx.data[idx] as f64).abs() < 1e-3, "dx[{idx}]");
        }
        for idx in [0usize, 5, 26, 53] {
            let base = conv.weight.value[idx];
            conv.weight.value[idx] = base + eps;
            let lp = loss_of(&conv.forward(&x), &r);
            conv.weight.value[idx] = base - eps;
            let lm = loss_of(&conv.forward(&x), &r);
            conv.weight.value[idx] = base;
            let fd = (lp - lm) / (2.0 * eps as f64);
            assert!((fd - conv.weight.grad[idx] as f64).abs() < 1e-3, "dw[{idx}]");
        }
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::new(2);
        bn.gamma.value = vec![1.5, 0.7];
        let x = rand_tensor(3, 2, 3, 3, 12);
        let r = rand_tensor(3, 2, 3, 3, 13);
        bn.forward_train(&x);
        let dx = bn.backward(&r);
        let eps = 1e-2f32;
        for idx in [0usize, 4, 17, 40] {
            let mut xp = x.clone();
            xp.data[idx] += eps;
            let mut xm = x.clone();
            xm.data[idx] -= eps;
            let mut b2 = bn.clone();
            let lp = loss_of(&b2.forward_train(&xp), &r);
            let lm = loss_of(&b2.forward_train(&xm), &r);
            let fd = (lp - lm) / (2.0 * eps as f64);
            assert!((fd - dx.data[idx] as f64).abs() < 2e-3, "dx[{idx}] {fd} vs {}", dx.data[idx]);
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNorm2d::new(1);
        bn.running_mean.value = vec![2.0];
        bn.running_var.value = vec![4.0 - 1e-5];
        let x = Tensor::from_vec(1, 1, 1, 2, vec![2.0, 4.0]);
        let y = bn.forward(&x);
        assert!((y.data[0]).abs() < 1e-6 && (y.data[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pool_and_upsample_round_trip_gradients() {
        let x = rand_tensor(1, 2, 4, 6, 5);
        let (y, arg) = maxpool2x2(&x);
        assert_eq!(y.shape(), [1, 2, 2, 3]);
        let dx = maxpool2x2_backward(&y, &arg);
        // Each window passes its max back to exactly one position.
        let nz = dx.data.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nz, y.data.iter().filter(|&&v| v != 0.0).count());
        let up = upsample2x(&y);
        assert_eq!(up.shape(), [1, 2, 4, 6]);
        let back = upsample2x_backward(&up);
        for (a, b) in back.data.iter().zip(&y.data) {
            assert!((a - 4.0 * b).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_split_inverse() {
        let a = rand_tensor(2, 3, 2, 2, 1);
        let b = rand_tensor(2, 1, 2, 2, 2);
        let (a2, b2) = split_channels(&concat_channels(&a, &b), 3);
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let z = rand_tensor(1, 3, 2, 2, 21);
        let r = rand_tensor(1, 3, 2, 2, 22);
        let p = softmax_channels(&z);
        let dz = softmax_channels_backward(&p, &r);
        let eps = 1e-3f32;
        for idx in 0..z.data.len() {
            let mut zp = z.clone();
            zp.data[idx] += eps;
            let mut zm = z.clone();
            zm.data[idx] -= eps;
            let fd = (loss_of(&softmax_channels(&zp), &r) - loss_of(&softmax_channels(&zm), &r))
                / (2.0 * eps as f64);
            assert!((fd - dz.data[idx] as f64).abs() < 1e-3);
        }
    }
}
