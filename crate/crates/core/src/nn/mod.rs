//! Minimal CPU engine for 2D convolutional networks: NCHW tensors, layers with
//! hand-written backward passes, and AdamW.

mod layers;
mod optim;

pub use layers::{
    concat_channels, maxpool2x2, maxpool2x2_backward, softmax_channels,
    softmax_channels_backward, split_channels, upsample2x, upsample2x_backward, BatchNorm2d,
    Conv2d, ConvUnit, ResBlock,
};
pub use optim::{zero_grad, AdamW, AdamWConfig};

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense `(n, c, h, w)` tensor, width fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let l = self.image_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f32] {
        let l = self.image_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn channel(&self, i: usize, c: usize) -> &[f32] {
        let p = self.plane();
        let o = (i * self.c + c) * p;
        &self.data[o..o + p]
    }

    /// Copies image `i` out as a batch of one.
    pub fn select(&self, i: usize) -> Tensor {
        Tensor::from_vec(1, self.c, self.h, self.w, self.image(i).to_vec())
    }

    pub fn zeros_like(&self) -> Tensor {
        Tensor::zeros(self.n, self.c, self.h, self.w)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// A named weight array with its gradient. Non-trainable entries (running
/// statistics) carry an empty gradient and are skipped by the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self {
            shape,
            value,
            grad,
            trainable: true,
        }
    }

    pub fn constant(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    pub fn buffer(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            value: vec![v; n],
            grad: Vec::new(),
            trainable: false,
        }
    }

    /// He-normal initialisation for a layer with `fan_in` inputs.
    pub fn he_normal<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = (0..n).map(|_| dist.sample(rng) as f32).collect();
        Self::new(shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Walks every named tensor of a network in a fixed order.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `c = a * b + beta * c` for row-major `c` (`m x n`), with `a` and `b`
/// addressed through explicit row and column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too short");
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "gemm lhs too short");
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb, "gemm rhs too short");
    }
    // SAFETY: the assertions above bound every element the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
