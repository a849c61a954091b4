//! Layer building blocks: parameter registration, initialization, and
//! tape-recorded forward passes.
//!
//! A layer is constructed once against a [`ParamSet`] (registering named
//! tensors) and then applied any number of times through a [`Forward`]
//! context, which owns the tape for one forward/backward cycle.

use crate::autodiff::{Gradients, Tape, Var};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

/// LayerNorm variance epsilon used everywhere.
pub const NORM_EPS: f64 = 1e-5;

// ---- initializers --------------------------------------------------------

/// Sample standard normals via Box-Muller and scale by `std`.
pub fn normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<T> {
    let n = shape.iter().product::<usize>();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(T::from_f64(r * theta.cos() * std));
        if data.len() < n {
            data.push(T::from_f64(r * theta.sin() * std));
        }
    }
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// He-style normal for conv weights: std = sqrt(2 / fan_in).
pub fn he_normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), T::one())
}

/// Std for transformer-style linear weights.
pub const LINEAR_STD: f64 = 0.02;

// ---- forward context -----------------------------------------------------

/// One forward/backward cycle: a tape plus the leaf `Var` of every parameter.
pub struct Forward<T: Scalar> {
    pub tape: Tape<T>,
    param_vars: Vec<Var>,
}

impl<T: Scalar> Forward<T> {
    /// Load every parameter in `params` onto a fresh tape as a leaf.
    pub fn new(params: &ParamSet<T>) -> Self {
        let mut tape = Tape::new();
        let param_vars = params
            .iter()
            .map(|(_, p)| tape.leaf(p.value.clone()))
            .collect();
        Forward { tape, param_vars }
    }

    /// Tape variable of a registered parameter.
    pub fn var(&self, id: ParamId) -> Var {
        self.param_vars[id.0]
    }

    /// Record a non-parameter input (image batch, one-hot labels, ...).
    pub fn input(&mut self, value: ArrayD<T>) -> Var {
        self.tape.leaf(value)
    }

    /// Gradient of a parameter from a finished backward pass, if any flowed.
    pub fn grad<'g>(&self, grads: &'g Gradients<T>, id: ParamId) -> Option<&'g ArrayD<T>> {
        grads.get(self.var(id))
    }
}

// ---- layers --------------------------------------------------------------

/// Token-wise affine map `(..., Cin) -> (..., Cout)`.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let w = ps.add(
            format!("{name}.weight"),
            normal(rng, &[cin, cout], LINEAR_STD),
            true,
        );
        let b = Some(ps.add(format!("{name}.bias"), zeros(&[cout]), false));
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Var {
        let w = f.var(self.w);
        let b = self.b.map(|id| f.var(id));
        f.tape.linear(x, w, b)
    }
}

/// Dense 2-D convolution on `(B, C, H, W)` maps.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = ps.add(
            format!("{name}.weight"),
            he_normal(rng, &[cout, cin, kernel, kernel], fan_in),
            true,
        );
        let b = ps.add(format!("{name}.bias"), zeros(&[cout]), false);
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Var {
        let w = f.var(self.w);
        let b = f.var(self.b);
        f.tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Depthwise 3x3 convolution (padding 1).
pub struct Depthwise3x3 {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Depthwise3x3 {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        stride: usize,
    ) -> Self {
        let w = ps.add(
            format!("{name}.weight"),
            he_normal(rng, &[channels, 3, 3], 9),
            true,
        );
        let b = ps.add(format!("{name}.bias"), zeros(&[channels]), false);
        Depthwise3x3 { w, b, stride }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Var {
        let w = f.var(self.w);
        let b = f.var(self.b);
        f.tape.depthwise3x3(x, w, Some(b), self.stride)
    }
}

/// LayerNorm over the channel axis, batch-independent.
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), ones(&[channels]), false);
        let beta = ps.add(format!("{name}.beta"), zeros(&[channels]), false);
        ChannelNorm { gamma, beta }
    }

    /// Normalize tokens `(B, N, C)` over the trailing channel axis.
    pub fn forward_tokens<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Var {
        let g = f.var(self.gamma);
        let b = f.var(self.beta);
        f.tape.layer_norm(x, g, b, T::from_f64(NORM_EPS))
    }

    /// Normalize a spatial map `(B, C, H, W)` per position over channels.
    pub fn forward_spatial<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Var {
        let shape = f.tape.value(x).shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        let tokens = f.tape.spatial_to_tokens(x);
        let normed = self.forward_tokens(f, tokens);
        f.tape.tokens_to_spatial(normed, h, w)
    }
}

/// Two-layer MLP with GELU and the standard expansion factor.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        expansion: usize,
    ) -> Self {
        let hidden = channels * expansion;
        Mlp {
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), channels, hidden),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), hidden, channels),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<T>, x: Var) -> Var {
        let h = self.fc1.forward(f, x);
        let h = f.tape.gelu(h);
        self.fc2.forward(f, h)
    }
}
