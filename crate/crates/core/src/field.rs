//! Geometric field: a small MLP mapping a unit view direction to a positive depth.
//!
//! Directions are frequency-encoded (`v`, then `sin(2^k pi v)`, `cos(2^k pi v)` for each
//! octave `k`), passed through ReLU hidden layers, and the scalar head goes through a
//! softplus so the output is always positive. Parameters live in one flat vector, layer by
//! layer, each layer as a row-major `out x in` weight matrix followed by its bias.

use std::f64::consts::PI;
use std::fmt::Debug;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sphere::Vec3;

/// Floating point type the field can be trained in.
pub trait Real:
    num_traits::Float + num_traits::FromPrimitive + Default + Debug + Send + Sync + 'static
{
    /// Row-major `c = a * b + beta * c` for `m x k` by `k x n`, with optional transposes.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]);

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $gemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inverse of softplus for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldArch {
    pub octaves: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for FieldArch {
    fn default() -> Self {
        FieldArch {
            octaves: 6,
            hidden: 128,
            layers: 4,
        }
    }
}

impl FieldArch {
    pub fn input_dim(&self) -> usize {
        3 + 6 * self.octaves
    }

    /// `(inputs, outputs)` of every linear layer, head last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.layers + 1);
        let mut fan_in = self.input_dim();
        for _ in 0..self.layers {
            dims.push((fan_in, self.hidden));
            fan_in = self.hidden;
        }
        dims.push((fan_in, 1));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Cached activations of one batched forward pass, reused across steps.
#[derive(Debug, Default)]
pub struct Tape<T> {
    batch: usize,
    /// `acts[0]` is the encoded input; `acts[i + 1]` the output of layer `i`
    /// (post-ReLU for hidden layers, pre-softplus for the head).
    acts: Vec<Vec<T>>,
    out: Vec<T>,
    delta: Vec<T>,
    delta_next: Vec<T>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            batch: 0,
            acts: Vec::new(),
            out: Vec::new(),
            delta: Vec::new(),
            delta_next: Vec::new(),
        }
    }

    pub fn outputs(&self) -> &[T] {
        &self.out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometricField<T = f32> {
    arch: FieldArch,
    params: Vec<T>,
}

impl<T: Real> GeometricField<T> {
    /// He-uniform hidden weights from `seed`; the head starts near-constant at
    /// `initial_depth`.
    pub fn new(arch: FieldArch, seed: u64, initial_depth: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.param_count());
        let dims = arch.layer_dims();
        let last = dims.len() - 1;
        for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let bound = if i == last {
                0.1 / (fan_in as f64).sqrt()
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            for _ in 0..fan_in * fan_out {
                params.push(T::of(rng.random_range(-bound..bound)));
            }
            let bias = if i == last {
                softplus_inv(initial_depth.max(1e-3))
            } else {
                0.0
            };
            params.extend(std::iter::repeat_n(T::of(bias), fan_out));
        }
        GeometricField { arch, params }
    }

    pub fn from_params(arch: FieldArch, params: Vec<T>) -> Option<Self> {
        (params.len() == arch.param_count()).then_some(GeometricField { arch, params })
    }

    pub fn arch(&self) -> FieldArch {
        self.arch
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> GeometricField<U> {
        GeometricField {
            arch: self.arch,
            params: self
                .params
                .iter()
                .map(|p| U::of(p.to_f64().expect("finite parameter")))
                .collect(),
        }
    }

    fn encode_into(&self, dir: &Vec3, out: &mut [T]) {
        let d = dir.normalize();
        let v = [d.x, d.y, d.z];
        out[..3].copy_from_slice(&v.map(T::of));
        // octave k+1 from octave k by the double-angle identities
        let mut s = v.map(|x| (PI * x).sin());
        let mut c = v.map(|x| (PI * x).cos());
        let mut o = 3;
        for _ in 0..self.arch.octaves {
            for x in s {
                out[o] = T::of(x);
                o += 1;
            }
            for x in c {
                out[o] = T::of(x);
                o += 1;
            }
            for i in 0..3 {
                let (si, ci) = (s[i], c[i]);
                s[i] = 2.0 * si * ci;
                c[i] = ci * ci - si * si;
            }
        }
    }

    /// Batched forward pass recording activations for [`Self::backward`].
    pub fn forward<'t>(&self, dirs: &[Vec3], tape: &'t mut Tape<T>) -> &'t [T] {
        let batch = dirs.len();
        let dims = self.arch.layer_dims();
        tape.batch = batch;
        tape.acts.resize_with(dims.len() + 1, Vec::new);
        let in_dim = self.arch.input_dim();
        tape.acts[0].resize(batch * in_dim, T::zero());
        for (i, d) in dirs.iter().enumerate() {
            self.encode_into(d, &mut tape.acts[0][i * in_dim..(i + 1) * in_dim]);
        }
        let mut offset = 0;
        for (layer, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let (lower, upper) = tape.acts.split_at_mut(layer + 1);
            let input = &lower[layer];
            let z = &mut upper[0];
            z.clear();
            for _ in 0..batch {
                z.extend_from_slice(b);
            }
            T::gemm(batch, fan_in, fan_out, input, false, w, true, T::one(), z);
            if layer + 1 < dims.len() {
                for v in z.iter_mut() {
                    *v = v.max(T::zero());
                }
            }
        }
        let head = &tape.acts[dims.len()];
        tape.out.clear();
        tape.out.extend(head.iter().map(|&z| softplus(z)));
        &tape.out
    }

    /// Accumulate `d(loss)/d(params)` into `grad` given `d(loss)/d(output)` per sample.
    pub fn backward(&self, tape: &mut Tape<T>, d_out: &[T], grad: &mut [T]) {
        assert_eq!(d_out.len(), tape.batch);
        assert_eq!(grad.len(), self.params.len());
        let dims = self.arch.layer_dims();
        let batch = tape.batch;
        let n_layers = dims.len();
        tape.delta.clear();
        tape.delta.extend(
            d_out
                .iter()
                .zip(&tape.acts[n_layers])
                .map(|(&g, &z)| g * sigmoid(z)),
        );
        let mut offsets = Vec::with_capacity(n_layers);
        let mut o = 0;
        for &(i, out) in &dims {
            offsets.push(o);
            o += i * out + out;
        }
        for layer in (0..n_layers).rev() {
            let (fan_in, fan_out) = dims[layer];
            let off = offsets[layer];
            let input = &tape.acts[layer];
            let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            T::gemm(fan_out, batch, fan_in, &tape.delta, true, input, false, T::one(), gw);
            for s in 0..batch {
                for (g, &d) in gb.iter_mut().zip(&tape.delta[s * fan_out..(s + 1) * fan_out]) {
                    *g = *g + d;
                }
            }
            if layer == 0 {
                break;
            }
            let w = &self.params[off..off + fan_in * fan_out];
            tape.delta_next.clear();
            tape.delta_next.resize(batch * fan_in, T::zero());
            T::gemm(batch, fan_out, fan_in, &tape.delta, false, w, false, T::zero(), &mut tape.delta_next);
            // ReLU gate of the previous layer's output
            for (d, &a) in tape.delta_next.iter_mut().zip(&tape.acts[layer]) {
                if a <= T::zero() {
                    *d = T::zero();
                }
            }
            std::mem::swap(&mut tape.delta, &mut tape.delta_next);
        }
    }

    /// Deterministic batched evaluation; non-unit directions are normalized.
    pub fn eval(&self, dirs: &[Vec3]) -> Vec<T> {
        const CHUNK: usize = 4096;
        let mut tape = Tape::new();
        let mut out = Vec::with_capacity(dirs.len());
        for chunk in dirs.chunks(CHUNK) {
            out.extend_from_slice(self.forward(chunk, &mut tape));
        }
        out
    }
}

/// Adam over a flat parameter slice.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::of(self.lr * c2.sqrt() / c1);
        let eps = T::of(self.eps * c2.sqrt());
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            params[i] = params[i] - step * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}
