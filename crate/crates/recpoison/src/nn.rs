//! Parameter storage, initialization, optimizers, and layer helpers shared
//! by the generator, critics, surrogate, and victim networks.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Tape, Var};
use crate::linalg::power_iteration_sigma;

/// Named dense parameters. Iteration order is the name order, which keeps
/// every gradient walk and optimizer update deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Insert every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Glorot-uniform weight plus zero bias under `name.w` / `name.b`.
    pub fn init_linear(&mut self, name: &str, din: usize, dout: usize, rng: &mut ChaCha12Rng) {
        let limit = (6.0 / (din + dout) as f64).sqrt();
        let w = Array2::from_shape_fn((din, dout), |_| rng.random_range(-limit..limit));
        self.insert(&format!("{name}.w"), w);
        self.insert(&format!("{name}.b"), Array2::zeros((1, dout)));
    }

    /// Weight-only linear layer (no bias), same init.
    pub fn init_linear_nobias(&mut self, name: &str, din: usize, dout: usize, rng: &mut ChaCha12Rng) {
        let limit = (6.0 / (din + dout) as f64).sqrt();
        let w = Array2::from_shape_fn((din, dout), |_| rng.random_range(-limit..limit));
        self.insert(&format!("{name}.w"), w);
    }
}

/// Tape bindings for one forward/backward pass.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Collect gradients of `loss` for every bound parameter, by name.
    pub fn grads(&self, tape: &Tape, loss: Var) -> BTreeMap<String, Array2<f64>> {
        let names: Vec<&String> = self.vars.keys().collect();
        let vars: Vec<Var> = names.iter().map(|n| self.vars[n.as_str()]).collect();
        let gs = tape.grad(loss, &vars);
        names
            .into_iter()
            .cloned()
            .zip(gs.into_iter().map(|g| tape.value(g)))
            .collect()
    }
}

/// `x W + b` where `x` is `(batch, din)` and the weight is `(din, dout)`.
pub fn linear(tape: &Tape, bound: &Bound, name: &str, x: Var) -> Var {
    let y = tape.matmul(x, bound.var(&format!("{name}.w")));
    tape.add(y, bound.var(&format!("{name}.b")))
}

pub fn linear_nobias(tape: &Tape, bound: &Bound, name: &str, x: Var) -> Var {
    tape.matmul(x, bound.var(&format!("{name}.w")))
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky(tape: &Tape, x: Var) -> Var {
    tape.leaky_relu(x, LEAKY_SLOPE)
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            *m = &*m * self.beta1 + &(g * (1.0 - self.beta1));
            *v = &*v * self.beta2 + &(g.mapv(|x| x * x) * (1.0 - self.beta2));
            let mhat = &*m / bc1;
            let vhat = &*v / bc2;
            let p = store.get_mut(name);
            *p = &*p - &(mhat / (vhat.mapv(f64::sqrt) + self.eps) * self.lr);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }

    pub fn step(&self, store: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>) {
        for (name, g) in grads {
            let p = store.get_mut(name);
            *p = &*p - &(g * self.lr);
        }
    }
}

/// Persistent power-iteration vectors for spectrally normalized layers.
#[derive(Clone, Debug, Default)]
pub struct SnState {
    uv: BTreeMap<String, (Array1<f64>, Array1<f64>)>,
}

impl SnState {
    pub fn new() -> Self {
        Self::default()
    }

    fn entry(&mut self, name: &str, w: &Array2<f64>, rng: &mut ChaCha12Rng) -> &mut (Array1<f64>, Array1<f64>) {
        self.uv.entry(name.to_string()).or_insert_with(|| {
            let mut u: Array1<f64> = Array1::from_shape_fn(w.nrows(), |_| rng.random_range(-1.0..1.0));
            let n = u.dot(&u).sqrt();
            u.mapv_inplace(|x| x / n.max(1e-12));
            let v = Array1::zeros(w.ncols());
            (u, v)
        })
    }

    /// Update the state for `name` with `iters` power iterations against the
    /// current weight value and return the sigma estimate.
    pub fn refresh(
        &mut self,
        name: &str,
        w: &Array2<f64>,
        iters: usize,
        rng: &mut ChaCha12Rng,
    ) -> f64 {
        let (u, v) = self.entry(name, w, rng);
        power_iteration_sigma(w, u, v, iters)
    }

    pub fn vectors(&self, name: &str) -> Option<(&Array1<f64>, &Array1<f64>)> {
        self.uv.get(name).map(|(u, v)| (u, v))
    }
}

/// Spectrally normalized weight value: `W / sigma_hat`, with persistent
/// power-iteration vectors in `state`. A zero matrix is returned unchanged.
pub fn spectral_normalize(
    w: &Array2<f64>,
    power_iters: usize,
    state: &mut SnState,
    name: &str,
    rng: &mut ChaCha12Rng,
) -> Array2<f64> {
    let sigma = state.refresh(name, w, power_iters, rng);
    if sigma <= 1e-12 {
        return w.clone();
    }
    w / sigma
}

/// In-graph spectrally normalized linear layer. The u/v vectors are treated
/// as constants (already refreshed), but the sigma estimate `u' W v` stays a
/// function of the bound weight so gradients account for the normalization.
pub fn sn_linear(
    tape: &Tape,
    bound: &Bound,
    state: &SnState,
    name: &str,
    x: Var,
    with_bias: bool,
) -> Var {
    let wname = format!("{name}.w");
    let w = bound.var(&wname);
    let (u, v) = state
        .vectors(&wname)
        .unwrap_or_else(|| panic!("spectral state missing for {wname}"));
    let u_row = tape.constant(u.clone().insert_axis(ndarray::Axis(0)).to_owned());
    let v_col = tape.constant(v.clone().insert_axis(ndarray::Axis(1)).to_owned());
    let sigma = tape.matmul(tape.matmul(u_row, w), v_col);
    let w_sn = tape.mul(w, tape.recip(sigma));
    let y = tape.matmul(x, w_sn);
    if with_bias {
        tape.add(y, bound.var(&format!("{name}.b")))
    } else {
        y
    }
}

/// Sample a standard-normal matrix (used for VAE reparameterization noise).
pub fn randn(shape: (usize, usize), rng: &mut ChaCha12Rng) -> Array2<f64> {
    use rand_distr::{Distribution, StandardNormal};
    Array2::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}
