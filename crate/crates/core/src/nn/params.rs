//! Named parameter storage, layer primitives and the AdamW optimizer.

use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::conv::ConvGeom;
use super::tape::{Tape, Var};
use super::tensor::{Array, Real};
use crate::rng::Rng64;

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Real> {
    names: Vec<String>,
    values: Vec<Arc<Array<T>>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Array<T> {
        &self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array<T>> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i].as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| v.as_ref()))
    }

    pub fn set(&mut self, id: ParamId, value: Array<T>) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "parameter shape change");
        self.values[id.0] = Arc::new(value);
    }

    /// Replaces the value stored under `name`; shapes must agree.
    pub fn set_by_name(&mut self, name: &str, value: Array<T>) -> bool {
        match self.names.iter().position(|n| n == name) {
            Some(i) => {
                self.set(ParamId(i), value);
                true
            }
            None => false,
        }
    }

    pub(crate) fn value_mut(&mut self, i: usize) -> &mut Array<T> {
        Arc::make_mut(&mut self.values[i])
    }

    /// Records every parameter on `tape`; frozen sets receive no gradients.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant_shared(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in v.data() {
                h.update(x.f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// A [`ParamSet`] recorded on a tape.
pub struct Bound<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn get(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

fn uniform<T: Real>(rng: &mut Rng64, shape: &[usize], bound: f64) -> Array<T> {
    Array::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

/// 3D convolution layer.
#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    /// Uniform(±1/√fan_in) initialization for weight and bias.
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut Rng64,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
    ) -> Self {
        let [k0, k1, k2] = geom.kernel;
        let fan_in = cin * k0 * k1 * k2;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = ps.add(format!("{name}.weight"), uniform(rng, &[cout, cin, k0, k1, k2], bound));
        let b = ps.add(format!("{name}.bias"), uniform(rng, &[cout], bound));
        Self {
            w,
            b,
            geom,
            in_channels: cin,
            out_channels: cout,
        }
    }

    /// All-zero weight and bias.
    pub fn zeros<T: Real>(ps: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        let [k0, k1, k2] = geom.kernel;
        let w = ps.add(format!("{name}.weight"), Array::zeros(&[cout, cin, k0, k1, k2]));
        let b = ps.add(format!("{name}.bias"), Array::zeros(&[cout]));
        Self {
            w,
            b,
            geom,
            in_channels: cin,
            out_channels: cout,
        }
    }

    /// Pointwise identity map (requires `cin == cout`).
    pub fn identity<T: Real>(ps: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        let mut w = Array::zeros(&[channels, channels, 1, 1, 1]);
        for c in 0..channels {
            w.data_mut()[c * channels + c] = T::one();
        }
        let wid = ps.add(format!("{name}.weight"), w);
        let b = ps.add(format!("{name}.bias"), Array::zeros(&[channels]));
        Self {
            w: wid,
            b,
            geom: ConvGeom::pointwise(),
            in_channels: channels,
            out_channels: channels,
        }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.conv(p.get(self.w), Some(p.get(self.b)), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, rng: &mut Rng64, name: &str, din: usize, dout: usize) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        let w = ps.add(format!("{name}.weight"), uniform(rng, &[dout, din], bound));
        let b = ps.add(format!("{name}.bias"), uniform(rng, &[dout], bound));
        Self { w, b }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.linear(p.get(self.w), p.get(self.b))
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale the gradients when their global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Array<T>>,
    v: Vec<Array<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: None,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Plain Adam (no decay) with a custom first-moment coefficient.
    pub fn adam(lr: f64, beta1: f64) -> Self {
        Self {
            beta1,
            weight_decay: 0.0,
            ..Self::new(lr)
        }
    }

    pub fn with_clip_norm(mut self, max_norm: f64) -> Self {
        self.clip_norm = Some(max_norm);
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads[i]` belongs to parameter `i`, `None` leaves it untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Array<T>>]) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        if self.m.is_empty() {
            self.m = params.values.iter().map(|v| Array::zeros(v.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let lr_t = T::of(self.lr / bc1);
        let decay = T::of(1.0 - self.lr * self.weight_decay);
        let sqrt_bc2 = T::of(bc2.sqrt());
        let eps = T::of(self.eps);
        let gscale = match self.clip_norm {
            Some(max) => {
                let sq: f64 = grads.iter().flatten().flat_map(|g| g.data()).map(|&x| x.f64() * x.f64()).sum();
                let norm = sq.sqrt();
                if norm > max { T::of(max / norm) } else { T::one() }
            }
            None => T::one(),
        };
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.value_mut(i);
            for j in 0..g.len() {
                let gj = g.data()[j] * gscale;
                let mj = b1 * m.data()[j] + (T::one() - b1) * gj;
                let vj = b2 * v.data()[j] + (T::one() - b2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let denom = vj.sqrt() / sqrt_bc2 + eps;
                p.data_mut()[j] = p.data()[j] * decay - lr_t * mj / denom;
            }
        }
    }
}

/// Pulls the gradients of every parameter in `bound` out of `grads`.
pub fn collect_grads<T: Real>(bound: &Bound<'_, T>, grads: &mut super::tape::Grads<T>) -> Vec<Option<Array<T>>> {
    bound.vars.iter().map(|&v| grads.take(v)).collect()
}
