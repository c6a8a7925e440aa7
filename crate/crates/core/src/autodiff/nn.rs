//! Trainable parameters and the handful of layers the streams are built from.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// He-normal initialisation with fan-in `fan_in`.
    pub fn add_he<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        self.add_normal(name, shape, std, rng)
    }

    pub fn add_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Place every parameter on `graph`; `trainable` selects leaves vs constants.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self
            .values
            .iter()
            .map(|t| if trainable { graph.leaf(t.clone()) } else { graph.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    pub fn to_snapshot(&self) -> BTreeMap<String, TensorRecord> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, t)| (n.clone(), TensorRecord::from(t)))
            .collect()
    }

    /// Overwrite values from a snapshot; every name and shape must match.
    pub fn load_snapshot(&mut self, snap: &BTreeMap<String, TensorRecord>) -> Result<(), String> {
        if snap.len() != self.values.len() {
            return Err(format!("expected {} parameters, found {}", self.values.len(), snap.len()));
        }
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let rec = snap.get(name).ok_or_else(|| format!("missing parameter {name}"))?;
            if rec.shape != value.shape() {
                return Err(format!("parameter {name}: shape {:?} != {:?}", rec.shape, value.shape()));
            }
            *value = rec.to_tensor();
        }
        Ok(())
    }
}

/// Serializable tensor payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for TensorRecord {
    fn from(t: &Tensor) -> Self {
        Self { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }
}

impl TensorRecord {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.clone())
    }
}

/// Parameters placed on one graph.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    /// Collect per-parameter gradients (zeros where none flowed).
    pub fn grads(&self, store: &ParamStore, grads: &mut Gradients) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                grads
                    .take(self.vars[id.0])
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Weight is stored `[in, out]` so the forward is a plain `x @ W`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let std = (1.0 / d_in.max(1) as f64).sqrt();
        let weight = store.add_normal(&format!("{name}.weight"), &[d_in, d_out], std, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![d_out])));
        Self { weight, bias }
    }

    /// Applies to the last axis of `x` (any leading shape).
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let shape = x.shape();
        let d_in = *shape.last().unwrap();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let w = p.var(self.weight);
        let d_out = w.dim(1);
        let mut y = x.reshape(&[rows, d_in]).matmul(w);
        if let Some(b) = self.bias {
            y = y.add(p.var(b));
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(d_out);
        y.reshape(&out_shape)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_he(&format!("{name}.weight"), &[c_out, c_in, k, k], c_in * k * k, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![c_out, 1, 1])));
        Self { weight, bias, stride, pad }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let y = x.conv2d(p.var(self.weight), self.stride, self.pad);
        match self.bias {
            Some(b) => y.add(p.var(b)),
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(vec![dim])),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let r = x.shape().len() - 1;
        let mu = x.mean_axis(r, true);
        let xc = x.sub(mu);
        let var = xc.square().mean_axis(r, true);
        let y = xc.div(var.add_scalar(1e-5).sqrt());
        y.mul(p.var(self.gain)).add(p.var(self.shift))
    }
}

/// Single-head scaled dot-product attention; callers add any residual.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, false, rng),
        }
    }

    /// `queries [B, Nq, D]` attend over `context [B, Nk, D]`; returns the
    /// attention output `[B, Nq, D]` without the residual.
    pub fn attend<'g>(&self, p: &Bound<'g>, queries: Var<'g>, context: Var<'g>) -> Var<'g> {
        let d = *queries.shape().last().unwrap();
        let q = self.q.forward(p, queries);
        let k = self.k.forward(p, context);
        let v = self.v.forward(p, context);
        let scores = q.matmul_t(k, false, true).mul_scalar(1.0 / (d as f64).sqrt());
        let w = scores.softmax();
        self.o.forward(p, w.matmul(v))
    }
}

/// LSTM cell; gates ordered (input, forget, cell, output).
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub wx: Linear,
    pub wh: Linear,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let wx = Linear::new(store, &format!("{name}.wx"), d_in, 4 * hidden, true, rng);
        let wh = Linear::new(store, &format!("{name}.wh"), hidden, 4 * hidden, false, rng);
        Self { wx, wh, hidden }
    }

    /// Run over `seq [B, T, D]` in the given time order; returns the final hidden state `[B, H]`.
    pub fn run<'g>(&self, p: &Bound<'g>, seq: Var<'g>, reverse: bool) -> Var<'g> {
        let s = seq.shape();
        let (b, t_len) = (s[0], s[1]);
        let g = seq.graph();
        let mut h = g.constant(Tensor::zeros(vec![b, self.hidden]));
        let mut c = g.constant(Tensor::zeros(vec![b, self.hidden]));
        let xs = self.wx.forward(p, seq);
        for step in 0..t_len {
            let t = if reverse { t_len - 1 - step } else { step };
            let xt = xs.narrow(1, t, 1).reshape(&[b, 4 * self.hidden]);
            let z = xt.add(self.wh.forward(p, h));
            let hs = self.hidden;
            let i = z.narrow(1, 0, hs).sigmoid();
            let f = z.narrow(1, hs, hs).sigmoid();
            let gg = z.narrow(1, 2 * hs, hs).tanh();
            let o = z.narrow(1, 3 * hs, hs).sigmoid();
            c = f.mul(c).add(i.mul(gg));
            h = o.mul(c.tanh());
        }
        h
    }
}
