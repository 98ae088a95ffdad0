//! Network building blocks on top of the tape: parameter stores, layers,
//! weight initialization, and the Adam optimizer.

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::graph::{ConvGeom, Graph, Tensor, Var};

/// Named parameter tensors in a fixed order.
///
/// The order is the binding contract: [`Params::bind`] inserts every tensor
/// as a graph leaf and layers address them by index, and the optimizer
/// consumes gradients in the same order.
#[derive(Clone, Debug, Default)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new() -> Self {
        Params { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.entries.push((name.into(), value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, index: usize) -> &Tensor {
        &self.entries[index].1
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].1
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].0
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Insert all parameters into `g` as leaves, in order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| g.leaf(t.clone())).collect()
    }

    /// Flatten all parameters into one vector (finite-difference probing).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_scalars());
        for (_, t) in &self.entries {
            out.extend(t.iter().copied());
        }
        out
    }

    /// Inverse of [`Params::to_flat`]; shapes must already match.
    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.len();
            for (dst, src) in t.iter_mut().zip(&flat[off..off + n]) {
                *dst = *src;
            }
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    pub fn to_records(&self) -> Vec<ParamRecord> {
        self.entries
            .iter()
            .map(|(name, t)| ParamRecord {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.iter().copied().collect(),
            })
            .collect()
    }

    pub fn from_records(records: Vec<ParamRecord>) -> crate::Result<Self> {
        let mut params = Params::new();
        for r in records {
            let len: usize = r.shape.iter().product();
            if len != r.data.len() {
                return Err(crate::Error::Checkpoint(format!(
                    "parameter {} has {} values for shape {:?}",
                    r.name,
                    r.data.len(),
                    r.shape
                )));
            }
            let t = Tensor::from_shape_vec(IxDyn(&r.shape), r.data)
                .map_err(|e| crate::Error::Checkpoint(e.to_string()))?;
            params.add(r.name, t);
        }
        Ok(params)
    }
}

/// Serialized form of one parameter tensor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Fully connected layer `y = x W + b` for `x: [N, in]`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let w = params.add(format!("{name}.w"), randn(rng, &[in_dim, out_dim], std));
        let b = params.add(format!("{name}.b"), Tensor::zeros(IxDyn(&[1, out_dim])));
        Dense { w, b, in_dim, out_dim }
    }

    pub fn apply(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        let y = g.matmul(x, vars[self.w]);
        let n = g.value(y).shape()[0];
        let b = g.broadcast_to(vars[self.b], &[n, self.out_dim]);
        g.add(y, b)
    }
}

/// 2-D convolution (NHWC, square kernel) lowered through im2col.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (kernel * kernel * in_c) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = params.add(
            format!("{name}.w"),
            randn(rng, &[kernel * kernel * in_c, out_c], std),
        );
        let b = params.add(format!("{name}.b"), Tensor::zeros(IxDyn(&[1, out_c])));
        Conv { w, b, in_c, out_c, kernel, stride, pad }
    }

    pub fn apply(&self, g: &mut Graph, vars: &[Var], x: Var) -> Var {
        let shape = g.value(x).shape().to_vec();
        let geom = ConvGeom::new(&shape, self.kernel, self.stride, self.pad);
        let cols = g.im2col(x, geom);
        let y = g.matmul(cols, vars[self.w]);
        let rows = geom.rows();
        let b = g.broadcast_to(vars[self.b], &[rows, self.out_c]);
        let y = g.add(y, b);
        g.reshape(y, &[geom.batch, geom.out_h, geom.out_w, self.out_c])
    }
}

/// Adam with bias correction, one state slot per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &Params, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let m = (0..params.len())
            .map(|i| Tensor::zeros(params.value(i).raw_dim()))
            .collect();
        let v = (0..params.len())
            .map(|i| Tensor::zeros(params.value(i).raw_dim()))
            .collect();
        Adam { lr, beta1, beta2, epsilon, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut Params, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.step += 1;
        let b1c = 1.0 - self.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(&grads[i], |mi, &gi| {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi
            });
            v.zip_mut_with(&grads[i], |vi, &gi| {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi
            });
            let p = params.value_mut(i);
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|pi, &mi, &vi| {
                let mhat = mi / b1c;
                let vhat = vi / b2c;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.epsilon);
            });
        }
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            step: self.step,
            m: self.m.iter().map(tensor_to_record).collect(),
            v: self.v.iter().map(tensor_to_record).collect(),
        }
    }

    pub fn restore(&mut self, state: AdamState) -> crate::Result<()> {
        if state.m.len() != self.m.len() || state.v.len() != self.v.len() {
            return Err(crate::Error::Checkpoint(
                "optimizer state does not match parameter layout".into(),
            ));
        }
        self.step = state.step;
        self.m = state.m.into_iter().map(record_to_tensor).collect::<crate::Result<_>>()?;
        self.v = state.v.into_iter().map(record_to_tensor).collect::<crate::Result<_>>()?;
        Ok(())
    }
}

/// Serialized optimizer state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<UnnamedTensor>,
    pub v: Vec<UnnamedTensor>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UnnamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn tensor_to_record(t: &Tensor) -> UnnamedTensor {
    UnnamedTensor { shape: t.shape().to_vec(), data: t.iter().copied().collect() }
}

fn record_to_tensor(r: UnnamedTensor) -> crate::Result<Tensor> {
    Tensor::from_shape_vec(IxDyn(&r.shape), r.data)
        .map_err(|e| crate::Error::Checkpoint(e.to_string()))
}

/// Uniform draw in [lo, hi).
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}
