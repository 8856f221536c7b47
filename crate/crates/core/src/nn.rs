//! Named parameter storage and the small set of layers the network uses.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{BatchNormMode, Gradients, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    /// Running statistics are stored here too, with `trainable = false`.
    pub trainable: bool,
}

/// Ordered collection of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Internal(format!("duplicate parameter name {name}")));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        let grad = vec![T::zero(); value.numel()];
        self.entries.push(ParamEntry {
            name,
            value,
            grad,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Trainable parameters whose name starts with any of `prefixes`.
    pub fn trainable_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable && prefixes.iter().any(|p| e.name.starts_with(p)))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds the gradients of every parameter bound in `bound` into `grad`.
    pub fn accumulate(&mut self, bound: &Binding, grads: &Gradients<T>) {
        for (pid, var) in bound.pairs() {
            let e = &mut self.entries[pid.0];
            if !e.trainable {
                continue;
            }
            if let Some(g) = grads.get(var) {
                e.grad.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
        }
    }

    /// Writes new running statistics collected during a train-mode pass.
    pub fn commit(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, value) in updates {
            self.entries[id.0].value = value;
        }
    }

    /// Replaces all values with those of `other` (same layout).
    pub fn copy_values_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Config("parameter layouts differ".into()));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {} does not match {}",
                    dst.name, src.name
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// Mapping from parameters to the tape leaves they were bound to.
#[derive(Default)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    fn pairs(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars.get(id.0).copied().flatten()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a tape plus the parameters bound onto it.
///
/// Holds the parameter set immutably; running-statistic updates produced in
/// train mode are queued and applied with [`ParamSet::commit`].
pub struct Session<'p, T: Scalar> {
    pub tape: Tape<T>,
    params: &'p ParamSet<T>,
    binding: Binding,
    mode: Mode,
    updates: Vec<(ParamId, Tensor<T>)>,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p ParamSet<T>, mode: Mode) -> Self {
        Session {
            tape: Tape::new(),
            params,
            binding: Binding {
                vars: vec![None; params.len()],
            },
            mode,
            updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    /// Tape leaf for parameter `id`, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.binding.vars[id.0] {
            return v;
        }
        let e = self.params.get(id);
        let v = self.tape.leaf(e.value.clone(), e.trainable);
        self.binding.vars[id.0] = Some(v);
        v
    }

    pub fn queue_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.updates.push((id, value));
    }

    /// Finishes the pass, returning the tape, binding, and queued updates.
    pub fn finish(self) -> (Tape<T>, Binding, Vec<(ParamId, Tensor<T>)>) {
        (self.tape, self.binding, self.updates)
    }
}

/// Glorot/Xavier uniform draw for a weight with the given fan sizes.
pub fn xavier_uniform<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_parts(shape, data)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let kk = kernel * kernel;
        let w = xavier_uniform(rng, vec![c_out, c_in, kernel, kernel], c_in * kk, c_out * kk);
        let weight = params.insert(format!("{name}.weight"), w, true)?;
        let bias = if bias {
            Some(params.insert(format!("{name}.bias"), Tensor::zeros(vec![c_out]), true)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn out_channels<T: Scalar>(&self, params: &ParamSet<T>) -> usize {
        params.get(self.weight).value.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: params.insert(format!("{name}.gamma"), Tensor::full(vec![channels], T::one()), true)?,
            beta: params.insert(format!("{name}.beta"), Tensor::zeros(vec![channels]), true)?,
            running_mean: params.insert(format!("{name}.running_mean"), Tensor::zeros(vec![channels]), false)?,
            running_var: params.insert(
                format!("{name}.running_var"),
                Tensor::full(vec![channels], T::one()),
                false,
            )?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let eps = T::from_f64(self.eps);
        let params = s.params();
        match s.mode() {
            Mode::Train => {
                let (y, stats) = s.tape.batch_norm(x, gamma, beta, BatchNormMode::Train { eps })?;
                let stats = stats.ok_or_else(|| Error::Internal("missing batch statistics".into()))?;
                let mom = T::from_f64(self.momentum);
                let blend = |old: &Tensor<T>, new: &[T]| {
                    let data = old
                        .data()
                        .iter()
                        .zip(new)
                        .map(|(&o, &n)| (T::one() - mom) * o + mom * n)
                        .collect();
                    Tensor::from_parts(old.shape().to_vec(), data)
                };
                let rm = blend(&params.get(self.running_mean).value, &stats.mean);
                let rv = blend(&params.get(self.running_var).value, &stats.var);
                s.queue_update(self.running_mean, rm);
                s.queue_update(self.running_var, rv);
                Ok(y)
            }
            Mode::Eval => {
                let mean = params.get(self.running_mean).value.data();
                let var = params.get(self.running_var).value.data();
                let (y, _) = s.tape.batch_norm(x, gamma, beta, BatchNormMode::Eval { mean, var, eps })?;
                Ok(y)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = xavier_uniform(rng, vec![d_out, d_in], d_in, d_out);
        let weight = params.insert(format!("{name}.weight"), w, true)?;
        let bias = if bias {
            Some(params.insert(format!("{name}.bias"), Tensor::zeros(vec![d_out]), true)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.linear(x, w, b)
    }
}

/// Checks that `x` is `[N, channels, size, size]` for the given layer.
pub(crate) fn expect_map<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    channels: usize,
    size: Option<usize>,
    what: &str,
) -> Result<()> {
    let shape = tape.shape(x);
    let ok = shape.len() == 4
        && shape[1] == channels
        && size.is_none_or(|s| shape[2] == s && shape[3] == s);
    if ok {
        Ok(())
    } else {
        Err(dim_err!(
            "{what} expects [N, {channels}, {s}, {s}], got {shape:?}",
            s = size.map_or("S".to_string(), |s| s.to_string())
        ))
    }
}
