//! Parameter storage and the handful of layers the networks are built from.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ConvSpec, Gradients, Real, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named, ordered parameter tensors. Order is creation order and is what the
/// checkpoint manifest records.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count over trainable parameters.
    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

/// Binds a parameter store to one forward pass. Each parameter becomes a
/// graph leaf the first time it is used; when gradients are disabled every
/// parameter is a constant and no backward closures are kept.
pub struct Scope<'a, T: Real> {
    store: &'a ParamStore<T>,
    vars: RefCell<Vec<Option<Var<T>>>>,
    grad: bool,
}

impl<'a, T: Real> Scope<'a, T> {
    pub fn new(store: &'a ParamStore<T>, grad: bool) -> Self {
        Self {
            store,
            vars: RefCell::new(vec![None; store.len()]),
            grad,
        }
    }

    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self::new(store, false)
    }

    pub fn training(store: &'a ParamStore<T>) -> Self {
        Self::new(store, true)
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad
    }

    pub fn param(&self, id: ParamId) -> Var<T> {
        let mut vars = self.vars.borrow_mut();
        if let Some(v) = &vars[id.0] {
            return v.clone();
        }
        let p = self.store.get(id);
        let v = if self.grad && p.trainable {
            Var::leaf(p.value.clone())
        } else {
            Var::constant(p.value.clone())
        };
        vars[id.0] = Some(v.clone());
        v
    }

    /// Gradients for every store entry (zeros for parameters that were not
    /// reached or are frozen).
    pub fn collect(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        let vars = self.vars.borrow();
        self.store
            .iter()
            .map(|(id, p)| match &vars[id.0] {
                Some(v) => grads.get_or_zeros(v),
                None => Tensor::zeros(p.value.shape()),
            })
            .collect()
    }
}

/// Uniform fan-in initialisation, `U(-gain/sqrt(fan_in), gain/sqrt(fan_in))`.
pub fn init_uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let bound = gain / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        trainable: bool,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let gain = 6f64.sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, &[cout, cin, kernel, kernel], fan_in, gain),
            trainable,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), trainable);
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Real>(&self, scope: &Scope<'_, T>, x: &Var<T>) -> Var<T> {
        x.conv2d(&scope.param(self.weight), Some(&scope.param(self.bias)), self.stride, self.pad)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv3d {
    weight: ParamId,
    bias: ParamId,
    spec: ConvSpec,
}

impl Conv3d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Self {
        let fan_in = cin * kernel.pow(3);
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, &[cout, cin, kernel, kernel, kernel], fan_in, 6f64.sqrt()),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true);
        Self {
            weight,
            bias,
            spec: ConvSpec::new3(1, kernel / 2),
        }
    }

    pub fn forward<T: Real>(&self, scope: &Scope<'_, T>, x: &Var<T>) -> Var<T> {
        x.conv3d(&scope.param(self.weight), Some(&scope.param(self.bias)), self.spec)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }
}

/// Fully connected layer on `(n, in)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Self {
        // Stored as (in, out) so the forward pass is a plain matmul.
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, &[fan_in, fan_out], fan_in, gain),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true);
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, scope: &Scope<'_, T>, x: &Var<T>) -> Var<T> {
        x.matmul(&scope.param(self.weight)).add(&scope.param(self.bias))
    }
}
