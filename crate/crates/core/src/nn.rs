//! Parameters, small layer building blocks, SGD and gradient checking.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::distributions::{Distribution, Uniform};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named trainable tensor. The held tensor is a gradient-accumulating leaf;
/// optimizer steps re-seat it with fresh data, which also clears its grad.
pub struct Parameter<T: Scalar> {
    name: String,
    value: RefCell<Tensor<T>>,
}

pub type ParamRef<T> = Rc<Parameter<T>>;

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, data: Vec<T>, shape: &[usize]) -> Result<ParamRef<T>> {
        Ok(Rc::new(Parameter {
            name: name.into(),
            value: RefCell::new(Tensor::leaf_with_grad(data, shape)?),
        }))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> Tensor<T> {
        self.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    pub fn data(&self) -> Vec<T> {
        self.value.borrow().data().to_vec()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.value.borrow().grad()
    }

    pub fn zero_grad(&self) {
        self.value.borrow().zero_grad();
    }

    pub fn scale_grad(&self, s: T) {
        self.value.borrow().scale_grad(s);
    }

    /// Replace the stored values, keeping the shape. Clears the gradient.
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        let shape = self.shape();
        *self.value.borrow_mut() = Tensor::leaf_with_grad(data, &shape)?;
        Ok(())
    }
}

/// Registry guaranteeing each parameter name appears exactly once.
pub struct ParamSet<T: Scalar> {
    params: Vec<ParamRef<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { params: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn register(&mut self, p: ParamRef<T>) -> Result<ParamRef<T>> {
        if self.params.iter().any(|q| q.name() == p.name()) {
            return Err(Error::Arg(format!("duplicate parameter name {}", p.name())));
        }
        self.params.push(Rc::clone(&p));
        Ok(p)
    }

    pub fn all(&self) -> &[ParamRef<T>] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&ParamRef<T>> {
        self.params.iter().find(|p| p.name() == name)
    }

    pub fn total_elems(&self) -> usize {
        self.params.iter().map(|p| p.shape().iter().product::<usize>()).sum()
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

/// Seeded uniform initializer in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Scalar>(&mut self, len: usize, fan_in: usize) -> Vec<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        (0..len)
            .map(|_| T::from_f64(dist.sample(&mut self.rng)))
            .collect()
    }
}

/// 2D convolution layer with optional bias.
pub struct ConvLayer<T: Scalar> {
    pub weight: ParamRef<T>,
    pub bias: Option<ParamRef<T>>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl<T: Scalar> ConvLayer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        set: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        with_bias: bool,
    ) -> Result<Self> {
        let fan_in = c_in * kernel.0 * kernel.1;
        let weight = set.register(Parameter::new(
            format!("{name}.weight"),
            init.uniform(c_out * fan_in, fan_in),
            &[c_out, c_in, kernel.0, kernel.1],
        )?)?;
        let bias = if with_bias {
            Some(set.register(Parameter::new(
                format!("{name}.bias"),
                init.uniform(c_out, fan_in),
                &[c_out],
            )?)?)
        } else {
            None
        };
        Ok(ConvLayer {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.bias.as_ref().map(|p| p.tensor());
        x.conv2d(&self.weight.tensor(), b.as_ref(), self.stride, self.padding)
    }

    /// Overwrite the kernel with a channelwise Dirac (identity map) and zero
    /// the bias. Requires square odd kernels and c_in == c_out.
    pub fn set_identity(&self) -> Result<()> {
        let shape = self.weight.shape();
        let (c_out, c_in, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
        if c_out != c_in || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Arg(
                "identity kernel needs square-channel odd-size conv".into(),
            ));
        }
        let mut w = vec![T::ZERO; c_out * c_in * kh * kw];
        for c in 0..c_out {
            w[c * c_in * kh * kw + c * kh * kw + (kh / 2) * kw + kw / 2] = T::ONE;
        }
        self.weight.set_data(w)?;
        if let Some(b) = &self.bias {
            b.set_data(vec![T::ZERO; c_out])?;
        }
        Ok(())
    }

    pub fn set_zero(&self) -> Result<()> {
        let shape = self.weight.shape();
        self.weight.set_data(vec![T::ZERO; shape.iter().product()])?;
        if let Some(b) = &self.bias {
            b.set_data(vec![T::ZERO; shape[0]])?;
        }
        Ok(())
    }
}

/// Channel-preserving stack of 3x3 convolutions with relu between layers
/// (none after the last). Depth 1 is a single conv with no activation.
pub struct ConvStack<T: Scalar> {
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Scalar> ConvStack<T> {
    pub fn new(
        set: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        channels: usize,
        depth: usize,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth);
        for d in 0..depth {
            layers.push(ConvLayer::new(
                set,
                init,
                &format!("{name}.{d}"),
                channels,
                channels,
                (3, 3),
                (1, 1),
                (1, 1),
                true,
            )?);
        }
        Ok(ConvStack { layers })
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                y = y.relu();
            }
            y = layer.apply(&y)?;
        }
        Ok(y)
    }

    /// Identity test configuration: every layer becomes a Dirac kernel.
    /// Only exact for depth 1 (no relu in the path); with depth > 1 the relu
    /// between layers still applies.
    pub fn set_identity(&self) -> Result<()> {
        for layer in &self.layers {
            layer.set_identity()?;
        }
        Ok(())
    }
}

/// Bias-free linear map `x[N x C_in] . W[C_in x C_out]`.
pub struct Linear<T: Scalar> {
    pub weight: ParamRef<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(
        set: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let weight = set.register(Parameter::new(
            format!("{name}.weight"),
            init.uniform(c_in * c_out, c_in),
            &[c_in, c_out],
        )?)?;
        Ok(Linear { weight })
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight.tensor())
    }

    pub fn set_identity(&self) -> Result<()> {
        let shape = self.weight.shape();
        if shape[0] != shape[1] {
            return Err(Error::Arg("identity weight needs a square matrix".into()));
        }
        let n = shape[0];
        let mut w = vec![T::ZERO; n * n];
        for i in 0..n {
            w[i * n + i] = T::ONE;
        }
        self.weight.set_data(w)
    }
}

/// Plain SGD with momentum; velocity buffers are keyed by parameter name.
pub struct Sgd<T: Scalar> {
    pub momentum: f64,
    velocity: HashMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &[ParamRef<T>], lr: f64) -> Result<()> {
        let m = T::from_f64(self.momentum);
        let lr = T::from_f64(lr);
        for p in params {
            let grad = match p.grad() {
                Some(g) => g,
                None => continue,
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter {}",
                    p.name()
                )));
            }
            let vel = self
                .velocity
                .entry(p.name().to_string())
                .or_insert_with(|| vec![T::ZERO; grad.len()]);
            let mut data = p.data();
            for ((d, v), &g) in data.iter_mut().zip(vel.iter_mut()).zip(&grad) {
                *v = *v * m + g;
                *d -= lr * *v;
            }
            p.set_data(data)?;
        }
        Ok(())
    }
}

/// "poly" learning rate decay: lr * (1 - step/max)^0.9.
pub fn poly_lr(base: f64, step: usize, max_steps: usize) -> f64 {
    if max_steps == 0 {
        return base;
    }
    let frac = 1.0 - (step as f64) / (max_steps as f64);
    base * frac.max(0.0).powf(0.9)
}

/// Per-parameter result of an analytic-vs-finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compare analytic gradients of a deterministic scalar `model_fn` of
/// `params` against central finite differences with step `eps`.
///
/// Relative error per element is |a - f| / max(1, |a|, |f|).
pub fn grad_check<T, F>(
    model_fn: F,
    params: &[ParamRef<T>],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn() -> Result<Tensor<T>>,
{
    for p in params {
        p.zero_grad();
    }
    let loss = model_fn()?;
    if !loss.item()?.is_finite() {
        return Err(Error::Numeric("non-finite loss in grad_check".into()));
    }
    loss.backward()?;
    let analytic: Vec<Vec<T>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![T::ZERO; p.data().len()]))
        .collect();

    let mut entries = Vec::with_capacity(params.len());
    for (p, an) in params.iter().zip(&analytic) {
        let base = p.data();
        let mut max_rel = 0.0f64;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += T::from_f64(eps);
            p.set_data(plus)?;
            let lp = model_fn()?.item()?.to_f64();
            let mut minus = base.clone();
            minus[i] -= T::from_f64(eps);
            p.set_data(minus)?;
            let lm = model_fn()?.item()?.to_f64();
            p.set_data(base.clone())?;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss while perturbing parameter {}",
                    p.name()
                )));
            }
            let fd = (lp - lm) / (2.0 * eps);
            let a = an[i].to_f64();
            let rel = (a - fd).abs() / 1.0f64.max(a.abs()).max(fd.abs());
            max_rel = max_rel.max(rel);
        }
        entries.push(GradCheckEntry {
            name: p.name().to_string(),
            max_rel_err: max_rel,
            pass: max_rel <= tol,
        });
    }
    Ok(GradCheckReport { entries, tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_check_quadratic() {
        let p = Parameter::new("theta", vec![0.3f64, -1.2, 2.0], &[3]).unwrap();
        let params = vec![Rc::clone(&p)];
        let report = grad_check(
            || {
                let t = p.tensor().reshape(&[1, 3])?;
                Ok(t.matmul(&t.transpose2()?)?.sum())
            },
            &params,
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(report.all_pass(), "{:?}", report);
        // analytic gradient of theta^T theta is 2 theta
        p.zero_grad();
        let t = p.tensor().reshape(&[1, 3]).unwrap();
        let loss = t.matmul(&t.transpose2().unwrap()).unwrap().sum();
        loss.backward().unwrap();
        let g = p.grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] + 2.4).abs() < 1e-12);
    }

    #[test]
    fn grad_check_through_topk_selection() {
        // values well separated so +-eps cannot flip the ranking
        let p = Parameter::new("x", vec![5.0f64, 1.0, 3.0, -2.0, 9.0, 0.5], &[6]).unwrap();
        let params = vec![Rc::clone(&p)];
        let report = grad_check(
            || {
                let t = p.tensor().reshape(&[6, 1])?;
                Ok(t.topk_per_column(2)?.sum())
            },
            &params,
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(report.all_pass(), "{:?}", report);
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let mut set = ParamSet::<f64>::default();
        set.register(Parameter::new("w", vec![0.0], &[1]).unwrap()).unwrap();
        assert!(set
            .register(Parameter::new("w", vec![0.0], &[1]).unwrap())
            .is_err());
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let p = Parameter::new("w", vec![1.0f64, 2.0], &[2]).unwrap();
        p.tensor().sum().backward().unwrap();
        let mut opt = Sgd::new(0.9);
        opt.step(&[Rc::clone(&p)], 0.0).unwrap();
        assert_eq!(p.data(), vec![1.0, 2.0]);
    }

    #[test]
    fn poly_lr_decays() {
        assert!((poly_lr(1.0, 0, 100) - 1.0).abs() < 1e-12);
        assert!(poly_lr(1.0, 50, 100) < 1.0);
        assert!(poly_lr(1.0, 100, 100) < 1e-12);
    }
}
