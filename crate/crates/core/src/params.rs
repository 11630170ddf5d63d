//! Named parameter collections and the momentum SGD update.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    momentum: Tensor,
    grad: Option<Tensor>,
}

/// Ordered, uniquely named parameters with one momentum buffer each.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let momentum = Tensor::zeros(value.shape());
        self.entries.push(Entry {
            name,
            value,
            momentum,
            grad: None,
        });
        Ok(())
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.entries[i].value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|e| &mut e.value)
    }

    pub fn momentum(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].momentum)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).and_then(|i| self.entries[i].grad.as_ref())
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        self.entries[i].value.check_same_shape(&grad)?;
        self.entries[i].grad = Some(grad);
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Checks that `other` has the same parameter names, order and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name {
                return Err(Error::Config(format!(
                    "parameter name mismatch: `{}` vs `{}`",
                    a.name, b.name
                )));
            }
            if a.value.shape() != b.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{}`: {:?} vs {:?}",
                    a.name,
                    a.value.shape(),
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers every parameter on `graph`, as trainable leaves or as constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                let v = if trainable {
                    graph.param(e.value.clone())
                } else {
                    graph.constant(e.value.clone())
                };
                (e.name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Copies gradients out of `graph` for the variables in `bound`.
    ///
    /// Parameters the loss does not reach get an explicit zero gradient.
    pub fn collect_grads(&mut self, graph: &Graph, bound: &BoundParams) -> Result<()> {
        for (name, var) in &bound.vars {
            let g = graph
                .grad(*var)
                .unwrap_or_else(|| Tensor::zeros(graph.value(*var).shape()));
            self.set_grad(name, g)?;
        }
        Ok(())
    }
}

/// Graph variables for a [`ParamSet`] bound with [`ParamSet::bind`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Classic SGD with coupled weight decay:
/// `v <- momentum * v + (grad + weight_decay * w)`, `w <- w - lr * v`.
///
/// Every parameter must carry a gradient; gradients are cleared afterwards.
pub fn sgd_momentum_step(params: &mut ParamSet, cfg: SgdConfig) -> Result<()> {
    if let Some(e) = params.entries.iter().find(|e| e.grad.is_none()) {
        return Err(Error::MissingGrad(e.name.clone()));
    }
    for e in &mut params.entries {
        let grad = e.grad.take().expect("checked above");
        let w = e.value.data_mut();
        let v = e.momentum.data_mut();
        for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
            *vi = cfg.momentum * *vi + (gi + cfg.weight_decay * *wi);
            *wi -= cfg.lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, grad: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::full(&[1], w)).unwrap();
        p.set_grad("w", Tensor::full(&[1], grad)).unwrap();
        p
    }

    fn w(p: &ParamSet) -> f64 {
        p.get("w").unwrap().data()[0]
    }

    #[test]
    fn vanilla_step() {
        let mut p = single(1.0, 1.0);
        sgd_momentum_step(
            &mut p,
            SgdConfig {
                lr: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
            },
        )
        .unwrap();
        assert!((w(&p) - 0.9).abs() < 1e-15);
        assert!(p.grad("w").is_none());
    }

    #[test]
    fn momentum_unrolls() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut p = single(1.0, 1.0);
        sgd_momentum_step(&mut p, cfg).unwrap();
        p.set_grad("w", Tensor::full(&[1], 1.0)).unwrap();
        sgd_momentum_step(&mut p, cfg).unwrap();
        // 1 - 0.1 * 1 - 0.1 * (0.9 + 1)
        assert!((w(&p) - 0.71).abs() < 1e-12);
    }

    #[test]
    fn decay_only() {
        let mut p = single(2.0, 0.0);
        sgd_momentum_step(
            &mut p,
            SgdConfig {
                lr: 1.0,
                momentum: 0.0,
                weight_decay: 0.0005,
            },
        )
        .unwrap();
        assert!((w(&p) - 1.999).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut p = ParamSet::new();
        p.insert("conv.w", Tensor::zeros(&[2])).unwrap();
        let err = sgd_momentum_step(
            &mut p,
            SgdConfig {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 0.0,
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("conv.w"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
        assert_eq!(p.momentum("a").unwrap().shape(), &[1]);
    }
}
