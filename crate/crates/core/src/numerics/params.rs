use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    name: String,
    value: Tensor,
    #[serde(skip)]
    grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    /// Last stored gradient, or zeros shaped like the value.
    pub fn grad(&self) -> Tensor {
        self.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.value.shape()))
    }
}

/// Ordered, uniquely named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    params: Vec<Parameter>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its position.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize, NumericsError> {
        let name = name.into();
        if self.position(&name).is_some() {
            return Err(NumericsError::DuplicateParameter(name));
        }
        self.params.push(Parameter::new(name, value));
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, NumericsError> {
        self.get(name)
            .map(Parameter::value)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn by_index(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<(), NumericsError> {
        let idx = self
            .position(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))?;
        if self.params[idx].value.shape() != value.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "set_value",
                detail: format!("{name}: {:?} vs {:?}", self.params[idx].value.shape(), value.shape()),
            });
        }
        self.params[idx].value = value;
        Ok(())
    }

    /// Stores gradients so they can be read back through [`Parameter::grad`].
    pub fn store_gradients(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            p.grad = Some(g.clone());
        }
    }

    /// Puts every parameter on a graph as a leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        let vars = self.params.iter().map(|p| graph.leaf(p.value.clone())).collect();
        Bound {
            vars,
            names: self.params.iter().map(|p| p.name.clone()).collect(),
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Graph handles for a bound [`ModelParams`], in parameter order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    names: Vec<String>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var, NumericsError> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// One gradient tensor per parameter, aligned with [`ModelParams`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self(params.iter().map(|p| Tensor::zeros(p.value().shape())).collect())
    }

    pub fn get(&self, params: &ModelParams, name: &str) -> Option<&Tensor> {
        params.position(name).map(|i| &self.0[i])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }
}

/// Evaluates a scalar loss built on a fresh graph and returns it with exact
/// reverse-mode gradients for every parameter.
pub fn evaluate_with_gradients<F, E>(loss_fn: F, params: &ModelParams) -> Result<(f64, Gradients), E>
where
    F: FnOnce(&mut Graph, &Bound) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let loss = loss_fn(&mut graph, &bound)?;
    graph.ensure_finite()?;
    if graph.value(loss).len() != 1 {
        return Err(NumericsError::ShapeMismatch {
            op: "evaluate_with_gradients",
            detail: "loss is not a scalar".into(),
        }
        .into());
    }
    let mut node_grads = graph.backward(loss)?;
    let grads = bound
        .vars()
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| {
            node_grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(p.value().shape()))
        })
        .collect::<Vec<_>>();
    let grads = Gradients(grads);
    if !grads.is_finite() {
        return Err(NumericsError::NonFinite {
            op: "backward",
            node: loss.index(),
        }
        .into());
    }
    Ok((graph.scalar_value(loss), grads))
}

/// Forward-only evaluation of a scalar loss.
pub fn evaluate<F, E>(loss_fn: F, params: &ModelParams) -> Result<f64, E>
where
    F: FnOnce(&mut Graph, &Bound) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let loss = loss_fn(&mut graph, &bound)?;
    graph.ensure_finite()?;
    Ok(graph.scalar_value(loss))
}

/// Central-difference gradient `(f(x+h) - f(x-h)) / 2h` for every
/// coordinate of every parameter. `loss_fn` must be deterministic.
pub fn finite_difference_gradient<F, E>(loss_fn: F, params: &ModelParams, h: f64) -> Result<Gradients, E>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var, E>,
    E: From<NumericsError>,
{
    if !(h > 0.0) {
        return Err(NumericsError::InvalidStep(h).into());
    }
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let n = params.by_index(pi).value().len();
        let mut g = Tensor::zeros(params.by_index(pi).value().shape());
        for k in 0..n {
            let x0 = params.by_index(pi).value().data()[k];
            probe.by_index_mut(pi).value_mut().data_mut()[k] = x0 + h;
            let fp = evaluate(&loss_fn, &probe)?;
            probe.by_index_mut(pi).value_mut().data_mut()[k] = x0 - h;
            let fm = evaluate(&loss_fn, &probe)?;
            probe.by_index_mut(pi).value_mut().data_mut()[k] = x0;
            g.data_mut()[k] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(Gradients(out))
}

/// Per-parameter comparison between two gradient sets.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientComparison {
    pub parameter: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// Relative error `|a - b| / max(|a|, |b|, 1e-8)` maximised per parameter.
pub fn compare_gradients(params: &ModelParams, analytic: &Gradients, numeric: &Gradients) -> Vec<GradientComparison> {
    compare_gradients_with_floor(params, analytic, numeric, 1e-8)
}

/// Relative error `|a - b| / max(|a|, |b|, floor)` maximised per parameter.
pub fn compare_gradients_with_floor(
    params: &ModelParams,
    analytic: &Gradients,
    numeric: &Gradients,
    floor: f64,
) -> Vec<GradientComparison> {
    params
        .iter()
        .zip(analytic.0.iter().zip(&numeric.0))
        .map(|(p, (a, b))| {
            let mut worst = (0.0_f64, 0usize);
            for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
                let denom = x.abs().max(y.abs()).max(floor);
                let err = (x - y).abs() / denom;
                if err > worst.0 {
                    worst = (err, i);
                }
            }
            GradientComparison {
                parameter: p.name().to_string(),
                max_rel_error: worst.0,
                worst_index: worst.1,
            }
        })
        .collect()
}

/// Step used by [`gradient_check`].
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Denominator floor of [`gradient_check`], relative to `max(|f|, 1)`.
///
/// Central differences carry roundoff of roughly `eps * |f| / h`, about
/// `2e-11 |f|` at the default step. Coordinates whose true gradient is
/// below the floor (for example exactly zero by symmetry) are therefore
/// compared on an absolute scale instead of amplifying that noise.
pub const GRADCHECK_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientCheck {
    pub loss: f64,
    pub floor: f64,
    pub comparisons: Vec<GradientComparison>,
}

impl GradientCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.comparisons.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

/// Reverse-mode gradients against central differences at
/// [`GRADCHECK_STEP`], with the loss-scaled floor [`GRADCHECK_FLOOR`].
pub fn gradient_check<F, E>(loss_fn: F, params: &ModelParams) -> Result<GradientCheck, E>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let (loss, analytic) = evaluate_with_gradients(&loss_fn, params)?;
    let numeric = finite_difference_gradient(&loss_fn, params, GRADCHECK_STEP)?;
    let floor = GRADCHECK_FLOOR * loss.abs().max(1.0);
    Ok(GradientCheck {
        loss,
        floor,
        comparisons: compare_gradients_with_floor(params, &analytic, &numeric, floor),
    })
}
