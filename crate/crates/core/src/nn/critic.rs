use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, Gradients, LayerSpec, Mlp, Parameters, Trace};
use crate::error::{Error, Result};

/// Widths of the three critic sub-networks.
///
/// Hidden layers of both branches use leaky ReLU and the last layer of each
/// branch is linear. The branch outputs are summed, passed through a leaky
/// ReLU, then through the head (leaky hidden layers, linear scalar output).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticLayout {
    pub state_widths: Vec<usize>,
    pub action_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
}

impl Default for CriticLayout {
    fn default() -> Self {
        Self {
            state_widths: vec![500, 300, 300],
            action_widths: vec![500, 300],
            head_widths: vec![100],
        }
    }
}

fn branch_specs(input_dim: usize, widths: &[usize], last: Activation) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(widths.len());
    let mut prev = input_dim;
    for (k, &w) in widths.iter().enumerate() {
        let act = if k + 1 == widths.len() {
            last
        } else {
            Activation::LeakyRelu
        };
        specs.push(LayerSpec::new(prev, w, act));
        prev = w;
    }
    specs
}

impl CriticLayout {
    fn specs(&self, state_dim: usize, action_dim: usize) -> Result<[Vec<LayerSpec>; 3]> {
        if self.state_widths.is_empty() || self.action_widths.is_empty() {
            return Err(Error::Shape("critic branches need at least one layer".into()));
        }
        let merged = *self.state_widths.last().unwrap();
        if merged != *self.action_widths.last().unwrap() {
            return Err(Error::Shape(format!(
                "state branch ends at width {merged}, action branch at {}",
                self.action_widths.last().unwrap()
            )));
        }
        let mut head_widths = self.head_widths.clone();
        head_widths.push(1);
        Ok([
            branch_specs(state_dim, &self.state_widths, Activation::None),
            branch_specs(action_dim, &self.action_widths, Activation::None),
            branch_specs(merged, &head_widths, Activation::None),
        ])
    }
}

/// Action-value network `Q(s, a)` with separate state and action branches
/// joined by element-wise addition.
#[derive(Debug, Clone)]
pub struct CriticNet {
    state_branch: Mlp,
    action_branch: Mlp,
    head: Mlp,
    cache: Option<CriticTrace>,
}

impl PartialEq for CriticNet {
    fn eq(&self, other: &Self) -> bool {
        self.state_branch == other.state_branch
            && self.action_branch == other.action_branch
            && self.head == other.head
    }
}

#[derive(Debug, Clone)]
pub struct CriticTrace {
    state: Trace,
    action: Trace,
    merged_pre: Vec<f64>,
    head: Trace,
}

impl CriticTrace {
    pub fn value(&self) -> f64 {
        self.head.output()[0]
    }
}

impl CriticNet {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        layout: &CriticLayout,
        rng: &mut R,
    ) -> Result<Self> {
        let [s, a, h] = layout.specs(state_dim, action_dim)?;
        Self::from_parts(
            Mlp::new(&s, rng)?,
            Mlp::new(&a, rng)?,
            Mlp::new(&h, rng)?,
        )
    }

    pub fn zeros(state_dim: usize, action_dim: usize, layout: &CriticLayout) -> Result<Self> {
        let [s, a, h] = layout.specs(state_dim, action_dim)?;
        Self::from_parts(Mlp::zeros(&s)?, Mlp::zeros(&a)?, Mlp::zeros(&h)?)
    }

    pub fn from_parts(state_branch: Mlp, action_branch: Mlp, head: Mlp) -> Result<Self> {
        if state_branch.output_dim() != action_branch.output_dim() {
            return Err(Error::Shape(format!(
                "branch widths differ: state {} vs action {}",
                state_branch.output_dim(),
                action_branch.output_dim()
            )));
        }
        if head.input_dim() != state_branch.output_dim() || head.output_dim() != 1 {
            return Err(Error::Shape(format!(
                "head must map {} -> 1, got {} -> {}",
                state_branch.output_dim(),
                head.input_dim(),
                head.output_dim()
            )));
        }
        Ok(Self {
            state_branch,
            action_branch,
            head,
            cache: None,
        })
    }

    pub fn state_branch(&self) -> &Mlp {
        &self.state_branch
    }

    pub fn action_branch(&self) -> &Mlp {
        &self.action_branch
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Mlp {
        &mut self.head
    }

    pub fn state_dim(&self) -> usize {
        self.state_branch.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_branch.input_dim()
    }

    pub fn trace(&self, state: &[f64], action: &[f64]) -> Result<CriticTrace> {
        let st = self.state_branch.trace(state)?;
        let at = self.action_branch.trace(action)?;
        let merged_pre: Vec<f64> = st.output().iter().zip(at.output()).map(|(x, y)| x + y).collect();
        let merged: Vec<f64> = merged_pre
            .iter()
            .map(|&z| Activation::LeakyRelu.apply(z))
            .collect();
        let head = self.head.trace(&merged)?;
        Ok(CriticTrace {
            state: st,
            action: at,
            merged_pre,
            head,
        })
    }

    pub fn value(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self.trace(state, action)?.value())
    }

    /// `Q(s, a)`, caching intermediates for [`CriticNet::backward`].
    pub fn forward(&mut self, state: &[f64], action: &[f64]) -> Result<f64> {
        let trace = self.trace(state, action)?;
        let q = trace.value();
        self.cache = Some(trace);
        Ok(q)
    }

    /// Gradients of `upstream · Q` using the last cached forward pass.
    /// Returns parameter gradients, `dQ/ds`, and `dQ/da`.
    pub fn backward(&self, upstream: f64) -> Result<(Gradients, Vec<f64>, Vec<f64>)> {
        let trace = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("critic backward called before forward".into()))?;
        let mut grads = Gradients::zeros_like(self);
        let (ds, da) = self.backward_trace(trace, upstream, Some(&mut grads))?;
        Ok((grads, ds, da))
    }

    /// Reverse pass over `trace`, accumulating parameter gradients into
    /// `grads` when given. Returns `(dQ/ds, dQ/da)`.
    pub fn backward_trace(
        &self,
        trace: &CriticTrace,
        upstream: f64,
        grads: Option<&mut Gradients>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let ns = 2 * self.state_branch.layers().len();
        let na = 2 * self.action_branch.layers().len();
        let mut grads = grads.map(|g| g.slices_mut());
        if let Some(g) = grads.as_deref() {
            if g.len() != ns + na + 2 * self.head.layers().len() {
                return Err(Error::Shape("critic gradient layout mismatch".into()));
            }
        }
        let (gs, ga, gh) = match grads.as_deref_mut() {
            Some(g) => {
                let (gs, rest) = g.split_at_mut(ns);
                let (ga, gh) = rest.split_at_mut(na);
                (Some(gs), Some(ga), Some(gh))
            }
            None => (None, None, None),
        };
        let mut d_merged = self.head.backward_slices(&trace.head, &[upstream], gh)?;
        for (d, &z) in d_merged.iter_mut().zip(&trace.merged_pre) {
            if z < 0.0 {
                *d *= super::LEAKY_SLOPE;
            }
        }
        let ds = self.state_branch.backward_slices(&trace.state, &d_merged, gs)?;
        let da = self.action_branch.backward_slices(&trace.action, &d_merged, ga)?;
        Ok((ds, da))
    }

    /// `dQ/da` alone; skips the state branch and all parameter gradients.
    pub fn action_gradient(&self, trace: &CriticTrace) -> Result<Vec<f64>> {
        let mut d_merged = self.head.backward_slices(&trace.head, &[1.0], None)?;
        for (d, &z) in d_merged.iter_mut().zip(&trace.merged_pre) {
            if z < 0.0 {
                *d *= super::LEAKY_SLOPE;
            }
        }
        self.action_branch.backward_slices(&trace.action, &d_merged, None)
    }
}

impl Parameters for CriticNet {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.state_branch.param_slices();
        v.extend(self.action_branch.param_slices());
        v.extend(self.head.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.state_branch.param_slices_mut();
        v.extend(self.action_branch.param_slices_mut());
        v.extend(self.head.param_slices_mut());
        v
    }

    fn architecture(&self) -> Vec<LayerSpec> {
        let mut v = self.state_branch.specs();
        v.extend(self.action_branch.specs());
        v.extend(self.head.specs());
        v
    }
}
