//! Parameterized building units shared by every architecture.

use crate::autodiff::{BnConfig, Graph, Mode, NodeId, Padding};
use crate::error::Result;
use crate::params::{BnId, ParamId, ParamStore};
use crate::rng::SeedSource;
use crate::tensor::{init_weights, Element, InitScheme, Tensor};

/// Registers parameters with deterministic, name-keyed initialization.
pub struct Builder<'a, T: Element> {
    pub store: &'a mut ParamStore<T>,
    pub seeds: SeedSource,
    pub init: InitScheme,
}

impl<T: Element> Builder<'_, T> {
    pub fn weight(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        let mut rng = self.seeds.stream(&format!("init/{name}"), 0);
        let w = init_weights(self.init, shape, &mut rng)?;
        self.store.add(name, w, false)
    }

    pub fn constant(&mut self, name: String, len: usize, value: f64) -> Result<ParamId> {
        let t = Tensor::full(&[len], T::from_f64_lossy(value))?;
        self.store.add(name, t, true)
    }

    pub fn bn(&mut self, prefix: &str, channels: usize) -> Result<BnUnit> {
        Ok(BnUnit {
            gamma: self.constant(format!("{prefix}.gamma"), channels, 1.0)?,
            beta: self.constant(format!("{prefix}.beta"), channels, 0.0)?,
            state: self.store.add_bn(prefix.to_string(), channels)?,
        })
    }

    /// Convolution `cin → cout` with a `k×k` kernel and bias. `pre_activation`
    /// adds a BN→ReLU in front; `relu_after` a ReLU behind.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pre_activation: bool,
        relu_after: bool,
    ) -> Result<ConvUnit> {
        let pre = if pre_activation {
            Some(self.bn(&format!("{prefix}.bn"), cin)?)
        } else {
            None
        };
        Ok(ConvUnit {
            pre,
            weight: self.weight(format!("{prefix}.weight"), &[cout, cin, k, k])?,
            bias: self.constant(format!("{prefix}.bias"), cout, 0.0)?,
            stride,
            relu_after,
            cin,
            cout,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BnUnit {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnId,
}

impl BnUnit {
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: NodeId,
        mode: Mode,
        cfg: BnConfig,
    ) -> Result<NodeId> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batchnorm(x, gamma, beta, store, self.state, mode, cfg)
    }
}

#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub pre: Option<BnUnit>,
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub relu_after: bool,
    pub cin: usize,
    pub cout: usize,
}

impl ConvUnit {
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        mut x: NodeId,
        mode: Mode,
        cfg: BnConfig,
    ) -> Result<NodeId> {
        if let Some(bn) = &self.pre {
            x = bn.forward(g, store, x, mode, cfg)?;
            x = g.relu(x);
        }
        self.conv_only(g, store, x)
            .map(|y| if self.relu_after { g.relu(y) } else { y })
    }

    /// The convolution alone, without the pre-activation or trailing ReLU.
    pub fn conv_only<T: Element>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, Padding::Same)
    }

    pub fn num_params<T: Element>(&self, store: &ParamStore<T>) -> usize {
        let mut n = store.get(self.weight).value.numel() + store.get(self.bias).value.numel();
        if let Some(bn) = &self.pre {
            n += store.get(bn.gamma).value.numel() + store.get(bn.beta).value.numel();
        }
        n
    }

    /// Sets weight and bias to zero.
    pub fn zero<T: Element>(&self, store: &mut ParamStore<T>) {
        for id in [self.weight, self.bias] {
            let p = store.get_mut(id);
            p.value = p.value.zeros_like();
        }
    }
}
