//! Parameterized layers built on the autodiff ops.

use alloc::format;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ops, Binder, Graph, Var};
use crate::params::{init_tensor, Init, ParamId, ParamStore};

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let weight = store.add(&format!("{name}.weight"), init_tensor(&[cout, cin, k, k], init, rng));
        let bias = store.add(&format!("{name}.bias"), init_tensor(&[cout], Init::Zeros, rng));
        Self { weight, bias, stride, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder<'_>, x: Var) -> Var {
        let w = p.get(g, self.weight);
        let b = p.get(g, self.bias);
        ops::conv2d(g, x, w, Some(b), self.stride, self.pad)
    }
}

/// Pre-activation residual block: `skip(x) + conv2(relu(conv1(relu(x))))`,
/// with a 1x1 projection on the skip path when channel counts differ.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Self {
        let conv1 = Conv::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, 1, Init::FanInUniform);
        let conv2 = Conv::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, Init::FanInUniform);
        let skip = (cin != cout)
            .then(|| Conv::new(store, rng, &format!("{name}.skip"), cin, cout, 1, 1, Init::FanInUniform));
        Self { conv1, conv2, skip }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Binder<'_>, x: Var) -> Var {
        let a = ops::relu(g, x);
        let a = self.conv1.forward(g, p, a);
        let a = ops::relu(g, a);
        let a = self.conv2.forward(g, p, a);
        let s = match &self.skip {
            Some(c) => c.forward(g, p, x),
            None => x,
        };
        ops::add(g, s, a)
    }
}
