//! Layer descriptors: hold names and hyperparameters, initialize their
//! parameters into a [`ParamSet`], and apply themselves to graph vars.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Bound, Graph, ParamSet, Tensor, Var};

#[derive(Debug, Clone)]
pub(crate) struct ConvSpec {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn new(name: impl Into<String>, in_c: usize, out_c: usize, k: usize, stride: usize) -> Self {
        ConvSpec {
            name: name.into(),
            in_c,
            out_c,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        let fan_in = self.in_c * self.k * self.k;
        ps.insert(
            format!("{}/weight", self.name),
            Tensor::kaiming_uniform(vec![self.out_c, self.in_c, self.k, self.k], fan_in, rng),
        );
        ps.insert(format!("{}/bias", self.name), Tensor::zeros_param(vec![self.out_c]));
    }

    pub fn apply(&self, g: &mut Graph, bp: &Bound, x: Var) -> Result<Var> {
        let w = bp.var(&format!("{}/weight", self.name));
        let b = bp.var(&format!("{}/bias", self.name));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k + self.out_c
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LinearSpec {
    pub name: String,
    pub in_f: usize,
    pub out_f: usize,
}

impl LinearSpec {
    pub fn new(name: impl Into<String>, in_f: usize, out_f: usize) -> Self {
        LinearSpec {
            name: name.into(),
            in_f,
            out_f,
        }
    }

    pub fn init(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
        ps.insert(
            format!("{}/weight", self.name),
            Tensor::kaiming_uniform(vec![self.out_f, self.in_f], self.in_f, rng),
        );
        ps.insert(format!("{}/bias", self.name), Tensor::zeros_param(vec![self.out_f]));
    }

    pub fn apply(&self, g: &mut Graph, bp: &Bound, x: Var) -> Result<Var> {
        let w = bp.var(&format!("{}/weight", self.name));
        let b = bp.var(&format!("{}/bias", self.name));
        g.linear(x, w, b)
    }
}
