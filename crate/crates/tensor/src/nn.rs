//! Parameterized layers recorded onto a [`Tape`].

use rand::Rng;

use crate::conv::Conv3dSpec;
use crate::element::Element;
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Normal(f64),
    Zeros,
}

pub fn init_tensor<E: Element, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    init: Init,
    rng: &mut R,
) -> Tensor<E> {
    match init {
        Init::Xavier => {
            let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
            Tensor::rand_uniform(shape, -a, a, rng)
        }
        Init::Normal(std) => Tensor::randn(shape, std, rng),
        Init::Zeros => Tensor::zeros(shape),
    }
}

/// `y = x W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = init_tensor(&[in_dim, out_dim], in_dim, out_dim, init, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<'_, E>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.linear(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv3dSpec,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        spec: Conv3dSpec,
        rng: &mut R,
    ) -> Self {
        let taps: usize = kernel.iter().product();
        let shape = [cout, cin, kernel[0], kernel[1], kernel[2]];
        let w = init_tensor(&shape, cin * taps, cout * taps, Init::Xavier, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, spec }
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<'_, E>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.conv3d(x, w, Some(b), self.spec)
    }
}

/// Token embedding table `[vocab, dim]`.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let t = init_tensor(&[vocab, dim], vocab, dim, Init::Normal(0.5), rng);
        let table = store.add_with(format!("{name}.table"), t, false);
        Self { table, vocab, dim }
    }

    pub fn forward<E: Element>(&self, tape: &mut Tape<'_, E>, ids: &[usize]) -> Result<Var> {
        let t = tape.param(self.table);
        tape.gather_rows(t, ids)
    }
}
