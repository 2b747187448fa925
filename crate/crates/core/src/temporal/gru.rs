//! Stacked, optionally bidirectional GRU with PyTorch's gate layout and
//! parameter names (`weight_ih_l{k}[_reverse]`, gates ordered r, z, n).

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::nn::{self, ParamStore};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub bidirectional: bool,
}

impl GruShape {
    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    pub fn output_dim(&self) -> usize {
        self.hidden_dim * self.directions()
    }

    fn suffixes(&self) -> &'static [&'static str] {
        if self.bidirectional {
            &["", "_reverse"]
        } else {
            &[""]
        }
    }
}

/// Uniform in `+-1/sqrt(hidden_dim)` for every weight and bias.
pub fn init(store: &mut ParamStore, prefix: &str, shape: GruShape, rng: &mut SeededRng) -> Result<()> {
    let h = shape.hidden_dim;
    let bound = 1.0 / (h as f64).sqrt();
    for layer in 0..shape.layers {
        let in_dim = if layer == 0 { shape.input_dim } else { shape.output_dim() };
        for sfx in shape.suffixes() {
            let p = |n: &str| format!("{prefix}.{n}_l{layer}{sfx}");
            store.insert_param(p("weight_ih"), &nn::uniform(&[3 * h, in_dim], bound, rng)?)?;
            store.insert_param(p("weight_hh"), &nn::uniform(&[3 * h, h], bound, rng)?)?;
            store.insert_param(p("bias_ih"), &nn::uniform(&[3 * h], bound, rng)?)?;
            store.insert_param(p("bias_hh"), &nn::uniform(&[3 * h], bound, rng)?)?;
        }
    }
    Ok(())
}

/// One direction of one layer over `(B, T, in)`; returns `(B, T, H)`.
fn run_direction(x: &Tensor, store: &ParamStore, names: [String; 4], h: usize, reverse: bool) -> Result<Tensor> {
    let [w_ih, w_hh, b_ih, b_hh] = names.map(|n| store.param(&n));
    let (w_ih, w_hh, b_ih, b_hh) = (w_ih?, w_hh?, b_ih?, b_hh?);
    let (b, t, _) = x.dims3()?;
    let gx = x.broadcast_matmul(&w_ih.t()?)?.broadcast_add(&b_ih)?;
    let w_hh_t = w_hh.t()?;
    let mut state = Tensor::zeros((b, h), x.dtype(), x.device())?;
    let mut outputs = vec![None; t];
    let steps: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..t).rev()) } else { Box::new(0..t) };
    for step in steps {
        let gi = gx.narrow(1, step, 1)?.squeeze(1)?;
        let gh = state.matmul(&w_hh_t)?.broadcast_add(&b_hh)?;
        let r = (gi.narrow(1, 0, h)? + gh.narrow(1, 0, h)?)?;
        let r = candle_nn::ops::sigmoid(&r)?;
        let z = candle_nn::ops::sigmoid(&(gi.narrow(1, h, h)? + gh.narrow(1, h, h)?)?)?;
        let n = (gi.narrow(1, 2 * h, h)? + r.mul(&gh.narrow(1, 2 * h, h)?)?)?.tanh()?;
        // h' = (1 - z) * n + z * h = n + z * (h - n)
        state = (&n + z.mul(&(&state - &n)?)?)?;
        outputs[step] = Some(state.clone());
    }
    let outputs: Vec<Tensor> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
    Ok(Tensor::stack(&outputs, 1)?)
}

/// Runs the stack over `(B, T, input_dim)`. Dropout, when given, applies
/// to the outputs of every layer except the last. Returns the top layer's
/// outputs `(B, T, output_dim)` and the final states
/// `(layers * directions, B, H)`.
pub fn forward(
    x: &Tensor,
    store: &ParamStore,
    prefix: &str,
    shape: GruShape,
    mut dropout: Option<(f64, &mut SeededRng)>,
) -> Result<(Tensor, Tensor)> {
    let h = shape.hidden_dim;
    let t = x.dim(1)?;
    let mut input = x.clone();
    let mut finals = Vec::new();
    for layer in 0..shape.layers {
        let mut dirs = Vec::new();
        for (d, sfx) in shape.suffixes().iter().enumerate() {
            let names = ["weight_ih", "weight_hh", "bias_ih", "bias_hh"].map(|n| format!("{prefix}.{n}_l{layer}{sfx}"));
            let out = run_direction(&input, store, names, h, d == 1)?;
            let last = if d == 1 { 0 } else { t - 1 };
            finals.push(out.narrow(1, last, 1)?.squeeze(1)?);
            dirs.push(out);
        }
        input = Tensor::cat(&dirs, D::Minus1)?;
        if layer + 1 < shape.layers {
            if let Some((p, rng)) = dropout.as_mut() {
                input = nn::dropout(&input, *p, rng)?;
            }
        }
    }
    Ok((input, Tensor::stack(&finals, 0)?))
}
