//! Convolution layers and residual blocks over a [`ParamStore`].

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Var};

/// "Same"-padded convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add_normal(
            format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            fan_in,
            gain,
            rng,
        )?;
        let bias = store.add_zeros(format!("{name}.bias"), &[c_out])?;
        Ok(Self {
            weight,
            bias,
            c_in,
            c_out,
        })
    }

    /// All-zero kernel and bias.
    pub fn zeros<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        let weight = store.add_zeros(format!("{name}.weight"), &[c_out, c_in, kernel, kernel])?;
        let bias = store.add_zeros(format!("{name}.bias"), &[c_out])?;
        Ok(Self {
            weight,
            bias,
            c_in,
            c_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, w)?;
        g.add_channel_bias(y, b)
    }
}

/// Pre-activation residual block: `skip(x) + conv(silu(conv(silu(x)) + cond))`.
///
/// `cond` is an optional per-sample channel offset `[n, hidden]` injected
/// between the two convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub proj: Option<Conv>,
}

impl ResBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::with_hidden(store, name, c_in, c_out, c_out, rng)
    }

    pub fn with_hidden<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        hidden: usize,
        c_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let conv1 = Conv::new(store, &format!("{name}.conv1"), c_in, hidden, 3, 1.0, rng)?;
        let conv2 = Conv::new(store, &format!("{name}.conv2"), hidden, c_out, 3, 0.1, rng)?;
        let proj = if c_in != c_out {
            Some(Conv::new(store, &format!("{name}.proj"), c_in, c_out, 1, 1.0, rng)?)
        } else {
            None
        };
        Ok(Self { conv1, conv2, proj })
    }

    pub fn c_out(&self) -> usize {
        self.conv2.c_out
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        cond: Option<Var>,
    ) -> Result<Var> {
        let h = g.silu(x);
        let mut h = self.conv1.forward(g, store, h)?;
        if let Some(c) = cond {
            h = g.add_sample_channel(h, c)?;
        }
        let h = g.silu(h);
        let h = self.conv2.forward(g, store, h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(g, store, x)?,
            None => x,
        };
        g.add(skip, h)
    }
}
