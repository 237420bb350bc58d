use rand::Rng;

use super::layers::Linear;
use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, ParamId, ParamSet, Tensor, Var};

/// One recurrent layer. Gate blocks are stacked column-wise as
/// `[reset | update | candidate]`.
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_hid: ParamId,
    pub b_hid: ParamId,
    pub hidden: usize,
}

impl GruLayer {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w_in: ps.weight(format!("{name}.w_in"), input, 3 * hidden, rng),
            b_in: ps.zeros(format!("{name}.b_in"), 3 * hidden),
            w_hid: ps.weight(format!("{name}.w_hid"), hidden, 3 * hidden, rng),
            b_hid: ps.zeros(format!("{name}.b_hid"), 3 * hidden),
            hidden,
        }
    }

    /// Runs the recurrence from a zero state over `T × input`, returning
    /// `T × hidden`. The candidate uses LeakyReLU.
    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let h_dim = self.hidden;
        let t_len = g.shape(x)[0];
        let xi = g.matmul(x, b.get(self.w_in))?;
        let xi = g.add(xi, b.get(self.b_in))?;
        let mut h = g.constant(Tensor::zeros(&[1, h_dim]));
        let mut states = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = g.slice(xi, 0, t, t + 1)?;
            let hh = g.matmul(h, b.get(self.w_hid))?;
            let hh = g.add(hh, b.get(self.b_hid))?;
            let gate = |g: &mut Graph, i: usize| -> Result<(Var, Var)> {
                Ok((
                    g.slice(xt, 1, i * h_dim, (i + 1) * h_dim)?,
                    g.slice(hh, 1, i * h_dim, (i + 1) * h_dim)?,
                ))
            };
            let (xr, hr) = gate(g, 0)?;
            let s = g.add(xr, hr)?;
            let r = g.sigmoid(s);
            let (xz, hz) = gate(g, 1)?;
            let s = g.add(xz, hz)?;
            let z = g.sigmoid(s);
            let (xn, hn) = gate(g, 2)?;
            let rh = g.mul(r, hn)?;
            let s = g.add(xn, rh)?;
            let cand = g.leaky_relu(s);
            // (1 - z) h + z cand
            let diff = g.sub(cand, h)?;
            let step = g.mul(z, diff)?;
            h = g.add(h, step)?;
            states.push(h);
        }
        if states.len() == 1 {
            Ok(states[0])
        } else {
            g.concat(&states, 0)
        }
    }
}

/// Stacked GRU with a linear displacement head.
#[derive(Clone, Debug)]
pub struct Gru {
    pub layers: Vec<GruLayer>,
    pub head: Linear,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 || layers == 0 {
            return Err(Error::config(
                "GRU hidden width and layer count must be positive",
            ));
        }
        let layers = (0..layers)
            .map(|l| {
                GruLayer::new(
                    ps,
                    &format!("{name}.layer{l}"),
                    if l == 0 { input } else { hidden },
                    hidden,
                    rng,
                )
            })
            .collect();
        Ok(Self {
            layers,
            head: Linear::zeroed(ps, &format!("{name}.head"), hidden, 3),
        })
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, features: Var, prior: Var) -> Result<Var> {
        let mut h = g.concat(&[features, prior], 1)?;
        for layer in &self.layers {
            h = layer.forward(g, b, h)?;
        }
        self.head.forward(g, b, h)
    }
}
