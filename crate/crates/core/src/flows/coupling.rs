use crate::error::{Error, Result};
use crate::grad::{Activation, Graph, Mlp, ParamStore, Tensor, Var};
use crate::math::LN_2PI;
use crate::rng::Rng;

const MIN_SCALE: f64 = 1e-4;

#[derive(Clone, Debug)]
struct CouplingLayer {
    transformed: Vec<usize>,
    conditioning: Vec<usize>,
    /// Column order that undoes `[conditioning ‖ transformed]`.
    unpermute: Vec<usize>,
    net: Mlp,
}

/// Conditional affine coupling flow with a standard-normal base. Layer `l`
/// transforms coordinates with `(i + l)` even, conditioned on the others
/// and the context; a one-dimensional latent is transformed by every layer
/// from the context alone.
#[derive(Clone, Debug)]
pub struct CouplingFlow {
    dim: usize,
    cond_dim: usize,
    layers: Vec<CouplingLayer>,
    scale_offset: f64,
}

fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl CouplingFlow {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        cond_dim: usize,
        n_layers: usize,
        hidden: &[usize],
        rng: &mut Rng,
    ) -> Self {
        assert!(dim > 0, "flow dimension must be positive");
        let layers = (0..n_layers)
            .map(|l| {
                let (transformed, conditioning): (Vec<usize>, Vec<usize>) = if dim == 1 {
                    (vec![0], vec![])
                } else {
                    (0..dim).partition(|i| (i + l) % 2 == 0)
                };
                let order: Vec<usize> = conditioning.iter().chain(&transformed).copied().collect();
                let mut unpermute = vec![0; dim];
                for (pos, &c) in order.iter().enumerate() {
                    unpermute[c] = pos;
                }
                let mut sizes = vec![conditioning.len() + cond_dim];
                sizes.extend_from_slice(hidden);
                sizes.push(2 * transformed.len());
                let net = Mlp::new(store, &format!("{prefix}layer{l}"), &sizes, Activation::Relu, true, rng);
                CouplingLayer {
                    transformed,
                    conditioning,
                    unpermute,
                    net,
                }
            })
            .collect();
        Self {
            dim,
            cond_dim,
            layers,
            scale_offset: inv_softplus(1.0 - MIN_SCALE),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// How many layers transform each coordinate.
    pub fn updates_per_coordinate(&self) -> Vec<usize> {
        let mut n = vec![0; self.dim];
        for l in &self.layers {
            for &i in &l.transformed {
                n[i] += 1;
            }
        }
        n
    }

    fn conditioner(&self, g: &mut Graph, store: &ParamStore, l: &CouplingLayer, x: Var, cond: Var, frozen: bool) -> Result<(Var, Var)> {
        let input = if l.conditioning.is_empty() {
            cond
        } else {
            let xk = g.select_cols(x, &l.conditioning)?;
            g.concat(&[xk, cond], 1)?
        };
        let out = if frozen {
            l.net.forward_frozen(g, store, input)?
        } else {
            l.net.forward(g, store, input)?
        };
        let n = l.transformed.len();
        let raw = g.slice_cols(out, 0, n)?;
        let shift = g.slice_cols(out, n, 2 * n)?;
        let raw = g.add_scalar(raw, self.scale_offset)?;
        let scale = g.softplus(raw)?;
        let scale = g.add_scalar(scale, MIN_SCALE)?;
        Ok((scale, shift))
    }

    /// Normalising direction `x ↦ z`, with the summed log-scales per row.
    fn to_base_graph(&self, g: &mut Graph, store: &ParamStore, x: Var, cond: Var, frozen: bool) -> Result<(Var, Option<Var>)> {
        let (rows, d) = g.value(x).dims2();
        if d != self.dim || g.value(cond).dims2() != (rows, self.cond_dim) {
            return Err(Error::config("flow: input or context shape mismatch"));
        }
        let mut x = x;
        let mut log_det: Option<Var> = None;
        for l in &self.layers {
            let (scale, shift) = self.conditioner(g, store, l, x, cond, frozen)?;
            let xt = g.select_cols(x, &l.transformed)?;
            let yt = g.mul(xt, scale)?;
            let yt = g.add(yt, shift)?;
            x = if l.conditioning.is_empty() {
                yt
            } else {
                let xk = g.select_cols(x, &l.conditioning)?;
                let joined = g.concat(&[xk, yt], 1)?;
                g.select_cols(joined, &l.unpermute)?
            };
            let ls = g.log(scale)?;
            let ls = g.sum_axis(ls, 1)?;
            log_det = Some(match log_det {
                Some(acc) => g.add(acc, ls)?,
                None => ls,
            });
        }
        Ok((x, log_det))
    }

    /// `log q(x | cond)` per row (`batch × 1`) for unconstrained `x`.
    pub fn log_prob(&self, g: &mut Graph, store: &ParamStore, x: Var, cond: Var, frozen: bool) -> Result<Var> {
        let (z, log_det) = self.to_base_graph(g, store, x, cond, frozen)?;
        let sq = g.square(z)?;
        let sq = g.sum_axis(sq, 1)?;
        let base = g.scale(sq, -0.5)?;
        let base = g.add_scalar(base, -0.5 * self.dim as f64 * LN_2PI)?;
        match log_det {
            Some(ld) => g.add(base, ld),
            None => Ok(base),
        }
    }

    /// `z` and `log |det ∂z/∂x|` per row, without gradients.
    pub fn to_base(&self, store: &ParamStore, x: Tensor, cond: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let rows = x.rows();
        let c = g.input(cond.clone());
        let x = g.input(x);
        let (z, ld) = self.to_base_graph(&mut g, store, x, c, true)?;
        let ld = match ld {
            Some(v) => g.value(v).data().to_vec(),
            None => vec![0.0; rows],
        };
        Ok((g.value(z).clone(), ld))
    }

    /// Push base draws `z` (`batch × dim`) through the inverse chain.
    pub fn sample_from_base(&self, store: &ParamStore, z: Tensor, cond: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let c = g.input(cond.clone());
        let mut x = g.input(z);
        for l in self.layers.iter().rev() {
            let (scale, shift) = self.conditioner(&mut g, store, l, x, c, true)?;
            let yt = g.select_cols(x, &l.transformed)?;
            let xt = g.sub(yt, shift)?;
            let xt = g.div(xt, scale)?;
            x = if l.conditioning.is_empty() {
                xt
            } else {
                let xk = g.select_cols(x, &l.conditioning)?;
                let joined = g.concat(&[xk, xt], 1)?;
                g.select_cols(joined, &l.unpermute)?
            };
        }
        Ok(g.value(x).clone())
    }
}
