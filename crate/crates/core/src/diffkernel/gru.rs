use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::Result;

/// Parameter handles of one gated recurrent unit over row-stacked states.
#[derive(Debug, Clone, Copy)]
pub struct Gru {
    pub dim: usize,
    w: [ParamId; 3],
    u: [ParamId; 3],
    b: [ParamId; 3],
}

/// A [`Gru`] bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    w: [Var; 3],
    u: [Var; 3],
    b: [Var; 3],
}

const GATES: [&str; 3] = ["z", "r", "h"];

impl Gru {
    /// Registers `{prefix}.w_{z,r,h}`, `u_*` (dim×dim) and `b_*` (1×dim).
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, dim: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let ids = |kind: &str, store: &mut ParamStore, rng: &mut R| -> Result<[ParamId; 3]> {
            let mut out = Vec::with_capacity(3);
            for g in GATES {
                let name = format!("{prefix}.{kind}_{g}");
                out.push(if kind == "b" {
                    store.add_zeros(&name, 1, dim)?
                } else {
                    store.add_uniform(&name, dim, dim, scale, rng)?
                });
            }
            Ok([out[0], out[1], out[2]])
        };
        let w = ids("w", store, rng)?;
        let u = ids("u", store, rng)?;
        let b = ids("b", store, rng)?;
        Ok(Gru { dim, w, u, b })
    }

    /// Looks up the handles of a GRU registered under `prefix`.
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |kind: &str| -> Result<[ParamId; 3]> {
            Ok([
                store.id(&format!("{prefix}.{kind}_z"))?,
                store.id(&format!("{prefix}.{kind}_r"))?,
                store.id(&format!("{prefix}.{kind}_h"))?,
            ])
        };
        let w = get("w")?;
        let dim = store.value(w[0]).rows();
        Ok(Gru {
            dim,
            w,
            u: get("u")?,
            b: get("b")?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> GruVars {
        let mut bind = |ids: [ParamId; 3]| ids.map(|id| tape.param(store, id));
        GruVars {
            w: bind(self.w),
            u: bind(self.u),
            b: bind(self.b),
        }
    }
}

impl GruVars {
    /// z = σ(W_z x + U_z h + b_z), r = σ(W_r x + U_r h + b_r),
    /// h̃ = tanh(W_h x + U_h (r⊙h) + b_h), h' = (1−z)⊙h + z⊙h̃,
    /// applied to each row of `x` and `h`.
    pub fn cell(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let gate = |tape: &mut Tape, k: usize, hin: Var| -> Result<Var> {
            let a = tape.matmul_t(x, self.w[k])?;
            let b = tape.matmul_t(hin, self.u[k])?;
            let s = tape.add(a, b)?;
            tape.add(s, self.b[k])
        };
        let zp = gate(tape, 0, h)?;
        let z = tape.sigmoid(zp);
        let rp = gate(tape, 1, h)?;
        let r = tape.sigmoid(rp);
        let rh = tape.mul(r, h)?;
        let hp = gate(tape, 2, rh)?;
        let cand = tape.tanh(hp);
        let delta = tape.sub(cand, h)?;
        let step = tape.mul(z, delta)?;
        tape.add(h, step)
    }
}
