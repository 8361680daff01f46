//! Feature-distribution mixing with a stop-gradient term.
//!
//! `w_i = u_i + (1 − μ) v_i − (1 − μ) sg(u_i)`. The value equals
//! `μ u_i + (1 − μ) v_i`, while the gradient reaching `u` is the identity and
//! the gradient reaching `v` is scaled by `1 − μ`. In sorted mode the rule
//! pairs the r-th smallest entry of `u` with the r-th smallest entry of `v`
//! inside each channel, and the result keeps `u`'s ordering.

use crate::error::{Error, Result};

/// Mixed features plus the routing needed for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EfdMix {
    pub values: Vec<f64>,
    /// `v_source[i]` is the index of `v` mixed into output `i`.
    pub v_source: Vec<usize>,
    pub mu: f64,
}

impl EfdMix {
    /// Gradients reaching `u` and `v` given the gradient at the output.
    pub fn backward(&self, grad_w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let grad_u = grad_w.to_vec();
        let mut grad_v = vec![0.0; grad_w.len()];
        for (i, &g) in grad_w.iter().enumerate() {
            grad_v[self.v_source[i]] += (1.0 - self.mu) * g;
        }
        (grad_u, grad_v)
    }
}

/// Mixes `u` (`channels` × L, channel-major) with `v`.
pub fn efdmix(u: &[f64], v: &[f64], channels: usize, mu: f64, sorted: bool) -> Result<EfdMix> {
    efdmix_detached(u, v, u, channels, mu, sorted)
}

/// As [`efdmix`], with the stop-gradient copy of `u` passed separately.
/// The sort order in sorted mode is taken from `u_detached`, which carries
/// no gradient either.
pub fn efdmix_detached(
    u: &[f64],
    v: &[f64],
    u_detached: &[f64],
    channels: usize,
    mu: f64,
    sorted: bool,
) -> Result<EfdMix> {
    if u.len() != v.len() || u.len() != u_detached.len() {
        return Err(Error::ShapeMismatch(format!(
            "efdmix inputs have lengths {}, {} and {}",
            u.len(),
            v.len(),
            u_detached.len()
        )));
    }
    if channels == 0 || u.len() % channels != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} values cannot be split into {channels} channels",
            u.len()
        )));
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::InvalidArgument {
            arg: "mu",
            reason: format!("{mu} is outside [0, 1]"),
        });
    }
    let len = u.len() / channels;
    let mut v_source: Vec<usize> = (0..u.len()).collect();
    if sorted {
        let mut order_u: Vec<usize> = (0..len).collect();
        let mut order_v: Vec<usize> = (0..len).collect();
        for ch in 0..channels {
            let base = ch * len;
            let ud = &u_detached[base..base + len];
            let vc = &v[base..base + len];
            order_u.sort_by(|&a, &b| ud[a].total_cmp(&ud[b]).then(a.cmp(&b)));
            order_v.sort_by(|&a, &b| vc[a].total_cmp(&vc[b]).then(a.cmp(&b)));
            for (&iu, &iv) in order_u.iter().zip(order_v.iter()) {
                v_source[base + iu] = base + iv;
            }
            order_u.sort_unstable();
            order_v.sort_unstable();
        }
    }
    let keep = 1.0 - mu;
    let values = (0..u.len())
        .map(|i| u[i] + keep * v[v_source[i]] - keep * u_detached[i])
        .collect();
    Ok(EfdMix {
        values,
        v_source,
        mu,
    })
}
