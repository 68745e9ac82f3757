use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Inputs, NodeId, ParamStore};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates with vanishing
/// gradients are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compare reverse-mode gradients against central differences at
/// `probe_count` uniformly sampled parameter coordinates. Returns the worst
/// relative error.
pub fn grad_check(
    graph: &Graph,
    params: &ParamStore,
    inputs: &Inputs,
    loss: NodeId,
    probe_count: usize,
    step_size: f64,
    seed: u64,
) -> Result<f64> {
    let scalar_loss = |p: &ParamStore| -> Result<f64> {
        let v = graph.forward(p, inputs)?;
        Ok(v.get(loss).data()[0])
    };
    grad_check_fn(
        params,
        |p| graph.backward(p, inputs, loss),
        scalar_loss,
        probe_count,
        step_size,
        seed,
    )
}

/// Finite-difference check for an arbitrary loss with a hand-written gradient.
pub fn grad_check_fn(
    params: &ParamStore,
    gradient: impl Fn(&ParamStore) -> Result<ParamStore>,
    loss: impl Fn(&ParamStore) -> Result<f64>,
    probe_count: usize,
    step_size: f64,
    seed: u64,
) -> Result<f64> {
    if probe_count == 0 {
        return Err(Error::contract("grad_check needs at least one probe"));
    }
    if !(step_size > 0.0) {
        return Err(Error::contract("grad_check step size must be positive"));
    }
    let total = params.total_elements();
    if total == 0 {
        return Err(Error::contract("no parameters to probe"));
    }
    let analytic = gradient(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes: Vec<usize> = if probe_count >= total {
        (0..total).collect()
    } else {
        index::sample(&mut rng, total, probe_count).into_vec()
    };

    // flat index -> (tensor name, offset)
    let names: Vec<(String, usize)> = params.iter().map(|(n, t)| (n.to_string(), t.len())).collect();
    let locate = |mut flat: usize| -> (&str, usize) {
        for (n, len) in &names {
            if flat < *len {
                return (n.as_str(), flat);
            }
            flat -= len;
        }
        unreachable!("flat index within total")
    };

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for flat in probes {
        let (name, off) = locate(flat);
        let orig = params.get(name).expect("present").data()[off];
        probe.get_mut(name).expect("present").data_mut()[off] = orig + step_size;
        let up = loss(&probe)?;
        probe.get_mut(name).expect("present").data_mut()[off] = orig - step_size;
        let down = loss(&probe)?;
        probe.get_mut(name).expect("present").data_mut()[off] = orig;
        let numeric = (up - down) / (2.0 * step_size);
        let a = analytic.get(name).expect("present").data()[off];
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}
