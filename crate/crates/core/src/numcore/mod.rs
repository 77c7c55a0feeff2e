//! Dense arrays, channel statistics, sampling, and differentiation.

pub mod io;
mod params;
mod rng;
mod stats;
pub mod tape;
mod tensor;

pub use params::{Param, ParamId, Params, Sgd};
pub use rng::{stream_seed, Rng};
pub use stats::{
    channel_stats, channel_stats_with_eps, destandardize, log_sum_exp, sigmoid, softmax,
    standardize, ChannelStats, EPS_STD,
};
pub(crate) use stats::{mean_var, softmax_in_place};
pub use tape::{ChannelOp, CustomOp, Gradients, Tape, Var};
pub use tensor::{FeatureMap, Tensor};

use crate::error::Result;

/// Evaluates `loss_fn` on a fresh tape and stores the gradient of the
/// scalar result in `params` (previous gradients are cleared).
///
/// `loss_fn` receives one tape variable per parameter, in id order.
pub fn gradients<F>(params: &mut Params, loss_fn: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let ids: Vec<ParamId> = params.iter().map(|(id, _)| id).collect();
    let vars: Vec<Var> = ids.iter().map(|&id| tape.param(params, id)).collect();
    let loss = loss_fn(&mut tape, &vars);
    let grads = tape.backward(loss)?;
    params.zero_grad();
    tape.accumulate_param_grads(&grads, params, 1.0)?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_of_sum_squares() {
        let mut p = Params::new();
        let w = p.insert("w", Tensor::from_vec(vec![1.0, 2.0]));
        let loss = gradients(&mut p, |tape, vars| tape.sum_squares(vars[0])).unwrap();
        assert_eq!(loss, 5.0);
        assert_eq!(p.get(w).grad.data(), &[2.0, 4.0]);
    }

    #[test]
    fn gradients_rejects_vector_loss() {
        let mut p = Params::new();
        p.insert("w", Tensor::from_vec(vec![1.0, 2.0]));
        assert!(gradients(&mut p, |_, vars| vars[0]).is_err());
    }
}
