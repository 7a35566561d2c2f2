use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{backward, forward, init_params, DropoutMasks, ModelConfig, NnError, Params, Real};

#[derive(Debug, Clone, Serialize)]
pub struct GroupError {
    pub name: String,
    pub max_abs_err: f64,
    /// Largest finite-difference magnitude in the group.
    pub scale: f64,
    /// `max_abs_err / scale`.
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub precision: String,
    pub epsilon: f64,
    pub groups: Vec<GroupError>,
    pub max_rel_err: f64,
}

fn loss<T: Real>(p: &Params<T>, cfg: &ModelConfig, tokens: &[u16], masks: Option<&DropoutMasks<T>>) -> Result<f64, NnError> {
    Ok(forward(p, cfg, tokens, masks)?.total_loss())
}

/// Compares analytic gradients against central differences for every entry
/// of every parameter tensor.
///
/// The error of a tensor is the largest absolute deviation divided by the
/// largest finite-difference magnitude in that tensor. The same dropout
/// masks are used on both sides.
pub fn grad_check<T: Real>(
    params: &Params<T>,
    cfg: &ModelConfig,
    tokens: &[u16],
    masks: Option<&DropoutMasks<T>>,
    epsilon: f64,
) -> Result<GradCheckReport, NnError> {
    let fwd = forward(params, cfg, tokens, masks)?;
    let grads = backward(params, cfg, &fwd);
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads
        .params
        .tensors()
        .iter()
        .map(|t| t.iter().map(|x| x.as_f64()).collect())
        .collect();

    let originals: Vec<Vec<T>> = params.tensors().iter().map(|t| t.iter().copied().collect()).collect();
    let mut work = params.clone();
    let mut groups = Vec::with_capacity(names.len());
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].len();
        let (mut max_abs, mut scale) = (0.0f64, 0.0f64);
        for i in 0..len {
            let orig = originals[ti][i];
            let set = |w: &mut Params<T>, v: T| {
                w.tensors_mut()[ti].as_slice_mut().expect("contiguous parameters")[i] = v;
            };
            set(&mut work, orig + T::from_f64(epsilon));
            let up = loss(&work, cfg, tokens, masks)?;
            set(&mut work, orig - T::from_f64(epsilon));
            let down = loss(&work, cfg, tokens, masks)?;
            set(&mut work, orig);
            let numeric = (up - down) / (2.0 * epsilon);
            max_abs = max_abs.max((numeric - analytic[ti][i]).abs());
            scale = scale.max(numeric.abs());
        }
        let rel = if scale > 0.0 { max_abs / scale } else { max_abs };
        groups.push(GroupError {
            name: name.clone(),
            max_abs_err: max_abs,
            scale,
            rel_err: rel,
        });
    }
    let max_rel_err = groups.iter().map(|g| g.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        precision: T::PRECISION.to_string(),
        epsilon,
        groups,
        max_rel_err,
    })
}

/// Gradient check of a freshly initialized model on a random sequence,
/// with dropout masks pinned when `cfg.dropout > 0`.
pub fn grad_check_random<T: Real>(cfg: &ModelConfig, seed: u64, seq_len: usize, epsilon: f64) -> Result<GradCheckReport, NnError> {
    let params = init_params::<T>(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let len = seq_len.clamp(2, cfg.max_seq_len + 1);
    let tokens: Vec<u16> = (0..len).map(|_| rng.gen_range(0..cfg.vocab) as u16).collect();
    let masks = DropoutMasks::<T>::sample(cfg, len - 1, &mut rng);
    grad_check(&params, cfg, &tokens, masks.as_ref(), epsilon)
}
