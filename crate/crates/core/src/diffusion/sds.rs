use super::{DiffusionError, NoiseSchedule, Tensor};

/// `x_t = α_t · x0 + σ_t · ε`.
pub fn forward_diffuse(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    x0.check_same_shape(eps)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + s * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Score-distillation gradient on `x0`: `w(t) · (ε̂ − ε)`. The denoiser's
/// Jacobian is deliberately left out.
pub fn sds_grad(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    eps_pred: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    x0.check_same_shape(eps)?;
    x0.check_same_shape(eps_pred)?;
    let w = schedule.weight(t);
    let data = eps_pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(p, e)| w * (p - e))
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Clean-latent estimate `ẑ0 = (z_t − σ_t ε̂) / α_t`.
pub fn predicted_clean(
    z_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    z_t.check_same_shape(eps_pred)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    let data = z_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(z, e)| (z - s * e) / a)
        .collect();
    Tensor::new(z_t.shape().to_vec(), data)
}

/// Image-space SDS gradient for oracles whose latent space differs from
/// pixels: `w(t) · (α_t/σ_t) · (x0 − decode(ẑ0))`. Under an identity codec
/// this equals [`sds_grad`].
pub fn sds_grad_via_decode(
    x0: &Tensor,
    decoded_clean: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    x0.check_same_shape(decoded_clean)?;
    let k = schedule.weight(t) * schedule.alpha(t) / schedule.sigma(t);
    let data = x0
        .data()
        .iter()
        .zip(decoded_clean.data())
        .map(|(x, y)| k * (x - y))
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}
