use super::{LossError, LossWeights, ReferenceBundle};
use crate::render::{RenderGrad, RenderOutput};

/// `λ_rgb · mean_p M_p ‖I_p − C_p‖² + λ_mask · mean_p (M_p − O_p)²`.
pub fn reconstruction_loss(
    render: &RenderOutput,
    reference: &ReferenceBundle,
    weights: &LossWeights,
) -> Result<f64, LossError> {
    reconstruction(render, reference, weights, None)
}

/// As [`reconstruction_loss`], adding `∂L/∂color` and `∂L/∂opacity` into `grad`.
pub fn reconstruction_loss_with_grad(
    render: &RenderOutput,
    reference: &ReferenceBundle,
    weights: &LossWeights,
    grad: &mut RenderGrad,
) -> Result<f64, LossError> {
    reconstruction(render, reference, weights, Some(grad))
}

fn reconstruction(
    render: &RenderOutput,
    reference: &ReferenceBundle,
    weights: &LossWeights,
    mut grad: Option<&mut RenderGrad>,
) -> Result<f64, LossError> {
    reference.check_resolution(render.width, render.height)?;
    let n = reference.pixel_count() as f64;
    let mut rgb = 0.0;
    let mut mask = 0.0;
    for p in 0..reference.pixel_count() {
        let m = if reference.mask[p] { 1.0 } else { 0.0 };
        if reference.mask[p] {
            for c in 0..3 {
                let r = render.color[p * 3 + c] - reference.image[p * 3 + c];
                rgb += r * r;
                if let Some(g) = grad.as_deref_mut() {
                    g.color[p * 3 + c] += weights.lambda_rgb * 2.0 * r / n;
                }
            }
        }
        let r = render.opacity[p] - m;
        mask += r * r;
        if let Some(g) = grad.as_deref_mut() {
            g.opacity[p] += weights.lambda_mask * 2.0 * r / n;
        }
    }
    Ok(weights.lambda_rgb * rgb / n + weights.lambda_mask * mask / n)
}
