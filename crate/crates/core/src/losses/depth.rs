use super::{LossError, ReferenceBundle};
use crate::render::{RenderGrad, RenderOutput};

/// Below this variance a masked depth vector is treated as constant.
const MIN_VARIANCE: f64 = 1e-18;

/// `½ (1 − Corr(reference, rendered))` over pixels where `mask` is set, with
/// its gradient w.r.t. `rendered`. Degenerate inputs (fewer than two
/// pixels or a constant side) give `0.5` and a zero gradient.
pub fn pearson_loss(reference: &[f64], rendered: &[f64], mask: &[bool]) -> (f64, Vec<f64>) {
    assert_eq!(reference.len(), rendered.len());
    assert_eq!(reference.len(), mask.len());
    let mut grad = vec![0.0; rendered.len()];
    let idx: Vec<usize> = (0..mask.len()).filter(|i| mask[*i]).collect();
    let n = idx.len() as f64;
    if idx.len() < 2 {
        return (0.5, grad);
    }
    let mean_a = idx.iter().map(|i| reference[*i]).sum::<f64>() / n;
    let mean_b = idx.iter().map(|i| rendered[*i]).sum::<f64>() / n;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let (a, b) = (reference[i] - mean_a, rendered[i] - mean_b);
        saa += a * a;
        sbb += b * b;
        sab += a * b;
    }
    if saa / n <= MIN_VARIANCE || sbb / n <= MIN_VARIANCE {
        return (0.5, grad);
    }
    let denom = (saa * sbb).sqrt();
    let corr = sab / denom;
    // ∂ρ/∂b_i = ā_i / √(SaSb) − ρ b̄_i / Sb; the mean terms cancel
    for &i in &idx {
        let (a, b) = (reference[i] - mean_a, rendered[i] - mean_b);
        grad[i] = -0.5 * (a / denom - corr * b / sbb);
    }
    ((0.5 * (1.0 - corr)).clamp(0.0, 1.0), grad)
}

/// Pearson depth prior of a render against the reference's relative depth.
pub fn depth_pearson_loss(render: &RenderOutput, reference: &ReferenceBundle) -> Result<f64, LossError> {
    reference.check_resolution(render.width, render.height)?;
    Ok(pearson_loss(&reference.depth, &render.depth, &reference.mask).0)
}

/// As [`depth_pearson_loss`], adding `scale · ∂L/∂depth` into `grad`.
pub fn depth_pearson_loss_with_grad(
    render: &RenderOutput,
    reference: &ReferenceBundle,
    scale: f64,
    grad: &mut RenderGrad,
) -> Result<f64, LossError> {
    reference.check_resolution(render.width, render.height)?;
    let (loss, g) = pearson_loss(&reference.depth, &render.depth, &reference.mask);
    for (dst, src) in grad.depth.iter_mut().zip(&g) {
        *dst += scale * src;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook sample statistics with Bessel's correction, which cancels in the ratio.
    fn oracle(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0);
        let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (n - 1.0);
        let vb = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / (n - 1.0);
        0.5 * (1.0 - cov / (va.sqrt() * vb.sqrt()))
    }

    #[test]
    fn identity_affine_and_negation() {
        let a: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin() + 2.0).collect();
        let mask = vec![true; 20];
        assert!(pearson_loss(&a, &a, &mask).0.abs() < 1e-12);
        let affine: Vec<f64> = a.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!(pearson_loss(&a, &affine, &mask).0.abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson_loss(&a, &neg, &mask).0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_are_uninformative() {
        let a = vec![1.0, 2.0, 3.0];
        let (l, g) = pearson_loss(&a, &[4.0; 3], &[true; 3]);
        assert_eq!(l, 0.5);
        assert!(g.iter().all(|v| *v == 0.0));
        let (l, _) = pearson_loss(&a, &[1.0, 5.0, 2.0], &[true, false, false]);
        assert_eq!(l, 0.5);
    }

    #[test]
    fn only_masked_pixels_count() {
        let a = vec![1.0, 2.0, 3.0, 100.0];
        let b = vec![1.0, 2.0, 3.0, -100.0];
        let mask = [true, true, true, false];
        let (l, g) = pearson_loss(&a, &b, &mask);
        assert!(l.abs() < 1e-12);
        assert_eq!(g[3], 0.0);
    }

    #[test]
    fn matches_statistics_oracle_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a: Vec<f64> = (0..80).map(|_| rng.gen_range(0.0..5.0)).collect();
            let b: Vec<f64> = (0..80).map(|_| rng.gen_range(0.0..5.0)).collect();
            let mut mask = vec![false; 80];
            for k in rand::seq::index::sample(&mut rng, 80, 50) {
                mask[k] = true;
            }
            let (ma, mb): (Vec<f64>, Vec<f64>) = (0..80).filter(|i| mask[*i]).map(|i| (a[i], b[i])).unzip();
            assert!((pearson_loss(&a, &b, &mask).0 - oracle(&ma, &mb)).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
        let mask: Vec<bool> = (0..30).map(|i| i % 4 != 0).collect();
        let (_, g) = pearson_loss(&a, &b, &mask);
        let h = 1e-6;
        for i in 0..30 {
            let (mut p, mut m) = (b.clone(), b.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (pearson_loss(&a, &p, &mask).0 - pearson_loss(&a, &m, &mask).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn stays_in_unit_interval(
            a in proptest::collection::vec(-10.0f64..10.0, 2..40),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.gen_range(-10.0..10.0)).collect();
            let mask: Vec<bool> = a.iter().map(|_| rng.gen_bool(0.8)).collect();
            let (l, _) = pearson_loss(&a, &b, &mask);
            prop_assert!((0.0..=1.0).contains(&l));
        }

        #[test]
        fn positive_affine_invariant(
            a in proptest::collection::vec(-10.0f64..10.0, 3..40),
            scale in 0.01f64..100.0,
            shift in -50.0f64..50.0,
        ) {
            let mask = vec![true; a.len()];
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            prop_assume!(a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n > 1e-6);
            let b: Vec<f64> = a.iter().map(|v| scale * v + shift).collect();
            prop_assert!(pearson_loss(&a, &b, &mask).0 < 1e-9);
        }
    }
}
