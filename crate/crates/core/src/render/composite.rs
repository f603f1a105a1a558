//! Front-to-back alpha compositing along one ray and its adjoint.

/// Guard below which a pixel counts as empty for expected depth.
pub const DEPTH_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySample {
    pub density: f64,
    pub color: [f64; 3],
    /// Ray parameter (distance along the unit direction).
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    /// Composited color including the background seen through residual transmittance.
    pub color: [f64; 3],
    pub opacity: f64,
    pub weights: Vec<f64>,
    pub depth: f64,
}

/// Segment length behind each sample; the last one runs to `far`.
pub fn segment_lengths(samples: &[RaySample], far: f64) -> impl Iterator<Item = f64> + '_ {
    let n = samples.len();
    (0..n).map(move |i| {
        let next = if i + 1 < n { samples[i + 1].t } else { far };
        (next - samples[i].t).max(0.0)
    })
}

/// Composites ordered samples. Empty pixels get the background color and the
/// far bound as depth.
pub fn composite_ray(samples: &[RaySample], far: f64, background: [f64; 3]) -> Composite {
    let mut weights = Vec::with_capacity(samples.len());
    let mut color = [0.0; 3];
    let mut transmittance = 1.0;
    let mut opacity = 0.0;
    let mut depth_acc = 0.0;
    for (s, delta) in samples.iter().zip(segment_lengths(samples, far)) {
        let alpha = -(-s.density * delta).exp_m1();
        let w = alpha * transmittance;
        weights.push(w);
        for k in 0..3 {
            color[k] += w * s.color[k];
        }
        opacity += w;
        depth_acc += w * s.t;
        transmittance *= 1.0 - alpha;
    }
    for k in 0..3 {
        color[k] += (1.0 - opacity) * background[k];
    }
    let depth = if opacity > DEPTH_EPS {
        depth_acc / opacity
    } else {
        far
    };
    Composite {
        color,
        opacity,
        weights,
        depth,
    }
}

/// Upstream gradients for one composited ray.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompositeGrad<'a> {
    pub color: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
    /// Direct gradient on each compositing weight, if any loss reads them.
    pub weights: Option<&'a [f64]>,
}

/// Adjoint of [`composite_ray`]: writes `d loss / d τ_i` and `d loss / d c_i`.
pub fn composite_ray_backward(
    samples: &[RaySample],
    out: &Composite,
    far: f64,
    background: [f64; 3],
    grad: &CompositeGrad<'_>,
    d_density: &mut [f64],
    d_color: &mut [[f64; 3]],
) {
    let n = samples.len();
    debug_assert_eq!(d_density.len(), n);
    debug_assert_eq!(d_color.len(), n);
    let depth_active = out.opacity > DEPTH_EPS;
    // total gradient on each weight
    let g_w = |i: usize| -> f64 {
        let s = &samples[i];
        let mut g = grad.opacity;
        for k in 0..3 {
            g += grad.color[k] * (s.color[k] - background[k]);
        }
        if depth_active {
            g += grad.depth * (s.t - out.depth) / out.opacity;
        }
        if let Some(w) = grad.weights {
            g += w[i];
        }
        g
    };
    let deltas: Vec<f64> = segment_lengths(samples, far).collect();
    let alphas: Vec<f64> = samples
        .iter()
        .zip(&deltas)
        .map(|(s, d)| -(-s.density * d).exp_m1())
        .collect();
    // transmittance after each sample, T_{i+1}
    let mut t_after = vec![0.0; n];
    let mut trans = 1.0;
    for i in 0..n {
        trans *= 1.0 - alphas[i];
        t_after[i] = trans;
    }
    // S_k = Σ_{i>k} g_w_i α_i Π_{k<j<i}(1 - α_j), accumulated back to front
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        let gk = g_w(k);
        d_density[k] = t_after[k] * deltas[k] * (gk - suffix);
        for c in 0..3 {
            d_color[k][c] = out.weights[k] * grad.color[c];
        }
        suffix = alphas[k] * gk + (1.0 - alphas[k]) * suffix;
    }
}
