use std::collections::VecDeque;

use crate::render::{RenderGrad, RenderOutput};

pub const DEFAULT_OPACITY_THRESHOLD: f64 = 0.5;

/// 4-connected labeling. Label 0 is background; components are numbered
/// from 1 in raster order of their first pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    pub labels: Vec<u32>,
    /// `sizes[k]` is the pixel count of label `k + 1`.
    pub sizes: Vec<usize>,
    /// Most pixels; ties go to the smaller label. `None` when nothing is set.
    pub largest: Option<u32>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

pub fn label_components(binary: &[bool], width: usize, height: usize) -> Components {
    assert_eq!(binary.len(), width * height);
    let mut labels = vec![0u32; binary.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..binary.len() {
        if !binary[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (x, y) = (p % width, p / width);
            let mut visit = |q: usize| {
                if binary[q] && labels[q] == 0 {
                    labels[q] = label;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        sizes.push(size);
    }
    let mut largest = None;
    let mut best = 0;
    for (k, s) in sizes.iter().enumerate() {
        if *s > best {
            best = *s;
            largest = Some(k as u32 + 1);
        }
    }
    Components {
        labels,
        sizes,
        largest,
    }
}

/// Pixels outside the largest component of the binarized opacity, or `None`
/// when no pixel reaches the threshold.
fn penalized(render: &RenderOutput, threshold: f64) -> Option<Vec<bool>> {
    let binary: Vec<bool> = render.opacity.iter().map(|o| *o >= threshold).collect();
    let comps = label_components(&binary, render.width, render.height);
    let keep = comps.largest?;
    Some(comps.labels.iter().map(|l| *l != keep).collect())
}

/// `Σ_{pixels ∉ C_max} Σ_i w_i² / (H·W)`.
pub fn opacity_regularization(render: &RenderOutput, threshold: f64) -> f64 {
    let Some(outside) = penalized(render, threshold) else {
        return 0.0;
    };
    let mut total = 0.0;
    for (p, out) in outside.iter().enumerate() {
        if *out {
            total += render.pixel_weights(p).iter().map(|w| w * w).sum::<f64>();
        }
    }
    total / render.pixel_count() as f64
}

/// As [`opacity_regularization`], adding `scale · ∂L/∂w` into `grad.weights`.
/// Component membership is held fixed.
pub fn opacity_regularization_with_grad(
    render: &RenderOutput,
    threshold: f64,
    scale: f64,
    grad: &mut RenderGrad,
) -> f64 {
    let Some(outside) = penalized(render, threshold) else {
        return 0.0;
    };
    let s = render.samples_per_ray;
    let n = render.pixel_count() as f64;
    let dst = grad.weights.get_or_insert_with(|| vec![0.0; render.weights.len()]);
    let mut total = 0.0;
    for (p, out) in outside.iter().enumerate() {
        if !*out {
            continue;
        }
        for i in p * s..(p + 1) * s {
            let w = render.weights[i];
            total += w * w;
            dst[i] += scale * 2.0 * w / n;
        }
    }
    total / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Recursive flood fill; returns a component id per pixel (-1 for background).
    fn flood(binary: &[bool], w: usize, h: usize) -> Vec<i64> {
        fn fill(b: &[bool], ids: &mut [i64], w: usize, h: usize, x: usize, y: usize, id: i64) {
            let p = y * w + x;
            if !b[p] || ids[p] != -1 {
                return;
            }
            ids[p] = id;
            if x > 0 {
                fill(b, ids, w, h, x - 1, y, id);
            }
            if x + 1 < w {
                fill(b, ids, w, h, x + 1, y, id);
            }
            if y > 0 {
                fill(b, ids, w, h, x, y - 1, id);
            }
            if y + 1 < h {
                fill(b, ids, w, h, x, y + 1, id);
            }
        }
        let mut ids = vec![-1; binary.len()];
        let mut next = 0;
        for y in 0..h {
            for x in 0..w {
                if binary[y * w + x] && ids[y * w + x] == -1 {
                    fill(binary, &mut ids, w, h, x, y, next);
                    next += 1;
                }
            }
        }
        ids
    }

    fn same_partition(a: &[u32], b: &[i64]) -> bool {
        let n = a.len();
        (0..n).all(|i| (a[i] == 0) == (b[i] == -1))
            && (0..n).all(|i| (0..n).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    fn weights_render(w: usize, h: usize, s: usize, weights: Vec<f64>) -> RenderOutput {
        let opacity: Vec<f64> = weights.chunks(s).map(|c| c.iter().sum()).collect();
        RenderOutput {
            width: w,
            height: h,
            samples_per_ray: s,
            color: vec![0.0; w * h * 3],
            depth: vec![0.0; w * h],
            opacity,
            weights,
            normals: vec![0.0; w * h * 3],
        }
    }

    #[test]
    fn all_ones_is_one_component() {
        let c = label_components(&[true; 12], 4, 3);
        assert_eq!(c.count(), 1);
        assert_eq!(c.largest, Some(1));
        assert!(c.labels.iter().all(|l| *l == 1));
    }

    #[test]
    fn diagonal_neighbours_are_separate() {
        let c = label_components(&[true, false, false, true], 2, 2);
        assert_eq!(c.count(), 2);
        assert_eq!(c.largest, Some(1));
    }

    #[test]
    fn all_zero_has_no_largest() {
        assert_eq!(label_components(&[false; 6], 3, 2).largest, None);
    }

    #[test]
    fn ties_go_to_smallest_label() {
        let grid = [true, false, true, true, false, true];
        let c = label_components(&grid, 3, 2);
        assert_eq!(c.sizes, vec![2, 2]);
        assert_eq!(c.largest, Some(1));
    }

    #[test]
    fn matches_flood_fill_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..100 {
            let density = rng.gen_range(0.2..0.8);
            let grid: Vec<bool> = (0..256).map(|_| rng.gen_bool(density)).collect();
            let c = label_components(&grid, 16, 16);
            assert!(same_partition(&c.labels, &flood(&grid, 16, 16)));
        }
    }

    #[test]
    fn single_blob_costs_nothing() {
        let mut w = vec![0.0; 25 * 2];
        for p in [6, 7, 8, 11, 12, 13] {
            w[p * 2] = 0.5;
            w[p * 2 + 1] = 0.4;
        }
        assert_eq!(opacity_regularization(&weights_render(5, 5, 2, w), 0.5), 0.0);
    }

    #[test]
    fn isolated_pixel_is_penalized() {
        let mut w = vec![0.0; 25 * 2];
        for p in [0, 1, 5, 6] {
            w[p * 2] = 0.9;
        }
        w[24 * 2] = 0.6;
        w[24 * 2 + 1] = 0.3;
        let got = opacity_regularization(&weights_render(5, 5, 2, w), 0.5);
        assert!((got - (0.36 + 0.09) / 25.0).abs() < 1e-15);
    }

    #[test]
    fn empty_render_costs_nothing() {
        let r = weights_render(4, 4, 3, vec![0.01; 48]);
        assert_eq!(opacity_regularization(&r, 0.5), 0.0);
        let mut g = RenderGrad::zeros(&r);
        opacity_regularization_with_grad(&r, 0.5, 1.0, &mut g);
        assert!(g.is_zero());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut w: Vec<f64> = (0..36 * 3).map(|_| rng.gen_range(0.0..0.05)).collect();
        for p in [7, 8, 13, 14, 33] {
            w[p * 3] = 0.8;
        }
        let r = weights_render(6, 6, 3, w.clone());
        let mut g = RenderGrad::zeros(&r);
        opacity_regularization_with_grad(&r, 0.5, 2.0, &mut g);
        let gw = g.weights.unwrap();
        let h = 1e-7;
        for i in 0..w.len() {
            // membership fixed: perturb weights without recomputing opacity
            let mut a = r.clone();
            let mut b = r.clone();
            a.weights[i] += h;
            b.weights[i] -= h;
            let fd = 2.0 * (opacity_regularization(&a, 0.5) - opacity_regularization(&b, 0.5)) / (2.0 * h);
            assert!((fd - gw[i]).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn shrinking_an_off_component_pixel_lowers_the_penalty(shrink in 0.05f64..0.95, wt in 0.5f64..1.0) {
            let mut w = vec![0.0; 16 * 2];
            for p in [0, 1, 4, 5] {
                w[p * 2] = 0.9;
            }
            w[15 * 2] = wt;
            w[15 * 2 + 1] = 0.2;
            let r = weights_render(4, 4, 2, w.clone());
            let before = opacity_regularization(&r, 0.5);
            let mut r2 = r.clone();
            r2.weights[15 * 2] *= shrink;
            r2.weights[15 * 2 + 1] *= shrink;
            // membership stays fixed, as during a gradient step
            prop_assert!(opacity_regularization(&r2, 0.5) < before);
        }
    }
}
