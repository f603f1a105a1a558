use crate::render::{RenderGrad, RenderOutput};

pub const BLUR_SIZE: usize = 9;
pub const BLUR_SIGMA: f64 = 1.5;

/// Separable Gaussian weights, normalized to sum to one.
pub fn gaussian_kernel() -> [[f64; BLUR_SIZE]; BLUR_SIZE] {
    let r = (BLUR_SIZE / 2) as f64;
    let g: Vec<f64> = (0..BLUR_SIZE)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum::<f64>().powi(2);
    let mut k = [[0.0; BLUR_SIZE]; BLUR_SIZE];
    for (y, row) in k.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            *v = g[y] * g[x] / total;
        }
    }
    k
}

fn is_valid(n: &[f64; 3]) -> bool {
    *n != [0.0; 3]
}

/// Normalized convolution over valid (nonzero) normals only, so excluded
/// pixels and the image border do not pull the average toward zero. The
/// result is not renormalized to unit length.
pub fn blur_normals(normals: &[[f64; 3]], width: usize, height: usize) -> Vec<[f64; 3]> {
    assert_eq!(normals.len(), width * height);
    let k = gaussian_kernel();
    let r = (BLUR_SIZE / 2) as isize;
    let mut out = vec![[0.0; 3]; normals.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = [0.0; 3];
            let mut wsum = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (qx, qy) = (x + dx, y + dy);
                    if qx < 0 || qy < 0 || qx >= width as isize || qy >= height as isize {
                        continue;
                    }
                    let n = &normals[qy as usize * width + qx as usize];
                    if !is_valid(n) {
                        continue;
                    }
                    let w = k[(dy + r) as usize][(dx + r) as usize];
                    for c in 0..3 {
                        acc[c] += w * n[c];
                    }
                    wsum += w;
                }
            }
            if wsum > 0.0 {
                out[y as usize * width + x as usize] = [acc[0] / wsum, acc[1] / wsum, acc[2] / wsum];
            }
        }
    }
    out
}

/// Mean over valid pixels of `‖n − blur(n)‖`, and the gradient w.r.t. `n`
/// with the blurred branch held constant.
pub fn normal_smoothness(normals: &[[f64; 3]], width: usize, height: usize) -> (f64, Vec<[f64; 3]>) {
    let blurred = blur_normals(normals, width, height);
    let mut grad = vec![[0.0; 3]; normals.len()];
    let valid: Vec<usize> = (0..normals.len()).filter(|i| is_valid(&normals[*i])).collect();
    if valid.is_empty() {
        return (0.0, grad);
    }
    let n = valid.len() as f64;
    let mut total = 0.0;
    for &p in &valid {
        let d = [
            normals[p][0] - blurred[p][0],
            normals[p][1] - blurred[p][1],
            normals[p][2] - blurred[p][2],
        ];
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        total += len;
        if len > 1e-12 {
            grad[p] = [d[0] / (len * n), d[1] / (len * n), d[2] / (len * n)];
        }
    }
    (total / n, grad)
}

pub fn normal_smoothness_loss(render: &RenderOutput) -> f64 {
    normal_smoothness(&render.normals_as_vectors(), render.width, render.height).0
}

/// As [`normal_smoothness_loss`], adding `scale · ∂L/∂normals` into `grad`.
pub fn normal_smoothness_loss_with_grad(render: &RenderOutput, scale: f64, grad: &mut RenderGrad) -> f64 {
    let (loss, g) = normal_smoothness(&render.normals_as_vectors(), render.width, render.height);
    let dst = grad.normals.get_or_insert_with(|| vec![[0.0; 3]; g.len()]);
    for (d, s) in dst.iter_mut().zip(&g) {
        for c in 0..3 {
            d[c] += scale * s[c];
        }
    }
    loss
}
