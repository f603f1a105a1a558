//! Camera-space normals from finite differences of back-projected depth.
//!
//! Each pixel is lifted to `depth · dir` where `dir` is its unit camera-frame
//! ray. Interior pixels use central differences; pixels on the image border
//! or next to an invalid neighbor fall back to one-sided differences. The
//! normal is `normalize(dy × dx)`, which faces the camera (−z) for a
//! fronto-parallel plane. Pixels without a usable stencil, or with a
//! degenerate cross product, get the zero vector.

use nalgebra::Vector3;

use super::Camera;

const DEGENERATE: f64 = 1e-12;

/// Index pair `(from, to)` whose point difference spans one image axis.
fn axis_pair(valid: &[bool], idx: usize, pos: usize, len: usize, stride: usize) -> Option<(usize, usize)> {
    let prev = (pos > 0 && valid[idx - stride]).then(|| idx - stride);
    let next = (pos + 1 < len && valid[idx + stride]).then(|| idx + stride);
    match (prev, next) {
        (Some(p), Some(n)) => Some((p, n)),
        (None, Some(n)) => Some((idx, n)),
        (Some(p), None) => Some((p, idx)),
        (None, None) => None,
    }
}

struct Stencil {
    dx: (usize, usize),
    dy: (usize, usize),
}

fn stencil(valid: &[bool], width: usize, height: usize, idx: usize) -> Option<Stencil> {
    if !valid[idx] {
        return None;
    }
    let (col, row) = (idx % width, idx / width);
    Some(Stencil {
        dx: axis_pair(valid, idx, col, width, 1)?,
        dy: axis_pair(valid, idx, row, height, width)?,
    })
}

fn point(depth: &[f64], dirs: &[Vector3<f64>], i: usize) -> Vector3<f64> {
    dirs[i] * depth[i]
}

/// Normals for every pixel of `depth` (row-major, `camera.width × camera.height`).
pub fn estimate_normals(depth: &[f64], camera: &Camera) -> Vec<[f64; 3]> {
    let valid = vec![true; depth.len()];
    estimate_normals_masked(depth, &valid, camera)
}

/// Normals restricted to `valid` pixels; invalid pixels and their stencils are skipped.
pub fn estimate_normals_masked(depth: &[f64], valid: &[bool], camera: &Camera) -> Vec<[f64; 3]> {
    let (w, h) = (camera.width, camera.height);
    assert_eq!(depth.len(), w * h);
    let dirs = camera.camera_directions();
    (0..w * h)
        .map(|i| {
            let Some(s) = stencil(valid, w, h, i) else {
                return [0.0; 3];
            };
            let dx = point(depth, &dirs, s.dx.1) - point(depth, &dirs, s.dx.0);
            let dy = point(depth, &dirs, s.dy.1) - point(depth, &dirs, s.dy.0);
            let c = dy.cross(&dx);
            let norm = c.norm();
            if !(norm > DEGENERATE) {
                return [0.0; 3];
            }
            let n = c / norm;
            [n.x, n.y, n.z]
        })
        .collect()
}

/// Adjoint of [`estimate_normals_masked`]: accumulates `d loss / d depth`.
pub fn estimate_normals_backward(
    depth: &[f64],
    valid: &[bool],
    camera: &Camera,
    d_normals: &[[f64; 3]],
    d_depth: &mut [f64],
) {
    let (w, h) = (camera.width, camera.height);
    let dirs = camera.camera_directions();
    for i in 0..w * h {
        let g = Vector3::from(d_normals[i]);
        if g == Vector3::zeros() {
            continue;
        }
        let Some(s) = stencil(valid, w, h, i) else {
            continue;
        };
        let dx = point(depth, &dirs, s.dx.1) - point(depth, &dirs, s.dx.0);
        let dy = point(depth, &dirs, s.dy.1) - point(depth, &dirs, s.dy.0);
        let c = dy.cross(&dx);
        let norm = c.norm();
        if !(norm > DEGENERATE) {
            continue;
        }
        let n = c / norm;
        let dc = (g - n * n.dot(&g)) / norm;
        let d_dy = dx.cross(&dc);
        let d_dx = dc.cross(&dy);
        d_depth[s.dx.1] += dirs[s.dx.1].dot(&d_dx);
        d_depth[s.dx.0] -= dirs[s.dx.0].dot(&d_dx);
        d_depth[s.dy.1] += dirs[s.dy.1].dot(&d_dy);
        d_depth[s.dy.0] -= dirs[s.dy.0].dot(&d_dy);
    }
}
