use std::collections::HashMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use crate::field::VolumeField;

/// Indexed triangle mesh; triangles wind counter-clockwise seen from outside.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }
}

/// Density at which a segment of length `spacing` reaches α = 0.5.
pub fn default_iso_level(spacing: f64) -> f64 {
    std::f64::consts::LN_2 / spacing
}

/// Corner offsets of a cube, bit 0 = x, bit 1 = y, bit 2 = z.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Six tetrahedra sharing the main diagonal 0–7, one per axis ordering.
/// Neighbouring cubes split their shared faces identically.
const TETS: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 1, 5, 7],
    [0, 2, 3, 7],
    [0, 2, 6, 7],
    [0, 4, 5, 7],
    [0, 4, 6, 7],
];

/// Marching tetrahedra over `resolution³` cells spanning `[min, max]`.
///
/// A ring of zero-density samples surrounds the grid, so the surface of any
/// field whose density crosses `iso` is closed. Returns `None` when
/// `resolution < 8`.
pub fn extract_mesh<F: VolumeField + ?Sized>(
    field: &F,
    min: [f64; 3],
    max: [f64; 3],
    resolution: usize,
    iso: f64,
) -> Option<Mesh> {
    if resolution < 8 {
        return None;
    }
    // sample indices 1..=resolution+1 cover the box; 0 and resolution+2 are padding
    let n = resolution + 3;
    let step = [0, 1, 2].map(|a| (max[a] - min[a]) / resolution as f64);
    let position = |i: [usize; 3]| -> [f64; 3] {
        [0, 1, 2].map(|a| min[a] + (i[a] as f64 - 1.0) * step[a])
    };
    let index = |i: [usize; 3]| (i[2] * n + i[1]) * n + i[0];
    let mut values = vec![0.0; n * n * n];
    for z in 1..n - 1 {
        for y in 1..n - 1 {
            for x in 1..n - 1 {
                values[index([x, y, z])] = field.sample(position([x, y, z])).density;
            }
        }
    }

    let mut mesh = Mesh::default();
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    let mut vertex_on = |a: usize, b: usize, pa: [f64; 3], pb: [f64; 3], va: f64, vb: f64, mesh: &mut Mesh| -> u32 {
        // canonical orientation so each edge yields one vertex
        let (a, b, pa, pb, va, vb) = if a < b { (a, b, pa, pb, va, vb) } else { (b, a, pb, pa, vb, va) };
        *edge_vertex.entry((a, b)).or_insert_with(|| {
            let t = (iso - va) / (vb - va);
            mesh.vertices.push([0, 1, 2].map(|k| pa[k] + t * (pb[k] - pa[k])));
            (mesh.vertices.len() - 1) as u32
        })
    };

    for z in 0..n - 1 {
        for y in 0..n - 1 {
            for x in 0..n - 1 {
                let corner = |c: usize| [x + CORNERS[c][0], y + CORNERS[c][1], z + CORNERS[c][2]];
                let ids: [usize; 8] = std::array::from_fn(|c| index(corner(c)));
                if ids.iter().all(|i| values[*i] > iso) || ids.iter().all(|i| values[*i] <= iso) {
                    continue;
                }
                for tet in TETS {
                    let gid = tet.map(|c| ids[c]);
                    let pos = tet.map(|c| position(corner(c)));
                    let val = gid.map(|g| values[g]);
                    let inside: Vec<usize> = (0..4).filter(|k| val[*k] > iso).collect();
                    let outside: Vec<usize> = (0..4).filter(|k| val[*k] <= iso).collect();
                    if inside.is_empty() || outside.is_empty() {
                        continue;
                    }
                    // templates below are outward-facing for a positively
                    // oriented tet listed inside-first
                    let order: Vec<usize> = inside.iter().chain(&outside).copied().collect();
                    let flip = (tet_volume_sign(&pos) < 0.0) != is_odd(&order);
                    let w = |k: usize| order[k];
                    let mut v = |i: usize, o: usize, mesh: &mut Mesh| {
                        vertex_on(gid[w(i)], gid[w(o)], pos[w(i)], pos[w(o)], val[w(i)], val[w(o)], mesh)
                    };
                    let mut tris: Vec<[u32; 3]> = Vec::with_capacity(2);
                    match inside.len() {
                        1 => tris.push([v(0, 1, &mut mesh), v(0, 2, &mut mesh), v(0, 3, &mut mesh)]),
                        3 => tris.push([v(0, 3, &mut mesh), v(1, 3, &mut mesh), v(2, 3, &mut mesh)]),
                        _ => {
                            let q = [v(0, 2, &mut mesh), v(0, 3, &mut mesh), v(1, 3, &mut mesh), v(1, 2, &mut mesh)];
                            tris.push([q[0], q[1], q[2]]);
                            tris.push([q[0], q[2], q[3]]);
                        }
                    }
                    for mut tri in tris {
                        if flip {
                            tri.swap(1, 2);
                        }
                        mesh.triangles.push(tri);
                    }
                }
            }
        }
    }
    Some(mesh)
}

fn tet_volume_sign(p: &[[f64; 3]; 4]) -> f64 {
    let e = [1, 2, 3].map(|k| [0, 1, 2].map(|a| p[k][a] - p[0][a]));
    e[0][0] * (e[1][1] * e[2][2] - e[1][2] * e[2][1]) - e[0][1] * (e[1][0] * e[2][2] - e[1][2] * e[2][0])
        + e[0][2] * (e[1][0] * e[2][1] - e[1][1] * e[2][0])
}

fn is_odd(perm: &[usize]) -> bool {
    let mut inversions = 0;
    for i in 0..perm.len() {
        for j in i + 1..perm.len() {
            if perm[i] > perm[j] {
                inversions += 1;
            }
        }
    }
    inversions % 2 == 1
}

/// ASCII OBJ with 1-based face indices.
pub fn obj_string(mesh: &Mesh) -> String {
    let mut s = String::with_capacity(mesh.vertices.len() * 40 + mesh.triangles.len() * 24);
    for v in &mesh.vertices {
        writeln!(s, "v {} {} {}", v[0], v[1], v[2]).expect("string write");
    }
    for t in &mesh.triangles {
        writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).expect("string write");
    }
    s
}

pub fn write_obj(path: &Path, mesh: &Mesh) -> io::Result<()> {
    std::fs::write(path, obj_string(mesh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldSample;

    fn ball(radius: f64) -> impl Fn([f64; 3]) -> FieldSample + Sync {
        move |p: [f64; 3]| FieldSample {
            density: if (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() < radius { 200.0 } else { 0.0 },
            color: [0.5; 3],
        }
    }

    /// Smooth density crossing the level set transversally.
    fn smooth_ball(p: [f64; 3]) -> FieldSample {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        FieldSample {
            density: 100.0 * (0.5 - r).max(-0.5) + 50.0,
            color: [0.5; 3],
        }
    }

    fn edge_counts(mesh: &Mesh) -> HashMap<(u32, u32), i32> {
        let mut directed = HashMap::new();
        for t in &mesh.triangles {
            for k in 0..3 {
                *directed.entry((t[k], t[(k + 1) % 3])).or_insert(0) += 1;
            }
        }
        directed
    }

    fn assert_watertight(mesh: &Mesh) {
        let directed = edge_counts(mesh);
        for (&(a, b), &count) in &directed {
            assert_eq!(count, 1, "directed edge {a}->{b} used {count} times");
            assert_eq!(directed.get(&(b, a)), Some(&1), "edge {a}-{b} has no opposite");
        }
    }

    #[test]
    fn zero_field_gives_no_triangles() {
        let zero = |_: [f64; 3]| FieldSample::EMPTY;
        let mesh = extract_mesh(&zero, [-1.0; 3], [1.0; 3], 8, 1.0).unwrap();
        assert!(mesh.is_empty());
        assert!(mesh.vertices.is_empty());
    }

    #[test]
    fn coarse_grid_rejected() {
        assert!(extract_mesh(&ball(0.5), [-1.0; 3], [1.0; 3], 7, 1.0).is_none());
    }

    #[test]
    fn sphere_vertices_lie_near_the_radius() {
        let res = 24;
        let voxel = 2.0 / res as f64;
        let mesh = extract_mesh(&ball(0.5), [-1.0; 3], [1.0; 3], res, default_iso_level(2.0 / 64.0)).unwrap();
        assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!((r - 0.5).abs() <= 2.0 * voxel, "radius {r}");
        }
    }

    #[test]
    fn sphere_mesh_is_watertight_and_consistently_wound() {
        for field in [&ball(0.5) as &dyn VolumeField, &smooth_ball] {
            let mesh = extract_mesh(field, [-1.0; 3], [1.0; 3], 16, 50.0).unwrap();
            assert!(!mesh.is_empty());
            assert_watertight(&mesh);
        }
    }

    #[test]
    fn solid_box_touching_the_bounds_is_closed_by_padding() {
        let full = |_: [f64; 3]| FieldSample {
            density: 10.0,
            color: [0.5; 3],
        };
        let mesh = extract_mesh(&full, [-1.0; 3], [1.0; 3], 8, 1.0).unwrap();
        assert!(!mesh.is_empty());
        assert_watertight(&mesh);
    }

    #[test]
    fn normals_point_outward() {
        let mesh = extract_mesh(&smooth_ball, [-1.0; 3], [1.0; 3], 16, 50.0).unwrap();
        for t in &mesh.triangles {
            let [p0, p1, p2] = t.map(|i| mesh.vertices[i as usize]);
            let e1 = [0, 1, 2].map(|a| p1[a] - p0[a]);
            let e2 = [0, 1, 2].map(|a| p2[a] - p0[a]);
            let n = [
                e1[1] * e2[2] - e1[2] * e2[1],
                e1[2] * e2[0] - e1[0] * e2[2],
                e1[0] * e2[1] - e1[1] * e2[0],
            ];
            let c = [0, 1, 2].map(|a| (p0[a] + p1[a] + p2[a]) / 3.0);
            // vertices on grid points exactly at the level give zero-area triangles
            assert!(n[0] * c[0] + n[1] * c[1] + n[2] * c[2] >= 0.0);
            if n.iter().any(|x| x.abs() > 1e-12) {
                assert!(n[0] * c[0] + n[1] * c[1] + n[2] * c[2] > 0.0);
            }
        }
    }

    #[test]
    fn obj_output_is_one_based() {
        let mesh = Mesh {
            vertices: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        let s = obj_string(&mesh);
        assert_eq!(s.lines().count(), 4);
        assert_eq!(s.lines().last(), Some("f 1 2 3"));
    }
}
