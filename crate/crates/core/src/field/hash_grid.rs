//! Multi-resolution hashed feature grid.
//!
//! Each level is a lattice of `resolution + 1` vertices per axis over the
//! bounding box. Coarse levels whose vertex count fits in the table are
//! indexed densely; finer levels fold vertices into the table with an
//! XOR-of-primes spatial hash. Collisions are not resolved.

use serde::{Deserialize, Serialize};

use super::FieldError;

const PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub num_levels: usize,
    pub base_resolution: usize,
    pub max_resolution: usize,
    pub features_per_level: usize,
    pub table_size_log2: u32,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            num_levels: 16,
            base_resolution: 16,
            max_resolution: 2048,
            features_per_level: 2,
            table_size_log2: 19,
            bbox_min: [-1.0; 3],
            bbox_max: [1.0; 3],
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |msg: &str| Err(FieldError::InvalidConfig(msg.to_string()));
        if self.num_levels == 0 {
            return bad("num_levels must be at least 1");
        }
        if self.base_resolution == 0 || self.base_resolution > self.max_resolution {
            return bad("base_resolution must be in 1..=max_resolution");
        }
        if self.features_per_level == 0 {
            return bad("features_per_level must be at least 1");
        }
        if !(4..=24).contains(&self.table_size_log2) {
            return bad("table_size_log2 must be in 4..=24");
        }
        for a in 0..3 {
            let (lo, hi) = (self.bbox_min[a], self.bbox_max[a]);
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return bad("bounding box must be finite with min < max on every axis");
            }
        }
        Ok(())
    }

    /// Vertex-lattice resolution of `level`, growing geometrically from base to max.
    pub fn level_resolution(&self, level: usize) -> usize {
        if self.num_levels == 1 {
            return self.base_resolution;
        }
        let base = self.base_resolution as f64;
        let growth = ((self.max_resolution as f64).ln() - base.ln()) / (self.num_levels - 1) as f64;
        let res = (base * (growth * level as f64).exp() + 1e-9).floor() as usize;
        res.clamp(self.base_resolution, self.max_resolution)
    }

    pub fn output_dim(&self) -> usize {
        self.num_levels * self.features_per_level
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelLayout {
    pub resolution: usize,
    /// Number of table entries (each holding `features_per_level` values).
    pub entries: usize,
    /// Offset of the first value of this level in the flat parameter array.
    pub offset: usize,
    pub dense: bool,
}

/// Precomputed per-level addressing.
#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid {
    config: HashGridConfig,
    levels: Vec<LevelLayout>,
    param_count: usize,
}

/// One of the eight lattice corners around a point: flat parameter index of
/// its first feature and its trilinear weight.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Corner {
    pub index: usize,
    pub weight: f64,
}

impl HashGrid {
    pub fn new(config: HashGridConfig) -> Result<Self, FieldError> {
        config.validate()?;
        let table = 1usize << config.table_size_log2;
        let mut offset = 0;
        let levels = (0..config.num_levels)
            .map(|l| {
                let resolution = config.level_resolution(l);
                let vertices = (resolution + 1).pow(3);
                let dense = vertices <= table;
                let entries = if dense { vertices } else { table };
                let layout = LevelLayout {
                    resolution,
                    entries,
                    offset,
                    dense,
                };
                offset += entries * config.features_per_level;
                layout
            })
            .collect();
        Ok(Self {
            config,
            levels,
            param_count: offset,
        })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn levels(&self) -> &[LevelLayout] {
        &self.levels
    }

    /// Position in unit box coordinates, clamped to `[0, 1]`, plus a flag per
    /// axis telling whether clamping was active.
    fn normalize(&self, p: [f64; 3]) -> ([f64; 3], [bool; 3]) {
        let mut u = [0.0; 3];
        let mut clamped = [false; 3];
        for a in 0..3 {
            let lo = self.config.bbox_min[a];
            let hi = self.config.bbox_max[a];
            let v = (p[a] - lo) / (hi - lo);
            if v <= 0.0 {
                u[a] = 0.0;
                clamped[a] = v < 0.0;
            } else if v >= 1.0 {
                u[a] = 1.0;
                clamped[a] = v > 1.0;
            } else {
                u[a] = v;
            }
        }
        (u, clamped)
    }

    fn vertex_index(&self, level: &LevelLayout, v: [usize; 3]) -> usize {
        let entry = if level.dense {
            let n = level.resolution + 1;
            v[0] + n * (v[1] + n * v[2])
        } else {
            let h = (v[0] as u64).wrapping_mul(PRIMES[0])
                ^ (v[1] as u64).wrapping_mul(PRIMES[1])
                ^ (v[2] as u64).wrapping_mul(PRIMES[2]);
            (h as usize) & (level.entries - 1)
        };
        level.offset + entry * self.config.features_per_level
    }

    /// Lower cell vertex and fractional offsets of a unit-box point at `level`.
    fn cell(level: &LevelLayout, u: [f64; 3]) -> ([usize; 3], [f64; 3]) {
        let n = level.resolution;
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let x = u[a] * n as f64;
            let c = (x.floor() as usize).min(n - 1);
            base[a] = c;
            frac[a] = x - c as f64;
        }
        (base, frac)
    }

    pub(crate) fn corners(&self, level: &LevelLayout, u: [f64; 3]) -> [Corner; 8] {
        let (base, frac) = Self::cell(level, u);
        let mut out = [Corner::default(); 8];
        for (k, corner) in out.iter_mut().enumerate() {
            let mut v = base;
            let mut w = 1.0;
            for a in 0..3 {
                if k >> a & 1 == 1 {
                    v[a] += 1;
                    w *= frac[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            *corner = Corner {
                index: self.vertex_index(level, v),
                weight: w,
            };
        }
        out
    }

    /// Writes the concatenated per-level interpolated features of `p` into `out`.
    pub fn encode(&self, p: [f64; 3], params: &[f32], out: &mut [f64]) {
        debug_assert_eq!(params.len(), self.param_count);
        let f = self.config.features_per_level;
        let (u, _) = self.normalize(p);
        for (l, level) in self.levels.iter().enumerate() {
            let dst = &mut out[l * f..(l + 1) * f];
            dst.fill(0.0);
            for c in self.corners(level, u) {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d += c.weight * params[c.index + j] as f64;
                }
            }
        }
    }

    /// Like [`encode`](Self::encode), also writing `d out[i] / d p` into `jacobian[i]`.
    pub fn encode_with_jacobian(
        &self,
        p: [f64; 3],
        params: &[f32],
        out: &mut [f64],
        jacobian: &mut [[f64; 3]],
    ) {
        let f = self.config.features_per_level;
        let (u, clamped) = self.normalize(p);
        for (l, level) in self.levels.iter().enumerate() {
            let (base, frac) = Self::cell(level, u);
            let n = level.resolution as f64;
            let dst = &mut out[l * f..(l + 1) * f];
            let jac = &mut jacobian[l * f..(l + 1) * f];
            dst.fill(0.0);
            jac.iter_mut().for_each(|j| *j = [0.0; 3]);
            for k in 0..8 {
                let mut v = base;
                let mut w = 1.0;
                let mut dw = [1.0; 3];
                for a in 0..3 {
                    let (wa, da) = if k >> a & 1 == 1 {
                        v[a] += 1;
                        (frac[a], 1.0)
                    } else {
                        (1.0 - frac[a], -1.0)
                    };
                    w *= wa;
                    for (b, d) in dw.iter_mut().enumerate() {
                        *d *= if a == b { da } else { wa };
                    }
                }
                let idx = self.vertex_index(level, v);
                for j in 0..f {
                    let val = params[idx + j] as f64;
                    dst[j] += w * val;
                    for a in 0..3 {
                        if !clamped[a] {
                            let scale = n / (self.config.bbox_max[a] - self.config.bbox_min[a]);
                            jac[j][a] += dw[a] * scale * val;
                        }
                    }
                }
            }
        }
    }

    /// Scatters `d loss / d feature` for point `p` into the flat grid gradient.
    pub fn accumulate_grad(&self, p: [f64; 3], feature_grad: &[f64], grad: &mut [f64]) {
        let f = self.config.features_per_level;
        let (u, _) = self.normalize(p);
        for (l, level) in self.levels.iter().enumerate() {
            let g = &feature_grad[l * f..(l + 1) * f];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            for c in self.corners(level, u) {
                for (j, gv) in g.iter().enumerate() {
                    grad[c.index + j] += c.weight * gv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(levels: usize, base: usize, max: usize, log2: u32) -> HashGrid {
        HashGrid::new(HashGridConfig {
            num_levels: levels,
            base_resolution: base,
            max_resolution: max,
            features_per_level: 2,
            table_size_log2: log2,
            bbox_min: [-1.0; 3],
            bbox_max: [1.0; 3],
        })
        .unwrap()
    }

    #[test]
    fn resolutions_grow_from_base_to_max() {
        let cfg = HashGridConfig::default();
        assert_eq!(cfg.level_resolution(0), 16);
        assert_eq!(cfg.level_resolution(15), 2048);
        for l in 1..16 {
            assert!(cfg.level_resolution(l) > cfg.level_resolution(l - 1));
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = HashGridConfig::default();
        cfg.table_size_log2 = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = HashGridConfig::default();
        cfg.base_resolution = 4096;
        assert!(cfg.validate().is_err());
        let mut cfg = HashGridConfig::default();
        cfg.num_levels = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn vertex_point_returns_table_entry() {
        let grid = small(1, 4, 4, 10);
        let params: Vec<f32> = (0..grid.param_count()).map(|i| i as f32 * 0.01).collect();
        // vertex (1, 2, 3) of a 4-cell lattice over [-1, 1]
        let p = [-1.0 + 0.5, -1.0 + 1.0, -1.0 + 1.5];
        let mut out = [0.0; 2];
        grid.encode(p, &params, &mut out);
        let level = grid.levels()[0];
        assert!(level.dense);
        let idx = grid.vertex_index(&level, [1, 2, 3]);
        assert_eq!(out[0], params[idx] as f64);
        assert_eq!(out[1], params[idx + 1] as f64);
    }

    #[test]
    fn zero_table_gives_zero_features() {
        let grid = small(3, 2, 16, 6);
        let params = vec![0.0f32; grid.param_count()];
        let mut out = vec![1.0; grid.output_dim()];
        grid.encode([0.3, -0.7, 0.11], &params, &mut out);
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cell_center_is_mean_of_corners() {
        // one cell per axis: the 8 lattice vertices are the 8 corners
        let grid = small(1, 1, 1, 4);
        let params: Vec<f32> = (0..grid.param_count()).map(|i| (i as f32).sin()).collect();
        let mut out = [0.0; 2];
        grid.encode([0.0, 0.0, 0.0], &params, &mut out);
        for j in 0..2 {
            let mean: f64 = (0..8).map(|v| params[v * 2 + j] as f64).sum::<f64>() / 8.0;
            assert!((out[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn hashed_levels_stay_in_table() {
        let grid = small(4, 8, 256, 6);
        assert!(!grid.levels()[3].dense);
        let level = grid.levels()[3];
        for c in grid.corners(&level, [0.99, 0.5, 0.01]) {
            assert!(c.index >= level.offset && c.index < level.offset + level.entries * 2);
        }
    }

    #[test]
    fn position_jacobian_matches_finite_differences() {
        let grid = small(3, 2, 9, 6);
        let params: Vec<f32> = (0..grid.param_count())
            .map(|i| ((i * 7919) % 97) as f32 / 97.0 - 0.5)
            .collect();
        let p = [0.137, -0.42, 0.61];
        let d = grid.output_dim();
        let mut out = vec![0.0; d];
        let mut jac = vec![[0.0; 3]; d];
        grid.encode_with_jacobian(p, &params, &mut out, &mut jac);
        let h = 1e-6;
        for a in 0..3 {
            let mut pp = p;
            let mut pm = p;
            pp[a] += h;
            pm[a] -= h;
            let mut op = vec![0.0; d];
            let mut om = vec![0.0; d];
            grid.encode(pp, &params, &mut op);
            grid.encode(pm, &params, &mut om);
            for i in 0..d {
                let fd = (op[i] - om[i]) / (2.0 * h);
                assert!((fd - jac[i][a]).abs() < 1e-6, "feature {i} axis {a}: {fd} vs {}", jac[i][a]);
            }
        }
    }
}
