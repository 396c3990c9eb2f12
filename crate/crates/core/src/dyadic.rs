//! Dyadic cubes and shifted dyadic grids on a finite range of scales.
//!
//! All geometry is integer: a cube stores its level `k` (sidelength
//! `2^{-k}`) and its lower corner in units of the finest mesh cell
//! `2^{-L}`. A grid is the standard lattice translated scale by scale,
//! `I + ω = I + Σ_{i: 2^{-i} < ℓ(I)} 2^{-i} ω^i`, with `ω^i ∈ {0,1}^n` stored
//! for every scale between the coarsest sidelength `2^S` and the mesh.

use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DyadicCube {
    pub level: i32,
    pub corner: Vec<i64>,
    /// Mesh level `L`; the corner is measured in cells of side `2^{-L}`.
    #[serde(rename = "L")]
    pub mesh: u32,
}

impl fmt::Display for DyadicCube {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q(level={}, corner={:?}, L={})", self.level, self.corner, self.mesh)
    }
}

impl DyadicCube {
    pub fn new(level: i32, corner: Vec<i64>, mesh: u32) -> Self {
        debug_assert!(level <= mesh as i32);
        DyadicCube { level, corner, mesh }
    }

    /// The cube `[0, 2^{-level})^n`.
    pub fn unit(n: usize, level: i32, mesh: u32) -> Self {
        DyadicCube::new(level, vec![0; n], mesh)
    }

    pub fn dim(&self) -> usize {
        self.corner.len()
    }

    /// Sidelength in mesh cells.
    pub fn side_cells(&self) -> i64 {
        1i64 << (self.mesh as i32 - self.level)
    }

    pub fn side(&self) -> f64 {
        (-(self.level as f64)).exp2()
    }

    pub fn volume(&self) -> f64 {
        self.side().powi(self.dim() as i32)
    }

    /// Number of mesh cells inside the cube.
    pub fn cell_count(&self) -> i64 {
        self.side_cells().pow(self.dim() as u32)
    }

    pub fn cell_size(&self) -> f64 {
        (-(self.mesh as f64)).exp2()
    }

    pub fn hi(&self, d: usize) -> i64 {
        self.corner[d] + self.side_cells()
    }

    /// Physical center.
    pub fn center(&self) -> Vec<f64> {
        let h = self.cell_size();
        let s = self.side_cells() as f64;
        self.corner.iter().map(|&c| (c as f64 + 0.5 * s) * h).collect()
    }

    pub fn children(&self) -> Result<Vec<DyadicCube>> {
        if self.level >= self.mesh as i32 {
            return Err(Error::LevelAtFinest { level: self.level });
        }
        let half = self.side_cells() / 2;
        let n = self.dim();
        Ok((0..1usize << n)
            .map(|bits| {
                let corner = (0..n)
                    .map(|d| self.corner[d] + if bits >> d & 1 == 1 { half } else { 0 })
                    .collect();
                DyadicCube::new(self.level + 1, corner, self.mesh)
            })
            .collect())
    }

    pub fn contains(&self, other: &DyadicCube) -> bool {
        (0..self.dim()).all(|d| self.corner[d] <= other.corner[d] && other.hi(d) <= self.hi(d))
    }

    pub fn contains_cell(&self, cell: &[i64]) -> bool {
        (0..self.dim()).all(|d| self.corner[d] <= cell[d] && cell[d] < self.hi(d))
    }

    pub fn intersects(&self, other: &DyadicCube) -> bool {
        (0..self.dim()).all(|d| self.corner[d] < other.hi(d) && other.corner[d] < self.hi(d))
    }

    /// ℓ^∞ distance between the closed cubes, in physical units.
    pub fn dist(&self, other: &DyadicCube) -> f64 {
        let gap = (0..self.dim())
            .map(|d| (other.corner[d] - self.hi(d)).max(self.corner[d] - other.hi(d)).max(0))
            .max()
            .unwrap_or(0);
        gap as f64 * self.cell_size()
    }

    /// `d(self, ∂J)` in the ℓ^∞ metric.
    pub fn dist_to_boundary(&self, j: &DyadicCube) -> f64 {
        if j.contains(self) {
            let m = (0..self.dim())
                .map(|d| (self.corner[d] - j.corner[d]).min(j.hi(d) - self.hi(d)))
                .min()
                .unwrap_or(0);
            m as f64 * self.cell_size()
        } else {
            // outside or straddling: distance to J itself, which is zero when they meet
            self.dist(j)
        }
    }

    /// Translate by a vector of mesh cells.
    pub fn translated(&self, by: &[i64]) -> DyadicCube {
        let corner = self.corner.iter().zip(by).map(|(c, b)| c + b).collect();
        DyadicCube::new(self.level, corner, self.mesh)
    }

    /// Integer cell coordinates of every mesh cell in the cube (row-major, last axis fastest).
    pub fn cells(&self) -> Vec<Vec<i64>> {
        let s = self.side_cells();
        let n = self.dim();
        let total = self.cell_count();
        (0..total)
            .map(|mut idx| {
                let mut c = vec![0; n];
                for d in (0..n).rev() {
                    c[d] = self.corner[d] + idx % s;
                    idx /= s;
                }
                c
            })
            .collect()
    }
}

/// A dyadic grid translated scale by scale.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DyadicGrid {
    pub n: usize,
    #[serde(rename = "L")]
    pub mesh: u32,
    /// Coarsest sidelength is `2^S`, i.e. the coarsest level is `-S`.
    #[serde(rename = "S")]
    pub coarse: i32,
    /// `omega[i + S]` is `ω^i` for `i = -S ..= L`.
    pub omega: Vec<Vec<u8>>,
}

impl DyadicGrid {
    pub fn standard(n: usize, mesh: u32, coarse: i32) -> Self {
        let scales = (mesh as i32 + coarse + 1) as usize;
        DyadicGrid { n, mesh, coarse, omega: vec![vec![0; n]; scales] }
    }

    pub fn from_omega(n: usize, mesh: u32, coarse: i32, omega: Vec<Vec<u8>>) -> Result<Self> {
        let scales = (mesh as i32 + coarse + 1) as usize;
        if omega.len() != scales || omega.iter().any(|w| w.len() != n || w.iter().any(|&b| b > 1)) {
            return Err(Error::Domain(format!(
                "omega must hold {scales} vectors in {{0,1}}^{n}"
            )));
        }
        Ok(DyadicGrid { n, mesh, coarse, omega })
    }

    pub fn coarsest_level(&self) -> i32 {
        -self.coarse
    }

    pub fn finest_level(&self) -> i32 {
        self.mesh as i32
    }

    pub fn is_standard(&self) -> bool {
        self.omega.iter().all(|w| w.iter().all(|&b| b == 0))
    }

    /// `ω^i`, or zero outside the stored range.
    pub fn omega_at(&self, i: i32) -> &[u8] {
        static ZEROS: [u8; 4] = [0; 4];
        let idx = i + self.coarse;
        if idx < 0 || idx as usize >= self.omega.len() {
            &ZEROS[..self.n]
        } else {
            &self.omega[idx as usize]
        }
    }

    /// Translation (in mesh cells) applied to the standard cubes of level `k`.
    pub fn offset(&self, level: i32) -> Vec<i64> {
        let mut off = vec![0i64; self.n];
        for i in (level + 1).max(self.coarsest_level())..=self.finest_level() {
            let w = self.omega_at(i);
            let step = 1i64 << (self.mesh as i32 - i);
            for d in 0..self.n {
                off[d] += step * w[d] as i64;
            }
        }
        off
    }

    /// The grid cube of the given level containing a mesh cell.
    pub fn cube_containing(&self, cell: &[i64], level: i32) -> DyadicCube {
        let off = self.offset(level);
        let side = 1i64 << (self.mesh as i32 - level);
        let corner = (0..self.n)
            .map(|d| off[d] + (cell[d] - off[d]).div_euclid(side) * side)
            .collect();
        DyadicCube::new(level, corner, self.mesh)
    }

    pub fn contains_cube(&self, q: &DyadicCube) -> bool {
        if q.dim() != self.n || q.mesh != self.mesh {
            return false;
        }
        if q.level < self.coarsest_level() || q.level > self.finest_level() {
            return false;
        }
        let off = self.offset(q.level);
        let side = q.side_cells();
        (0..self.n).all(|d| (q.corner[d] - off[d]).rem_euclid(side) == 0)
    }

    /// `Q^{(k)}`: the grid cube containing `Q` with sidelength `2^k ℓ(Q)`.
    pub fn ancestor(&self, q: &DyadicCube, k: i32) -> Result<DyadicCube> {
        if k < 0 {
            return Err(Error::Domain(format!("ancestor step {k} must be non-negative")));
        }
        if q.level - k < self.coarsest_level() {
            return Err(Error::OutOfRange { level: q.level, steps: k, coarsest: self.coarsest_level() });
        }
        if !self.contains_cube(q) {
            return Err(Error::misaligned(q));
        }
        Ok(self.cube_containing(&q.corner, q.level - k))
    }

    /// All grid cubes of a level meeting the half-open cell box `[lo, hi)`.
    pub fn cubes_meeting(&self, level: i32, lo: &[i64], hi: &[i64]) -> Vec<DyadicCube> {
        let off = self.offset(level);
        let side = 1i64 << (self.mesh as i32 - level);
        let ranges: Vec<(i64, i64)> = (0..self.n)
            .map(|d| {
                let a = (lo[d] - off[d]).div_euclid(side);
                let b = (hi[d] - 1 - off[d]).div_euclid(side);
                (a, b)
            })
            .collect();
        let mut out = Vec::new();
        let mut idx: Vec<i64> = ranges.iter().map(|r| r.0).collect();
        loop {
            let corner = (0..self.n).map(|d| off[d] + idx[d] * side).collect();
            out.push(DyadicCube::new(level, corner, self.mesh));
            let mut d = self.n;
            loop {
                if d == 0 {
                    return out;
                }
                d -= 1;
                if idx[d] < ranges[d].1 {
                    idx[d] += 1;
                    for e in d + 1..self.n {
                        idx[e] = ranges[e].0;
                    }
                    break;
                }
            }
        }
    }
}

/// `γ = α / (2(2n + α))`.
pub fn gamma_of(alpha: f64, n: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Domain(format!("Hölder exponent {alpha} outside (0,1]")));
    }
    if n == 0 {
        return Err(Error::Domain("dimension must be positive".into()));
    }
    Ok(alpha / (2.0 * (2.0 * n as f64 + alpha)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoodnessParams {
    pub r: u32,
    pub gamma: f64,
    pub alpha: f64,
}

impl GoodnessParams {
    pub fn from_alpha(alpha: f64, n: usize, r: u32) -> Result<Self> {
        Ok(GoodnessParams { r, gamma: gamma_of(alpha, n)?, alpha })
    }
}

/// A cube is bad when some grid cube `J ⊇ I` with `ℓ(J) ≥ 2^r ℓ(I)` has
/// `d(I, ∂J) ≤ ℓ(I)^γ ℓ(J)^{1-γ}`.
///
/// Only ancestors need checking: for a same-level `J` not containing `I`,
/// `d(I, ∂J) = d(I, J)` is at least the distance from `I` to the boundary of
/// its own ancestor.
pub fn is_good(i: &DyadicCube, grid: &DyadicGrid, params: &GoodnessParams) -> bool {
    let li = i.side();
    let top = i.level - params.r as i32;
    let mut level = grid.coarsest_level();
    while level <= top {
        let j = grid.cube_containing(&i.corner, level);
        let threshold = li.powf(params.gamma) * j.side().powf(1.0 - params.gamma);
        if i.dist_to_boundary(&j) <= threshold {
            return false;
        }
        level += 1;
    }
    true
}

/// Grid with every `ω^i` drawn independently and uniformly from `{0,1}^n`.
pub fn sample_grid(seed: u64, n: usize, mesh: u32, coarse: i32) -> DyadicGrid {
    let mut rng = rng::seeded(seed);
    sample_grid_with(&mut rng, n, mesh, coarse)
}

pub fn sample_grid_with<R: Rng>(rng: &mut R, n: usize, mesh: u32, coarse: i32) -> DyadicGrid {
    let scales = (mesh as i32 + coarse + 1) as usize;
    let omega = (0..scales)
        .map(|_| (0..n).map(|_| rng.gen_range(0..=1u8)).collect())
        .collect();
    DyadicGrid { n, mesh, coarse, omega }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PiGoodEstimate {
    pub estimate: f64,
    pub std_err: f64,
    pub trials: u64,
    pub good: u64,
    pub base_level: i32,
}

/// Monte Carlo estimate of `ℙ_ω(I + ω is good)` for `I = [0, 2^{-base})^n`.
pub fn estimate_pi_good(
    params: &GoodnessParams,
    n: usize,
    mesh: u32,
    coarse: i32,
    base_level: i32,
    trials: u64,
    seed: u64,
) -> Result<PiGoodEstimate> {
    if trials == 0 {
        return Err(Error::Precondition("trials must be at least 1".into()));
    }
    if base_level < -coarse || base_level > mesh as i32 {
        return Err(Error::Precondition(format!("base level {base_level} outside scale range")));
    }
    let good: u64 = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::trial(seed, t);
            let grid = sample_grid_with(&mut rng, n, mesh, coarse);
            let i = DyadicCube::new(base_level, grid.offset(base_level), mesh);
            is_good(&i, &grid, params) as u64
        })
        .sum();
    let p = good as f64 / trials as f64;
    Ok(PiGoodEstimate {
        estimate: p,
        std_err: (p * (1.0 - p) / trials as f64).sqrt(),
        trials,
        good,
        base_level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c1(level: i32, x: i64, mesh: u32) -> DyadicCube {
        DyadicCube::new(level, vec![x], mesh)
    }

    #[test]
    fn children_bisect() {
        let q = DyadicCube::unit(1, 0, 4);
        let ch = q.children().unwrap();
        assert_eq!(ch, vec![c1(1, 0, 4), c1(1, 8, 4)]);
        let q2 = DyadicCube::unit(2, 0, 3);
        let ch2 = q2.children().unwrap();
        assert_eq!(ch2.len(), 4);
        let vol: f64 = ch2.iter().map(|c| c.volume()).sum();
        assert_eq!(vol, q2.volume());
        assert!(ch2.iter().all(|c| q2.contains(c)));
    }

    #[test]
    fn children_at_finest_errors() {
        let q = c1(4, 3, 4);
        assert!(matches!(q.children(), Err(Error::LevelAtFinest { .. })));
    }

    #[test]
    fn ancestor_examples() {
        let g = DyadicGrid::standard(1, 4, 0);
        // [1/2, 3/4) at L = 4 is level 2, corner 8
        let q = c1(2, 8, 4);
        assert_eq!(g.ancestor(&q, 1).unwrap(), c1(1, 8, 4));
        assert_eq!(g.ancestor(&q, 0).unwrap(), q);
        for ch in q.children().unwrap() {
            assert_eq!(g.ancestor(&ch, 1).unwrap(), q);
        }
        assert!(matches!(g.ancestor(&q, 3), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn gamma_values() {
        assert!((gamma_of(1.0, 1).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert!((gamma_of(1.0, 2).unwrap() - 0.1).abs() < 1e-15);
        assert!((gamma_of(0.5, 1).unwrap() - 0.1).abs() < 1e-15);
        assert!(gamma_of(0.0, 1).is_err());
        assert!(gamma_of(1.5, 1).is_err());
    }

    #[test]
    fn shifted_grid_nests() {
        let g = sample_grid(7, 1, 6, 0);
        for level in 0..6 {
            for q in g.cubes_meeting(level, &[0], &[64]) {
                assert!(g.contains_cube(&q));
                for ch in q.children().unwrap() {
                    assert!(g.contains_cube(&ch), "{ch} not in grid");
                    assert_eq!(g.ancestor(&ch, 1).unwrap(), q);
                }
            }
        }
    }

    #[test]
    fn zero_omega_is_standard() {
        let g = DyadicGrid::from_omega(1, 3, 0, vec![vec![0]; 4]).unwrap();
        assert_eq!(g, DyadicGrid::standard(1, 3, 0));
        assert_eq!(g.offset(0), vec![0]);
        assert_eq!(sample_grid(3, 2, 5, 1), sample_grid(3, 2, 5, 1));
    }

    #[test]
    fn offset_matches_definition() {
        // ω^1 = 1, others 0, L = 3: level-0 cubes shift by 1/2 = 4 cells, level >= 1 not at all
        let mut omega = vec![vec![0u8]; 4];
        omega[1] = vec![1];
        let g = DyadicGrid::from_omega(1, 3, 0, omega).unwrap();
        assert_eq!(g.offset(0), vec![4]);
        assert_eq!(g.offset(1), vec![0]);
        assert_eq!(g.cube_containing(&[0], 0), c1(0, -4, 3));
    }

    #[test]
    fn goodness_boundary_and_vacuous() {
        let g = DyadicGrid::standard(1, 8, 0);
        let p = GoodnessParams { r: 2, gamma: 0.5, alpha: 1.0 };
        // abutting the left edge of its ancestors
        assert!(!is_good(&c1(4, 0, 8), &g, &p));
        // no J two levels up fits in range
        assert!(is_good(&c1(1, 128, 8), &g, &p));
    }

    #[test]
    fn goodness_locality() {
        let p = GoodnessParams { r: 2, gamma: 0.5, alpha: 1.0 };
        for seed in 0..50 {
            let g = sample_grid(seed, 1, 8, 0);
            let k = 5;
            let i = DyadicCube::new(k, g.offset(k), 8);
            let before = is_good(&i, &g, &p);
            // mutate the fine scales: I moves, but its relative position in its ancestors does not
            let mut g2 = g.clone();
            for s in (k + 1)..=8 {
                g2.omega[(s + g.coarse) as usize] = vec![1 - g.omega[(s + g.coarse) as usize][0]];
            }
            let i2 = DyadicCube::new(k, g2.offset(k), 8);
            assert_eq!(is_good(&i2, &g2, &p), before);
            // and the point set only depends on the fine scales
            let mut g3 = g.clone();
            for s in 0..=k {
                g3.omega[(s + g.coarse) as usize] = vec![1 - g.omega[(s + g.coarse) as usize][0]];
            }
            assert_eq!(g3.offset(k), g.offset(k));
        }
    }

    #[test]
    fn pi_good_vacuous_is_one() {
        let p = GoodnessParams { r: 20, gamma: 1.0 / 6.0, alpha: 1.0 };
        let est = estimate_pi_good(&p, 1, 10, 0, 10, 100, 1).unwrap();
        assert_eq!(est.estimate, 1.0);
    }

    #[test]
    fn cube_json_roundtrip() {
        let q = DyadicCube::new(3, vec![8, 16], 6);
        let s = serde_json::to_string(&q).unwrap();
        assert_eq!(s, r#"{"level":3,"corner":[8,16],"L":6}"#);
        let g = sample_grid(1, 1, 3, 0);
        let back: DyadicGrid = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        assert_eq!(back, g);
    }

    fn brute_force_good(i: &DyadicCube, g: &DyadicGrid, p: &GoodnessParams) -> bool {
        let n = g.n;
        let big = 4i64 << (g.mesh as i32 + g.coarse);
        let lo = vec![-big; n];
        let hi = vec![big; n];
        for level in g.coarsest_level()..=(i.level - p.r as i32) {
            for j in g.cubes_meeting(level, &lo, &hi) {
                let thr = i.side().powf(p.gamma) * j.side().powf(1.0 - p.gamma);
                if i.dist_to_boundary(&j) <= thr {
                    return false;
                }
            }
        }
        true
    }

    #[test]
    fn goodness_matches_brute_force() {
        for (n, mesh, coarse) in [(1usize, 7u32, 0i32), (1, 6, 1), (2, 5, 0)] {
            for seed in 0..6 {
                let g = sample_grid(seed, n, mesh, coarse);
                for p in [
                    GoodnessParams { r: 1, gamma: 0.5, alpha: 1.0 },
                    GoodnessParams { r: 2, gamma: 1.0 / 6.0, alpha: 1.0 },
                    GoodnessParams { r: 3, gamma: 0.1, alpha: 1.0 },
                ] {
                    for level in 0..=mesh as i32 {
                        let lo = vec![0; n];
                        let hi = vec![1i64 << mesh; n];
                        for i in g.cubes_meeting(level, &lo, &hi) {
                            assert_eq!(is_good(&i, &g, &p), brute_force_good(&i, &g, &p), "{i}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn central_cube_is_good() {
        // only J = [0,1) is in range; I = [3/8, 1/2) has d = 3/8 > (1/8)^{1/2}
        let g = DyadicGrid::standard(1, 10, 0);
        let p = GoodnessParams { r: 3, gamma: 0.5, alpha: 1.0 };
        let i = c1(3, 384, 10);
        assert!(is_good(&i, &g, &p));
        assert!(brute_force_good(&i, &g, &p));
    }

    #[test]
    fn omega_components_are_fair() {
        let samples = 10_000u64;
        let ones: u64 = (0..samples)
            .map(|s| sample_grid(s, 1, 0, 0).omega[0][0] as u64)
            .sum();
        let mean = ones as f64 / samples as f64;
        let sigma = (0.25 / samples as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn pi_good_monotone_in_gamma() {
        let mut last = 0.0;
        for gamma in [0.1, 0.2, 0.3, 0.5, 0.7] {
            let p = GoodnessParams { r: 3, gamma, alpha: 1.0 };
            let est = estimate_pi_good(&p, 1, 12, 0, 9, 2000, 5).unwrap();
            assert!(est.estimate >= last, "gamma {gamma}: {} < {last}", est.estimate);
            last = est.estimate;
        }
    }

    #[test]
    fn pi_good_independent_of_base_level() {
        let p = GoodnessParams { r: 4, gamma: 0.5, alpha: 1.0 };
        let a = estimate_pi_good(&p, 1, 10, 0, 8, 4000, 11).unwrap();
        let b = estimate_pi_good(&p, 1, 11, 0, 9, 4000, 12).unwrap();
        let sigma = (a.std_err.powi(2) + b.std_err.powi(2)).sqrt();
        assert!(a.estimate > 0.0);
        assert!((a.estimate - b.estimate).abs() < 3.0 * sigma + 1e-12);
    }
}
