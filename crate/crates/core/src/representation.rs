//! Haar decomposition of `⟨T(f,g),h⟩` on a fixed grid, bucketing of Haar
//! triples, and extraction of shift and paraproduct coefficients.
//!
//! Everything lives on a window of two top cubes of the grid, the level-0
//! cubes meeting `[0,1)`. Inside the window the Haar basis is the usual
//! one: index 0 and 1 are `h^0` of the two top cubes, index `2^{s+1}+p` is
//! `h_I` for the `p`-th level-`s` cube. For a translation-invariant kernel
//! the kernel tensor in window coordinates does not depend on the grid, so
//! one [`Context`] serves every grid of a given mesh.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dyadic::{is_good, DyadicCube, DyadicGrid, GoodnessParams};
use crate::error::{Error, Result};
use crate::kernel::{BilinearKernel, TruncationSpec};
use crate::mesh::{CellBox, HaarIndex, MeshFunction};
use crate::models::{ParaCoeff, ParaproductSpec, ShiftCoeff, ShiftSpec, NORM_SLACK};
use crate::pairing::PairingTable;
use crate::quadrature::QuadratureSpec;

/// Largest mesh the dense window tensors are built for.
pub const MAX_MESH: u32 = 7;

/// The two top cubes of a grid that cover `[0,1)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub mesh: u32,
    /// First cell of the lower top cube.
    pub lo: i64,
}

impl Window {
    pub fn of_grid(grid: &DyadicGrid) -> Result<Window> {
        if grid.n != 1 {
            return Err(Error::Unsupported("the representation engine works in one dimension".into()));
        }
        if grid.coarsest_level() != 0 {
            return Err(Error::Precondition(format!(
                "top cubes must be the coarsest cubes (coarsest level is {})",
                grid.coarsest_level()
            )));
        }
        let off = grid.offset(0)[0];
        Ok(Window { mesh: grid.mesh, lo: off - (1i64 << grid.mesh) })
    }

    /// Cells in the window.
    pub fn len(&self) -> usize {
        2usize << self.mesh
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cells(&self) -> CellBox {
        CellBox::new(vec![self.lo], vec![self.len() as i64])
    }

    /// Level of a basis index; the two top functions sit at level −1.
    pub fn level(idx: usize) -> i32 {
        if idx < 2 {
            -1
        } else {
            (usize::BITS - 1 - idx.leading_zeros()) as i32 - 1
        }
    }

    fn raw(&self, idx: usize) -> Cube {
        if idx < 2 {
            return Cube { level: 0, lo: self.lo + ((idx as i64) << self.mesh) };
        }
        let s = Self::level(idx);
        let p = (idx - (2usize << s)) as i64;
        Cube { level: s, lo: self.lo + (p << (self.mesh as i32 - s)) }
    }

    /// Cube carrying basis function `idx`.
    pub fn cube(&self, idx: usize) -> DyadicCube {
        self.raw(idx).to_cube(self.mesh)
    }

    /// Basis index of the cancellative Haar function on `q`.
    pub fn index_of(&self, q: &DyadicCube) -> Result<usize> {
        let side = q.side_cells();
        let rel = q.corner[0] - self.lo;
        if q.level < 0 || q.level >= self.mesh as i32 || rel < 0 || rel % side != 0 || rel >= self.len() as i64 {
            return Err(Error::outside(q));
        }
        Ok((2usize << q.level) + (rel / side) as usize)
    }

    /// `(⟨f,h_β⟩)_β` for `f` supported in the window.
    pub fn coefficients(&self, f: &MeshFunction) -> Result<Vec<f64>> {
        Ok(haar_line(&self.cell_integrals(f)?, self.mesh))
    }

    /// `∫_c f` for every window cell.
    pub fn cell_integrals(&self, f: &MeshFunction) -> Result<Vec<f64>> {
        if f.n != 1 || f.mesh != self.mesh {
            return Err(Error::MeshMismatch("function and window meshes differ".into()));
        }
        let hi = self.lo + self.len() as i64;
        for (i, &v) in f.values.iter().enumerate() {
            let c = f.cells.origin[0] + i as i64;
            if v != 0.0 && (c < self.lo || c >= hi) {
                return Err(Error::OutsideWindow { cube: format!("cell {c} of the function support") });
            }
        }
        let vol = f.cell_volume();
        Ok((0..self.len()).map(|i| f.at(&[self.lo + i as i64]) * vol).collect())
    }
}

/// A dyadic interval as `(level, first cell)`; cheap to copy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Cube {
    level: i32,
    lo: i64,
}

impl Cube {
    fn side(&self, mesh: u32) -> i64 {
        1i64 << (mesh as i32 - self.level)
    }
    fn hi(&self, mesh: u32) -> i64 {
        self.lo + self.side(mesh)
    }
    fn intersects(&self, o: &Cube, mesh: u32) -> bool {
        self.lo < o.hi(mesh) && o.lo < self.hi(mesh)
    }
    /// Gap in cells.
    fn gap(&self, o: &Cube, mesh: u32) -> i64 {
        (self.lo - o.hi(mesh)).max(o.lo - self.hi(mesh)).max(0)
    }
    fn to_cube(self, mesh: u32) -> DyadicCube {
        DyadicCube::new(self.level, vec![self.lo], mesh)
    }
    fn of(q: &DyadicCube) -> Cube {
        Cube { level: q.level, lo: q.corner[0] }
    }
}

/// Orthonormal Haar coefficients of a window vector of cell integrals (or of
/// any tensor line whose entries already carry the cell measure).
pub fn haar_line(v: &[f64], mesh: u32) -> Vec<f64> {
    let m = v.len();
    debug_assert_eq!(m, 2usize << mesh);
    let mut out = vec![0.0; m];
    let mut sums = v.to_vec();
    for s in (0..mesh as i32).rev() {
        let cnt = 2usize << s;
        let inv = (s as f64 / 2.0).exp2();
        let mut next = vec![0.0; cnt];
        for p in 0..cnt {
            let (l, r) = (sums[2 * p], sums[2 * p + 1]);
            out[cnt + p] = (l - r) * inv;
            next[p] = l + r;
        }
        sums = next;
    }
    out[0] = sums[0];
    out[1] = sums[1];
    out
}

fn prefix_line(v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len() + 1);
    let mut s = 0.0;
    out.push(0.0);
    for x in v {
        s += x;
        out.push(s);
    }
    out
}

/// Dense three-way array, last index fastest.
#[derive(Clone, Debug)]
struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f64 + Sync) -> Self {
        let data = (0..dims[0] * dims[1] * dims[2])
            .into_par_iter()
            .map(|i| f(i / (dims[1] * dims[2]), i / dims[2] % dims[1], i % dims[2]))
            .collect();
        Tensor3 { dims, data }
    }

    #[inline]
    fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    /// Replaces every line along `axis` by `op(line)`.
    fn map_axis(&self, axis: usize, out_len: usize, op: impl Fn(&[f64]) -> Vec<f64> + Sync) -> Tensor3 {
        let d = self.dims;
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        let (n0, n1) = (d[others[0]], d[others[1]]);
        let lines: Vec<Vec<f64>> = (0..n0 * n1)
            .into_par_iter()
            .map(|l| {
                let mut idx = [0usize; 3];
                idx[others[0]] = l / n1;
                idx[others[1]] = l % n1;
                let line: Vec<f64> = (0..d[axis])
                    .map(|t| {
                        idx[axis] = t;
                        self.at(idx[0], idx[1], idx[2])
                    })
                    .collect();
                op(&line)
            })
            .collect();
        let mut nd = d;
        nd[axis] = out_len;
        let mut data = vec![0.0; nd[0] * nd[1] * nd[2]];
        for (l, line) in lines.iter().enumerate() {
            let mut idx = [0usize; 3];
            idx[others[0]] = l / n1;
            idx[others[1]] = l % n1;
            for (t, v) in line.iter().enumerate() {
                idx[axis] = t;
                data[(idx[0] * nd[1] + idx[1]) * nd[2] + idx[2]] = *v;
            }
        }
        Tensor3 { dims: nd, data }
    }
}

/// Which trilinear form an engine evaluates; the output slot receives the
/// Haar function of the smallest cube.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    /// `⟨T(a,b),o⟩` with `(a,b,o) = (f,g,h)`.
    Sigma1,
    /// `⟨T^{1*}(a,b),o⟩` with `(a,b,o) = (h,g,f)`.
    Sigma2,
    /// `⟨T^{2*}(a,b),o⟩` with `(a,b,o) = (f,h,g)`.
    Sigma3,
}

impl EngineKind {
    pub const ALL: [EngineKind; 3] = [EngineKind::Sigma1, EngineKind::Sigma2, EngineKind::Sigma3];

    /// Largest levels of the `a` and `b` Haar functions for output level `u`.
    fn caps(self, u: i32) -> (i32, i32) {
        match self {
            EngineKind::Sigma1 => (u, u),
            EngineKind::Sigma2 => (u - 1, u),
            EngineKind::Sigma3 => (u - 1, u - 1),
        }
    }

    /// `(a, b, o)` picked out of `(f, g, h)`.
    fn roles<'a, T>(self, f: &'a T, g: &'a T, h: &'a T) -> (&'a T, &'a T, &'a T) {
        match self {
            EngineKind::Sigma1 => (f, g, h),
            EngineKind::Sigma2 => (h, g, f),
            EngineKind::Sigma3 => (f, h, g),
        }
    }

    pub fn flavor(self) -> crate::models::Flavor {
        match self {
            EngineKind::Sigma1 => crate::models::Flavor::Direct,
            EngineKind::Sigma2 => crate::models::Flavor::Adjoint1,
            EngineKind::Sigma3 => crate::models::Flavor::Adjoint2,
        }
    }

    pub fn roles_kernel(self) -> crate::kernel::Roles {
        match self {
            EngineKind::Sigma1 => crate::kernel::Roles::Direct,
            EngineKind::Sigma2 => crate::kernel::Roles::Adjoint1,
            EngineKind::Sigma3 => crate::kernel::Roles::Adjoint2,
        }
    }
}

/// Kernel data on the window: per-cell-triple integrals and their Haar
/// transform.
pub struct Context {
    pub kernel: BilinearKernel,
    pub trunc: TruncationSpec,
    pub quad: QuadratureSpec,
    pub mesh: u32,
    pub table: PairingTable,
    /// `⟨T(h_β,h_γ),h_α⟩` at `[α][β][γ]`.
    hat: Tensor3,
    engines: [OnceLock<EngineTensors>; 3],
    para: [OnceLock<Vec<f64>>; 3],
    constants: OnceLock<Constants>,
}

impl Context {
    pub fn new(kernel: &BilinearKernel, trunc: &TruncationSpec, quad: &QuadratureSpec, mesh: u32) -> Result<Self> {
        if mesh > MAX_MESH {
            return Err(Error::Unsupported(format!("window tensors are limited to L ≤ {MAX_MESH}")));
        }
        if mesh == 0 {
            return Err(Error::Domain("mesh level must be positive".into()));
        }
        let m = 2i64 << mesh;
        let table = PairingTable::build(kernel, trunc, quad, mesh, (1 - m, m - 1), (1 - m, m - 1))?;
        let cells = Self::cell_tensor(&table, mesh, EngineKind::Sigma1);
        let hat = haar3(&cells, mesh);
        Ok(Context {
            kernel: kernel.clone(),
            trunc: *trunc,
            quad: *quad,
            mesh,
            table,
            hat,
            engines: Default::default(),
            para: Default::default(),
            constants: OnceLock::new(),
        })
    }

    pub fn window_len(&self) -> usize {
        2usize << self.mesh
    }

    /// Cell-space tensor `E[o][a][b]` of an engine.
    fn cell_tensor(table: &PairingTable, mesh: u32, kind: EngineKind) -> Tensor3 {
        let m = 2usize << mesh;
        Tensor3::from_fn([m, m, m], |o, a, b| {
            let (o, a, b) = (o as i64, a as i64, b as i64);
            match kind {
                EngineKind::Sigma1 => table.get(a - o, b - o),
                EngineKind::Sigma2 => table.get(o - a, b - a),
                EngineKind::Sigma3 => table.get(a - b, o - b),
            }
        })
    }

    /// `⟨T(h_β,h_γ),h_α⟩` for window basis indices.
    pub fn haar_entry(&self, alpha: usize, beta: usize, gamma: usize) -> f64 {
        self.hat.at(alpha, beta, gamma)
    }
}

fn haar3(t: &Tensor3, mesh: u32) -> Tensor3 {
    let m = t.dims[0];
    t.map_axis(0, m, |l| haar_line(l, mesh))
        .map_axis(1, m, |l| haar_line(l, mesh))
        .map_axis(2, m, |l| haar_line(l, mesh))
}

pub const SPLIT_TOL: f64 = 1e-9;

/// One row of a decomposition: the contribution of a sum at one level of its
/// smallest cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub part: String,
    pub level: i32,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
    /// The term with all three Haar functions on top cubes.
    pub remainder: f64,
    pub total: f64,
    pub reference: f64,
    pub rel_error: f64,
    pub rows: Vec<LevelRow>,
}

/// Which sum a Haar triple of levels `(s, t, u)` (for `f`, `g`, `h`) belongs to;
/// 0 is the remainder.
fn sum_of(s: i32, t: i32, u: i32) -> usize {
    if s < 0 && t < 0 && u < 0 {
        0
    } else if u >= s && u >= t {
        1
    } else if s > u && s >= t {
        2
    } else {
        3
    }
}

impl Context {
    fn check_grid(&self, grid: &DyadicGrid) -> Result<Window> {
        if grid.mesh != self.mesh {
            return Err(Error::MeshMismatch(format!("grid on L = {}, context on L = {}", grid.mesh, self.mesh)));
        }
        Window::of_grid(grid)
    }

    /// `⟨T(f,g),h⟩ = Σ¹ + Σ² + Σ³ + remainder` on a fixed grid. Σ¹ collects
    /// Haar triples where `h` has the smallest cube, Σ² those where `f` does
    /// (strictly smaller than `h`'s, not larger than `g`'s), Σ³ the rest.
    pub fn martingale_split(
        &self,
        grid: &DyadicGrid,
        f: &MeshFunction,
        g: &MeshFunction,
        h: &MeshFunction,
    ) -> Result<DecompositionReport> {
        let w = self.check_grid(grid)?;
        let (cf, cg, ch) = (w.coefficients(f)?, w.coefficients(g)?, w.coefficients(h)?);
        let m = w.len();
        let lv: Vec<i32> = (0..m).map(Window::level).collect();
        let nl = self.mesh as usize + 1;
        // per output index: [sum][level+1]
        let parts: Vec<Vec<[f64; 4]>> = (0..m)
            .into_par_iter()
            .map(|a| {
                let mut acc = vec![[0.0; 4]; nl];
                if ch[a] == 0.0 {
                    return acc;
                }
                for b in 0..m {
                    if cf[b] == 0.0 {
                        continue;
                    }
                    for c in 0..m {
                        let v = self.hat.at(a, b, c) * cf[b] * cg[c];
                        let which = sum_of(lv[b], lv[c], lv[a]);
                        let level = match which {
                            1 => lv[a],
                            2 => lv[b],
                            3 => lv[c],
                            _ => -1,
                        };
                        acc[(level + 1) as usize][which] += v * ch[a];
                    }
                }
                acc
            })
            .collect();
        let mut table = vec![[0.0; 4]; nl];
        for p in &parts {
            for (l, row) in p.iter().enumerate() {
                for k in 0..4 {
                    table[l][k] += row[k];
                }
            }
        }
        let total_of = |k: usize| table.iter().map(|r| r[k]).sum::<f64>();
        let (remainder, sigma1, sigma2, sigma3) = (total_of(0), total_of(1), total_of(2), total_of(3));
        let total = sigma1 + sigma2 + sigma3 + remainder;
        let cells = w.cells();
        let reference = self.table.pair(&f.on_box(cells.clone()), &g.on_box(cells.clone()), &h.on_box(cells))?;
        let scale = reference.abs().max(sigma1.abs() + sigma2.abs() + sigma3.abs() + remainder.abs());
        let rel_error = if scale == 0.0 { 0.0 } else { (total - reference).abs() / scale };
        let mut rows = Vec::new();
        for (k, name) in [(1, "sigma1"), (2, "sigma2"), (3, "sigma3")] {
            for l in 1..nl {
                rows.push(LevelRow { part: name.into(), level: l as i32 - 1, value: table[l][k] });
            }
        }
        rows.push(LevelRow { part: "remainder".into(), level: -1, value: remainder });
        let report = DecompositionReport { sigma1, sigma2, sigma3, remainder, total, reference, rel_error, rows };
        if rel_error > SPLIT_TOL {
            let detail: Vec<String> = report.rows.iter().map(|r| format!("{}@{}={:.3e}", r.part, r.level, r.value)).collect();
            return Err(Error::Tolerance(format!(
                "decomposition total {total} against reference {reference} (relative {rel_error:.2e}); {}",
                detail.join(", ")
            )));
        }
        Ok(report)
    }
}

/// Bucket of a Haar triple `(I, J, K)` with `K` the output cube.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bucket {
    Separated,
    Diagonal,
    /// `K ⊆ J ⊂ I`; split downstream into an error part and a paraproduct part.
    Nested,
}

/// Emitted shift families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Separated,
    Diagonal,
    Error,
}

impl Group {
    fn of(b: Bucket) -> Group {
        match b {
            Bucket::Separated => Group::Separated,
            Bucket::Diagonal => Group::Diagonal,
            Bucket::Nested => Group::Error,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripleBucket {
    pub bucket: Bucket,
    /// Minimal common ancestor, when the grid has one.
    pub witness: Option<DyadicCube>,
}

fn classify_raw(canc: Cube, non: Cube, out: Cube, mesh: u32, gamma: f64) -> Bucket {
    let h = (-(mesh as f64)).exp2();
    let lk = out.side(mesh) as f64 * h;
    let lj = non.side(mesh) as f64 * h;
    let threshold = lk.powf(gamma) * lj.powf(1.0 - gamma);
    let d = out.gap(&canc, mesh).max(out.gap(&non, mesh)) as f64 * h;
    if d > threshold {
        Bucket::Separated
    } else if !out.intersects(&canc, mesh) || out == canc || !out.intersects(&non, mesh) {
        Bucket::Diagonal
    } else {
        Bucket::Nested
    }
}

/// Smallest window cube containing all of `cubes`.
fn parent_raw(cubes: &[Cube], w: &Window) -> Option<Cube> {
    let start = cubes.iter().map(|c| c.level).min()?;
    for lvl in (0..=start).rev() {
        let shift = w.mesh as i32 - lvl;
        let p = (cubes[0].lo - w.lo) >> shift;
        if cubes.iter().all(|c| (c.lo - w.lo) >> shift == p) {
            return Some(Cube { level: lvl, lo: w.lo + (p << shift) });
        }
    }
    None
}

/// Smallest grid cube containing `i`, `j` and `k`.
pub fn minimal_parent(i: &DyadicCube, j: &DyadicCube, k: &DyadicCube, grid: &DyadicGrid) -> Result<DyadicCube> {
    for q in [i, j, k] {
        if !grid.contains_cube(q) {
            return Err(Error::misaligned(q));
        }
    }
    let start = i.level.min(j.level).min(k.level);
    for lvl in (grid.coarsest_level()..=start).rev() {
        let a = grid.ancestor(i, i.level - lvl)?;
        if grid.ancestor(j, j.level - lvl)? == a && grid.ancestor(k, k.level - lvl)? == a {
            return Ok(a);
        }
    }
    Err(Error::OutOfRange { level: start, steps: start - grid.coarsest_level() + 1, coarsest: grid.coarsest_level() })
}

/// Buckets a triple `(h̃_I, h̃_J, h_K)` where one input is non-cancellative:
/// either `ℓ(I) = 2ℓ(J)` with `h_I, h_J^0`, or `ℓ(I) = ℓ(J)` with `h_I^0, h_J`.
/// The separation threshold uses the side of the non-cancellative cube.
pub fn classify_triple(
    i: &HaarIndex,
    j: &HaarIndex,
    k: &DyadicCube,
    grid: &DyadicGrid,
    params: &GoodnessParams,
) -> Result<TripleBucket> {
    if grid.n != 1 || k.dim() != 1 {
        return Err(Error::Unsupported("triple classification is implemented in one dimension".into()));
    }
    let (canc, non) = match (i.is_cancellative(), j.is_cancellative()) {
        (true, false) if j.cube.level == i.cube.level + 1 => (&i.cube, &j.cube),
        (false, true) if j.cube.level == i.cube.level => (&j.cube, &i.cube),
        _ => {
            return Err(Error::Precondition(format!(
                "triple ({}, {}) is neither of shape (h_I, h_J^0) with ℓ(I) = 2ℓ(J) nor (h_I^0, h_J) with ℓ(I) = ℓ(J)",
                i.cube, j.cube
            )))
        }
    };
    if k.level < canc.level {
        return Err(Error::Precondition(format!("output cube {k} is larger than {canc}")));
    }
    let bucket = classify_raw(Cube::of(canc), Cube::of(non), Cube::of(k), grid.mesh, params.gamma);
    let witness = minimal_parent(&i.cube, &j.cube, k, grid).ok();
    Ok(TripleBucket { bucket, witness })
}

/// `|I|^{1/2}|J|^{1/2}|K|^{1/2}|Q|^{-2}(ℓ(K)/ℓ(Q))^{α/2}` in one dimension.
fn shape(a: Cube, b: Cube, o: Cube, q: Cube, mesh: u32, alpha: f64) -> f64 {
    let h = (-(mesh as f64)).exp2();
    let len = |c: Cube| c.side(mesh) as f64 * h;
    (len(a) * len(b) * len(o)).sqrt() / len(q).powi(2) * (len(o) / len(q)).powf(alpha / 2.0)
}

/// Engine tensors: `x1[o][a][·]` has Haar on `o`, `a` and a prefix sum over
/// the cells of `b`; `x2[o][·][b]` the same with `a` and `b` exchanged.
struct EngineTensors {
    kind: EngineKind,
    x1: Tensor3,
    x2: Tensor3,
}

/// One classified term `raw · ⟨a,h̃_A⟩⟨b,h̃_B⟩⟨c,h_O⟩` of an engine.
#[derive(Clone, Copy, Debug)]
struct Term {
    a: Cube,
    a_canc: bool,
    b: Cube,
    b_canc: bool,
    /// `None` for the top-top term.
    bucket: Option<Bucket>,
    q: Option<Cube>,
    raw: f64,
    coef: f64,
}

/// Haar data of one function on the window.
struct Data {
    hat: Vec<f64>,
    pre: Vec<f64>,
    lo: i64,
    mesh: u32,
}

impl Data {
    fn new(w: &Window, f: &MeshFunction) -> Result<Data> {
        let cells = w.cell_integrals(f)?;
        Ok(Data { hat: haar_line(&cells, w.mesh), pre: prefix_line(&cells), lo: w.lo, mesh: w.mesh })
    }
    fn integral(&self, c: Cube) -> f64 {
        let lo = (c.lo - self.lo) as usize;
        let hi = (c.hi(self.mesh) - self.lo) as usize;
        self.pre[hi] - self.pre[lo]
    }
    /// `⟨f, h_C^0⟩`.
    fn non(&self, c: Cube) -> f64 {
        let vol = c.side(self.mesh) as f64 * (-(self.mesh as f64)).exp2();
        self.integral(c) / vol.sqrt()
    }
    fn average(&self, c: Cube) -> f64 {
        let vol = c.side(self.mesh) as f64 * (-(self.mesh as f64)).exp2();
        self.integral(c) / vol
    }
    fn canc(&self, c: Cube) -> f64 {
        let side = c.side(self.mesh);
        let idx = (2usize << c.level) + ((c.lo - self.lo) / side) as usize;
        self.hat[idx]
    }
    fn slot(&self, c: Cube, canc: bool) -> f64 {
        if canc {
            self.canc(c)
        } else {
            self.non(c)
        }
    }
}

/// Divisor constants: measured kernel, weak-boundedness and BMO constants,
/// times a safety factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub kernel: f64,
    pub wbp: f64,
    pub bmo: f64,
    pub safety: f64,
}

impl Constants {
    pub fn divisor(&self, g: Group) -> f64 {
        let c = match g {
            Group::Separated | Group::Error => self.kernel,
            Group::Diagonal => self.kernel + self.wbp,
        };
        positive(self.safety * c)
    }

    pub fn para_divisor(&self) -> f64 {
        positive(self.safety * (self.kernel + self.bmo))
    }
}

/// A zero constant only ever divides zero coefficients.
fn positive(c: f64) -> f64 {
    if c > 0.0 {
        c
    } else {
        1.0
    }
}

pub const SAFETY: f64 = 2.0;

/// Which telescoping path a term comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Path {
    /// `Δ_s a ⊗ E_{s+1} b`: `h_A ⊗ h^0_B` with `ℓ(A) = 2ℓ(B)`.
    Canc,
    /// `E_t a ⊗ Δ_t b`: `h^0_A ⊗ h_B` with `ℓ(A) = ℓ(B)`.
    Non,
    /// `E_0 a ⊗ E_0 b`.
    Top,
}

impl Term {
    fn path(&self) -> Path {
        match (self.a_canc, self.b_canc) {
            (true, false) => Path::Canc,
            (false, true) => Path::Non,
            _ => Path::Top,
        }
    }
}

impl Context {
    fn engine(&self, kind: EngineKind) -> &EngineTensors {
        let slot = &self.engines[kind as usize];
        if let Some(e) = slot.get() {
            return e;
        }
        let m = self.window_len();
        let mesh = self.mesh;
        let cells = Self::cell_tensor(&self.table, mesh, kind);
        let ho = cells.map_axis(0, m, |l| haar_line(l, mesh));
        let x1 = ho.map_axis(1, m, |l| haar_line(l, mesh)).map_axis(2, m + 1, prefix_line);
        let x2 = ho.map_axis(2, m, |l| haar_line(l, mesh)).map_axis(1, m + 1, prefix_line);
        let _ = slot.set(EngineTensors { kind, x1, x2 });
        slot.get().expect("engine tensors set")
    }

    /// `⟨T_e(1,1), h_O⟩` for each output level.
    pub fn paraproduct_levels(&self, kind: EngineKind) -> Result<&[f64]> {
        let slot = &self.para[kind as usize];
        if let Some(p) = slot.get() {
            return Ok(p);
        }
        let out = crate::bmo::haar_levels(&self.kernel, &self.trunc, kind.roles_kernel(), self.mesh, &self.quad)?;
        let _ = slot.set(out);
        Ok(slot.get().expect("paraproduct levels set"))
    }

    /// Measured constants behind the divisors: the CZ constant of the
    /// kernel, the weak-boundedness constant over one cube per level, and
    /// the BMO pairing sup over the levels used for the paraproducts.
    pub fn constants(&self) -> Result<Constants> {
        if let Some(c) = self.constants.get() {
            return Ok(*c);
        }
        let kernel = self.kernel.measure_constant(CONSTANT_SAMPLES, CONSTANT_SEED).cz;
        let cubes: Vec<DyadicCube> = (0..=self.mesh as i32).map(|l| DyadicCube::new(l, vec![0], self.mesh)).collect();
        let wbp = crate::pairing::wbp_constant(&self.kernel, &self.trunc, &cubes, &self.quad)?;
        let mut bmo: f64 = 0.0;
        for kind in EngineKind::ALL {
            bmo = bmo.max(crate::bmo::bmo_estimate(self.paraproduct_levels(kind)?));
        }
        let c = Constants { kernel, wbp, bmo, safety: SAFETY };
        let _ = self.constants.set(c);
        Ok(c)
    }

    /// Every term of one engine for the output function `h_O`, `O` the cube
    /// of basis index `oi`. `keep` filters on `(A, a_canc, B, b_canc)` before
    /// the kernel is touched.
    fn terms_of(
        &self,
        kind: EngineKind,
        w: &Window,
        oi: usize,
        gamma: f64,
        keep: &(dyn Fn(Cube, bool, Cube, bool) -> bool + Sync),
    ) -> Result<Vec<Term>> {
        let e = self.engine(kind);
        debug_assert_eq!(e.kind, kind);
        let mesh = self.mesh;
        let o = w.raw(oi);
        let u = o.level;
        let pu = self.paraproduct_levels(kind)?[u as usize];
        let (ca, cb) = kind.caps(u);
        let rel = |c: Cube| (c.lo - w.lo) as usize;
        let vol = |c: Cube| c.side(mesh) as f64 * (-(mesh as f64)).exp2();
        let mut out = Vec::new();
        let mut push = |a: Cube, a_canc: bool, b: Cube, b_canc: bool, raw: f64| {
            let q = if a_canc || b_canc { parent_raw(&[a, b, o], w) } else { None };
            let mut t = Term { a, a_canc, b, b_canc, bucket: None, q, raw, coef: raw };
            if let Some(_q) = q {
                let (canc, non) = if a_canc { (a, b) } else { (b, a) };
                let bucket = classify_raw(canc, non, o, mesh, gamma);
                t.bucket = Some(bucket);
                if bucket == Bucket::Nested {
                    t.coef = raw - nested_para(a, a_canc, b, o, mesh) * pu;
                }
            }
            out.push(t);
        };
        let tops = [Cube { level: 0, lo: w.lo }, Cube { level: 0, lo: w.lo + (1i64 << mesh) }];
        for (ti, &ta) in tops.iter().enumerate() {
            for &tb in &tops {
                if keep(ta, false, tb, false) {
                    let raw = e.x1.at(oi, ti, rel(tb) + tb.side(mesh) as usize) - e.x1.at(oi, ti, rel(tb));
                    push(ta, false, tb, false, raw);
                }
            }
        }
        for s in 0..=ca {
            for ai in (2usize << s)..(4usize << s) {
                let a = w.raw(ai);
                let bside = 1i64 << (mesh as i32 - s - 1);
                for p in 0..(4i64 << s) {
                    let b = Cube { level: s + 1, lo: w.lo + p * bside };
                    if !keep(a, true, b, false) {
                        continue;
                    }
                    let lo = rel(b);
                    let raw = (e.x1.at(oi, ai, lo + bside as usize) - e.x1.at(oi, ai, lo)) / vol(b).sqrt();
                    push(a, true, b, false, raw);
                }
            }
        }
        for t in 0..=cb {
            let side = 1i64 << (mesh as i32 - t);
            for bi in (2usize << t)..(4usize << t) {
                let b = w.raw(bi);
                for p in 0..(2i64 << t) {
                    let a = Cube { level: t, lo: w.lo + p * side };
                    if !keep(a, false, b, true) {
                        continue;
                    }
                    let lo = rel(a);
                    let raw = (e.x2.at(oi, lo + side as usize, bi) - e.x2.at(oi, lo, bi)) / vol(a).sqrt();
                    push(a, false, b, true, raw);
                }
            }
        }
        Ok(out)
    }
}

/// The part of a nested term carried by the paraproduct, per unit of
/// `⟨T(1,1),h_O⟩`. On the canc path `O ⊆ B ⊂ A` and `h_A` is constant on
/// `B`; on the non path `A = B` and `h_B` is constant on the child holding `O`.
fn nested_para(a: Cube, a_canc: bool, b: Cube, o: Cube, mesh: u32) -> f64 {
    let vol = |c: Cube| c.side(mesh) as f64 * (-(mesh as f64)).exp2();
    if a_canc {
        let sign = if b.lo == a.lo { 1.0 } else { -1.0 };
        sign / (vol(a) * vol(b)).sqrt()
    } else {
        let mid = b.lo + b.side(mesh) / 2;
        let sign = if o.lo < mid { 1.0 } else { -1.0 };
        sign / vol(b)
    }
}

const CONSTANT_SAMPLES: usize = 20_000;
const CONSTANT_SEED: u64 = 0x5eed;

/// Good output indices of the window, by basis index.
fn good_mask(w: &Window, grid: &DyadicGrid, params: &GoodnessParams) -> Vec<bool> {
    (0..w.len()).map(|i| i >= 2 && is_good(&w.cube(i), grid, params)).collect()
}

/// Label for a Haar function in messages.
fn label(c: Cube, canc: bool, mesh: u32) -> String {
    let q = c.to_cube(mesh);
    if canc {
        format!("h_{q}")
    } else {
        format!("h0_{q}")
    }
}

pub const REASSEMBLY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmittedShift {
    pub engine: EngineKind,
    pub group: Group,
    /// `C·2^{-αk/2}`.
    pub weight: f64,
    pub spec: ShiftSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmittedParaproduct {
    pub engine: EngineKind,
    pub weight: f64,
    pub spec: ParaproductSpec,
}

/// Terms that are not emitted as forms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    /// Both inputs averaged over top cubes.
    pub top: f64,
    /// Triples spread over both top cubes, without a common parent.
    pub cross: f64,
    /// `-⟨T(1,1),h_O⟩⟨a⟩_T⟨b⟩_T⟨o,h_O⟩` left over from the telescoping.
    pub paraproduct: f64,
}

impl Residual {
    pub fn total(&self) -> f64 {
        self.top + self.cross + self.paraproduct
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub engine: EngineKind,
    pub group: Group,
    pub count: usize,
    /// `max |coef| / (divisor · shape)`.
    pub max_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractedRepresentation {
    pub shifts: Vec<EmittedShift>,
    pub paraproducts: Vec<EmittedParaproduct>,
    pub constants: Constants,
    pub params: GoodnessParams,
    pub residual: Residual,
    /// Good-restricted sums per engine.
    pub target: [f64; 3],
    pub reassembled: f64,
    pub rel_error: f64,
    pub ratios: Vec<RatioRow>,
}

type ShiftKey = (EngineKind, Group, u32, u32, u32);

/// What one output cube contributes to an extraction.
#[derive(Default)]
struct Harvest {
    coeffs: Vec<(ShiftKey, ShiftCoeff)>,
    residual: Residual,
    ratios: BTreeMap<(EngineKind, Group), (usize, f64)>,
}

impl Context {
    /// Splits the good-restricted sums of `⟨T(f,g),h⟩` into weighted shifts,
    /// three paraproducts and a residual, and checks that they reassemble.
    pub fn extract_representation(
        &self,
        grid: &DyadicGrid,
        params: &GoodnessParams,
        f: &MeshFunction,
        g: &MeshFunction,
        h: &MeshFunction,
    ) -> Result<ExtractedRepresentation> {
        let constants = self.constants()?;
        self.extract_with(grid, params, &constants, f, g, h)
    }

    /// As [`Context::extract_representation`] with given divisor constants.
    pub fn extract_with(
        &self,
        grid: &DyadicGrid,
        params: &GoodnessParams,
        constants: &Constants,
        f: &MeshFunction,
        g: &MeshFunction,
        h: &MeshFunction,
    ) -> Result<ExtractedRepresentation> {
        let w = self.check_grid(grid)?;
        let mesh = self.mesh;
        let data = [Data::new(&w, f)?, Data::new(&w, g)?, Data::new(&w, h)?];
        let good = good_mask(&w, grid, params);
        let alpha = self.kernel.constants.alpha;
        let mut shifts: BTreeMap<ShiftKey, Vec<ShiftCoeff>> = BTreeMap::new();
        let mut residual = Residual::default();
        let mut ratios: BTreeMap<(EngineKind, Group), (usize, f64)> = BTreeMap::new();
        let mut paraproducts = Vec::new();
        for kind in EngineKind::ALL {
            let (a, b, o) = kind.roles(&data[0], &data[1], &data[2]);
            let keep = |ca: Cube, ac: bool, cb: Cube, bc: bool| a.slot(ca, ac) * b.slot(cb, bc) != 0.0;
            let harvests: Vec<Harvest> = (2..w.len())
                .into_par_iter()
                .map(|oi| {
                    let mut hv = Harvest::default();
                    let co = o.hat[oi];
                    if !good[oi] || co == 0.0 {
                        return Ok(hv);
                    }
                    for t in self.terms_of(kind, &w, oi, params.gamma, &keep)? {
                        let dp = a.slot(t.a, t.a_canc) * b.slot(t.b, t.b_canc) * co;
                        let (Some(bucket), Some(q)) = (t.bucket, t.q) else {
                            if t.path() == Path::Top {
                                hv.residual.top += t.raw * dp;
                            } else {
                                hv.residual.cross += t.raw * dp;
                            }
                            continue;
                        };
                        if t.coef == 0.0 {
                            continue;
                        }
                        let group = Group::of(bucket);
                        let out = w.raw(oi);
                        let c = constants.divisor(group);
                        let ratio = t.coef.abs() / (c * shape(t.a, t.b, out, q, mesh, alpha));
                        if !(ratio <= 1.0 + NORM_SLACK) {
                            return Err(Error::Normalization {
                                what: format!(
                                    "{:?} {:?} triple ({}, {}, h_{}) in Q = {}",
                                    kind,
                                    group,
                                    label(t.a, t.a_canc, mesh),
                                    label(t.b, t.b_canc, mesh),
                                    out.to_cube(mesh),
                                    q.to_cube(mesh)
                                ),
                                ratio,
                            });
                        }
                        let e = hv.ratios.entry((kind, group)).or_insert((0, 0.0));
                        e.0 += 1;
                        e.1 = e.1.max(ratio);
                        let steps = |x: Cube| (x.level - q.level) as u32;
                        let k = steps(out);
                        let weight = c * (-alpha * k as f64 / 2.0).exp2();
                        let idx = |x: Cube, canc: bool| {
                            let cube = x.to_cube(mesh);
                            if canc {
                                HaarIndex::cancellative(cube)
                            } else {
                                HaarIndex::noncancellative(cube)
                            }
                        };
                        hv.coeffs.push((
                            (kind, group, steps(t.a), steps(t.b), k),
                            ShiftCoeff {
                                q: q.to_cube(mesh),
                                i: idx(t.a, t.a_canc),
                                j: idx(t.b, t.b_canc),
                                k: idx(out, true),
                                alpha: t.coef / weight,
                            },
                        ));
                    }
                    Ok(hv)
                })
                .collect::<Result<_>>()?;
            for hv in harvests {
                for (key, c) in hv.coeffs {
                    shifts.entry(key).or_default().push(c);
                }
                residual.top += hv.residual.top;
                residual.cross += hv.residual.cross;
                for (key, (n, r)) in hv.ratios {
                    let e = ratios.entry(key).or_insert((0, 0.0));
                    e.0 += n;
                    e.1 = e.1.max(r);
                }
            }

            let levels = self.paraproduct_levels(kind)?;
            let c = constants.para_divisor();
            let mut coeffs = Vec::new();
            for oi in (2..w.len()).filter(|&i| good[i]) {
                let out = w.raw(oi);
                let p = levels[out.level as usize];
                if p == 0.0 {
                    continue;
                }
                let top = Cube { level: 0, lo: w.lo + ((out.lo - w.lo) >> mesh << mesh) };
                residual.paraproduct -= p * o.hat[oi] * a.average(top) * b.average(top);
                coeffs.push(ParaCoeff { k: HaarIndex::cancellative(out.to_cube(mesh)), alpha: p / c });
            }
            if !coeffs.is_empty() {
                let spec = ParaproductSpec::new(grid.clone(), coeffs, kind.flavor())?;
                paraproducts.push(EmittedParaproduct { engine: kind, weight: c, spec });
            }
        }

        let shifts: Vec<EmittedShift> = shifts
            .into_iter()
            .map(|((engine, group, i, j, k), coeffs)| {
                let weight = constants.divisor(group) * (-alpha * k as f64 / 2.0).exp2();
                Ok(EmittedShift { engine, group, weight, spec: ShiftSpec::new(i, j, k, grid.clone(), coeffs)? })
            })
            .collect::<Result<_>>()?;
        let cells = w.cells();
        let fw = [f.on_box(cells.clone()), g.on_box(cells.clone()), h.on_box(cells)];
        let parts: Vec<f64> = shifts
            .par_iter()
            .map(|s| {
                let (a, b, o) = s.engine.roles(&fw[0], &fw[1], &fw[2]);
                Ok(s.weight * s.spec.form_value(a, b, o)?)
            })
            .chain(paraproducts.par_iter().map(|p| Ok(p.weight * p.spec.form_value(&fw[0], &fw[1], &fw[2])?)))
            .collect::<Result<_>>()?;
        let reassembled = parts.iter().sum::<f64>() + residual.total();
        let target = self.good_target(grid, &w, &good, f, g, h)?;
        let want: f64 = target.iter().sum();
        let scale = want
            .abs()
            .max(parts.iter().map(|v| v.abs()).sum::<f64>() + residual.top.abs() + residual.cross.abs() + residual.paraproduct.abs());
        let rel_error = if scale == 0.0 { 0.0 } else { (reassembled - want).abs() / scale };
        if rel_error > REASSEMBLY_TOL {
            return Err(Error::Tolerance(format!(
                "reassembled {reassembled} against good-restricted sums {want} (relative {rel_error:.2e})"
            )));
        }
        let ratios = ratios
            .into_iter()
            .map(|((engine, group), (count, max_ratio))| RatioRow { engine, group, count, max_ratio })
            .collect();
        Ok(ExtractedRepresentation {
            shifts,
            paraproducts,
            constants: *constants,
            params: *params,
            residual,
            target,
            reassembled,
            rel_error,
            ratios,
        })
    }

    /// The good-restricted sums computed in cell space from projections:
    /// `Σ_u ⟨T(E_{u+1}f, E_{u+1}g), D_u h⟩`, `Σ_s ⟨T(D_s f, E_{s+1}g), E_s h⟩`,
    /// `Σ_t ⟨T(E_t f, D_t g), E_t h⟩` with `D` over good cubes only.
    fn good_target(
        &self,
        grid: &DyadicGrid,
        w: &Window,
        good: &[bool],
        f: &MeshFunction,
        g: &MeshFunction,
        h: &MeshFunction,
    ) -> Result<[f64; 3]> {
        let cells = w.cells();
        let fw = [f.on_box(cells.clone()), g.on_box(cells.clone()), h.on_box(cells.clone())];
        let nl = self.mesh as i32;
        let proj = |x: &MeshFunction, l: i32| Ok::<_, Error>(x.project_scale(grid, l)?.on_box(cells.clone()));
        let diff = |x: &MeshFunction, l: i32| {
            let mut d = MeshFunction::zeros(self.mesh, cells.clone());
            for i in (2usize << l)..(4usize << l) {
                if good[i] {
                    d = d.add(&x.martingale_diff(&w.cube(i))?)?.on_box(cells.clone());
                }
            }
            Ok::<_, Error>(d)
        };
        let mut out = [0.0; 3];
        for u in 0..nl {
            out[0] += self.table.pair(&proj(&fw[0], u + 1)?, &proj(&fw[1], u + 1)?, &diff(&fw[2], u)?)?;
            out[1] += self.table.pair(&diff(&fw[0], u)?, &proj(&fw[1], u + 1)?, &proj(&fw[2], u)?)?;
            out[2] += self.table.pair(&proj(&fw[0], u)?, &diff(&fw[1], u)?, &proj(&fw[2], u)?)?;
        }
        Ok(out)
    }
}

/// Exhaustive coefficient sweep on one grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub constants: Constants,
    pub params: GoodnessParams,
    pub rows: Vec<BoundsRow>,
    /// Terms without a common parent or with both inputs on top cubes.
    pub residual_terms: usize,
    /// Smallest `max(d(O,A), d(O,B)) / (ℓ(O)^γ ℓ(Q)^{1-γ})` over separated terms.
    pub separation_min: f64,
    /// Diagonal terms with `ℓ(canc) > 2^r ℓ(O)`.
    pub cap_violations: usize,
    pub total_terms: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsRow {
    pub engine: EngineKind,
    pub bucket: Bucket,
    pub count: usize,
    /// `max |coef| / shape`.
    pub measured: f64,
    pub divisor: f64,
    /// `measured / divisor`; the gate needs at most 1.
    pub max_ratio: f64,
    pub passed: usize,
}

#[derive(Clone, Copy, Default)]
struct Tally {
    count: usize,
    measured: f64,
    passed: usize,
}

impl Context {
    /// Every coefficient the extraction could emit for good outputs on `grid`,
    /// whatever the data, checked against its divisor.
    pub fn coefficient_bounds(&self, grid: &DyadicGrid, params: &GoodnessParams, constants: &Constants) -> Result<BoundsReport> {
        let w = self.check_grid(grid)?;
        let mesh = self.mesh;
        let good = good_mask(&w, grid, params);
        let alpha = self.kernel.constants.alpha;
        let h = (-(mesh as f64)).exp2();
        let len = |c: Cube| c.side(mesh) as f64 * h;
        let all = |_: Cube, _: bool, _: Cube, _: bool| true;
        let mut rows = Vec::new();
        let (mut residual_terms, mut cap_violations, mut total_terms) = (0, 0, 0);
        let mut separation_min = f64::INFINITY;
        for kind in EngineKind::ALL {
            let per: Vec<([Tally; 3], usize, usize, f64, usize)> = (2..w.len())
                .into_par_iter()
                .filter(|&oi| good[oi])
                .map(|oi| {
                    let out = w.raw(oi);
                    let mut tally = [Tally::default(); 3];
                    let (mut resid, mut caps, mut total) = (0, 0, 0);
                    let mut sep = f64::INFINITY;
                    for t in self.terms_of(kind, &w, oi, params.gamma, &all)? {
                        total += 1;
                        let (Some(bucket), Some(q)) = (t.bucket, t.q) else {
                            resid += 1;
                            continue;
                        };
                        let canc = if t.a_canc { t.a } else { t.b };
                        match bucket {
                            Bucket::Separated => {
                                let d = out.gap(&t.a, mesh).max(out.gap(&t.b, mesh)) as f64 * h;
                                sep = sep.min(d / (len(out).powf(params.gamma) * len(q).powf(1.0 - params.gamma)));
                            }
                            Bucket::Diagonal if canc.level + (params.r as i32) < out.level => caps += 1,
                            _ => {}
                        }
                        let measured = t.coef.abs() / shape(t.a, t.b, out, q, mesh, alpha);
                        let slot = &mut tally[bucket as usize];
                        slot.count += 1;
                        slot.measured = slot.measured.max(measured);
                        if measured <= constants.divisor(Group::of(bucket)) * (1.0 + NORM_SLACK) {
                            slot.passed += 1;
                        }
                    }
                    Ok((tally, resid, caps, sep, total))
                })
                .collect::<Result<_>>()?;
            let mut tally = [Tally::default(); 3];
            for (t, resid, caps, sep, total) in per {
                for b in 0..3 {
                    tally[b].count += t[b].count;
                    tally[b].passed += t[b].passed;
                    tally[b].measured = tally[b].measured.max(t[b].measured);
                }
                residual_terms += resid;
                cap_violations += caps;
                total_terms += total;
                separation_min = separation_min.min(sep);
            }
            for (bucket, t) in [Bucket::Separated, Bucket::Diagonal, Bucket::Nested].into_iter().zip(tally) {
                let divisor = constants.divisor(Group::of(bucket));
                rows.push(BoundsRow {
                    engine: kind,
                    bucket,
                    count: t.count,
                    measured: t.measured,
                    divisor,
                    max_ratio: t.measured / divisor,
                    passed: t.passed,
                });
            }
        }
        Ok(BoundsReport {
            constants: *constants,
            params: *params,
            rows,
            residual_terms,
            separation_min,
            cap_violations,
            total_terms,
        })
    }

    /// Largest gap, relative to the data, between the paraproduct parts of
    /// the nested terms of each good output and the telescoped form
    /// `(⟨a⟩_O⟨b⟩_O − ⟨a⟩_T⟨b⟩_T)⟨o,h_O⟩`, per unit of `⟨T(1,1),h_O⟩`.
    pub fn key_cancellation(
        &self,
        grid: &DyadicGrid,
        params: &GoodnessParams,
        f: &MeshFunction,
        g: &MeshFunction,
        h: &MeshFunction,
    ) -> Result<f64> {
        let w = self.check_grid(grid)?;
        let mesh = self.mesh;
        let data = [Data::new(&w, f)?, Data::new(&w, g)?, Data::new(&w, h)?];
        let good = good_mask(&w, grid, params);
        let mut worst: f64 = 0.0;
        for kind in EngineKind::ALL {
            let (a, b, _) = kind.roles(&data[0], &data[1], &data[2]);
            for oi in (2..w.len()).filter(|&i| good[i]) {
                let out = w.raw(oi);
                let (ca, cb) = kind.caps(out.level);
                let mut lhs = 0.0;
                let mut scale = 0.0;
                // ancestors of O strictly above it, level by level
                let anc = |l: i32| {
                    let shift = mesh as i32 - l;
                    Cube { level: l, lo: w.lo + ((out.lo - w.lo) >> shift << shift) }
                };
                for s in 0..=ca {
                    let (ac, bc) = (anc(s), anc(s + 1));
                    if classify_raw(ac, bc, out, mesh, params.gamma) == Bucket::Nested {
                        let v = nested_para(ac, true, bc, out, mesh) * a.canc(ac) * b.non(bc);
                        lhs += v;
                        scale += v.abs();
                    }
                }
                for t in 0..=cb {
                    let bc = anc(t);
                    if classify_raw(bc, bc, out, mesh, params.gamma) == Bucket::Nested {
                        let v = nested_para(bc, false, bc, out, mesh) * a.non(bc) * b.canc(bc);
                        lhs += v;
                        scale += v.abs();
                    }
                }
                let top = anc(0);
                let rhs = a.average(out) * b.average(out) - a.average(top) * b.average(top);
                let gap = (lhs - rhs).abs() / scale.max(rhs.abs()).max(f64::MIN_POSITIVE);
                worst = worst.max(if lhs == rhs { 0.0 } else { gap });
            }
        }
        Ok(worst)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelAverage {
    pub level: i32,
    /// Fraction of good cubes at this level.
    pub pi: f64,
    pub estimator: f64,
    pub full: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoodnessAverageReport {
    pub trials: usize,
    pub seed: u64,
    pub params: GoodnessParams,
    pub levels: Vec<LevelAverage>,
    /// Levels with no good cubes; left out of both estimates.
    pub excluded: Vec<i32>,
    /// Mean of `Σ_u π_u^{-1} Σ_{good O} X_O`.
    pub estimator: f64,
    pub estimator_se: f64,
    /// Mean of `Σ_u Σ_O X_O` over the same levels.
    pub full: f64,
    pub full_se: f64,
    /// `|estimator − full| / sqrt(se_e² + se_f²)`.
    pub z: f64,
    pub agree: bool,
    /// Largest per-trial gap; zero when every cube is good.
    pub max_trial_gap: f64,
}

pub const MIN_AVERAGE_TRIALS: usize = 30;

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

impl Context {
    /// Per basis index, the part of `Σ¹ + Σ² + Σ³` whose smallest cube
    /// carries that index.
    fn owned_parts(&self, cf: &[f64], cg: &[f64], ch: &[f64]) -> Vec<f64> {
        let m = cf.len();
        let lv: Vec<i32> = (0..m).map(Window::level).collect();
        let rows: Vec<Vec<f64>> = (0..m)
            .into_par_iter()
            .map(|a| {
                let mut own = vec![0.0; m];
                if ch[a] == 0.0 {
                    return own;
                }
                for b in 0..m {
                    if cf[b] == 0.0 {
                        continue;
                    }
                    for c in 0..m {
                        let v = self.hat.at(a, b, c) * cf[b] * cg[c] * ch[a];
                        match sum_of(lv[b], lv[c], lv[a]) {
                            1 => own[a] += v,
                            2 => own[b] += v,
                            3 => own[c] += v,
                            _ => {}
                        }
                    }
                }
                own
            })
            .collect();
        let mut own = vec![0.0; m];
        for r in rows {
            for (o, v) in own.iter_mut().zip(r) {
                *o += v;
            }
        }
        own
    }

    /// Monte Carlo check that reweighting good cubes by `1/π_u` recovers the
    /// full sums on average over random grids. `f`, `g`, `h` live on `[0,1)`.
    pub fn goodness_average(
        &self,
        params: &GoodnessParams,
        f: &MeshFunction,
        g: &MeshFunction,
        h: &MeshFunction,
        trials: usize,
        seed: u64,
    ) -> Result<GoodnessAverageReport> {
        if trials < MIN_AVERAGE_TRIALS {
            return Err(Error::Precondition(format!("need at least {MIN_AVERAGE_TRIALS} trials, got {trials}")));
        }
        let mesh = self.mesh;
        let nl = mesh as usize;
        // goodness inside a top cube does not depend on the grid
        let standard = DyadicGrid::standard(1, mesh, 0);
        let w0 = Window::of_grid(&standard)?;
        let pattern = good_mask(&w0, &standard, params);
        let pi: Vec<f64> = (0..nl)
            .map(|u| {
                let range = (2usize << u)..(4usize << u);
                let n = range.len() as f64;
                range.filter(|&i| pattern[i]).count() as f64 / n
            })
            .collect();
        let used: Vec<usize> = (0..nl).filter(|&u| pi[u] > 0.0).collect();
        let samples: Vec<(Vec<f64>, Vec<f64>)> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = crate::rng::trial(seed, t as u64);
                let grid = crate::dyadic::sample_grid_with(&mut rng, 1, mesh, 0);
                let w = Window::of_grid(&grid)?;
                let own = self.owned_parts(&w.coefficients(f)?, &w.coefficients(g)?, &w.coefficients(h)?);
                let good = good_mask(&w, &grid, params);
                let mut est = vec![0.0; nl];
                let mut full = vec![0.0; nl];
                for (i, v) in own.iter().enumerate().skip(2) {
                    let u = Window::level(i) as usize;
                    full[u] += v;
                    if good[i] {
                        est[u] += v / pi[u];
                    }
                }
                Ok((est, full))
            })
            .collect::<Result<_>>()?;
        let total = |pick: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<f64> {
            samples.iter().map(|s| used.iter().map(|&u| pick(s)[u]).sum()).collect()
        };
        let est = total(&|s| &s.0);
        let full = total(&|s| &s.1);
        let (estimator, estimator_se) = mean_se(&est);
        let (full_mean, full_se) = mean_se(&full);
        let se = (estimator_se.powi(2) + full_se.powi(2)).sqrt();
        let gap = (estimator - full_mean).abs();
        let scale = estimator.abs().max(full_mean.abs());
        let z = if se > 0.0 { gap / se } else { 0.0 };
        let agree = if se > 0.0 { gap <= 3.0 * se } else { gap <= 1e-12 * scale.max(1.0) };
        let levels = used
            .iter()
            .map(|&u| LevelAverage {
                level: u as i32,
                pi: pi[u],
                estimator: samples.iter().map(|s| s.0[u]).sum::<f64>() / trials as f64,
                full: samples.iter().map(|s| s.1[u]).sum::<f64>() / trials as f64,
            })
            .collect();
        let max_trial_gap = est.iter().zip(&full).map(|(e, f)| (e - f).abs()).fold(0.0, f64::max);
        Ok(GoodnessAverageReport {
            trials,
            seed,
            params: *params,
            levels,
            excluded: (0..nl).filter(|&u| pi[u] == 0.0).map(|u| u as i32).collect(),
            estimator,
            estimator_se,
            full: full_mean,
            full_se,
            z,
            agree,
            max_trial_gap,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eps2Row {
    pub eps2: f64,
    pub band: f64,
    pub single: f64,
    pub gap: f64,
    /// `ε₂` beyond four times the joint diameter, where the two must agree.
    pub beyond: bool,
    /// `⟨T_{ε₂}(1,1), h_K⟩`.
    pub tail: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eps2Report {
    pub eps1: f64,
    pub diameter: f64,
    pub tail_cube: DyadicCube,
    pub rows: Vec<Eps2Row>,
    /// Every row beyond the cutoff agrees to [`EPS2_TOL`].
    pub exact: bool,
    /// The gaps and tails never grow along the ladder, up to [`EPS2_TOL`].
    pub monotone: bool,
}

pub const EPS2_TOL: f64 = 1e-9;

/// Band-truncated pairings `⟨T_{ε₁,ε₂}(f,g),h⟩` along a ladder of `ε₂`
/// against `⟨T_{ε₁}(f,g),h⟩`, and the tail `⟨T_{ε₂}(1,1),h_K⟩` on a fixed
/// cube `K` at the origin.
pub fn eps2_limit_check(
    kernel: &BilinearKernel,
    eps1: f64,
    f: &MeshFunction,
    g: &MeshFunction,
    h: &MeshFunction,
    ladder: &[f64],
    quad: &QuadratureSpec,
) -> Result<Eps2Report> {
    TruncationSpec::smooth(eps1).validate()?;
    if let Some(bad) = ladder.iter().find(|&&e| !(e > eps1) || !e.is_finite()) {
        return Err(Error::Domain(format!("ε₂ = {bad} must exceed ε₁ = {eps1}")));
    }
    let mesh = f.mesh;
    let hull = f.cells.union(&g.cells).union(&h.cells);
    let diameter = hull.shape[0] as f64 * f.cell_size();
    let single = crate::pairing::trilinear_pairing(kernel, &TruncationSpec::smooth(eps1), f, g, h, quad)?;
    let tail_cube = DyadicCube::new(1.min(mesh as i32 - 1), vec![0], mesh);
    let half = tail_cube.side_cells() / 2;
    let phi = MeshFunction::from_cells(mesh, CellBox::of_cube(&tail_cube), |c| if c[0] < half { 1.0 } else { -1.0 });
    let rows: Vec<Eps2Row> = ladder
        .par_iter()
        .map(|&eps2| {
            let band = crate::pairing::trilinear_pairing(kernel, &TruncationSpec::band(eps1, eps2), f, g, h, quad)?;
            let tail = crate::bmo::bmo_pairing(
                kernel,
                &TruncationSpec::smooth(eps2),
                crate::kernel::Roles::Direct,
                &phi,
                &tail_cube,
                3.0,
                quad,
            )?
            .value
                / tail_cube.volume().sqrt();
            Ok(Eps2Row { eps2, band, single, gap: (band - single).abs(), beyond: eps2 >= 4.0 * diameter, tail })
        })
        .collect::<Result<_>>()?;
    let scale = single.abs().max(1.0);
    let exact = rows.iter().filter(|r| r.beyond).all(|r| r.gap <= EPS2_TOL * scale);
    let mut sorted: Vec<&Eps2Row> = rows.iter().collect();
    sorted.sort_by(|a, b| a.eps2.total_cmp(&b.eps2));
    let monotone = sorted
        .windows(2)
        .all(|p| p[1].gap <= p[0].gap + EPS2_TOL * scale && p[1].tail.abs() <= p[0].tail.abs() + EPS2_TOL);
    Ok(Eps2Report { eps1, diameter, tail_cube, rows, exact, monotone })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::sample_grid;
    use crate::rng;
    use rand::Rng;

    const L: u32 = 5;

    fn random_fn(seed: u64) -> MeshFunction {
        let mut r = rng::seeded(seed);
        let n = 1i64 << L;
        let values = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        MeshFunction::from_values(L, CellBox::new(vec![0], vec![n]), values).unwrap()
    }

    fn ctx(name: &str) -> Context {
        let k = BilinearKernel::builtin(name).unwrap();
        Context::new(&k, &TruncationSpec::smooth(0.125), &QuadratureSpec::default(), L).unwrap()
    }

    #[test]
    fn haar_line_is_orthonormal() {
        let m = 2usize << L;
        let mut r = rng::seeded(3);
        let v: Vec<f64> = (0..m).map(|_| r.gen_range(-1.0..1.0)).collect();
        let c = haar_line(&v, L);
        // Parseval against cell values with cell measure 2^{-L}
        let h = (-(L as f64)).exp2();
        let lhs: f64 = v.iter().map(|x| x * x / h).sum();
        let rhs: f64 = c.iter().map(|x| x * x).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs);
        let w = Window { mesh: L, lo: -5 };
        for idx in [2usize, 3, 9, m - 1] {
            let q = w.cube(idx);
            assert_eq!(w.index_of(&q).unwrap(), idx);
            let hm = crate::mesh::HaarIndex::cancellative(q).to_mesh();
            let cells = w.cell_integrals(&hm).unwrap();
            let e = haar_line(&cells, L);
            for (j, x) in e.iter().enumerate() {
                assert!((x - if j == idx { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn split_matches_direct_pairing() {
        let c = ctx("beurling-im");
        for seed in 0..3 {
            let grid = sample_grid(seed, 1, L, 0);
            let rep = c.martingale_split(&grid, &random_fn(seed + 10), &random_fn(seed + 20), &random_fn(seed + 30)).unwrap();
            assert!(rep.rel_error < 1e-11, "{rep:?}");
            assert!(rep.sigma1 != 0.0 && rep.sigma2 != 0.0 && rep.sigma3 != 0.0);
        }
    }

    fn params(r: u32) -> GoodnessParams {
        GoodnessParams::from_alpha(1.0, 1, r).unwrap()
    }

    #[test]
    fn zero_kernel_emits_nothing() {
        let c = ctx("zero");
        let grid = sample_grid(4, 1, L, 0);
        let rep = c.extract_representation(&grid, &params(2), &random_fn(1), &random_fn(2), &random_fn(3)).unwrap();
        assert!(rep.shifts.is_empty() && rep.paraproducts.is_empty());
        assert_eq!(rep.reassembled, 0.0);
        let split = c.martingale_split(&grid, &random_fn(1), &random_fn(2), &random_fn(3)).unwrap();
        assert_eq!((split.sigma1, split.sigma2, split.sigma3, split.remainder), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn constant_f_leaves_sigma2_empty() {
        let c = ctx("beurling-re");
        let grid = sample_grid(7, 1, L, 0);
        let w = Window::of_grid(&grid).unwrap();
        let f = MeshFunction::from_cells(L, w.cells(), |_| 1.0);
        let rep = c.martingale_split(&grid, &f, &random_fn(2), &random_fn(3)).unwrap();
        assert_eq!(rep.sigma2, 0.0);
        assert!(rep.sigma1 != 0.0 && rep.sigma3 != 0.0);
    }

    #[test]
    fn classification_examples() {
        let grid = DyadicGrid::standard(1, 6, 0);
        let p = GoodnessParams { r: 4, gamma: 0.25, alpha: 1.0 };
        let cube = |l: i32, k: i64| DyadicCube::new(l, vec![k << (6 - l)], 6);
        let canc = |l, k| HaarIndex::cancellative(cube(l, k));
        let non = |l, k| HaarIndex::noncancellative(cube(l, k));
        // K far from I ∪ J
        let b = classify_triple(&canc(2, 0), &non(3, 0), &cube(4, 15), &grid, &p).unwrap();
        assert_eq!(b.bucket, Bucket::Separated);
        assert_eq!(b.witness, Some(cube(0, 0)));
        // K = I, J a child of K
        let b = classify_triple(&canc(3, 2), &non(4, 5), &cube(3, 2), &grid, &p).unwrap();
        assert_eq!(b.bucket, Bucket::Diagonal);
        // K strictly inside J ⊂ I
        let b = classify_triple(&canc(2, 1), &non(3, 2), &cube(5, 8), &grid, &p).unwrap();
        assert_eq!(b.bucket, Bucket::Nested);
        assert_eq!(b.witness, Some(cube(2, 1)));
        // same-level shape: K inside I = J
        let b = classify_triple(&non(2, 1), &canc(2, 1), &cube(4, 5), &grid, &p).unwrap();
        assert_eq!(b.bucket, Bucket::Nested);
        assert!(classify_triple(&canc(2, 0), &non(2, 0), &cube(4, 1), &grid, &p).is_err());
        assert!(classify_triple(&canc(3, 0), &non(4, 0), &cube(2, 0), &grid, &p).is_err());
    }

    #[test]
    fn minimal_parent_examples() {
        let grid = DyadicGrid::standard(1, 6, 2);
        let q = DyadicCube::new(3, vec![16], 6);
        assert_eq!(minimal_parent(&q, &q, &q, &grid).unwrap(), q);
        let i = DyadicCube::new(2, vec![16], 6);
        let j = DyadicCube::new(3, vec![24], 6);
        let k = DyadicCube::new(5, vec![18], 6);
        assert_eq!(minimal_parent(&i, &j, &k, &grid).unwrap(), i);
        let far = DyadicCube::new(2, vec![64], 6);
        assert_eq!(minimal_parent(&far, &j, &k, &grid).unwrap().level, -1);
        let grid0 = DyadicGrid::standard(1, 6, 0);
        assert!(minimal_parent(&far, &j, &k, &grid0).is_err());
    }

    #[test]
    fn public_and_internal_classification_agree() {
        let grid = sample_grid(5, 1, L, 0);
        let w = Window::of_grid(&grid).unwrap();
        let p = params(2);
        let c = ctx("beurling-re");
        let all = |_: Cube, _: bool, _: Cube, _: bool| true;
        let mut counts = BTreeMap::new();
        let mut total = 0;
        for oi in [2usize, 5, 13, 40, 63] {
            for t in c.terms_of(EngineKind::Sigma1, &w, oi, p.gamma, &all).unwrap() {
                total += 1;
                let Some(bucket) = t.bucket else {
                    *counts.entry(None).or_insert(0) += 1;
                    continue;
                };
                let idx = |x: Cube, canc: bool| {
                    if canc {
                        HaarIndex::cancellative(x.to_cube(L))
                    } else {
                        HaarIndex::noncancellative(x.to_cube(L))
                    }
                };
                let tb = classify_triple(&idx(t.a, t.a_canc), &idx(t.b, t.b_canc), &w.cube(oi), &grid, &p).unwrap();
                assert_eq!(tb.bucket, bucket);
                assert_eq!(tb.witness.unwrap(), t.q.unwrap().to_cube(L));
                *counts.entry(Some(bucket)).or_insert(0) += 1;
            }
        }
        assert_eq!(counts.values().sum::<usize>(), total);
        assert!(counts.len() == 4, "{counts:?}");
    }

    #[test]
    fn extraction_reassembles() {
        let c = ctx("beurling-re");
        for seed in 0..2 {
            let grid = sample_grid(seed, 1, L, 0);
            let (f, g, h) = (random_fn(seed + 1), random_fn(seed + 2), random_fn(seed + 3));
            let rep = c.extract_representation(&grid, &params(4), &f, &g, &h).unwrap();
            assert!(rep.rel_error < REASSEMBLY_TOL);
            assert!(!rep.shifts.is_empty());
            assert!(rep.ratios.iter().all(|r| r.max_ratio <= 1.0));
        }
    }

    #[test]
    fn all_good_target_is_the_split() {
        let c = ctx("beurling-im");
        let grid = sample_grid(9, 1, L, 0);
        let (f, g, h) = (random_fn(1), random_fn(2), random_fn(3));
        // without goodness the near-boundary triples break the gate, so loosen it
        let loose = Constants { kernel: 1e6, wbp: 0.0, bmo: 0.0, safety: 1.0 };
        let rep = c.extract_with(&grid, &params(L + 1), &loose, &f, &g, &h).unwrap();
        let split = c.martingale_split(&grid, &f, &g, &h).unwrap();
        for (t, s) in rep.target.iter().zip([split.sigma1, split.sigma2, split.sigma3]) {
            assert!((t - s).abs() < 1e-11 * (1.0 + s.abs()), "{t} vs {s}");
        }
    }

    #[test]
    fn key_cancellation_is_exact() {
        let c = ctx("beurling-re");
        let grid = sample_grid(2, 1, L, 0);
        let gap = c.key_cancellation(&grid, &params(L + 1), &random_fn(1), &random_fn(2), &random_fn(3)).unwrap();
        assert!(gap < 1e-12, "{gap}");
        // one step: ⟨Δ_{J⁽¹⁾}f⟩_J⟨g⟩_J + ⟨f⟩_{J⁽¹⁾}⟨Δ_{J⁽¹⁾}g⟩_J = ⟨f⟩_J⟨g⟩_J − ⟨f⟩_{J⁽¹⁾}⟨g⟩_{J⁽¹⁾}
        let (f, g) = (random_fn(4), random_fn(5));
        let parent = DyadicCube::new(2, vec![8], L);
        let j = DyadicCube::new(3, vec![12], L);
        let avg = |x: &MeshFunction, q: &DyadicCube| x.average(q).unwrap();
        let df = f.martingale_diff(&parent).unwrap();
        let dg = g.martingale_diff(&parent).unwrap();
        let lhs = avg(&df, &j) * avg(&g, &j) + avg(&f, &parent) * avg(&dg, &j);
        let rhs = avg(&f, &j) * avg(&g, &j) - avg(&f, &parent) * avg(&g, &parent);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn coefficients_pass_their_divisors() {
        let c = ctx("beurling-re");
        let grid = sample_grid(3, 1, L, 0);
        let k = c.constants().unwrap();
        let rep = c.coefficient_bounds(&grid, &params(4), &k).unwrap();
        for row in &rep.rows {
            assert_eq!(row.passed, row.count, "{row:?}");
        }
        for b in [Bucket::Separated, Bucket::Diagonal, Bucket::Nested] {
            assert!(rep.rows.iter().filter(|r| r.bucket == b).map(|r| r.count).sum::<usize>() > 0);
        }
        assert!(rep.separation_min > 0.0);
        assert_eq!(rep.cap_violations, 0);
    }

    #[test]
    fn gate_failure_names_the_triple() {
        let c = ctx("beurling-re");
        let grid = sample_grid(3, 1, L, 0);
        let tight = Constants { kernel: 1e-6, wbp: 0.0, bmo: 0.0, safety: 1.0 };
        match c.extract_with(&grid, &params(2), &tight, &random_fn(1), &random_fn(2), &random_fn(3)) {
            Err(Error::Normalization { what, ratio }) => {
                assert!(ratio > 1.0);
                assert!(what.contains("in Q ="), "{what}");
            }
            other => panic!("expected a gate failure, got {other:?}"),
        }
    }

    #[test]
    fn goodness_average_all_good_is_exact() {
        let c = ctx("beurling-re");
        let (f, g, h) = (random_fn(1), random_fn(2), random_fn(3));
        let rep = c.goodness_average(&params(L + 1), &f, &g, &h, 30, 11).unwrap();
        assert_eq!(rep.max_trial_gap, 0.0);
        assert!(rep.agree && rep.excluded.is_empty());
        assert!(c.goodness_average(&params(2), &f, &g, &h, 29, 11).is_err());
        let z = ctx("zero").goodness_average(&params(2), &f, &g, &h, 30, 1).unwrap();
        assert_eq!((z.estimator, z.full), (0.0, 0.0));
    }

    #[test]
    fn goodness_average_partial_regime() {
        let c = ctx("beurling-re");
        let p = GoodnessParams { r: 3, gamma: 0.5, alpha: 1.0 };
        let rep = c.goodness_average(&p, &random_fn(1), &random_fn(2), &random_fn(3), 100, 5).unwrap();
        assert!(rep.levels.iter().any(|l| l.pi > 0.0 && l.pi < 1.0), "{rep:?}");
        assert!(rep.agree, "{rep:?}");
    }

    #[test]
    fn eps2_ladder() {
        let k = BilinearKernel::builtin("beurling-re").unwrap();
        let f = MeshFunction::from_cells(4, CellBox::new(vec![0], vec![4]), |c| 1.0 + c[0] as f64);
        let g = MeshFunction::from_cells(4, CellBox::new(vec![0], vec![4]), |c| if c[0] % 2 == 0 { 1.0 } else { -0.5 });
        let h = MeshFunction::from_cells(4, CellBox::new(vec![0], vec![4]), |c| c[0] as f64 - 1.5);
        let q = QuadratureSpec::default();
        assert!(eps2_limit_check(&k, 0.1, &f, &g, &h, &[0.05], &q).is_err());
        assert!(eps2_limit_check(&k, 0.1, &f, &g, &h, &[0.1], &q).is_err());
        let rep = eps2_limit_check(&k, 0.1, &f, &g, &h, &[0.2, 0.5, 1.0, 2.0], &q).unwrap();
        assert_eq!(rep.diameter, 0.25);
        assert!(rep.exact, "{rep:?}");
        assert!(rep.rows[0].gap > 1e-6);
        assert!(rep.rows.iter().filter(|r| r.beyond).count() == 2);
    }
}
