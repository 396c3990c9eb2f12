//! Sparse collections and the constructive side of sparse domination: the
//! stopping-time family for `S^ρ` forms, the Calderón–Zygmund split, the
//! universal layered family and the one-third covering grids.
//!
//! Everything here is one-dimensional and works in mesh-cell units, so the
//! measure checks are exact integer comparisons.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dyadic::{DyadicCube, DyadicGrid};
use crate::error::{Error, Result};
use crate::kernel::{BilinearKernel, Roles, TruncationSpec};
use crate::mesh::{CellBox, MeshFunction};
use crate::models::ShiftSpec;
use crate::quadrature::QuadratureSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseCollection {
    pub eta: f64,
    pub cubes: Vec<DyadicCube>,
    /// `min |E_Q|/|Q|` for the canonical major sets; 1 for an empty family.
    pub major_ratio_min: f64,
}

impl SparseCollection {
    /// Family with its canonical major-set ratio filled in.
    pub fn new(eta: f64, cubes: Vec<DyadicCube>) -> Result<Self> {
        check_eta(eta)?;
        let mut s = SparseCollection { eta, cubes, major_ratio_min: 1.0 };
        s.major_ratio_min = verify_sparse(&s)?.ratio_min;
        Ok(s)
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if eta > 0.0 && eta < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("η = {eta} must lie in (0,1)")))
    }
}

fn check_1d(fs: &[&MeshFunction]) -> Result<u32> {
    let mesh = fs[0].mesh;
    for f in fs {
        if f.n != 1 {
            return Err(Error::Unsupported("sparse forms are implemented in one dimension".into()));
        }
        if f.mesh != mesh {
            return Err(Error::MeshMismatch("functions live on different meshes".into()));
        }
    }
    Ok(mesh)
}

/// `Σ_{cells of [lo,hi)} |f|`.
fn abs_sum(f: &MeshFunction, lo: i64, hi: i64) -> f64 {
    let o = f.cells.origin[0];
    let a = (lo - o).max(0) as usize;
    let b = ((hi - o).max(0) as usize).min(f.values.len());
    if a >= b {
        return 0.0;
    }
    f.values[a..b].iter().map(|v| v.abs()).sum()
}

fn abs_average(f: &MeshFunction, q: &DyadicCube) -> f64 {
    abs_sum(f, q.corner[0], q.hi(0)) / q.side_cells() as f64
}

/// `Λ_𝒮(f1,f2,f3) = Σ_{Q∈𝒮} |Q|⟨|f1|⟩_Q⟨|f2|⟩_Q⟨|f3|⟩_Q`.
pub fn lambda_form(s: &SparseCollection, f1: &MeshFunction, f2: &MeshFunction, f3: &MeshFunction) -> Result<f64> {
    let mesh = check_1d(&[f1, f2, f3])?;
    if s.cubes.iter().any(|q| q.mesh != mesh || q.dim() != 1) {
        return Err(Error::MeshMismatch("sparse cubes and functions differ in mesh".into()));
    }
    Ok(s.cubes.iter().map(|q| q.volume() * abs_average(f1, q) * abs_average(f2, q) * abs_average(f3, q)).sum())
}

/// Nearest strict container of each cube, for a family in which any two
/// cubes are nested or disjoint. Duplicates are rejected.
fn laminar_parents(cubes: &[DyadicCube]) -> Result<Vec<Option<usize>>> {
    let mut order: Vec<usize> = (0..cubes.len()).collect();
    order.sort_by_key(|&i| (cubes[i].corner[0], std::cmp::Reverse(cubes[i].hi(0))));
    let mut parent = vec![None; cubes.len()];
    let mut stack: Vec<usize> = Vec::new();
    for &i in &order {
        let (lo, hi) = (cubes[i].corner[0], cubes[i].hi(0));
        while let Some(&top) = stack.last() {
            if cubes[top].hi(0) <= lo {
                stack.pop();
            } else {
                break;
            }
        }
        if let Some(&top) = stack.last() {
            if cubes[top].corner[0] == lo && cubes[top].hi(0) == hi {
                return Err(Error::Precondition(format!("cube {} appears twice", cubes[i])));
            }
            if hi > cubes[top].hi(0) {
                return Err(Error::Unsupported(format!(
                    "cubes {} and {} overlap without nesting; supply major sets",
                    cubes[top], cubes[i]
                )));
            }
            parent[i] = Some(top);
        }
        stack.push(i);
    }
    Ok(parent)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseCheck {
    pub eta: f64,
    pub sparse: bool,
    pub ratio_min: f64,
    /// Cube attaining the minimum.
    pub worst: Option<DyadicCube>,
}

/// Checks `|E_Q| ≥ η|Q|` for the canonical major sets
/// `E_Q = Q ∖ ⋃{R ∈ 𝒮 : R ⊊ Q maximal}`, counted in mesh cells.
pub fn verify_sparse(s: &SparseCollection) -> Result<SparseCheck> {
    check_eta(s.eta)?;
    if s.cubes.iter().any(|q| q.dim() != 1) {
        return Err(Error::Unsupported("sparse checks are implemented in one dimension".into()));
    }
    if s.cubes.windows(2).any(|w| w[0].mesh != w[1].mesh) {
        return Err(Error::MeshMismatch("sparse cubes on different meshes".into()));
    }
    let parent = laminar_parents(&s.cubes)?;
    let mut covered = vec![0i64; s.cubes.len()];
    for (i, p) in parent.iter().enumerate() {
        if let Some(p) = p {
            covered[*p] += s.cubes[i].side_cells();
        }
    }
    let mut sparse = true;
    let mut ratio_min = 1.0;
    let mut worst = None;
    for (q, c) in s.cubes.iter().zip(&covered) {
        let side = q.side_cells();
        let major = side - c;
        if (major as f64) < s.eta * side as f64 {
            sparse = false;
        }
        let ratio = major as f64 / side as f64;
        if ratio < ratio_min || worst.is_none() {
            ratio_min = ratio_min.min(ratio);
            worst = Some(q.clone());
        }
    }
    Ok(SparseCheck { eta: s.eta, sparse, ratio_min, worst })
}

/// Stopping constant `C₀(η) = ⌈3/(1−η)⌉`: three dyadic weak-(1,1) sets of
/// measure at most `|Q₀|/C₀` each.
pub fn stopping_constant(eta: f64) -> f64 {
    (3.0 / (1.0 - eta)).ceil()
}

/// Smallest grid cube containing the union of the supports.
fn support_root(fs: &[&MeshFunction], grid: &DyadicGrid) -> Result<Option<DyadicCube>> {
    let mut lo = i64::MAX;
    let mut hi = i64::MIN;
    for f in fs {
        for (i, v) in f.values.iter().enumerate() {
            if *v != 0.0 {
                let c = f.cells.origin[0] + i as i64;
                lo = lo.min(c);
                hi = hi.max(c);
            }
        }
    }
    if lo > hi {
        return Ok(None);
    }
    for level in (grid.coarsest_level()..=grid.finest_level()).rev() {
        let q = grid.cube_containing(&[lo], level);
        if q.hi(0) > hi {
            return Ok(Some(q));
        }
    }
    Err(Error::Precondition(format!(
        "the supports (cells {lo}..={hi}) do not fit in one cube of the grid scale range"
    )))
}

fn children(q: &DyadicCube) -> [DyadicCube; 2] {
    let half = q.side_cells() / 2;
    [
        DyadicCube::new(q.level + 1, vec![q.corner[0]], q.mesh),
        DyadicCube::new(q.level + 1, vec![q.corner[0] + half], q.mesh),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub root: DyadicCube,
    pub stopping: Vec<DyadicCube>,
    /// `Σ_{Q∈𝓔}|Q|` in cells.
    pub stopped_cells: i64,
    pub root_cells: i64,
    /// `Σ_{Q∈𝓔}|Q| ≤ (1−η)|Q₀|`.
    pub within_bound: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseBuild {
    pub collection: SparseCollection,
    pub c0: f64,
    pub stages: Vec<Stage>,
}

/// Maximal `R ⊊ root` with `⟨|f_j|⟩_R > C₀⟨|f_j|⟩_root` for some `j`.
pub fn stopping_cubes(fs: [&MeshFunction; 3], root: &DyadicCube, c0: f64) -> Vec<DyadicCube> {
    let base: Vec<f64> = fs.iter().map(|f| abs_average(f, root)).collect();
    let mut out = Vec::new();
    let mut stack: Vec<DyadicCube> = if root.level < root.mesh as i32 { children(root).into_iter().rev().collect() } else { vec![] };
    while let Some(q) = stack.pop() {
        let stops = fs.iter().zip(&base).any(|(f, b)| *b > 0.0 && abs_average(f, &q) > c0 * b);
        if stops {
            out.push(q);
        } else if q.level < q.mesh as i32 {
            stack.extend(children(&q).into_iter().rev());
        }
    }
    out
}

/// Iterated stopping-time family for `(f1,f2,f3)`: the root is the smallest
/// grid cube holding the supports, and every stopping cube becomes a root of
/// the next generation.
pub fn build_sparse(fs: [&MeshFunction; 3], eta: f64, grid: &DyadicGrid) -> Result<SparseBuild> {
    check_eta(eta)?;
    let mesh = check_1d(&fs)?;
    if grid.n != 1 || grid.mesh != mesh {
        return Err(Error::MeshMismatch("grid and functions differ".into()));
    }
    let c0 = stopping_constant(eta);
    let mut cubes = Vec::new();
    let mut stages = Vec::new();
    let mut roots: Vec<DyadicCube> = support_root(&fs, grid)?.into_iter().collect();
    // levels strictly increase, so at most L − S + 1 generations
    let max_generations = (grid.finest_level() - grid.coarsest_level() + 1) as usize;
    for _ in 0..=max_generations {
        if roots.is_empty() {
            break;
        }
        let next: Vec<Stage> = roots
            .par_iter()
            .map(|root| {
                let stopping = stopping_cubes(fs, root, c0);
                let stopped_cells = stopping.iter().map(|q| q.side_cells()).sum::<i64>();
                let root_cells = root.side_cells();
                let within_bound = stopped_cells as f64 <= (1.0 - eta) * root_cells as f64;
                Stage { root: root.clone(), stopping, stopped_cells, root_cells, within_bound }
            })
            .collect();
        cubes.extend(roots.drain(..));
        for st in &next {
            roots.extend(st.stopping.iter().cloned());
        }
        stages.extend(next);
    }
    if !roots.is_empty() {
        return Err(Error::Precondition("stopping-time iteration did not terminate".into()));
    }
    Ok(SparseBuild { collection: SparseCollection::new(eta, cubes)?, c0, stages })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CzDecomposition {
    /// `f` off the stopping cubes, `⟨f⟩_Q` on each `Q`; on the box of `Q₀`.
    pub good: MeshFunction,
    /// `b_Q = (f − ⟨f⟩_Q)1_Q`, on the box of `Q`.
    pub bad: Vec<(DyadicCube, MeshFunction)>,
}

/// `f = g + Σ_Q b_Q` with respect to disjoint stopping cubes inside `q0`.
pub fn cz_decompose(f: &MeshFunction, stopping: &[DyadicCube], q0: &DyadicCube) -> Result<CzDecomposition> {
    check_1d(&[f])?;
    for q in stopping {
        if !q0.contains(q) {
            return Err(Error::Precondition(format!("stopping cube {q} is not inside {q0}")));
        }
    }
    let mut sorted: Vec<&DyadicCube> = stopping.iter().collect();
    sorted.sort_by_key(|q| q.corner[0]);
    for w in sorted.windows(2) {
        if w[0].intersects(w[1]) {
            return Err(Error::Overlap(format!("{} and {}", w[0], w[1])));
        }
    }
    let local = f.on_box(CellBox::of_cube(q0));
    let mut good = local.clone();
    let mut bad = Vec::with_capacity(stopping.len());
    for q in stopping {
        let o = q.corner[0] - q0.corner[0];
        let n = q.side_cells();
        let slice = &local.values[o as usize..(o + n) as usize];
        let mean = slice.iter().sum::<f64>() / n as f64;
        let b: Vec<f64> = slice.iter().map(|v| v - mean).collect();
        for v in &mut good.values[o as usize..(o + n) as usize] {
            *v = mean;
        }
        bad.push((q.clone(), MeshFunction::from_values(f.mesh, CellBox::of_cube(q), b)?));
    }
    Ok(CzDecomposition { good, bad })
}

/// Per-cube kernel, constant on the cubes `(ρ+1)` levels below `q`; entry
/// `(a·m + b)·m + c` for sub-cubes `a`, `b`, `c`, `m = 2^{ρ+1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoKernel {
    pub q: DyadicCube,
    pub table: Vec<f64>,
}

/// `Σ_Q ∭_{Q³} K_Q f1 ⊗ f2 ⊗ f3` with `‖K_Q‖_∞ ≤ |Q|^{-2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoForm {
    pub grid: DyadicGrid,
    pub rho: u32,
    pub kernels: Vec<RhoKernel>,
    /// Boundedness constant with its exponents `(p, q, r)`.
    pub bound_b: f64,
    pub exponents: [f64; 3],
}

pub const MAX_RHO: u32 = 6;
const SIZE_SLACK: f64 = 1e-12;

impl RhoForm {
    pub fn new(grid: DyadicGrid, rho: u32, kernels: Vec<RhoKernel>, bound_b: f64, exponents: [f64; 3]) -> Result<Self> {
        let form = RhoForm { grid, rho, kernels, bound_b, exponents };
        form.validate()?;
        Ok(form)
    }

    pub fn width(&self) -> usize {
        2usize << self.rho
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.n != 1 {
            return Err(Error::Unsupported("S^ρ forms are implemented in one dimension".into()));
        }
        if self.rho > MAX_RHO {
            return Err(Error::Unsupported(format!("ρ = {} exceeds {MAX_RHO}", self.rho)));
        }
        let m = self.width();
        for k in &self.kernels {
            if !self.grid.contains_cube(&k.q) {
                return Err(Error::misaligned(&k.q));
            }
            if k.q.level + self.rho as i32 + 1 > self.grid.mesh as i32 {
                return Err(Error::Resolution(format!("{} needs {} levels below it", k.q, self.rho + 1)));
            }
            if k.table.len() != m * m * m {
                return Err(Error::Precondition(format!("kernel on {} has {} entries, expected {}", k.q, k.table.len(), m * m * m)));
            }
            let cap = k.q.volume().powi(-2);
            let worst = k.table.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if !(worst <= cap * (1.0 + SIZE_SLACK)) {
                return Err(Error::Normalization { what: format!("kernel size on {}", k.q), ratio: worst / cap });
            }
        }
        Ok(())
    }

    /// The form of a shift `S^{i,j,k}`: `ρ = max(i,j,k)` and
    /// `K_Q = Σ α h̃_I ⊗ h̃_J ⊗ h_K`.
    pub fn from_shift(spec: &ShiftSpec, bound_b: f64, exponents: [f64; 3]) -> Result<Self> {
        let rho = spec.i.max(spec.j).max(spec.k);
        if rho > MAX_RHO {
            return Err(Error::Unsupported(format!("ρ = {rho} exceeds {MAX_RHO}")));
        }
        let m = 2usize << rho;
        let mut by_q: BTreeMap<DyadicCube, Vec<f64>> = BTreeMap::new();
        for c in &spec.coeffs {
            let q = &c.q;
            let sub = q.side_cells() / m as i64;
            let values = |h: &crate::mesh::HaarIndex| -> Vec<f64> {
                (0..m).map(|a| h.value(&[q.corner[0] + a as i64 * sub])).collect()
            };
            let (v1, v2, v3) = (values(&c.i), values(&c.j), values(&c.k));
            let table = by_q.entry(q.clone()).or_insert_with(|| vec![0.0; m * m * m]);
            for a in 0..m {
                if v1[a] == 0.0 {
                    continue;
                }
                for b in 0..m {
                    let ab = c.alpha * v1[a] * v2[b];
                    if ab == 0.0 {
                        continue;
                    }
                    for (cc, x) in v3.iter().enumerate() {
                        table[(a * m + b) * m + cc] += ab * x;
                    }
                }
            }
        }
        let kernels = by_q.into_iter().map(|(q, table)| RhoKernel { q, table }).collect();
        RhoForm::new(spec.grid.clone(), rho, kernels, bound_b, exponents)
    }

    fn integrals(&self, f: &MeshFunction, q: &DyadicCube) -> Vec<f64> {
        let m = self.width();
        let sub = q.side_cells() / m as i64;
        let h = f.cell_volume();
        (0..m)
            .map(|a| {
                let lo = q.corner[0] + a as i64 * sub;
                (lo..lo + sub).map(|c| f.at(&[c])).sum::<f64>() * h
            })
            .collect()
    }

    fn cube_value(&self, k: &RhoKernel, f1: &MeshFunction, f2: &MeshFunction, f3: &MeshFunction) -> f64 {
        let m = self.width();
        let (a1, a2, a3) = (self.integrals(f1, &k.q), self.integrals(f2, &k.q), self.integrals(f3, &k.q));
        let mut s = 0.0;
        for a in 0..m {
            if a1[a] == 0.0 {
                continue;
            }
            for b in 0..m {
                let w = a1[a] * a2[b];
                if w == 0.0 {
                    continue;
                }
                let row = &k.table[(a * m + b) * m..(a * m + b + 1) * m];
                s += w * row.iter().zip(&a3).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        s
    }

    pub fn eval(&self, f1: &MeshFunction, f2: &MeshFunction, f3: &MeshFunction) -> Result<f64> {
        self.eval_where(f1, f2, f3, |_| true)
    }

    /// `𝕊^ρ_𝒬` over the kernels whose cube passes `keep`.
    pub fn eval_where(
        &self,
        f1: &MeshFunction,
        f2: &MeshFunction,
        f3: &MeshFunction,
        keep: impl Fn(&DyadicCube) -> bool + Sync,
    ) -> Result<f64> {
        let mesh = check_1d(&[f1, f2, f3])?;
        if mesh != self.grid.mesh {
            return Err(Error::MeshMismatch("form and functions differ in mesh".into()));
        }
        let parts: Vec<f64> = self
            .kernels
            .par_iter()
            .map(|k| if keep(&k.q) { self.cube_value(k, f1, f2, f3) } else { 0.0 })
            .collect();
        Ok(parts.iter().sum())
    }

    /// `S_Q(f1,f2,f3)` for one kernel cube.
    pub fn cube_term(&self, q: &DyadicCube, f1: &MeshFunction, f2: &MeshFunction, f3: &MeshFunction) -> f64 {
        self.kernels.iter().filter(|k| &k.q == q).map(|k| self.cube_value(k, f1, f2, f3)).sum()
    }
}

/// `𝕊^ρ_𝒬(f1,f2,f3)`, over every kernel cube when `subfamily` is `None`.
pub fn rho_form_eval(
    form: &RhoForm,
    f1: &MeshFunction,
    f2: &MeshFunction,
    f3: &MeshFunction,
    subfamily: Option<&[DyadicCube]>,
) -> Result<f64> {
    match subfamily {
        None => form.eval(f1, f2, f3),
        Some(list) => {
            let set: std::collections::BTreeSet<&DyadicCube> = list.iter().collect();
            form.eval_where(f1, f2, f3, |q| set.contains(q))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domination {
    pub collection: SparseCollection,
    pub form: f64,
    pub lambda: f64,
    pub bound_b: f64,
    pub rho: u32,
    /// `|𝕊^ρ| / ((𝓑 + ρ + 1) Λ_𝒮)`.
    pub ratio: f64,
}

/// Builds `𝒮` from the three functions and compares the form against `Λ_𝒮`.
pub fn sparse_dominate(form: &RhoForm, f1: &MeshFunction, f2: &MeshFunction, f3: &MeshFunction, eta: f64) -> Result<Domination> {
    let built = build_sparse([f1, f2, f3], eta, &form.grid)?;
    let value = form.eval(f1, f2, f3)?;
    let lambda = lambda_form(&built.collection, f1, f2, f3)?;
    let denom = (form.bound_b + form.rho as f64 + 1.0) * lambda;
    let ratio = if value == 0.0 { 0.0 } else { value.abs() / denom };
    Ok(Domination { collection: built.collection, form: value, lambda, bound_b: form.bound_b, rho: form.rho, ratio })
}

/// The eight terms `𝕊^ρ_𝒢(h1,h2,h3)` with `h_j ∈ {g_j, b_j}` of the
/// Calderón–Zygmund split over `𝒢 = {Q ⊆ Q₀ not inside a stopping cube}`.
/// Bit `j` of the index selects the bad part of `f_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedTerms {
    pub terms: [f64; 8],
    /// `Σ_{Q∈𝒢} |S_Q|` summed over the eight choices; a scale for the terms.
    pub scale: f64,
}

pub fn mixed_terms(form: &RhoForm, fs: [&MeshFunction; 3], stopping: &[DyadicCube], q0: &DyadicCube) -> Result<MixedTerms> {
    let parts: Vec<(MeshFunction, MeshFunction)> = fs
        .iter()
        .map(|f| {
            let cz = cz_decompose(f, stopping, q0)?;
            let mut bad = MeshFunction::zeros(f.mesh, CellBox::of_cube(q0));
            for (_, b) in &cz.bad {
                bad = bad.add(b)?.on_box(CellBox::of_cube(q0));
            }
            Ok((cz.good, bad))
        })
        .collect::<Result<_>>()?;
    let in_g = |q: &DyadicCube| q0.contains(q) && !stopping.iter().any(|e| e.contains(q));
    let mut terms = [0.0; 8];
    let mut scale = 0.0;
    for (mask, t) in terms.iter_mut().enumerate() {
        let pick = |j: usize| if mask >> j & 1 == 1 { &parts[j].1 } else { &parts[j].0 };
        let (h1, h2, h3) = (pick(0), pick(1), pick(2));
        *t = form.eval_where(h1, h2, h3, in_g)?;
        scale += form
            .kernels
            .iter()
            .filter(|k| in_g(&k.q))
            .map(|k| form.cube_value(k, h1, h2, h3).abs())
            .sum::<f64>();
    }
    Ok(MixedTerms { terms, scale })
}

/// Largest number of `R` in one level class `𝒢'` (levels congruent mod ρ)
/// with `Q ⊊ R` and `S_R(b_{1,Q}, h2, h3) ≠ 0`, over stopping cubes `Q`.
pub fn single_r_count(
    form: &RhoForm,
    f1: &MeshFunction,
    h2: &MeshFunction,
    h3: &MeshFunction,
    stopping: &[DyadicCube],
    q0: &DyadicCube,
) -> Result<usize> {
    let cz = cz_decompose(f1, stopping, q0)?;
    let classes = form.rho.max(1) as i32;
    let in_g = |q: &DyadicCube| q0.contains(q) && !stopping.iter().any(|e| e.contains(q));
    let mut worst = 0;
    for (q, b) in &cz.bad {
        let b = b.on_box(CellBox::of_cube(q0));
        let mut count = vec![0usize; classes as usize];
        for k in form.kernels.iter().filter(|k| in_g(&k.q) && k.q.contains(q) && &k.q != q) {
            let v = form.cube_value(k, &b, h2, h3);
            let size = k.q.volume().powi(-2) * k.q.volume().powi(3);
            if v.abs() > 1e-12 * size {
                count[k.q.level.rem_euclid(classes) as usize] += 1;
            }
        }
        worst = worst.max(count.into_iter().max().unwrap_or(0));
    }
    Ok(worst)
}

/// Layer constant `C(η₂) = max(8, ⌈(6/(1−η₂))³⌉)` in one dimension.
pub fn layer_constant(eta2: f64) -> f64 {
    8f64.max((6.0 / (1.0 - eta2)).powi(3).ceil())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniversalBuild {
    pub collection: SparseCollection,
    pub c: f64,
    /// `(k, Q)` for `Q ∈ 𝒰_k`.
    pub layers: Vec<(i32, DyadicCube)>,
}

/// Largest `k` with `c^k < p`.
fn layer_of(p: f64, c: f64) -> i32 {
    let mut k = (p.ln() / c.ln()).floor() as i32;
    while c.powi(k) >= p {
        k -= 1;
    }
    while c.powi(k + 1) < p {
        k += 1;
    }
    k
}

/// Ancestors kept above `Q₀`: their weight in `Λ_𝒰` falls by 4 per step.
pub const ANCESTOR_STEPS: u32 = 30;

/// `𝒰 = ⋃_k 𝒰_k`, `𝒰_k` the maximal dyadic cubes with `∏⟨|f_j|⟩_Q > C^k`.
/// Maximality is taken in the full lattice, so the chain of ancestors of
/// the support root `Q₀` takes part (up to [`ANCESTOR_STEPS`] levels).
pub fn universal_sparse(fs: [&MeshFunction; 3], eta2: f64, grid: &DyadicGrid) -> Result<UniversalBuild> {
    check_eta(eta2)?;
    let mesh = check_1d(&fs)?;
    if grid.n != 1 || grid.mesh != mesh {
        return Err(Error::MeshMismatch("grid and functions differ".into()));
    }
    if !grid.is_standard() {
        return Err(Error::Unsupported("the universal family walks ancestors of the standard lattice".into()));
    }
    let c = layer_constant(eta2);
    let product = |q: &DyadicCube| fs.iter().map(|f| abs_average(f, q)).product::<f64>();
    let visit = |q: &DyadicCube, above: f64, layers: &mut Vec<(i32, DyadicCube)>| -> f64 {
        let p = product(q);
        if p > 0.0 {
            let k = layer_of(p, c);
            if above <= c.powi(k) {
                layers.push((k, q.clone()));
            }
        }
        above.max(p)
    };
    let mut layers = Vec::new();
    if let Some(root) = support_root(&fs, grid)? {
        let mut chain = vec![root.clone()];
        for _ in 0..=ANCESTOR_STEPS {
            let q = chain.last().unwrap();
            let side = 2 * q.side_cells();
            chain.push(DyadicCube::new(q.level - 1, vec![q.corner[0].div_euclid(side) * side], mesh));
        }
        // the top of the chain only supplies the bound from above
        let mut above = product(&chain.pop().unwrap());
        for q in chain[1..].iter().rev() {
            above = visit(q, above, &mut layers);
        }
        let mut stack = vec![(root, above)];
        while let Some((q, above)) = stack.pop() {
            if product(&q) == 0.0 {
                continue;
            }
            let next = visit(&q, above, &mut layers);
            if q.level < mesh as i32 {
                stack.extend(children(&q).into_iter().rev().map(|ch| (ch, next)));
            }
        }
    }
    let cubes = layers.iter().map(|(_, q)| q.clone()).collect();
    Ok(UniversalBuild { collection: SparseCollection::new(eta2, cubes)?, c, layers })
}

/// `Λ_𝒮 / Λ_𝒰`; a positive `Λ_𝒮` against a zero `Λ_𝒰` is a violation.
pub fn universal_dominates(
    s: &SparseCollection,
    u: &SparseCollection,
    f1: &MeshFunction,
    f2: &MeshFunction,
    f3: &MeshFunction,
) -> Result<f64> {
    let ls = lambda_form(s, f1, f2, f3)?;
    let lu = lambda_form(u, f1, f2, f3)?;
    if lu == 0.0 {
        if ls == 0.0 {
            return Ok(0.0);
        }
        return Err(Error::Precondition(format!("Λ_𝒰 = 0 while Λ_𝒮 = {ls}")));
    }
    Ok(ls / lu)
}

/// Random `η`-sparse family below `root`: each cube keeps a random set of
/// descendants a few levels down covering at most `(1−η)` of it.
pub fn random_sparse<R: Rng>(rng: &mut R, root: &DyadicCube, eta: f64, max_cubes: usize) -> Result<SparseCollection> {
    check_eta(eta)?;
    let mesh = root.mesh as i32;
    let mut cubes = vec![root.clone()];
    let mut frontier = vec![root.clone()];
    while let Some(q) = frontier.pop() {
        if q.level >= mesh || cubes.len() >= max_cubes {
            continue;
        }
        let d = rng.gen_range(1..=3.min(mesh - q.level));
        let n = 1usize << d;
        let room = ((1.0 - eta) * n as f64).floor() as usize;
        let take = rng.gen_range(0..=room);
        let side = q.side_cells() >> d;
        for idx in sample(rng, n, take).into_vec() {
            let sub = DyadicCube::new(q.level + d, vec![q.corner[0] + idx as i64 * side], q.mesh);
            cubes.push(sub.clone());
            frontier.push(sub);
        }
    }
    SparseCollection::new(eta, cubes)
}

/// An axis-parallel cube `corner + [0, side)^n` in real coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealCube {
    pub corner: Vec<f64>,
    pub side: f64,
}

impl RealCube {
    pub fn contains(&self, p: &RealCube) -> bool {
        self.corner.iter().zip(&p.corner).all(|(a, b)| a <= b && b + p.side <= a + self.side)
    }
}

/// Number of shifted grids in dimension `n`.
pub fn shifted_grid_count(n: usize) -> usize {
    3usize.pow(n as u32)
}

/// `(i, R)`: grid `i` of the one-third family
/// `𝒟_t = {2^{-k}([0,1)^n + m + (−1)^k t/3)}`, `t ∈ {0,1,2}^n` with `i = Σ t_d 3^d`,
/// and a cube `R ∈ 𝒟_t` with `P ⊆ R`, `ℓ(R) < 6ℓ(P)`.
pub fn threegrid_cover(p: &RealCube) -> Result<(usize, RealCube)> {
    if !(p.side > 0.0 && p.side.is_finite()) || p.corner.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("cube must have finite corner and positive side".into()));
    }
    // 3ℓ(P) ≤ 2^{-k} < 6ℓ(P)
    let k0 = (-(3.0 * p.side).log2()).floor() as i32;
    for k in [k0, k0 - 1] {
        let s = (-(k as f64)).exp2();
        let sign = if k.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
        let mut index = 0;
        let mut corner = Vec::with_capacity(p.corner.len());
        let mut ok = true;
        for (d, &x) in p.corner.iter().enumerate() {
            let hit = (0..3).find_map(|t| {
                let shift = sign * t as f64 / 3.0 * s;
                let lo = ((x - shift) / s).floor() * s + shift;
                (lo <= x && x + p.side <= lo + s).then_some((t, lo))
            });
            match hit {
                Some((t, lo)) => {
                    index += t * 3usize.pow(d as u32);
                    corner.push(lo);
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok((index, RealCube { corner, side: s }));
        }
    }
    Err(Error::Tolerance(format!("no covering cube found for {p:?}")))
}

/// Constants behind `C_est`: the measured CZ constant, the weak-boundedness
/// sweep and the three BMO sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryConstants {
    pub kernel: f64,
    pub wbp: f64,
    pub bmo: [f64; 3],
    pub safety: f64,
}

impl CorollaryConstants {
    pub fn measure(k: &BilinearKernel, trunc: &TruncationSpec, mesh: u32, quad: &QuadratureSpec) -> Result<Self> {
        let kernel = k.measure_constant(20_000, 0x5eed).cz;
        let cubes: Vec<DyadicCube> = (0..=mesh as i32).map(|l| DyadicCube::new(l, vec![0], mesh)).collect();
        let wbp = crate::pairing::wbp_constant(k, trunc, &cubes, quad)?;
        let mut bmo = [0.0; 3];
        for (b, roles) in bmo.iter_mut().zip([Roles::Direct, Roles::Adjoint1, Roles::Adjoint2]) {
            *b = crate::bmo::bmo_estimate(&crate::bmo::haar_levels(k, trunc, roles, mesh, quad)?);
        }
        Ok(CorollaryConstants { kernel, wbp, bmo, safety: 2.0 })
    }

    pub fn c_est(&self) -> f64 {
        self.safety * (self.kernel + self.wbp + self.bmo.iter().sum::<f64>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryReport {
    pub eps: Vec<f64>,
    pub values: Vec<f64>,
    pub sup: f64,
    pub lambda: f64,
    pub sparse_cubes: usize,
    pub constants: CorollaryConstants,
    pub c_est: f64,
    /// `sup_ε |⟨T_ε(f,g),h⟩| / (C_est Λ_𝒮)`.
    pub ratio: f64,
    pub pass: bool,
}

/// Smallest standard grid (coarsest level `≤ 0`) whose scale range has a
/// cube holding every support.
pub fn grid_for(fs: [&MeshFunction; 3]) -> Result<DyadicGrid> {
    let mesh = check_1d(&fs)?;
    for coarse in 0..32 {
        let grid = DyadicGrid::standard(1, mesh, coarse);
        if support_root(&fs, &grid).is_ok() {
            return Ok(grid);
        }
    }
    Err(Error::Precondition("supports too wide for any standard grid".into()))
}

/// `sup_ε |⟨T_ε(f,g),h⟩|` over sharp truncations against `C_est Λ_𝒮` for one
/// sparse family built from `(|f|,|g|,|h|)`.
pub fn corollary_check(
    k: &BilinearKernel,
    ladder: &[f64],
    f: &MeshFunction,
    g: &MeshFunction,
    h: &MeshFunction,
    eta: f64,
    quad: &QuadratureSpec,
    constants: &CorollaryConstants,
) -> Result<CorollaryReport> {
    if ladder.is_empty() {
        return Err(Error::Domain("empty ε ladder".into()));
    }
    let grid = grid_for([f, g, h])?;
    let (fa, ga, ha) = (f.abs(), g.abs(), h.abs());
    let built = build_sparse([&fa, &ga, &ha], eta, &grid)?;
    let lambda = lambda_form(&built.collection, f, g, h)?;
    let values: Vec<f64> = ladder
        .par_iter()
        .map(|&e| crate::pairing::trilinear_pairing(k, &TruncationSpec::sharp(e), f, g, h, quad))
        .collect::<Result<_>>()?;
    let sup = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let c_est = constants.c_est();
    let ratio = if sup == 0.0 { 0.0 } else { sup / (c_est * lambda) };
    Ok(CorollaryReport {
        eps: ladder.to_vec(),
        values,
        sup,
        lambda,
        sparse_cubes: built.collection.cubes.len(),
        constants: *constants,
        c_est,
        ratio,
        pass: ratio <= 1.0,
    })
}
