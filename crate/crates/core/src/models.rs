//! Dyadic model operators: cancellative bilinear shifts, bilinear
//! paraproducts, their adjoint forms, and an empirical norm harness.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dyadic::{DyadicCube, DyadicGrid};
use crate::error::{Error, Result};
use crate::mesh::{CellBox, Cumulative, Exponent, HaarIndex, MeshFunction};
use crate::rng;

/// Relative slack allowed on the normalization gates.
pub const NORM_SLACK: f64 = 1e-12;

/// Which of the two input Haar functions is non-cancellative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HaarMode {
    /// `(h_I, h_J)`
    HH,
    /// `(h_I^0, h_J)`
    H0H,
    /// `(h_I, h_J^0)`
    HH0,
}

impl HaarMode {
    pub fn of(i: &HaarIndex, j: &HaarIndex) -> Option<HaarMode> {
        match (i.is_cancellative(), j.is_cancellative()) {
            (true, true) => Some(HaarMode::HH),
            (false, true) => Some(HaarMode::H0H),
            (true, false) => Some(HaarMode::HH0),
            (false, false) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftCoeff {
    pub q: DyadicCube,
    pub i: HaarIndex,
    pub j: HaarIndex,
    pub k: HaarIndex,
    pub alpha: f64,
}

impl ShiftCoeff {
    pub fn mode(&self) -> Option<HaarMode> {
        HaarMode::of(&self.i, &self.j)
    }

    /// `|I|^{1/2}|J|^{1/2}|K|^{1/2}/|Q|²`.
    pub fn bound(&self) -> f64 {
        (self.i.cube.volume() * self.j.cube.volume() * self.k.cube.volume()).sqrt() / self.q.volume().powi(2)
    }
}

/// `S^{i,j,k}(f,g) = Σ_Q Σ α_{I,J,K,Q} ⟨f, h̃_I⟩⟨g, h̃_J⟩ h_K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub i: u32,
    pub j: u32,
    pub k: u32,
    pub grid: DyadicGrid,
    pub coeffs: Vec<ShiftCoeff>,
}

/// A Haar function must have its children on the mesh when cancellative.
fn check_resolvable(h: &HaarIndex, mesh: u32) -> Result<()> {
    let finest = if h.is_cancellative() { mesh as i32 - 1 } else { mesh as i32 };
    if h.cube.level > finest {
        return Err(Error::Resolution(format!("Haar function on {} is below mesh scale", h.cube)));
    }
    Ok(())
}

impl ShiftSpec {
    /// Validates every stored coefficient: geometry, Haar modes, resolution
    /// and the normalization bound.
    pub fn new(i: u32, j: u32, k: u32, grid: DyadicGrid, coeffs: Vec<ShiftCoeff>) -> Result<Self> {
        let spec = ShiftSpec { i, j, k, grid, coeffs };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mesh = self.grid.mesh;
        for c in &self.coeffs {
            if !self.grid.contains_cube(&c.q) {
                return Err(Error::misaligned(&c.q));
            }
            for (h, step) in [(&c.i, self.i), (&c.j, self.j), (&c.k, self.k)] {
                if h.cube.level != c.q.level + step as i32 || !c.q.contains(&h.cube) || !self.grid.contains_cube(&h.cube) {
                    return Err(Error::Precondition(format!(
                        "cube {} is not a level-{step} descendant of {}",
                        h.cube, c.q
                    )));
                }
                check_resolvable(h, mesh)?;
            }
            if c.mode().is_none() {
                return Err(Error::Precondition(format!("both input Haar functions on {} are non-cancellative", c.q)));
            }
            if !c.k.is_cancellative() {
                return Err(Error::Precondition(format!("output Haar function on {} must be cancellative", c.k.cube)));
            }
            let ratio = c.alpha.abs() / c.bound();
            if !ratio.is_finite() || ratio > 1.0 + NORM_SLACK {
                return Err(Error::Normalization { what: format!("shift coefficient at Q = {}", c.q), ratio });
            }
        }
        Ok(())
    }

    pub fn form(&self) -> ShiftForm {
        ShiftForm {
            mesh: self.grid.mesh,
            terms: self
                .coeffs
                .iter()
                .map(|c| FormTerm { q: c.q.clone(), slots: [c.i.clone(), c.j.clone(), c.k.clone()], alpha: c.alpha })
                .collect(),
        }
    }

    /// `1` gives `S^{1*}` with `⟨S(f,g),h⟩ = ⟨S^{1*}(h,g),f⟩`, `2` gives
    /// `S^{2*}` with `⟨S(f,g),h⟩ = ⟨S^{2*}(f,h),g⟩`.
    pub fn adjoint(&self, which: u8) -> Result<ShiftForm> {
        self.form().adjoint(which)
    }

    pub fn apply(&self, f: &MeshFunction, g: &MeshFunction) -> Result<MeshFunction> {
        self.form().apply(f, g)
    }

    pub fn form_value(&self, f: &MeshFunction, g: &MeshFunction, h: &MeshFunction) -> Result<f64> {
        self.form().value(f, g, h)
    }

    /// `A_Q`: the part of the shift living on one top cube.
    pub fn block(&self, q: &DyadicCube) -> ShiftSpec {
        ShiftSpec { coeffs: self.coeffs.iter().filter(|c| &c.q == q).cloned().collect(), ..self.clone() }
    }

    pub fn top_cubes(&self) -> Vec<DyadicCube> {
        let mut qs: Vec<DyadicCube> = self.coeffs.iter().map(|c| c.q.clone()).collect();
        qs.sort();
        qs.dedup();
        qs
    }
}

/// One term `α ⟨x_0, h_0⟩⟨x_1, h_1⟩⟨x_2, h_2⟩` of a trilinear Haar form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormTerm {
    pub q: DyadicCube,
    pub slots: [HaarIndex; 3],
    pub alpha: f64,
}

/// A shift or one of its adjoints, stored as a trilinear form; the bilinear
/// operator returns the function paired against slot 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftForm {
    pub mesh: u32,
    pub terms: Vec<FormTerm>,
}

/// Haar coefficients and averages read off an antiderivative table.
struct Probe {
    cum: Cumulative,
    h: f64,
}

impl Probe {
    fn new(f: &MeshFunction) -> Self {
        Probe { cum: f.cumulative(), h: f.cell_size() }
    }

    fn integral(&self, q: &DyadicCube) -> f64 {
        let lo: Vec<f64> = q.corner.iter().map(|&c| c as f64 * self.h).collect();
        let hi: Vec<f64> = (0..q.dim()).map(|d| q.hi(d) as f64 * self.h).collect();
        self.cum.box_integral(&lo, &hi)
    }

    fn haar(&self, idx: &HaarIndex) -> Result<f64> {
        if !idx.is_cancellative() {
            return Ok(self.integral(&idx.cube) / idx.cube.volume().sqrt());
        }
        let mut s = 0.0;
        for ch in idx.cube.children()? {
            let half = idx.cube.side_cells() / 2;
            let mut sign = 1.0;
            for d in 0..ch.dim() {
                if idx.eta[d] != 0 && ch.corner[d] - idx.cube.corner[d] >= half {
                    sign = -sign;
                }
            }
            s += sign * self.integral(&ch);
        }
        Ok(s / idx.cube.volume().sqrt())
    }

    fn average(&self, q: &DyadicCube) -> f64 {
        self.integral(q) / q.volume()
    }
}

fn check_input(f: &MeshFunction, mesh: u32) -> Result<()> {
    if f.mesh != mesh {
        return Err(Error::MeshMismatch(format!("function on mesh {} against a model on mesh {mesh}", f.mesh)));
    }
    Ok(())
}

/// Smallest box holding every cube, or `fallback` when there are none.
fn hull<'a>(cubes: impl Iterator<Item = &'a DyadicCube>, fallback: &CellBox) -> CellBox {
    cubes
        .map(CellBox::of_cube)
        .reduce(|a, b| a.union(&b))
        .unwrap_or_else(|| fallback.clone())
}

/// Adds `c · u` to `out` on the cells of `cube`.
fn deposit(out: &mut MeshFunction, cube: &DyadicCube, c: f64, u: impl Fn(&[i64]) -> f64) {
    for cell in cube.cells() {
        if let Some(i) = out.cells.index(&cell) {
            out.values[i] += c * u(&cell);
        }
    }
}

impl ShiftForm {
    pub fn adjoint(&self, which: u8) -> Result<ShiftForm> {
        let (a, b) = match which {
            1 => (0, 2),
            2 => (1, 2),
            _ => return Err(Error::Domain(format!("adjoint index {which} must be 1 or 2"))),
        };
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let mut s = t.slots.clone();
                s.swap(a, b);
                FormTerm { q: t.q.clone(), slots: s, alpha: t.alpha }
            })
            .collect();
        Ok(ShiftForm { mesh: self.mesh, terms })
    }

    fn input_products(&self, f: &MeshFunction, g: &MeshFunction) -> Result<Vec<f64>> {
        check_input(f, self.mesh)?;
        check_input(g, self.mesh)?;
        let (pf, pg) = (Probe::new(f), Probe::new(g));
        let mut cache_f: HashMap<&HaarIndex, f64> = HashMap::new();
        let mut cache_g: HashMap<&HaarIndex, f64> = HashMap::new();
        let mut out = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let a = match cache_f.get(&t.slots[0]) {
                Some(&v) => v,
                None => *cache_f.entry(&t.slots[0]).or_insert(pf.haar(&t.slots[0])?),
            };
            let b = match cache_g.get(&t.slots[1]) {
                Some(&v) => v,
                None => *cache_g.entry(&t.slots[1]).or_insert(pg.haar(&t.slots[1])?),
            };
            out.push(t.alpha * a * b);
        }
        Ok(out)
    }

    pub fn apply(&self, f: &MeshFunction, g: &MeshFunction) -> Result<MeshFunction> {
        let prod = self.input_products(f, g)?;
        let cells = hull(self.terms.iter().map(|t| &t.slots[2].cube), &f.cells);
        let mut out = MeshFunction::zeros(self.mesh, cells);
        for (t, c) in self.terms.iter().zip(prod) {
            if c != 0.0 {
                deposit(&mut out, &t.slots[2].cube, c, |cell| t.slots[2].value(cell));
            }
        }
        Ok(out)
    }

    pub fn value(&self, f: &MeshFunction, g: &MeshFunction, h: &MeshFunction) -> Result<f64> {
        check_input(h, self.mesh)?;
        let prod = self.input_products(f, g)?;
        let ph = Probe::new(h);
        let c: Vec<f64> = self
            .terms
            .par_iter()
            .map(|t| ph.haar(&t.slots[2]))
            .collect::<Result<_>>()?;
        Ok(prod.iter().zip(c).map(|(a, b)| a * b).sum())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flavor {
    Direct,
    Adjoint1,
    Adjoint2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParaCoeff {
    pub k: HaarIndex,
    pub alpha: f64,
}

/// `Π_α(f,g) = Σ_K α_K ⟨f⟩_K ⟨g⟩_K h_K` and its adjoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParaproductSpec {
    pub grid: DyadicGrid,
    pub coeffs: Vec<ParaCoeff>,
    pub flavor: Flavor,
}

/// `sup_{K₀} |K₀|^{-1} Σ_{K ⊆ K₀} |α_K|²`, exhaustive over every cube that
/// contains a coefficient cube.
pub fn carleson_constant(grid: &DyadicGrid, coeffs: &[ParaCoeff]) -> Result<f64> {
    let mut mass: HashMap<DyadicCube, f64> = HashMap::new();
    for c in coeffs {
        let a2 = c.alpha * c.alpha;
        let mut q = c.k.cube.clone();
        loop {
            *mass.entry(q.clone()).or_insert(0.0) += a2;
            if q.level == grid.coarsest_level() {
                break;
            }
            q = grid.ancestor(&q, 1)?;
        }
    }
    Ok(mass.iter().map(|(q, m)| m / q.volume()).fold(0.0, f64::max))
}

impl ParaproductSpec {
    pub fn new(grid: DyadicGrid, coeffs: Vec<ParaCoeff>, flavor: Flavor) -> Result<Self> {
        let spec = ParaproductSpec { grid, coeffs, flavor };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.coeffs {
            if !self.grid.contains_cube(&c.k.cube) {
                return Err(Error::misaligned(&c.k.cube));
            }
            if !c.k.is_cancellative() {
                return Err(Error::Precondition(format!("paraproduct Haar function on {} must be cancellative", c.k.cube)));
            }
            check_resolvable(&c.k, self.grid.mesh)?;
            if !c.alpha.is_finite() {
                return Err(Error::Normalization { what: format!("paraproduct coefficient on {}", c.k.cube), ratio: f64::INFINITY });
            }
        }
        let ratio = carleson_constant(&self.grid, &self.coeffs)?;
        if ratio > 1.0 + NORM_SLACK {
            return Err(Error::Normalization { what: "paraproduct Carleson sequence".into(), ratio });
        }
        Ok(())
    }

    pub fn with_flavor(&self, flavor: Flavor) -> ParaproductSpec {
        ParaproductSpec { flavor, ..self.clone() }
    }

    /// Slot holding the Haar function; the other two slots see averages.
    fn haar_slot(&self) -> usize {
        match self.flavor {
            Flavor::Direct => 2,
            Flavor::Adjoint1 => 0,
            Flavor::Adjoint2 => 1,
        }
    }

    fn slot_value(&self, slot: usize, p: &Probe, c: &ParaCoeff) -> Result<f64> {
        if slot == self.haar_slot() {
            p.haar(&c.k)
        } else {
            Ok(p.average(&c.k.cube))
        }
    }

    pub fn apply(&self, f: &MeshFunction, g: &MeshFunction) -> Result<MeshFunction> {
        let mesh = self.grid.mesh;
        check_input(f, mesh)?;
        check_input(g, mesh)?;
        let (pf, pg) = (Probe::new(f), Probe::new(g));
        let cells = hull(self.coeffs.iter().map(|c| &c.k.cube), &f.cells);
        let mut out = MeshFunction::zeros(mesh, cells);
        let haar_out = self.haar_slot() == 2;
        for c in &self.coeffs {
            let a = c.alpha * self.slot_value(0, &pf, c)? * self.slot_value(1, &pg, c)?;
            if a == 0.0 {
                continue;
            }
            if haar_out {
                deposit(&mut out, &c.k.cube, a, |cell| c.k.value(cell));
            } else {
                // pairing against h means averaging it over K
                deposit(&mut out, &c.k.cube, a / c.k.cube.volume(), |_| 1.0);
            }
        }
        Ok(out)
    }

    pub fn form_value(&self, f: &MeshFunction, g: &MeshFunction, h: &MeshFunction) -> Result<f64> {
        let mesh = self.grid.mesh;
        for u in [f, g, h] {
            check_input(u, mesh)?;
        }
        let probes = [Probe::new(f), Probe::new(g), Probe::new(h)];
        let mut s = 0.0;
        for c in &self.coeffs {
            let mut t = c.alpha;
            for (slot, p) in probes.iter().enumerate() {
                t *= self.slot_value(slot, p, c)?;
            }
            s += t;
        }
        Ok(s)
    }
}

/// A bilinear dyadic model that the norm harness can probe.
pub trait BilinearModel: Sync {
    fn mesh(&self) -> u32;
    /// Box carrying every cube the model reads or writes.
    fn window(&self) -> Option<CellBox>;
    fn apply(&self, f: &MeshFunction, g: &MeshFunction) -> Result<MeshFunction>;
}

impl BilinearModel for ShiftForm {
    fn mesh(&self) -> u32 {
        self.mesh
    }
    fn window(&self) -> Option<CellBox> {
        self.terms.iter().map(|t| CellBox::of_cube(&t.q)).reduce(|a, b| a.union(&b))
    }
    fn apply(&self, f: &MeshFunction, g: &MeshFunction) -> Result<MeshFunction> {
        ShiftForm::apply(self, f, g)
    }
}

impl BilinearModel for ShiftSpec {
    fn mesh(&self) -> u32 {
        self.grid.mesh
    }
    fn window(&self) -> Option<CellBox> {
        self.coeffs.iter().map(|c| CellBox::of_cube(&c.q)).reduce(|a, b| a.union(&b))
    }
    fn apply(&self, f: &MeshFunction, g: &MeshFunction) -> Result<MeshFunction> {
        ShiftSpec::apply(self, f, g)
    }
}

impl BilinearModel for ParaproductSpec {
    fn mesh(&self) -> u32 {
        self.grid.mesh
    }
    fn window(&self) -> Option<CellBox> {
        self.coeffs.iter().map(|c| CellBox::of_cube(&c.k.cube)).reduce(|a, b| a.union(&b))
    }
    fn apply(&self, f: &MeshFunction, g: &MeshFunction) -> Result<MeshFunction> {
        ParaproductSpec::apply(self, f, g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub p: f64,
    pub q: f64,
    pub r: f64,
    pub trials: usize,
    pub max_ratio: f64,
    pub mean_ratio: f64,
    pub argmax_trial: usize,
}

/// `‖op(f,g)‖_r / (‖f‖_p ‖g‖_q)` with `1/r = 1/p + 1/q`; zero when an input vanishes.
pub fn norm_ratio(op: &dyn BilinearModel, f: &MeshFunction, g: &MeshFunction, p: f64, q: f64) -> Result<f64> {
    let r = p * q / (p + q);
    let num = op.apply(f, g)?.lp_norm(Exponent::Finite(r))?;
    let den = f.lp_norm(Exponent::Finite(p))? * g.lp_norm(Exponent::Finite(q))?;
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

/// Random test function on `window`: half the time a Haar polynomial with
/// coefficients uniform in `[−1,1]` at levels up to `L−2`, otherwise a sum
/// of at most eight scaled indicators of grid cubes.
pub fn random_test_function<R: Rng>(rng: &mut R, grid: &DyadicGrid, window: &CellBox) -> MeshFunction {
    let mesh = grid.mesh;
    let n = grid.n;
    let top = (0..n)
        .map(|d| grid.mesh as i32 - (63 - (window.shape[d].max(1) as u64).leading_zeros() as i32))
        .max()
        .unwrap()
        .max(grid.coarsest_level());
    let random_cell = |rng: &mut R| -> Vec<i64> { (0..n).map(|d| window.origin[d] + rng.gen_range(0..window.shape[d])).collect() };
    let mut f = MeshFunction::zeros(mesh, window.clone());
    if rng.gen_bool(0.5) {
        let finest = (mesh as i32 - 2).max(top);
        let terms = rng.gen_range(1..=16);
        for _ in 0..terms {
            let level = rng.gen_range(top..=finest).min(mesh as i32 - 1);
            let cell = random_cell(rng);
            let cube = grid.cube_containing(&cell, level);
            let all = HaarIndex::all_cancellative(&cube);
            let idx = &all[rng.gen_range(0..all.len())];
            let a: f64 = rng.gen_range(-1.0..=1.0);
            deposit(&mut f, &cube, a, |c| idx.value(c));
        }
    } else {
        let terms = rng.gen_range(1..=8);
        for _ in 0..terms {
            let level = rng.gen_range(top..=mesh as i32);
            let cell = random_cell(rng);
            let cube = grid.cube_containing(&cell, level);
            let a: f64 = rng.gen_range(-1.0..=1.0);
            deposit(&mut f, &cube, a, |_| 1.0);
        }
    }
    f
}

/// Largest and mean empirical ratio over `trials` random pairs.
pub fn norm_harness(
    op: &dyn BilinearModel,
    grid: &DyadicGrid,
    p: f64,
    q: f64,
    trials: usize,
    seed: u64,
) -> Result<NormReport> {
    if !(p > 1.0 && p.is_finite() && q > 1.0 && q.is_finite()) {
        return Err(Error::Domain(format!("exponents ({p}, {q}) must lie in (1, ∞)")));
    }
    let r = p * q / (p + q);
    let Some(window) = op.window() else {
        return Ok(NormReport { p, q, r, trials, max_ratio: 0.0, mean_ratio: 0.0, argmax_trial: 0 });
    };
    let ratios: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::trial(seed, t as u64);
            let f = random_test_function(&mut rng, grid, &window);
            let g = random_test_function(&mut rng, grid, &window);
            norm_ratio(op, &f, &g, p, q)
        })
        .collect::<Result<_>>()?;
    let (argmax_trial, max_ratio) = ratios
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) });
    let mean_ratio = if trials == 0 { 0.0 } else { ratios.iter().sum::<f64>() / trials as f64 };
    Ok(NormReport { p, q, r, trials, max_ratio, mean_ratio, argmax_trial })
}

/// Random admissible shift: on each top cube, up to `per_q` distinct
/// `(I,J,K)` triples with coefficients uniform up to the normalization bound.
pub fn random_shift<R: Rng>(
    rng: &mut R,
    grid: &DyadicGrid,
    tops: &[DyadicCube],
    (i, j, k): (u32, u32, u32),
    mode: HaarMode,
    per_q: usize,
) -> Result<ShiftSpec> {
    let descendants = |q: &DyadicCube, step: u32| -> Vec<DyadicCube> {
        let lvl = q.level + step as i32;
        let hi: Vec<i64> = (0..q.dim()).map(|d| q.hi(d)).collect();
        grid.cubes_meeting(lvl, &q.corner, &hi)
    };
    let mut coeffs = Vec::new();
    for q in tops {
        let (is, js, ks) = (descendants(q, i), descendants(q, j), descendants(q, k));
        let total = is.len() * js.len() * ks.len();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..per_q.min(total) {
            let pick = loop {
                let t = (rng.gen_range(0..is.len()), rng.gen_range(0..js.len()), rng.gen_range(0..ks.len()));
                if seen.insert(t) {
                    break t;
                }
            };
            let (ci, cj, ck) = (is[pick.0].clone(), js[pick.1].clone(), ks[pick.2].clone());
            let (hi, hj) = match mode {
                HaarMode::HH => (HaarIndex::cancellative(ci), HaarIndex::cancellative(cj)),
                HaarMode::H0H => (HaarIndex::noncancellative(ci), HaarIndex::cancellative(cj)),
                HaarMode::HH0 => (HaarIndex::cancellative(ci), HaarIndex::noncancellative(cj)),
            };
            let mut c = ShiftCoeff { q: q.clone(), i: hi, j: hj, k: HaarIndex::cancellative(ck), alpha: 0.0 };
            c.alpha = rng.gen_range(-1.0..=1.0) * c.bound();
            coeffs.push(c);
        }
    }
    ShiftSpec::new(i, j, k, grid.clone(), coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const L: u32 = 8;

    fn grid() -> DyadicGrid {
        DyadicGrid::standard(1, L, 0)
    }

    fn cube(level: i32, pos: i64) -> DyadicCube {
        DyadicCube::new(level, vec![pos << (L as i32 - level)], L)
    }

    fn unit_box() -> CellBox {
        CellBox::unit(1, L)
    }

    fn single(alpha_frac: f64) -> ShiftSpec {
        let q = cube(1, 0);
        let mut c = ShiftCoeff {
            q: q.clone(),
            i: HaarIndex::cancellative(cube(2, 1)),
            j: HaarIndex::noncancellative(cube(3, 0)),
            k: HaarIndex::cancellative(cube(3, 2)),
            alpha: 0.0,
        };
        c.alpha = alpha_frac * c.bound();
        ShiftSpec::new(1, 2, 2, grid(), vec![c]).unwrap()
    }

    fn random_fn(seed: u64) -> MeshFunction {
        let mut rng = rng::seeded(seed);
        let values = (0..unit_box().len()).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        MeshFunction::from_values(L, unit_box(), values).unwrap()
    }

    fn some_shift(seed: u64, mode: HaarMode) -> ShiftSpec {
        let mut rng = rng::seeded(seed);
        let tops: Vec<DyadicCube> = (0..4).map(|p| cube(2, p)).collect();
        random_shift(&mut rng, &grid(), &tops, (1, 2, 3), mode, 12).unwrap()
    }

    #[test]
    fn zero_shift_is_zero() {
        let s = ShiftSpec::new(0, 1, 1, grid(), vec![]).unwrap();
        let out = s.apply(&random_fn(1), &random_fn(2)).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_coefficient_collapses() {
        let s = single(1.0);
        let c = &s.coeffs[0];
        let v = s.form_value(&c.i.to_mesh(), &c.j.to_mesh(), &c.k.to_mesh()).unwrap();
        assert!((v - c.bound()).abs() < 1e-12 * c.bound());
        // |I|^{1/2}|J|^{1/2}|K|^{1/2}/|Q|^2 = (1/4 * 1/8 * 1/8)^{1/2} / (1/4)
        assert!((c.bound() - 4.0 * (1.0f64 / 256.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn normalization_gate() {
        let mut s = single(1.0);
        s.coeffs[0].alpha *= 1.01;
        match s.validate() {
            Err(Error::Normalization { ratio, .. }) => assert!((ratio - 1.01).abs() < 1e-9),
            other => panic!("expected a normalization error, got {other:?}"),
        }
    }

    #[test]
    fn geometry_and_resolution_gates() {
        let mut s = single(0.5);
        s.coeffs[0].k = HaarIndex::cancellative(cube(3, 6));
        assert!(matches!(s.validate(), Err(Error::Precondition(_))));
        let q = cube(L as i32 - 2, 0);
        let fine = DyadicCube::new(L as i32, vec![0], L);
        let c = ShiftCoeff {
            q: q.clone(),
            i: HaarIndex::cancellative(fine.clone()),
            j: HaarIndex::cancellative(fine.clone()),
            k: HaarIndex::cancellative(fine),
            alpha: 0.0,
        };
        assert!(matches!(ShiftSpec::new(2, 2, 2, grid(), vec![c]), Err(Error::Resolution(_))));
    }

    #[test]
    fn form_matches_apply() {
        for (seed, mode) in [(3, HaarMode::HH), (4, HaarMode::H0H), (5, HaarMode::HH0)] {
            let s = some_shift(seed, mode);
            let (f, g, h) = (random_fn(seed * 10), random_fn(seed * 10 + 1), random_fn(seed * 10 + 2));
            let a = s.apply(&f, &g).unwrap().inner(&h).unwrap();
            let b = s.form_value(&f, &g, &h).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn pointwise_bound() {
        for (seed, mode) in [(6, HaarMode::HH), (7, HaarMode::H0H), (8, HaarMode::HH0)] {
            let s = some_shift(seed, mode);
            let (f, g) = (random_fn(seed + 100), random_fn(seed + 200));
            for q in s.top_cubes() {
                let a = s.block(&q).apply(&f, &g).unwrap();
                let bound = f.abs().average(&q).unwrap() * g.abs().average(&q).unwrap();
                for (i, v) in a.values.iter().enumerate() {
                    let cell = a.cells.cell(i);
                    let cap = if q.contains_cell(&cell) { bound } else { 0.0 };
                    assert!(v.abs() <= cap * (1.0 + 1e-12) + 1e-15);
                }
            }
        }
    }

    #[test]
    fn adjoint_identities() {
        let s = some_shift(9, HaarMode::HH0);
        let (f, g, h) = (random_fn(91), random_fn(92), random_fn(93));
        let v = s.form_value(&f, &g, &h).unwrap();
        let a1 = s.adjoint(1).unwrap();
        let a2 = s.adjoint(2).unwrap();
        assert!((a1.apply(&h, &g).unwrap().inner(&f).unwrap() - v).abs() < 1e-12);
        assert!((a2.apply(&f, &h).unwrap().inner(&g).unwrap() - v).abs() < 1e-12);
        assert_eq!(a1.adjoint(1).unwrap(), s.form());
        assert_eq!(a2.adjoint(2).unwrap(), s.form());
        assert!(s.adjoint(3).is_err());
    }

    #[test]
    fn adjoint_of_single_term() {
        let s = single(1.0);
        let a = s.adjoint(1).unwrap();
        assert_eq!(a.terms.len(), 1);
        assert_eq!(a.terms[0].alpha.abs(), s.coeffs[0].alpha.abs());
        assert_eq!(a.terms[0].slots[0], s.coeffs[0].k);
        assert_eq!(a.terms[0].slots[2], s.coeffs[0].i);
    }

    fn unit_mass(k0: &DyadicCube) -> ParaproductSpec {
        ParaproductSpec::new(grid(), vec![ParaCoeff { k: HaarIndex::cancellative(k0.clone()), alpha: 1.0 }], Flavor::Direct)
            .unwrap()
    }

    #[test]
    fn paraproduct_unit_mass() {
        let k0 = cube(0, 0);
        let p = unit_mass(&k0);
        let one = MeshFunction::from_cells(L, unit_box(), |_| 1.0);
        let hk = HaarIndex::cancellative(k0).to_mesh();
        assert!((p.apply(&one, &one).unwrap().inner(&hk).unwrap() - 1.0).abs() < 1e-12);
        assert!((p.form_value(&one, &one, &hk).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn paraproduct_sees_averages_only() {
        let p = unit_mass(&cube(0, 0));
        let f = HaarIndex::cancellative(cube(1, 1)).to_mesh().on_box(unit_box());
        let out = p.apply(&f, &random_fn(11)).unwrap();
        assert!(out.values.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn paraproduct_adjoints() {
        let coeffs: Vec<ParaCoeff> = (0..8)
            .map(|p| ParaCoeff { k: HaarIndex::cancellative(cube(3, p)), alpha: 0.3 * ((p as f64) - 3.5) / 3.5 })
            .collect();
        let p = ParaproductSpec::new(grid(), coeffs, Flavor::Direct).unwrap();
        let (f, g, h) = (random_fn(21), random_fn(22), random_fn(23));
        let v = p.form_value(&f, &g, &h).unwrap();
        let a1 = p.with_flavor(Flavor::Adjoint1).apply(&h, &g).unwrap().inner(&f).unwrap();
        let a2 = p.with_flavor(Flavor::Adjoint2).apply(&f, &h).unwrap().inner(&g).unwrap();
        assert!((a1 - v).abs() < 1e-12 && (a2 - v).abs() < 1e-12);
    }

    #[test]
    fn carleson_gate() {
        let k0 = cube(2, 1);
        let levels = 4;
        let family = |c: f64| -> Vec<ParaCoeff> {
            (0..levels)
                .flat_map(|m| {
                    let lvl = k0.level + m;
                    let hi = [k0.hi(0)];
                    grid().cubes_meeting(lvl, &k0.corner, &hi)
                })
                .map(|k| {
                    let alpha = c * k.volume().sqrt();
                    ParaCoeff { k: HaarIndex::cancellative(k), alpha }
                })
                .collect()
        };
        // α_K = c|K|^{1/2} and Σ|K| = |K₀| per level, so the constant is c²·levels
        let sup = carleson_constant(&grid(), &family(0.3)).unwrap();
        assert!((sup - 0.09 * levels as f64).abs() < 1e-12);
        assert!(ParaproductSpec::new(grid(), family(0.5), Flavor::Direct).is_ok());
        assert!(matches!(
            ParaproductSpec::new(grid(), family(0.51), Flavor::Direct),
            Err(Error::Normalization { .. })
        ));
    }

    #[test]
    fn harness_zero_operator() {
        let s = ShiftSpec::new(0, 1, 1, grid(), vec![]).unwrap();
        let rep = norm_harness(&s, &grid(), 4.0, 4.0, 20, 1).unwrap();
        assert_eq!(rep.max_ratio, 0.0);
        assert!(norm_harness(&s, &grid(), 1.0, 4.0, 1, 1).is_err());
    }

    #[test]
    fn harness_single_coefficient_bounded() {
        let s = single(1.0);
        let rep = norm_harness(&s, &grid(), 4.0, 4.0, 1000, 7).unwrap();
        assert!(rep.max_ratio > 0.0 && rep.max_ratio <= 1.0, "{rep:?}");
        assert_eq!(rep.r, 2.0);
    }

    #[test]
    fn harness_homogeneous() {
        let s = some_shift(12, HaarMode::H0H);
        let (f, g) = (random_fn(31), random_fn(32));
        let a = norm_ratio(&s, &f, &g, 4.0, 4.0).unwrap();
        let b = norm_ratio(&s, &f.scale(2.0), &g, 4.0, 4.0).unwrap();
        assert!((a - b).abs() < 1e-12 * a.max(1.0));
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let s = some_shift(13, HaarMode::HH);
        let back: ShiftSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        let p = ParaproductSpec::new(grid(), vec![ParaCoeff { k: HaarIndex::cancellative(cube(2, 1)), alpha: 0.1 / 3.0 }], Flavor::Adjoint2).unwrap();
        let back: ParaproductSpec = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn trilinear_in_f(seed in 0u64..1000, a in -3.0f64..3.0) {
            let s = some_shift(seed, HaarMode::HH0);
            let (f1, f2, g, h) = (random_fn(seed + 1), random_fn(seed + 2), random_fn(seed + 3), random_fn(seed + 4));
            let lhs = s.form_value(&f1.combine(a, &f2, 1.0).unwrap(), &g, &h).unwrap();
            let rhs = a * s.form_value(&f1, &g, &h).unwrap() + s.form_value(&f2, &g, &h).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
