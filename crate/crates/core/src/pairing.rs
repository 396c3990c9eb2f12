//! Trilinear pairings `⟨T(f,g),h⟩` of truncated kernels against mesh functions.
//!
//! For a translation-invariant kernel the integral over the cell triple
//! `(a, b, c)` (output cell `a`, inputs `b`, `c`) depends only on the offsets
//! `(b−a, c−a)`, so one table of per-triple integrals serves every pairing on
//! a given mesh.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{BilinearKernel, Coverage, TruncKind, TruncationSpec};
use crate::mesh::{CellBox, MeshFunction};
use crate::quadrature::{QuadratureSpec, Rule};

/// Per-triple integrals `V(d1, d2) = ∭_{cells} K_trunc(x, y, z)` with
/// `y` in the cell `d1` to the right of the `x` cell and `z` in the cell `d2`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairingTable {
    pub mesh: u32,
    pub d1_lo: i64,
    pub d2_lo: i64,
    pub n1: usize,
    pub n2: usize,
    pub values: Vec<f64>,
}

struct Integrator<'a> {
    k: &'a BilinearKernel,
    t: &'a TruncationSpec,
    rule: Rule,
    near: usize,
    h: f64,
}

/// Length of `{x ∈ [0,1) : x+P ∈ [d1,d1+1), x+Q ∈ [d2,d2+1)}` (cell units).
#[inline]
fn overlap(p: f64, q: f64, d1: f64, d2: f64) -> f64 {
    let hi = 1f64.min(d1 + 1.0 - p).min(d2 + 1.0 - q);
    let lo = 0f64.max(d1 - p).max(d2 - q);
    (hi - lo).max(0.0)
}

fn push_in(v: &mut Vec<f64>, x: f64, lo: f64, hi: f64) {
    if x > lo && x < hi {
        v.push(x);
    }
}

fn pieces(mut cuts: Vec<f64>, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    cuts.push(lo);
    cuts.push(hi);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-13);
    cuts.windows(2).filter(|w| w[1] - w[0] > 1e-13).map(|w| (w[0], w[1])).collect()
}

impl Integrator<'_> {
    /// `|x−y|` bounds (physical) for `x ∈ [0,w)`, `y ∈ [d, d+w)` in cell units.
    fn abs_range(d: f64, w: f64, h: f64) -> (f64, f64) {
        let lo = d - w;
        let hi = d + w;
        let min = if lo < 0.0 && hi > 0.0 { 0.0 } else { lo.abs().min(hi.abs()) };
        (min * h, lo.abs().max(hi.abs()) * h)
    }

    /// Radii (cell units) where the truncation weight has a kink or jump, as
    /// `(value, is_sum)`: sharp cuts are on `max(|P|,|Q|)`, smooth ones on `|P|+|Q|`.
    fn radii(&self) -> Vec<(f64, bool)> {
        let e = self.t.eps / self.h;
        match self.t.kind {
            TruncKind::Sharp => vec![(e, false)],
            TruncKind::Smooth => vec![(0.5 * e, true), (e, true)],
            TruncKind::SmoothBand => {
                let e2 = self.t.eps2.unwrap_or(self.t.eps) / self.h;
                vec![(0.5 * e, true), (e, true), (0.5 * e2, true), (e2, true)]
            }
        }
    }

    #[inline]
    fn integrand(&self, p: f64, q: f64, weighted: bool) -> f64 {
        let (y, z) = (p * self.h, q * self.h);
        let w = if weighted { self.t.weight(0.0, y, z) } else { 1.0 };
        if w == 0.0 {
            0.0
        } else {
            w * self.k.eval(0.0, y, z)
        }
    }

    fn classify(&self, d1: f64, d2: f64, w: f64) -> Coverage {
        let a = Self::abs_range(d1, w, self.h);
        let b = Self::abs_range(d2, w, self.h);
        self.t.coverage(a, b)
    }

    /// `∬ F(P,Q) ω(P,Q) dP dQ` with `P = y−x`, `Q = z−x`, split at every line where
    /// the overlap density or the truncated kernel loses smoothness.
    fn cell(&self, d1: i64, d2: i64) -> Result<f64> {
        let cov = self.classify(d1 as f64, d2 as f64, 1.0);
        match cov {
            Coverage::Excluded => return Ok(0.0),
            Coverage::Cut if self.near < 2 => {
                return Err(Error::QuadratureInfeasible(format!(
                    "sharp truncation at ε = {} cuts cell triple ({d1}, {d2}); raise near_factor",
                    self.t.eps
                )))
            }
            _ => {}
        }
        let weighted = cov != Coverage::Full;
        let (f1, f2) = (d1 as f64, d2 as f64);
        let mut radii = if weighted { self.radii() } else { vec![] };
        // sum radii outside the box's range of |P|+|Q| only add needless panels
        let (sa, sb) = (Self::abs_range(f1, 1.0, self.h), Self::abs_range(f2, 1.0, self.h));
        let (slo, shi) = ((sa.0 + sb.0) / self.h, (sa.1 + sb.1) / self.h);
        radii.retain(|&(r, sum)| !sum || (slo..=shi).contains(&r));
        let (plo, phi) = (f1 - 1.0, f1 + 1.0);
        let (qlo, qhi) = (f2 - 1.0, f2 + 1.0);
        let qconst: Vec<f64> = {
            let mut v = vec![f2, 0.0];
            for &(r, sum) in &radii {
                if !sum {
                    v.push(r);
                    v.push(-r);
                }
            }
            v
        };
        let mut pc = vec![f1, 0.0];
        for &(r, sum) in &radii {
            pc.push(r);
            pc.push(-r);
            if sum {
                for b in [qlo, f2, qhi, 0.0] {
                    pc.extend([r - b, b - r, r + b, -r - b]);
                }
            }
        }
        for j in [-1.0, 0.0, 1.0] {
            let k = f2 - f1 + j;
            for b in qconst.iter().chain([qlo, qhi].iter()) {
                pc.push(b - k);
            }
            for &(r, sum) in &radii {
                if sum {
                    pc.extend([(r - k) / 2.0, (-r - k) / 2.0, (r + k) / 2.0, (-r + k) / 2.0]);
                }
            }
        }
        let mut pcuts = Vec::new();
        for x in pc {
            push_in(&mut pcuts, x, plo, phi);
        }
        let m = if weighted || (f1.abs() + f2.abs()) < self.near as f64 { self.near.max(1) } else { 1 };
        let rule = &self.rule;
        let mut total = 0.0;
        for (a, b) in pieces(pcuts, plo, phi) {
            let hp = (b - a) / m as f64;
            for sp in 0..m {
                let a0 = a + sp as f64 * hp;
                for (u, wu) in rule.nodes.iter().zip(&rule.weights) {
                    let p = a0 + hp * u;
                    let mut qc = Vec::new();
                    for x in &qconst {
                        push_in(&mut qc, *x, qlo, qhi);
                    }
                    for j in [-1.0, 0.0, 1.0] {
                        push_in(&mut qc, p - f1 + f2 + j, qlo, qhi);
                    }
                    for &(r, sum) in &radii {
                        if sum && r > p.abs() {
                            push_in(&mut qc, r - p.abs(), qlo, qhi);
                            push_in(&mut qc, p.abs() - r, qlo, qhi);
                        }
                    }
                    let mut inner = 0.0;
                    for (c, d) in pieces(qc, qlo, qhi) {
                        let hq = (d - c) / m as f64;
                        for sq in 0..m {
                            let c0 = c + sq as f64 * hq;
                            let mut s = 0.0;
                            for (v, wv) in rule.nodes.iter().zip(&rule.weights) {
                                let q = c0 + hq * v;
                                let om = overlap(p, q, f1, f2);
                                if om > 0.0 {
                                    s += wv * om * self.integrand(p, q, weighted);
                                }
                            }
                            inner += s * hq;
                        }
                    }
                    total += wu * inner * hp;
                }
            }
        }
        Ok(total * self.h.powi(3))
    }
}

impl PairingTable {
    /// Table for offsets `d1 ∈ [d1.0, d1.1]`, `d2 ∈ [d2.0, d2.1]`.
    pub fn build(
        k: &BilinearKernel,
        t: &TruncationSpec,
        quad: &QuadratureSpec,
        mesh: u32,
        d1: (i64, i64),
        d2: (i64, i64),
    ) -> Result<Self> {
        t.validate()?;
        if quad.order == 0 {
            return Err(Error::Domain("quadrature order must be positive".into()));
        }
        let h = (-(mesh as f64)).exp2();
        if t.kind == TruncKind::Sharp && t.eps < 2.0 * h * (1.0 - 1e-12) {
            return Err(Error::Resolution(format!("sharp ε = {} below two mesh cells", t.eps)));
        }
        let integ = Integrator { k, t, rule: Rule::gauss(quad.order), near: quad.near_factor, h };
        let n1 = (d1.1 - d1.0 + 1).max(0) as usize;
        let n2 = (d2.1 - d2.0 + 1).max(0) as usize;
        let values = (0..n1 * n2)
            .into_par_iter()
            .map(|i| integ.cell(d1.0 + (i / n2) as i64, d2.0 + (i % n2) as i64))
            .collect::<Result<Vec<f64>>>()?;
        Ok(PairingTable { mesh, d1_lo: d1.0, d2_lo: d2.0, n1, n2, values })
    }

    /// Table covering every triple `(x ∈ out, y ∈ b1, z ∈ b2)` of three cell boxes.
    pub fn for_boxes(
        k: &BilinearKernel,
        t: &TruncationSpec,
        quad: &QuadratureSpec,
        mesh: u32,
        out: &CellBox,
        b1: &CellBox,
        b2: &CellBox,
    ) -> Result<Self> {
        let d1 = (b1.origin[0] - (out.hi(0) - 1), b1.hi(0) - 1 - out.origin[0]);
        let d2 = (b2.origin[0] - (out.hi(0) - 1), b2.hi(0) - 1 - out.origin[0]);
        Self::build(k, t, quad, mesh, d1, d2)
    }

    #[inline]
    pub fn get(&self, d1: i64, d2: i64) -> f64 {
        let i = (d1 - self.d1_lo) as usize;
        let j = (d2 - self.d2_lo) as usize;
        debug_assert!(i < self.n1 && j < self.n2);
        self.values[i * self.n2 + j]
    }

    pub fn covers(&self, d1: (i64, i64), d2: (i64, i64)) -> bool {
        d1.0 >= self.d1_lo
            && d2.0 >= self.d2_lo
            && d1.1 < self.d1_lo + self.n1 as i64
            && d2.1 < self.d2_lo + self.n2 as i64
    }

    /// Cellwise difference of two tables over the same offsets.
    pub fn minus(&self, other: &PairingTable) -> Result<PairingTable> {
        if self.d1_lo != other.d1_lo || self.d2_lo != other.d2_lo || self.n1 != other.n1 || self.n2 != other.n2 {
            return Err(Error::MeshMismatch("pairing tables cover different offsets".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(PairingTable { values, ..self.clone() })
    }

    /// `⟨T(f,g),h⟩` using the table.
    pub fn pair(&self, f: &MeshFunction, g: &MeshFunction, h: &MeshFunction) -> Result<f64> {
        check_1d(&[f, g, h], self.mesh)?;
        let need1 = (f.cells.origin[0] - (h.cells.hi(0) - 1), f.cells.hi(0) - 1 - h.cells.origin[0]);
        let need2 = (g.cells.origin[0] - (h.cells.hi(0) - 1), g.cells.hi(0) - 1 - h.cells.origin[0]);
        if !self.covers(need1, need2) {
            return Err(Error::MeshMismatch("pairing table does not cover the supports".into()));
        }
        let fnz: Vec<(i64, f64)> = nonzero(f);
        let gnz: Vec<(i64, f64)> = nonzero(g);
        let parts: Vec<f64> = nonzero(h)
            .into_par_iter()
            .map(|(a, ha)| {
                let mut s = 0.0;
                for &(b, fb) in &fnz {
                    let mut sc = 0.0;
                    for &(c, gc) in &gnz {
                        sc += self.get(b - a, c - a) * gc;
                    }
                    s += fb * sc;
                }
                ha * s
            })
            .collect();
        Ok(parts.iter().sum::<f64>())
    }

    /// Cell averages of `T(f,g)` on `out`.
    pub fn apply(&self, f: &MeshFunction, g: &MeshFunction, out: &CellBox) -> Result<MeshFunction> {
        check_1d(&[f, g], self.mesh)?;
        let need1 = (f.cells.origin[0] - (out.hi(0) - 1), f.cells.hi(0) - 1 - out.origin[0]);
        let need2 = (g.cells.origin[0] - (out.hi(0) - 1), g.cells.hi(0) - 1 - out.origin[0]);
        if !self.covers(need1, need2) {
            return Err(Error::MeshMismatch("pairing table does not cover the output box".into()));
        }
        let fnz = nonzero(f);
        let gnz = nonzero(g);
        let scale = (self.mesh as f64).exp2();
        let values = (0..out.len())
            .into_par_iter()
            .map(|i| {
                let a = out.origin[0] + i as i64;
                let mut s = 0.0;
                for &(b, fb) in &fnz {
                    let mut sc = 0.0;
                    for &(c, gc) in &gnz {
                        sc += self.get(b - a, c - a) * gc;
                    }
                    s += fb * sc;
                }
                s * scale
            })
            .collect();
        MeshFunction::from_values(self.mesh, out.clone(), values)
    }
}

fn nonzero(f: &MeshFunction) -> Vec<(i64, f64)> {
    f.values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, v)| (f.cells.origin[0] + i as i64, *v))
        .collect()
}

fn check_1d(fs: &[&MeshFunction], mesh: u32) -> Result<()> {
    for f in fs {
        if f.n != 1 {
            return Err(Error::Unsupported("kernel pairings are implemented in one dimension".into()));
        }
        if f.mesh != mesh {
            return Err(Error::MeshMismatch(format!("function on L = {}, table on L = {mesh}", f.mesh)));
        }
    }
    Ok(())
}

/// `⟨T_trunc(f,g), h⟩`.
pub fn trilinear_pairing(
    k: &BilinearKernel,
    t: &TruncationSpec,
    f: &MeshFunction,
    g: &MeshFunction,
    h: &MeshFunction,
    quad: &QuadratureSpec,
) -> Result<f64> {
    check_1d(&[f, g, h], f.mesh)?;
    let table = PairingTable::for_boxes(k, t, quad, f.mesh, &h.cells, &f.cells, &g.cells)?;
    table.pair(f, g, h)
}

/// `⟨T^{1*}(a,b),c⟩ = ⟨T(c,b),a⟩` and `⟨T^{2*}(a,b),c⟩ = ⟨T(a,c),b⟩`.
pub fn adjoint_pairing(
    which: u8,
    k: &BilinearKernel,
    t: &TruncationSpec,
    a: &MeshFunction,
    b: &MeshFunction,
    c: &MeshFunction,
    quad: &QuadratureSpec,
) -> Result<f64> {
    match which {
        1 => trilinear_pairing(k, t, c, b, a, quad),
        2 => trilinear_pairing(k, t, a, c, b, quad),
        _ => Err(Error::Domain(format!("adjoint index {which} must be 1 or 2"))),
    }
}

/// `max_I |⟨T(1_I,1_I),1_I⟩| / |I|`.
pub fn wbp_constant(
    k: &BilinearKernel,
    t: &TruncationSpec,
    cubes: &[crate::dyadic::DyadicCube],
    quad: &QuadratureSpec,
) -> Result<f64> {
    if cubes.is_empty() {
        return Err(Error::Precondition("no cubes supplied".into()));
    }
    let mut best: f64 = 0.0;
    for q in cubes {
        let one = MeshFunction::indicator(q.mesh, CellBox::of_cube(q), q);
        let v = trilinear_pairing(k, t, &one, &one, &one, quad)?;
        best = best.max(v.abs() / q.volume());
    }
    Ok(best)
}

/// Cellwise `|T_ε(f,g) − T^φ_ε(f,g)|` (cell averages) on the union box of `f`, `g`
/// widened by `ε`.
pub fn sharp_smooth_gap(
    k: &BilinearKernel,
    eps: f64,
    f: &MeshFunction,
    g: &MeshFunction,
    quad: &QuadratureSpec,
) -> Result<MeshFunction> {
    check_1d(&[f, g], f.mesh)?;
    let pad = (eps / f.cell_size()).ceil() as i64 + 1;
    let u = f.cells.union(&g.cells);
    let out = CellBox::new(vec![u.origin[0] - pad], vec![u.shape[0] + 2 * pad]);
    let sharp = PairingTable::for_boxes(k, &TruncationSpec::sharp(eps), quad, f.mesh, &out, &f.cells, &g.cells)?;
    let smooth = PairingTable::for_boxes(k, &TruncationSpec::smooth(eps), quad, f.mesh, &out, &f.cells, &g.cells)?;
    Ok(sharp.minus(&smooth)?.apply(f, g, &out)?.abs())
}
