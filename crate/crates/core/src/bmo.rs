//! The testing functional `⟨T(1,1), φ⟩` for mean-zero `φ` supported in a cube.
//!
//! The pairing is split into `⟨T(1_{CR},1_{CR}), φ⟩` and an absolutely
//! convergent far field
//! `∭ (K(x,y,z) − K(c_R,y,z)) 1_{(CR×CR)^c}(y,z) φ(x)`, summed over the
//! square annuli `2^k CR ∖ 2^{k-1} CR` until an analytic tail bound is small.

use serde::{Deserialize, Serialize};

use crate::dyadic::DyadicCube;
use crate::error::{Error, Result};
use crate::kernel::{truncated, BilinearKernel, Roles, TruncKind, TruncationSpec};
use crate::mesh::{CellBox, MeshFunction};
use crate::pairing::trilinear_pairing;
use crate::quadrature::{QuadratureSpec, Rule};

pub const FAR_TOL: f64 = 1e-8;
const MAX_RINGS: usize = 200;
const FAR_ORDER: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BmoValue {
    pub value: f64,
    pub near: f64,
    pub far: f64,
    pub rings: usize,
    /// Bound on the discarded part of the far field.
    pub tail_bound: f64,
}

/// `⟨T^{j}(1,1), φ⟩` for `j` = direct, first or second adjoint.
pub fn bmo_pairing(
    k: &BilinearKernel,
    t: &TruncationSpec,
    roles: Roles,
    phi: &MeshFunction,
    r: &DyadicCube,
    c: f64,
    quad: &QuadratureSpec,
) -> Result<BmoValue> {
    check_test_function(phi, r)?;
    if c < 3.0 {
        return Err(Error::Precondition(format!("dilation C = {c} must be at least 3")));
    }
    let side = r.side_cells() as f64;
    let pad = 0.5 * (c - 1.0) * side;
    if (pad - pad.round()).abs() > 1e-9 {
        return Err(Error::Precondition(format!("CR is not mesh-aligned for C = {c}")));
    }
    let pad = pad.round() as i64;
    let l = r.side();
    if t.kind == TruncKind::Sharp && 0.5 * (c - 1.0) * l <= t.eps {
        return Err(Error::Precondition(format!("(C−1)ℓ(R)/2 must exceed ε = {}", t.eps)));
    }
    let cr = CellBox::new(vec![r.corner[0] - pad], vec![r.side_cells() + 2 * pad]);
    let one = MeshFunction::from_cells(phi.mesh, cr.clone(), |_| 1.0);
    let phi_r = phi.on_box(CellBox::of_cube(r));
    if phi_r.values.iter().all(|&v| v == 0.0) {
        return Ok(BmoValue { value: 0.0, near: 0.0, far: 0.0, rings: 0, tail_bound: 0.0 });
    }
    let near = match roles {
        Roles::Direct => trilinear_pairing(k, t, &one, &one, &phi_r, quad)?,
        Roles::Adjoint1 => trilinear_pairing(k, t, &phi_r, &one, &one, quad)?,
        Roles::Adjoint2 => trilinear_pairing(k, t, &one, &phi_r, &one, quad)?,
    };

    let h = phi.cell_size();
    let rule = Rule::gauss(FAR_ORDER);
    let cells: Vec<(f64, f64)> = phi_r
        .values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, v)| ((r.corner[0] + i as i64) as f64 * h, *v))
        .collect();
    let center = r.center()[0];
    let l1 = phi_r.lp_norm(crate::mesh::Exponent::Finite(1.0))?;
    let alpha = k.constants.alpha;
    let ck = k.constants.cz_norm;
    let tail = |rho: f64| ck * (0.5 * l).powf(alpha) * l1 * 8.0 * rho.powf(-alpha) / alpha;

    let kern = |x: f64, y: f64, z: f64| truncated(k, t, roles, x, y, z);
    // ∫ (K(x,y,z) − K(c,y,z)) φ(x) dx, with cells split where x meets y or z
    let x_integral = |y: f64, z: f64| {
        let kc = kern(center, y, z);
        let mut s = 0.0;
        for &(a, v) in &cells {
            let b = a + h;
            let mut cuts = vec![a, b];
            for p in [y, z] {
                if p > a && p < b {
                    cuts.push(p);
                }
            }
            cuts.sort_by(|p, q| p.partial_cmp(q).unwrap());
            for w in cuts.windows(2) {
                s += v * rule.integrate(w[0], w[1], |x| kern(x, y, z) - kc);
            }
        }
        s
    };
    let mut far = 0.0;
    let mut rho0 = 0.5 * c * l;
    let mut rings = 0;
    let inner = rule_2x(&rule);
    let single: Vec<(f64, f64)> = rule.nodes.iter().copied().zip(rule.weights.iter().copied()).collect();
    loop {
        let rho1 = 2.0 * rho0;
        let mut ring = 0.0;
        for (u0, v0) in ring_squares(rho0) {
            if u0 == v0 {
                // the square straddles y = z; integrate the two triangles separately
                let mut tri = 0.0;
                for (ps, ws) in &inner {
                    for (pw, ww) in &inner {
                        let (a, b) = (u0 + rho0 * ps, u0 + rho0 * ps * pw);
                        tri += ws * ww * ps * (x_integral(center + a, center + b) + x_integral(center + b, center + a));
                    }
                }
                ring += tri * rho0 * rho0;
                continue;
            }
            for (ua, ub) in split_at_strip(u0, u0 + rho0, 0.5 * l, h) {
                for (va, vb) in split_at_strip(v0, v0 + rho0, 0.5 * l, h) {
                    let mut sq = 0.0;
                    let pick = |w: f64| if w <= 1.000001 * h { &single } else { &inner };
                    for (pu, wu) in pick(ub - ua) {
                        let y = center + ua + (ub - ua) * pu;
                        for (pv, wv) in pick(vb - va) {
                            let z = center + va + (vb - va) * pv;
                            sq += wu * wv * x_integral(y, z);
                        }
                    }
                    ring += sq * (ub - ua) * (vb - va);
                }
            }
        }
        far += ring;
        rings += 1;
        let bound = tail(rho1);
        let value = near + far;
        let done = rho1 > 2.0 * t.inner_radius() && bound <= FAR_TOL * value.abs().max(r.volume());
        if done || rings >= MAX_RINGS {
            return Ok(BmoValue { value, near, far, rings, tail_bound: bound });
        }
        rho0 = rho1;
    }
}

/// Splits `[a,b]` at the mesh edges `−w + jh` of the strip `[−w, w]`; the
/// `x`-integral has kinks there once `y` or `z` meets the support of `φ`.
fn split_at_strip(a: f64, b: f64, w: f64, h: f64) -> Vec<(f64, f64)> {
    let mut cuts = vec![a, b];
    let n = (2.0 * w / h).round() as i64;
    for j in 0..=n {
        let p = -w + j as f64 * h;
        if p > a && p < b {
            cuts.push(p);
        }
    }
    cuts.sort_by(|p, q| p.partial_cmp(q).unwrap());
    cuts.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Composite rule with two panels on `[0,1]`.
fn rule_2x(rule: &Rule) -> Vec<(f64, f64)> {
    let mut v = Vec::new();
    for p in 0..2 {
        for (x, w) in rule.nodes.iter().zip(&rule.weights) {
            v.push((0.5 * (p as f64 + x), 0.5 * w));
        }
    }
    v
}

/// Lower-left corners (relative to the center) of the twelve squares of side
/// `ρ` tiling `[−2ρ,2ρ]² ∖ (−ρ,ρ)²`.
fn ring_squares(rho: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(12);
    for i in -2..2 {
        out.push((i as f64 * rho, -2.0 * rho));
        out.push((i as f64 * rho, rho));
    }
    for j in -1..1 {
        out.push((-2.0 * rho, j as f64 * rho));
        out.push((rho, j as f64 * rho));
    }
    out
}

fn check_test_function(phi: &MeshFunction, r: &DyadicCube) -> Result<()> {
    if phi.n != 1 || r.dim() != 1 {
        return Err(Error::Unsupported("BMO pairings are implemented in one dimension".into()));
    }
    if r.mesh != phi.mesh {
        return Err(Error::MeshMismatch("cube and test function meshes differ".into()));
    }
    let mut total = 0.0;
    let mut abs = 0.0;
    for (i, &v) in phi.values.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        if !r.contains_cell(&phi.cells.cell(i)) {
            return Err(Error::Precondition("test function is not supported in R".into()));
        }
        if v.abs() > 1.0 + 1e-12 {
            return Err(Error::Precondition("test function exceeds 1 in absolute value".into()));
        }
        total += v;
        abs += v.abs();
    }
    if total.abs() > 1e-12 * abs.max(1.0) {
        return Err(Error::Precondition("test function does not have mean zero".into()));
    }
    Ok(())
}

/// `⟨T^{j}(1,1), h_R⟩` for `R = [0, 2^{-u})`, one entry per level `u < L`.
/// Translation-invariant kernels give the same value on every cube of a level.
pub fn haar_levels(
    k: &BilinearKernel,
    t: &TruncationSpec,
    roles: Roles,
    mesh: u32,
    quad: &QuadratureSpec,
) -> Result<Vec<f64>> {
    (0..mesh as i32)
        .map(|u| {
            let r = DyadicCube::new(u, vec![0], mesh);
            let half = r.side_cells() / 2;
            let phi = MeshFunction::from_cells(mesh, CellBox::of_cube(&r), |c| if c[0] < half { 1.0 } else { -1.0 });
            Ok(bmo_pairing(k, t, roles, &phi, &r, 3.0, quad)?.value / r.volume().sqrt())
        })
        .collect()
}

/// `max_u |⟨T^{j}(1,1), φ_u⟩| / |R_u|` over the levels of [`haar_levels`],
/// `φ_u = |R_u|^{1/2} h_{R_u}`.
pub fn bmo_estimate(levels: &[f64]) -> f64 {
    levels.iter().enumerate().map(|(u, p)| p.abs() * (u as f64 / 2.0).exp2()).fold(0.0, f64::max)
}

/// `|T_ε(f,g) − T^φ_ε(f,g)| ≤ C_size ∬_{ε/2 ≤ |u|+|v| ≤ 2ε} (|u|+|v|)^{-2} = 4 ln 4 · C_size`
/// pointwise for `|f|, |g| ≤ 1`.
pub fn sharp_smooth_constant(size_constant: f64) -> f64 {
    4.0 * 4f64.ln() * size_constant
}
