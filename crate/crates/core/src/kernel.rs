//! Concrete bilinear Calderón–Zygmund kernels in one dimension and their
//! truncations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConstants {
    pub alpha: f64,
    pub cz_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    /// `Re ((x−y) + i(x−z))^{-2}`
    BeurlingRe,
    /// `Im ((x−y) + i(x−z))^{-2}`
    BeurlingIm,
    /// `((|x−y| + |x−z|) + δ₀)^{-2}`; positive, no cancellation.
    SizeOnly,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilinearKernel {
    pub kind: KernelKind,
    pub n: usize,
    pub constants: KernelConstants,
    pub delta0: f64,
}

pub const SIZE_ONLY_DELTA: f64 = 1e-3;

impl BilinearKernel {
    pub fn builtin(name: &str) -> Result<Self> {
        // Declared constants are analytic upper bounds. With s = |x−y|+|x−z| and
        // |x−x'| ≤ max(|x−y|,|x−z|)/2 the perturbed s stays ≥ s/4, and
        // |∂(w^{-2})| = 2√2|w|^{-3} with |w| ≥ s/√2, which gives 512.
        let (kind, cz_norm) = match name {
            "beurling-re" => (KernelKind::BeurlingRe, 512.0),
            "beurling-im" => (KernelKind::BeurlingIm, 512.0),
            "size-only" => (KernelKind::SizeOnly, 256.0),
            "zero" => (KernelKind::Zero, 0.0),
            other => return Err(Error::UnknownKernel(other.to_string())),
        };
        Ok(BilinearKernel { kind, n: 1, constants: KernelConstants { alpha: 1.0, cz_norm }, delta0: SIZE_ONLY_DELTA })
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            KernelKind::BeurlingRe => "beurling-re",
            KernelKind::BeurlingIm => "beurling-im",
            KernelKind::SizeOnly => "size-only",
            KernelKind::Zero => "zero",
        }
    }

    /// Depends on `(x−y, x−z)` only.
    pub fn is_translation_invariant(&self) -> bool {
        true
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64, z: f64) -> f64 {
        let a = x - y;
        let b = x - z;
        match self.kind {
            KernelKind::BeurlingRe => {
                let r2 = a * a + b * b;
                (a * a - b * b) / (r2 * r2)
            }
            KernelKind::BeurlingIm => {
                let r2 = a * a + b * b;
                -2.0 * a * b / (r2 * r2)
            }
            KernelKind::SizeOnly => {
                let s = a.abs() + b.abs() + self.delta0;
                1.0 / (s * s)
            }
            KernelKind::Zero => 0.0,
        }
    }

    /// Sampled estimate of `C_K`: the largest of the size ratio and the three
    /// Hölder ratios over `samples` random admissible tuples.
    pub fn measure_constant(&self, samples: usize, seed: u64) -> MeasuredConstant {
        let alpha = self.constants.alpha;
        let mut rng = rng::seeded(seed);
        let mut m = MeasuredConstant::default();
        for _ in 0..samples {
            let x: f64 = rng.gen_range(-1.0..1.0);
            // log-uniform distances so all scales are probed
            let dy = 10f64.powf(rng.gen_range(-3.0..1.0)) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let dz = if rng.gen_bool(0.1) {
                0.0
            } else {
                10f64.powf(rng.gen_range(-3.0..1.0)) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }
            };
            let (y, z) = (x - dy, x - dz);
            let s = dy.abs() + dz.abs();
            let big = dy.abs().max(dz.abs());
            let k = self.eval(x, y, z);
            m.size = m.size.max(k.abs() * s * s);
            let t = rng.gen_range(1e-6..=0.5) * big * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let denom = t.abs().powf(alpha) / s.powf(2.0 + alpha);
            m.holder_x = m.holder_x.max((self.eval(x + t, y, z) - k).abs() / denom);
            m.holder_y = m.holder_y.max((self.eval(x, y + t, z) - k).abs() / denom);
            m.holder_z = m.holder_z.max((self.eval(x, y, z + t) - k).abs() / denom);
        }
        m.samples = samples;
        m.cz = m.size.max(m.holder_x).max(m.holder_y).max(m.holder_z);
        m
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasuredConstant {
    pub size: f64,
    pub holder_x: f64,
    pub holder_y: f64,
    pub holder_z: f64,
    pub cz: f64,
    pub samples: usize,
}

/// Smooth cutoff `φ`: zero on `[0,1/2]`, one on `[1,∞)`, smoothstep between.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SmoothCutoff;

impl SmoothCutoff {
    pub fn default_cutoff() -> Self {
        SmoothCutoff
    }

    #[inline]
    pub fn phi(&self, t: f64) -> f64 {
        if t <= 0.5 {
            0.0
        } else if t >= 1.0 {
            1.0
        } else {
            let u = 2.0 * t - 1.0;
            u * u * (3.0 - 2.0 * u)
        }
    }

    pub fn dphi(&self, t: f64) -> f64 {
        if t <= 0.5 || t >= 1.0 {
            0.0
        } else {
            let u = 2.0 * t - 1.0;
            12.0 * u * (1.0 - u)
        }
    }

    /// `‖φ'‖_∞`.
    pub fn lipschitz(&self) -> f64 {
        3.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruncKind {
    Sharp,
    Smooth,
    SmoothBand,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationSpec {
    pub kind: TruncKind,
    pub eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps2: Option<f64>,
    #[serde(default)]
    pub phi: SmoothCutoff,
}

/// Interval of a truncation variable over a box of points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Coverage {
    /// Weight identically zero.
    Excluded,
    /// Weight identically one.
    Full,
    /// Weight smooth, not constant.
    Smooth,
    /// A jump of the weight crosses the box.
    Cut,
}

impl TruncationSpec {
    pub fn sharp(eps: f64) -> Self {
        TruncationSpec { kind: TruncKind::Sharp, eps, eps2: None, phi: SmoothCutoff }
    }

    pub fn smooth(eps: f64) -> Self {
        TruncationSpec { kind: TruncKind::Smooth, eps, eps2: None, phi: SmoothCutoff }
    }

    pub fn band(eps1: f64, eps2: f64) -> Self {
        TruncationSpec { kind: TruncKind::SmoothBand, eps: eps1, eps2: Some(eps2), phi: SmoothCutoff }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Domain(format!("ε = {} must be positive", self.eps)));
        }
        if self.kind == TruncKind::SmoothBand {
            match self.eps2 {
                Some(e2) if e2 >= self.eps => {}
                _ => return Err(Error::Domain("band truncation needs ε₂ ≥ ε₁".into())),
            }
        }
        Ok(())
    }

    /// Same truncation at scaled parameters.
    pub fn scaled(&self, factor: f64) -> Self {
        TruncationSpec { eps: self.eps * factor, eps2: self.eps2.map(|e| e * factor), ..*self }
    }

    #[inline]
    pub fn weight(&self, x: f64, y: f64, z: f64) -> f64 {
        let a = (x - y).abs();
        let b = (x - z).abs();
        match self.kind {
            TruncKind::Sharp => {
                if a.max(b) > self.eps {
                    1.0
                } else {
                    0.0
                }
            }
            TruncKind::Smooth => self.phi.phi((a + b) / self.eps),
            TruncKind::SmoothBand => {
                let s = a + b;
                self.phi.phi(s / self.eps) - self.phi.phi(s / self.eps2.unwrap_or(self.eps))
            }
        }
    }

    /// Classifies a box given bounds on `|x−y|` and `|x−z|` over it.
    pub fn coverage(&self, a: (f64, f64), b: (f64, f64)) -> Coverage {
        match self.kind {
            TruncKind::Sharp => {
                let lo = a.0.max(b.0);
                let hi = a.1.max(b.1);
                if lo > self.eps {
                    Coverage::Full
                } else if hi <= self.eps {
                    Coverage::Excluded
                } else {
                    Coverage::Cut
                }
            }
            TruncKind::Smooth => {
                let (lo, hi) = (a.0 + b.0, a.1 + b.1);
                if hi <= 0.5 * self.eps {
                    Coverage::Excluded
                } else if lo >= self.eps {
                    Coverage::Full
                } else {
                    Coverage::Smooth
                }
            }
            TruncKind::SmoothBand => {
                let e2 = self.eps2.unwrap_or(self.eps);
                let (lo, hi) = (a.0 + b.0, a.1 + b.1);
                if hi <= 0.5 * self.eps || lo >= e2 || e2 == self.eps {
                    Coverage::Excluded
                } else if lo >= self.eps && hi <= 0.5 * e2 {
                    Coverage::Full
                } else {
                    Coverage::Smooth
                }
            }
        }
    }

    /// Largest `|x−y|+|x−z|` at which the weight can differ from one; beyond
    /// this the truncated kernel equals the full kernel.
    pub fn inner_radius(&self) -> f64 {
        match self.kind {
            TruncKind::Sharp => 2.0 * self.eps,
            TruncKind::Smooth => self.eps,
            TruncKind::SmoothBand => self.eps2.unwrap_or(self.eps),
        }
    }
}

/// Which trilinear form a kernel evaluation serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Roles {
    Direct,
    /// `T^{1*}`, kernel `K(y,x,z)`.
    Adjoint1,
    /// `T^{2*}`, kernel `K(z,y,x)`.
    Adjoint2,
}

impl Roles {
    #[inline]
    pub fn permute(&self, x: f64, y: f64, z: f64) -> (f64, f64, f64) {
        match self {
            Roles::Direct => (x, y, z),
            Roles::Adjoint1 => (y, x, z),
            Roles::Adjoint2 => (z, y, x),
        }
    }
}

/// Truncated kernel `K·w` in the given roles.
#[inline]
pub fn truncated(k: &BilinearKernel, t: &TruncationSpec, roles: Roles, x: f64, y: f64, z: f64) -> f64 {
    let (x, y, z) = roles.permute(x, y, z);
    let w = t.weight(x, y, z);
    if w == 0.0 {
        0.0
    } else {
        w * k.eval(x, y, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_names() {
        assert!(BilinearKernel::builtin("beurling-re").is_ok());
        assert!(matches!(BilinearKernel::builtin("riesz"), Err(Error::UnknownKernel(_))));
    }

    #[test]
    fn beurling_values() {
        let k = BilinearKernel::builtin("beurling-re").unwrap();
        assert_eq!(k.eval(0.0, 1.0, 0.0), 1.0);
        let ki = BilinearKernel::builtin("beurling-im").unwrap();
        // w = 1 + i: w^{-2} = 1/(2i) = -i/2
        assert_eq!(ki.eval(0.0, 1.0, 0.0), 0.0);
        assert!((ki.eval(0.0, -1.0, -1.0) + 0.5).abs() < 1e-15);
        assert!((k.eval(0.0, -1.0, -1.0)).abs() < 1e-15);
    }

    #[test]
    fn beurling_size_bound() {
        let mut rng = rng::seeded(1);
        for name in ["beurling-re", "beurling-im"] {
            let k = BilinearKernel::builtin(name).unwrap();
            for _ in 0..10_000 {
                let (x, y, z): (f64, f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let s = (x - y).abs() + (x - z).abs();
                assert!(k.eval(x, y, z).abs() <= 2.0 / (s * s) * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn measured_below_declared() {
        for name in ["beurling-re", "beurling-im", "size-only"] {
            let k = BilinearKernel::builtin(name).unwrap();
            let m = k.measure_constant(100_000, 7);
            assert!(m.cz.is_finite() && m.cz > 0.0);
            assert!(m.cz <= k.constants.cz_norm, "{name}: {m:?}");
        }
        let z = BilinearKernel::builtin("zero").unwrap();
        assert_eq!(z.measure_constant(100, 1).cz, 0.0);
    }

    #[test]
    fn cutoff_examples() {
        let p = SmoothCutoff::default_cutoff();
        assert_eq!(p.phi(0.5), 0.0);
        assert_eq!(p.phi(1.0), 1.0);
        assert_eq!(p.phi(0.75), 0.5);
        let max = (0..=10_000).map(|i| p.dphi(0.5 + 0.5 * i as f64 / 10_000.0)).fold(0.0, f64::max);
        assert!((max - 3.0).abs() < 1e-6 && max <= 10.0);
        assert_eq!(p.lipschitz(), 3.0);
        // derivative is a genuine derivative
        let t = 0.63;
        assert!(((p.phi(t + 1e-7) - p.phi(t - 1e-7)) / 2e-7 - p.dphi(t)).abs() < 1e-6);
    }

    #[test]
    fn weights_and_coverage() {
        let s = TruncationSpec::sharp(0.25);
        assert_eq!(s.weight(0.0, 0.3, 0.0), 1.0);
        assert_eq!(s.weight(0.0, 0.25, 0.2), 0.0);
        assert_eq!(s.coverage((0.3, 0.4), (0.0, 0.1)), Coverage::Full);
        assert_eq!(s.coverage((0.1, 0.2), (0.0, 0.1)), Coverage::Excluded);
        assert_eq!(s.coverage((0.2, 0.3), (0.0, 0.1)), Coverage::Cut);
        let b = TruncationSpec::band(0.1, 0.1);
        assert_eq!(b.weight(0.0, 0.07, 0.0), 0.0);
        assert!(TruncationSpec::band(0.2, 0.1).validate().is_err());
        let json = serde_json::to_string(&TruncationSpec::smooth(0.125)).unwrap();
        let back: TruncationSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, TruncationSpec::smooth(0.125));
        let cfg: TruncationSpec = serde_json::from_str(r#"{"kind":"smooth","eps":0.125}"#).unwrap();
        assert_eq!(cfg, TruncationSpec::smooth(0.125));
    }

    #[test]
    fn roles_permute() {
        let k = BilinearKernel::builtin("beurling-im").unwrap();
        let t = TruncationSpec::smooth(0.01);
        let (x, y, z) = (0.1, 0.7, -0.4);
        assert_eq!(truncated(&k, &t, Roles::Adjoint1, x, y, z), truncated(&k, &t, Roles::Direct, y, x, z));
        assert_eq!(truncated(&k, &t, Roles::Adjoint2, x, y, z), truncated(&k, &t, Roles::Direct, z, y, x));
    }
}
