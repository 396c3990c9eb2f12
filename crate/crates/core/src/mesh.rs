//! Piecewise-constant functions on the finest dyadic mesh.
//!
//! A [`MeshFunction`] stores one value per mesh cell of side `2^{-L}` inside a
//! rectangular box of cells and is zero elsewhere. Averages, Haar
//! coefficients and martingale differences are exact finite sums.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dyadic::{DyadicCube, DyadicGrid};
use crate::error::{Error, Result};

/// Half-open box of mesh cells `[origin, origin + shape)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellBox {
    pub origin: Vec<i64>,
    pub shape: Vec<i64>,
}

impl CellBox {
    pub fn new(origin: Vec<i64>, shape: Vec<i64>) -> Self {
        debug_assert_eq!(origin.len(), shape.len());
        CellBox { origin, shape }
    }

    pub fn of_cube(q: &DyadicCube) -> Self {
        CellBox::new(q.corner.clone(), vec![q.side_cells(); q.dim()])
    }

    /// The unit box `[0,1)^n` at mesh level `mesh`.
    pub fn unit(n: usize, mesh: u32) -> Self {
        CellBox::new(vec![0; n], vec![1i64 << mesh; n])
    }

    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product::<i64>() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hi(&self, d: usize) -> i64 {
        self.origin[d] + self.shape[d]
    }

    pub fn contains(&self, cell: &[i64]) -> bool {
        (0..self.dim()).all(|d| self.origin[d] <= cell[d] && cell[d] < self.hi(d))
    }

    pub fn contains_box(&self, other: &CellBox) -> bool {
        (0..self.dim()).all(|d| self.origin[d] <= other.origin[d] && other.hi(d) <= self.hi(d))
    }

    pub fn index(&self, cell: &[i64]) -> Option<usize> {
        if !self.contains(cell) {
            return None;
        }
        let mut idx = 0usize;
        for d in 0..self.dim() {
            idx = idx * self.shape[d] as usize + (cell[d] - self.origin[d]) as usize;
        }
        Some(idx)
    }

    pub fn cell(&self, mut idx: usize) -> Vec<i64> {
        let n = self.dim();
        let mut c = vec![0; n];
        for d in (0..n).rev() {
            let s = self.shape[d] as usize;
            c[d] = self.origin[d] + (idx % s) as i64;
            idx /= s;
        }
        c
    }

    pub fn union(&self, other: &CellBox) -> CellBox {
        let n = self.dim();
        let lo: Vec<i64> = (0..n).map(|d| self.origin[d].min(other.origin[d])).collect();
        let shape = (0..n).map(|d| self.hi(d).max(other.hi(d)) - lo[d]).collect();
        CellBox::new(lo, shape)
    }

    /// Intersection with a cube, or `None` if they do not meet.
    pub fn meet_cube(&self, q: &DyadicCube) -> Option<CellBox> {
        let n = self.dim();
        let lo: Vec<i64> = (0..n).map(|d| self.origin[d].max(q.corner[d])).collect();
        let hi: Vec<i64> = (0..n).map(|d| self.hi(d).min(q.hi(d))).collect();
        if (0..n).any(|d| hi[d] <= lo[d]) {
            return None;
        }
        Some(CellBox::new(lo.clone(), (0..n).map(|d| hi[d] - lo[d]).collect()))
    }

    /// Smallest box covering every cube of `level` in `grid` that meets this box.
    pub fn cover(&self, grid: &DyadicGrid, level: i32) -> CellBox {
        let n = self.dim();
        let hi: Vec<i64> = (0..n).map(|d| self.hi(d)).collect();
        let a = grid.cube_containing(&self.origin, level);
        let last: Vec<i64> = hi.iter().map(|h| h - 1).collect();
        let b = grid.cube_containing(&last, level);
        let shape = (0..n).map(|d| b.hi(d) - a.corner[d]).collect();
        CellBox::new(a.corner, shape)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HaarIndex {
    pub cube: DyadicCube,
    pub eta: Vec<u8>,
}

impl HaarIndex {
    pub fn new(cube: DyadicCube, eta: Vec<u8>) -> Self {
        HaarIndex { cube, eta }
    }

    /// `h_I^0 = |I|^{-1/2} 1_I`.
    pub fn noncancellative(cube: DyadicCube) -> Self {
        let n = cube.dim();
        HaarIndex { cube, eta: vec![0; n] }
    }

    /// The cancellative index with `η = (1,…,1)`; in one dimension the only one.
    pub fn cancellative(cube: DyadicCube) -> Self {
        let n = cube.dim();
        HaarIndex { cube, eta: vec![1; n] }
    }

    pub fn is_cancellative(&self) -> bool {
        self.eta.iter().any(|&e| e != 0)
    }

    /// Every cancellative index on a cube.
    pub fn all_cancellative(cube: &DyadicCube) -> Vec<HaarIndex> {
        let n = cube.dim();
        (1..1u32 << n)
            .map(|bits| HaarIndex::new(cube.clone(), (0..n).map(|d| (bits >> d & 1) as u8).collect()))
            .collect()
    }

    /// Value of `h_I^η` on a mesh cell.
    pub fn value(&self, cell: &[i64]) -> f64 {
        let q = &self.cube;
        if !q.contains_cell(cell) {
            return 0.0;
        }
        let half = q.side_cells() / 2;
        let mut sign = 1.0;
        for d in 0..q.dim() {
            if self.eta[d] != 0 && cell[d] - q.corner[d] >= half {
                sign = -sign;
            }
        }
        sign / q.volume().sqrt()
    }

    pub fn to_mesh(&self) -> MeshFunction {
        let b = CellBox::of_cube(&self.cube);
        MeshFunction::from_cells(self.cube.mesh, b, |c| self.value(c))
    }
}

/// Exact antiderivative table for box integrals with real endpoints.
pub struct Cumulative {
    cells: CellBox,
    table: Vec<f64>,
    h: f64,
}

impl Cumulative {
    /// `∫_{[lo,hi)} f` over a real box given in physical coordinates.
    pub fn box_integral(&self, lo: &[f64], hi: &[f64]) -> f64 {
        let n = self.cells.dim();
        let mut total = 0.0;
        for bits in 0..1usize << n {
            let mut pt = vec![0.0; n];
            let mut sign = 1.0;
            for d in 0..n {
                if bits >> d & 1 == 1 {
                    pt[d] = hi[d];
                } else {
                    pt[d] = lo[d];
                    sign = -sign;
                }
            }
            total += sign * self.at(&pt);
        }
        total
    }

    fn at(&self, x: &[f64]) -> f64 {
        let n = self.cells.dim();
        let mut base = vec![0usize; n];
        let mut frac = vec![0.0; n];
        for d in 0..n {
            let t = (x[d] / self.h - self.cells.origin[d] as f64).clamp(0.0, self.cells.shape[d] as f64);
            let i = (t.floor() as usize).min(self.cells.shape[d] as usize);
            base[d] = i;
            frac[d] = t - i as f64;
        }
        let mut val = 0.0;
        for bits in 0..1usize << n {
            let mut w = 1.0;
            let mut idx = 0usize;
            for d in 0..n {
                let up = bits >> d & 1 == 1;
                let mut i = base[d] + up as usize;
                if i > self.cells.shape[d] as usize {
                    i = self.cells.shape[d] as usize;
                }
                w *= if up { frac[d] } else { 1.0 - frac[d] };
                idx = idx * (self.cells.shape[d] as usize + 1) + i;
            }
            if w != 0.0 {
                val += w * self.table[idx];
            }
        }
        val
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshFunction {
    pub n: usize,
    #[serde(rename = "L")]
    pub mesh: u32,
    #[serde(rename = "box")]
    pub cells: CellBox,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    n: usize,
    #[serde(rename = "L")]
    mesh: u32,
    #[serde(rename = "box")]
    cells: CellBox,
}

/// Exponents accepted by [`MeshFunction::lp_norm`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Exponent {
    Finite(f64),
    Infinity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaximalMode {
    Dyadic,
    Ball,
}

impl MeshFunction {
    pub fn zeros(mesh: u32, cells: CellBox) -> Self {
        let len = cells.len();
        MeshFunction { n: cells.dim(), mesh, cells, values: vec![0.0; len] }
    }

    pub fn from_values(mesh: u32, cells: CellBox, values: Vec<f64>) -> Result<Self> {
        if values.len() != cells.len() {
            return Err(Error::MeshMismatch(format!(
                "{} values for a box of {} cells",
                values.len(),
                cells.len()
            )));
        }
        Ok(MeshFunction { n: cells.dim(), mesh, cells, values })
    }

    pub fn from_cells(mesh: u32, cells: CellBox, f: impl Fn(&[i64]) -> f64) -> Self {
        let values = (0..cells.len()).map(|i| f(&cells.cell(i))).collect();
        MeshFunction { n: cells.dim(), mesh, cells, values }
    }

    /// Samples `f` at the left (lower) corner of every cell.
    pub fn sample(mesh: u32, cells: CellBox, f: impl Fn(&[f64]) -> f64) -> Self {
        let h = (-(mesh as f64)).exp2();
        Self::from_cells(mesh, cells, |c| {
            let x: Vec<f64> = c.iter().map(|&v| v as f64 * h).collect();
            f(&x)
        })
    }

    pub fn indicator(mesh: u32, cells: CellBox, q: &DyadicCube) -> Self {
        Self::from_cells(mesh, cells, |c| if q.contains_cell(c) { 1.0 } else { 0.0 })
    }

    pub fn cell_size(&self) -> f64 {
        (-(self.mesh as f64)).exp2()
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_size().powi(self.n as i32)
    }

    pub fn at(&self, cell: &[i64]) -> f64 {
        self.cells.index(cell).map_or(0.0, |i| self.values[i])
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }

    fn check_mesh(&self, other: &MeshFunction) -> Result<()> {
        if self.mesh != other.mesh || self.n != other.n {
            return Err(Error::MeshMismatch(format!(
                "(n={}, L={}) vs (n={}, L={})",
                self.n, self.mesh, other.n, other.mesh
            )));
        }
        Ok(())
    }

    fn check_cube(&self, q: &DyadicCube) -> Result<()> {
        if q.mesh != self.mesh || q.dim() != self.n || q.level > self.mesh as i32 {
            return Err(Error::misaligned(q));
        }
        Ok(())
    }

    /// Same function on another box (zero-extended or cut).
    pub fn on_box(&self, cells: CellBox) -> MeshFunction {
        Self::from_cells(self.mesh, cells, |c| self.at(c))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> MeshFunction {
        MeshFunction { values: self.values.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn scale(&self, a: f64) -> MeshFunction {
        self.map(|v| a * v)
    }

    /// `a·self + b·other` on the union of both boxes.
    pub fn combine(&self, a: f64, other: &MeshFunction, b: f64) -> Result<MeshFunction> {
        self.check_mesh(other)?;
        let cells = self.cells.union(&other.cells);
        Ok(Self::from_cells(self.mesh, cells, |c| a * self.at(c) + b * other.at(c)))
    }

    pub fn add(&self, other: &MeshFunction) -> Result<MeshFunction> {
        self.combine(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &MeshFunction) -> Result<MeshFunction> {
        self.combine(1.0, other, -1.0)
    }

    pub fn inner(&self, other: &MeshFunction) -> Result<f64> {
        self.check_mesh(other)?;
        let s: f64 = (0..self.values.len())
            .map(|i| {
                let v = self.values[i];
                if v == 0.0 {
                    0.0
                } else {
                    v * other.at(&self.cells.cell(i))
                }
            })
            .sum();
        Ok(s * self.cell_volume())
    }

    /// Largest cellwise difference, comparing on the union of boxes.
    pub fn max_abs_diff(&self, other: &MeshFunction) -> Result<f64> {
        Ok(self.sub(other)?.values.iter().fold(0.0f64, |m, v| m.max(v.abs())))
    }

    fn sum_over(&self, q: &DyadicCube, weight: impl Fn(&[i64]) -> f64) -> f64 {
        let Some(part) = self.cells.meet_cube(q) else { return 0.0 };
        (0..part.len())
            .map(|i| {
                let c = part.cell(i);
                self.at(&c) * weight(&c)
            })
            .sum()
    }

    /// `⟨f⟩_Q`, counting cells outside the box as zero.
    pub fn average(&self, q: &DyadicCube) -> Result<f64> {
        self.check_cube(q)?;
        Ok(self.sum_over(q, |_| 1.0) / q.cell_count() as f64)
    }

    /// `⟨f, h_I^η⟩`.
    pub fn haar_coeff(&self, idx: &HaarIndex) -> Result<f64> {
        self.check_cube(&idx.cube)?;
        if idx.is_cancellative() && idx.cube.level >= self.mesh as i32 {
            return Err(Error::LevelAtFinest { level: idx.cube.level });
        }
        Ok(self.sum_over(&idx.cube, |c| idx.value(c)) * self.cell_volume())
    }

    /// `Δ_I f = Σ_{I' ∈ ch(I)} (⟨f⟩_{I'} − ⟨f⟩_I) 1_{I'}`, on the box of `I`.
    pub fn martingale_diff(&self, i: &DyadicCube) -> Result<MeshFunction> {
        self.check_cube(i)?;
        let children = i.children()?;
        let parent = self.average(i)?;
        let avgs: Vec<f64> = children.iter().map(|c| self.average(c).map(|a| a - parent)).collect::<Result<_>>()?;
        Ok(Self::from_cells(self.mesh, CellBox::of_cube(i), |c| {
            let k = children.iter().position(|ch| ch.contains_cell(c)).unwrap();
            avgs[k]
        }))
    }

    /// `E_k f = Σ_{ℓ(I) = 2^{-k}} ⟨f⟩_I 1_I` over cubes of `grid` meeting the box.
    pub fn project_scale(&self, grid: &DyadicGrid, level: i32) -> Result<MeshFunction> {
        if level > self.mesh as i32 || level < grid.coarsest_level() {
            return Err(Error::Domain(format!("level {level} outside the grid scale range")));
        }
        if grid.mesh != self.mesh || grid.n != self.n {
            return Err(Error::MeshMismatch("grid and function meshes differ".into()));
        }
        let out = self.cells.cover(grid, level);
        let side = 1i64 << (self.mesh as i32 - level);
        let per_axis: Vec<i64> = out.shape.iter().map(|s| s / side).collect();
        let coarse = CellBox::new(vec![0; self.n], per_axis);
        let mut sums = vec![0.0; coarse.len()];
        for (i, &v) in self.values.iter().enumerate() {
            if v != 0.0 {
                let c = self.cells.cell(i);
                let k: Vec<i64> = (0..self.n).map(|d| (c[d] - out.origin[d]).div_euclid(side)).collect();
                sums[coarse.index(&k).unwrap()] += v;
            }
        }
        let count = side.pow(self.n as u32) as f64;
        Ok(Self::from_cells(self.mesh, out.clone(), |c| {
            let k: Vec<i64> = (0..self.n).map(|d| (c[d] - out.origin[d]).div_euclid(side)).collect();
            sums[coarse.index(&k).unwrap()] / count
        }))
    }

    pub fn abs(&self) -> MeshFunction {
        self.map(f64::abs)
    }

    /// `M_𝒟 f(x) = sup_{Q ∋ x} ⟨|f|⟩_Q` over all grid levels, on the box of `f`.
    pub fn dyadic_maximal(&self, grid: &DyadicGrid) -> Result<MeshFunction> {
        let a = self.abs();
        let mut out = MeshFunction::zeros(self.mesh, self.cells.clone());
        for level in grid.coarsest_level()..=grid.finest_level() {
            let p = a.project_scale(grid, level)?;
            for (i, v) in out.values.iter_mut().enumerate() {
                *v = v.max(p.at(&self.cells.cell(i)));
            }
        }
        Ok(out)
    }

    pub fn cumulative(&self) -> Cumulative {
        let n = self.n;
        let ext: Vec<usize> = self.cells.shape.iter().map(|&s| s as usize + 1).collect();
        let total: usize = ext.iter().product();
        let mut table = vec![0.0; total];
        let cv = self.cell_volume();
        for (i, t) in table.iter_mut().enumerate() {
            let mut rem = i;
            let mut cell = vec![0i64; n];
            let mut inside = true;
            for d in (0..n).rev() {
                let k = rem % ext[d];
                rem /= ext[d];
                if k == 0 {
                    inside = false;
                }
                cell[d] = self.cells.origin[d] + k as i64 - 1;
            }
            if inside {
                *t = self.at(&cell) * cv;
            }
        }
        // running sums axis by axis
        let mut stride = 1usize;
        for d in (0..n).rev() {
            for i in 0..total {
                if (i / stride) % ext[d] != 0 {
                    table[i] += table[i - stride];
                }
            }
            stride *= ext[d];
        }
        Cumulative { cells: self.cells.clone(), table, h: self.cell_size() }
    }

    /// `𝓜(f,g)` evaluated at cell centers of the union box.
    ///
    /// Ball mode uses ℓ^∞ balls with radii `2^{-L}, 2^{-L+1}, …` up to the box diameter.
    pub fn bilinear_maximal(
        &self,
        g: &MeshFunction,
        mode: MaximalMode,
        grid: &DyadicGrid,
    ) -> Result<MeshFunction> {
        self.check_mesh(g)?;
        let cells = self.cells.union(&g.cells);
        let (fa, ga) = (self.abs().on_box(cells.clone()), g.abs().on_box(cells.clone()));
        match mode {
            MaximalMode::Dyadic => {
                let mut out = MeshFunction::zeros(self.mesh, cells.clone());
                for level in grid.coarsest_level()..=grid.finest_level() {
                    let pf = fa.project_scale(grid, level)?;
                    let pg = ga.project_scale(grid, level)?;
                    for (i, v) in out.values.iter_mut().enumerate() {
                        let c = cells.cell(i);
                        *v = v.max(pf.at(&c) * pg.at(&c));
                    }
                }
                Ok(out)
            }
            MaximalMode::Ball => {
                let cf = fa.cumulative();
                let cg = ga.cumulative();
                let h = self.cell_size();
                let diam = cells.shape.iter().copied().max().unwrap_or(1) as f64 * h;
                let mut radii = vec![h];
                while *radii.last().unwrap() < diam {
                    radii.push(radii.last().unwrap() * 2.0);
                }
                let n = self.n;
                let values = (0..cells.len())
                    .into_par_iter()
                    .map(|i| {
                        let c = cells.cell(i);
                        let x: Vec<f64> = c.iter().map(|&v| (v as f64 + 0.5) * h).collect();
                        radii
                            .iter()
                            .map(|&r| {
                                let lo: Vec<f64> = x.iter().map(|v| v - r).collect();
                                let hi: Vec<f64> = x.iter().map(|v| v + r).collect();
                                let vol = (2.0 * r).powi(n as i32);
                                (cf.box_integral(&lo, &hi) / vol) * (cg.box_integral(&lo, &hi) / vol)
                            })
                            .fold(0.0, f64::max)
                    })
                    .collect();
                MeshFunction::from_values(self.mesh, cells, values)
            }
        }
    }

    pub fn lp_norm(&self, p: Exponent) -> Result<f64> {
        match p {
            Exponent::Infinity => Ok(self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))),
            Exponent::Finite(p) if p > 0.0 => {
                let s: f64 = self.values.iter().map(|v| v.abs().powf(p)).sum::<f64>() * self.cell_volume();
                Ok(s.powf(1.0 / p))
            }
            Exponent::Finite(p) => Err(Error::Domain(format!("exponent {p} must be positive"))),
        }
    }

    /// `(Σ_{I ∈ grid, ℓ(I) > 2^{-L}} |Δ_I f|²)^{1/2}`, on the cover by the coarsest cubes.
    pub fn square_function(&self, grid: &DyadicGrid) -> Result<MeshFunction> {
        let top = grid.coarsest_level();
        let cells = self.cells.cover(grid, top);
        let f = self.on_box(cells.clone());
        let mut acc = MeshFunction::zeros(self.mesh, cells.clone());
        let mut prev = f.project_scale(grid, top)?;
        for level in top + 1..=self.mesh as i32 {
            let next = f.project_scale(grid, level)?;
            for (i, v) in acc.values.iter_mut().enumerate() {
                let c = cells.cell(i);
                let d = next.at(&c) - prev.at(&c);
                *v += d * d;
            }
            prev = next;
        }
        Ok(acc.map(f64::sqrt))
    }

    /// Writes `<stem>.json` (header) and `<stem>.bin` (little-endian f64 values).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let header = Header { n: self.n, mesh: self.mesh, cells: self.cells.clone() };
        serde_json::to_writer_pretty(File::create(stem.with_extension("json"))?, &header)?;
        let mut w = BufWriter::new(File::create(stem.with_extension("bin"))?);
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let header: Header = serde_json::from_reader(BufReader::new(File::open(stem.with_extension("json"))?))?;
        let mut bytes = Vec::new();
        BufReader::new(File::open(stem.with_extension("bin"))?).read_to_end(&mut bytes)?;
        if bytes.len() != header.cells.len() * 8 {
            return Err(Error::MeshMismatch(format!(
                "binary holds {} bytes, header expects {} values",
                bytes.len(),
                header.cells.len()
            )));
        }
        let values = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        if header.cells.dim() != header.n {
            return Err(Error::MeshMismatch("header dimension disagrees with box".into()));
        }
        Self::from_values(header.mesh, header.cells, values)
    }

    /// CSV with the lower-left corner of each cell and its value.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut head: Vec<String> = (0..self.n).map(|d| format!("x{d}")).collect();
        head.push("value".into());
        out.write_record(&head)?;
        let h = self.cell_size();
        for (i, v) in self.values.iter().enumerate() {
            let mut rec: Vec<String> = self.cells.cell(i).iter().map(|&c| format!("{}", c as f64 * h)).collect();
            rec.push(format!("{v:e}"));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyadic::sample_grid;
    use proptest::prelude::*;

    fn c1(level: i32, x: i64, mesh: u32) -> DyadicCube {
        DyadicCube::new(level, vec![x], mesh)
    }

    fn random_fn(seed: u64, n: usize, mesh: u32) -> MeshFunction {
        use rand::Rng;
        let mut rng = crate::rng::seeded(seed);
        let cells = CellBox::unit(n, mesh);
        let values = (0..cells.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        MeshFunction::from_values(mesh, cells, values).unwrap()
    }

    /// All cubes of levels `0..mesh` in `[0,1)^n`, standard grid.
    fn all_cubes(n: usize, mesh: u32) -> Vec<DyadicCube> {
        let g = DyadicGrid::standard(n, mesh, 0);
        (0..mesh as i32).flat_map(|k| g.cubes_meeting(k, &vec![0; n], &vec![1 << mesh; n])).collect()
    }

    #[test]
    fn average_examples() {
        let l = 10;
        let one = MeshFunction::from_cells(l, CellBox::unit(1, l), |_| 1.0);
        assert_eq!(one.average(&c1(3, 128, l)).unwrap(), 1.0);
        let q = c1(1, 0, l);
        let left = MeshFunction::indicator(l, CellBox::unit(1, l), &c1(2, 0, l));
        assert_eq!(left.average(&q).unwrap(), 0.5);
        let x = MeshFunction::sample(l, CellBox::unit(1, l), |x| x[0]);
        assert_eq!(x.average(&q).unwrap(), 0.24951171875);
        // cells outside the box count as zero
        assert_eq!(one.average(&c1(-1, 0, l)).unwrap(), 0.5);
        assert!(one.average(&c1(3, 0, 9)).is_err());
    }

    #[test]
    fn haar_coeff_examples() {
        let l = 10;
        let q = c1(0, 0, l);
        let idx = HaarIndex::cancellative(q.clone());
        let c = MeshFunction::from_cells(l, CellBox::unit(1, l), |_| 3.5);
        assert_eq!(c.haar_coeff(&idx).unwrap(), 0.0);
        let j = HaarIndex::cancellative(c1(4, 64, l));
        assert!((j.to_mesh().haar_coeff(&j).unwrap() - 1.0).abs() < 1e-14);
        // left-endpoint sampling: the midpoint rule for x is exact on each cell up to h/2 per cell,
        // which cancels between halves
        let x = MeshFunction::sample(l, CellBox::unit(1, l), |x| x[0]);
        assert!((x.haar_coeff(&idx).unwrap() + 0.25).abs() < 2f64.powi(-2 * l as i32) + 1e-15);
        assert!(matches!(x.haar_coeff(&HaarIndex::cancellative(c1(10, 3, l))), Err(Error::LevelAtFinest { .. })));
    }

    #[test]
    fn martingale_diff_examples() {
        let l = 6;
        let i = c1(2, 16, l);
        let c = MeshFunction::from_cells(l, CellBox::unit(1, l), |_| 2.0);
        assert!(c.martingale_diff(&i).unwrap().values.iter().all(|&v| v == 0.0));
        let child = &i.children().unwrap()[0];
        let f = MeshFunction::indicator(l, CellBox::unit(1, l), child);
        let d = f.martingale_diff(&i).unwrap();
        for cell in i.cells() {
            let want = if child.contains_cell(&cell) { 0.5 } else { -0.5 };
            assert_eq!(d.at(&cell), want);
        }
    }

    #[test]
    fn martingale_diff_is_haar_sum_2d() {
        let l = 4;
        let f = random_fn(3, 2, l);
        for i in all_cubes(2, l) {
            let d = f.martingale_diff(&i).unwrap();
            let mut s = MeshFunction::zeros(l, CellBox::of_cube(&i));
            for idx in HaarIndex::all_cancellative(&i) {
                s = s.combine(1.0, &idx.to_mesh(), f.haar_coeff(&idx).unwrap()).unwrap();
            }
            assert!(d.max_abs_diff(&s).unwrap() < 1e-12);
        }
    }

    #[test]
    fn orthonormality_exact() {
        for n in [1usize, 2] {
            let l = if n == 1 { 4 } else { 3 };
            let idx: Vec<HaarIndex> = all_cubes(n, l).iter().flat_map(HaarIndex::all_cancellative).collect();
            let meshes: Vec<MeshFunction> = idx.iter().map(|i| i.to_mesh()).collect();
            for (a, ma) in meshes.iter().enumerate() {
                for (b, mb) in meshes.iter().enumerate() {
                    let ip = ma.inner(mb).unwrap();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((ip - want).abs() < 1e-14, "{:?} {:?}", idx[a], idx[b]);
                }
            }
        }
    }

    #[test]
    fn projection_examples() {
        let l = 6;
        let g = sample_grid(4, 1, l, 0);
        let f = random_fn(9, 1, l);
        let p = f.project_scale(&g, l as i32).unwrap();
        assert!(p.max_abs_diff(&f).unwrap() == 0.0);
        let one = MeshFunction::from_cells(l, CellBox::unit(1, l), |_| 1.0);
        let std = DyadicGrid::standard(1, l, 0);
        assert!(one.project_scale(&std, 2).unwrap().values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn martingale_projection_identities() {
        let l = 5;
        let f = random_fn(21, 1, l);
        let cubes = all_cubes(1, l);
        for i in &cubes {
            let d = f.martingale_diff(i).unwrap();
            let dd = d.martingale_diff(i).unwrap();
            assert!(d.max_abs_diff(&dd).unwrap() < 1e-13);
            for j in cubes.iter().filter(|j| j.level == i.level && *j != i) {
                let z = d.martingale_diff(j).unwrap();
                assert!(z.values.iter().all(|v| v.abs() < 1e-14));
            }
        }
    }

    #[test]
    fn maximal_examples() {
        let l = 6;
        let g = DyadicGrid::standard(1, l, 0);
        let one = MeshFunction::from_cells(l, CellBox::unit(1, l), |_| 1.0);
        assert!(one.dyadic_maximal(&g).unwrap().values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let spike = MeshFunction::indicator(l, CellBox::unit(1, l), &c1(l as i32, 0, l));
        let m = spike.dyadic_maximal(&g).unwrap();
        assert_eq!(m.at(&[32]), 2f64.powi(-(l as i32)));
        assert_eq!(m.at(&[0]), 1.0);
    }

    #[test]
    fn ball_maximal_matches_brute_force() {
        let l = 5;
        let g = DyadicGrid::standard(1, l, 0);
        let f = MeshFunction::indicator(l, CellBox::unit(1, l), &c1(1, 0, l));
        let m = f.bilinear_maximal(&f, MaximalMode::Ball, &g).unwrap();
        let h = f.cell_size();
        for i in 0..32i64 {
            let x = (i as f64 + 0.5) * h;
            let mut best: f64 = 0.0;
            let mut r = h;
            while r < 1.0 + h {
                // measure of [x-r, x+r) ∩ [0, 1/2)
                let meas = ((x + r).min(0.5) - (x - r).max(0.0)).max(0.0);
                let avg = meas / (2.0 * r);
                best = best.max(avg * avg);
                r *= 2.0;
            }
            assert!((m.at(&[i]) - best).abs() < 1e-12, "cell {i}: {} vs {best}", m.at(&[i]));
        }
        let md = f.bilinear_maximal(&f, MaximalMode::Dyadic, &g).unwrap();
        assert_eq!(md.at(&[3]), 1.0);
        assert_eq!(md.at(&[20]), 0.25);
    }

    #[test]
    fn box_integral_2d_exact() {
        let l = 3;
        let f = random_fn(5, 2, l);
        let c = f.cumulative();
        let h = f.cell_size();
        // whole cells
        let q = DyadicCube::new(1, vec![4, 0], l);
        let want = f.average(&q).unwrap() * q.volume();
        let got = c.box_integral(&[4.0 * h, 0.0], &[8.0 * h, 4.0 * h]);
        assert!((want - got).abs() < 1e-14);
        // half a cell
        let got = c.box_integral(&[0.0, 0.0], &[0.5 * h, h]);
        assert!((got - 0.5 * f.at(&[0, 0]) * h * h).abs() < 1e-15);
    }

    #[test]
    fn lp_examples() {
        let l = 6;
        let one = MeshFunction::from_cells(l, CellBox::unit(1, l), |_| 1.0);
        for p in [1.0, 1.5, 2.0, 7.0] {
            assert!((one.lp_norm(Exponent::Finite(p)).unwrap() - 1.0).abs() < 1e-14);
        }
        assert_eq!(one.lp_norm(Exponent::Infinity).unwrap(), 1.0);
        let h = HaarIndex::cancellative(c1(3, 16, l)).to_mesh();
        assert!((h.lp_norm(Exponent::Finite(2.0)).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn square_function_parseval() {
        let l = 7;
        let g = DyadicGrid::standard(1, l, 0);
        let f = random_fn(2, 1, l);
        let mean = f.average(&c1(0, 0, l)).unwrap();
        let f0 = f.map(|v| v - mean);
        let s = f0.square_function(&g).unwrap();
        let a = s.lp_norm(Exponent::Finite(2.0)).unwrap();
        let b = f0.lp_norm(Exponent::Finite(2.0)).unwrap();
        assert!((a - b).abs() < 1e-12 * b);
    }

    #[test]
    fn io_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let f = random_fn(8, 2, 3);
        let stem = dir.path().join("f");
        f.save(&stem).unwrap();
        assert_eq!(MeshFunction::load(&stem).unwrap(), f);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 65);
    }

    fn haar_expansion(f: &MeshFunction, grid: &DyadicGrid) -> (MeshFunction, f64) {
        let l = f.mesh;
        let top = grid.coarsest_level();
        let cover = f.cells.cover(grid, top);
        let mut rec = MeshFunction::zeros(l, cover.clone());
        let mut energy = 0.0;
        let hi: Vec<i64> = (0..f.n).map(|d| f.cells.hi(d)).collect();
        for q in grid.cubes_meeting(top, &f.cells.origin, &hi) {
            let a = f.average(&q).unwrap();
            energy += q.volume() * a * a;
            rec = rec.add(&MeshFunction::indicator(l, cover.clone(), &q).scale(a)).unwrap();
        }
        for k in top..l as i32 {
            for i in grid.cubes_meeting(k, &f.cells.origin, &hi) {
                for idx in HaarIndex::all_cancellative(&i) {
                    let c = f.haar_coeff(&idx).unwrap();
                    energy += c * c;
                }
                rec = rec.add(&f.martingale_diff(&i).unwrap()).unwrap();
            }
        }
        (rec, energy)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn reconstruction_and_parseval(seed in 0u64..1000, gseed in 0u64..1000, n in 1usize..=2) {
            let l = if n == 1 { 6 } else { 3 };
            let f = random_fn(seed, n, l);
            let g = sample_grid(gseed, n, l, 0);
            let (rec, energy) = haar_expansion(&f, &g);
            let scale = f.lp_norm(Exponent::Infinity).unwrap();
            prop_assert!(rec.max_abs_diff(&f).unwrap() <= 1e-12 * scale.max(1.0));
            let norm2 = f.lp_norm(Exponent::Finite(2.0)).unwrap().powi(2);
            prop_assert!((energy - norm2).abs() <= 1e-10 * norm2);
        }

        #[test]
        fn tower_property(seed in 0u64..1000, gseed in 0u64..1000, k in 1i32..6, j in 0i32..6) {
            let l = 6;
            let (coarse, fine) = (j.min(k), j.max(k));
            let f = random_fn(seed, 1, l);
            let g = sample_grid(gseed, 1, l, 0);
            let two = f.project_scale(&g, fine).unwrap().project_scale(&g, coarse).unwrap();
            let one = f.project_scale(&g, coarse).unwrap();
            prop_assert!(two.max_abs_diff(&one).unwrap() < 1e-13);
        }
    }
}
