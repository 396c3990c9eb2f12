//! Experiment driver behind the command-line tool: configuration, the
//! function corpus and one report per command.
//!
//! A report is a JSON document plus a CSV table. Neither carries timings,
//! and every parallel reduction is collected in order before summing, so a
//! config and seed determine the bytes written.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dyadic::{estimate_pi_good, sample_grid_with, DyadicCube, DyadicGrid, GoodnessParams};
use crate::error::{Error, Result};
use crate::kernel::{BilinearKernel, TruncationSpec};
use crate::mesh::{CellBox, MeshFunction};
use crate::models::{norm_harness, norm_ratio, random_shift, random_test_function, HaarMode};
use crate::quadrature::QuadratureSpec;
use crate::representation::{Context, MAX_MESH, SPLIT_TOL};
use crate::rng;
use crate::sparse::{
    build_sparse, corollary_check, random_sparse, sparse_dominate, universal_dominates, universal_sparse, verify_sparse,
    CorollaryConstants, RhoForm,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
    /// Finest level `L`.
    pub mesh: u32,
    /// Coarsest level is `−coarse`.
    pub coarse: i32,
    pub r: u32,
    pub alpha: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { n: 1, mesh: 6, coarse: 0, r: 4, alpha: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub triples: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { triples: 20, seed: 2024 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormConfig {
    pub shifts: usize,
    pub pairs: usize,
    pub p: f64,
    pub q: f64,
    pub mesh: u32,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig { shifts: 20, pairs: 20, p: 4.0, q: 4.0, mesh: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub kernel: String,
    pub quadrature: QuadratureSpec,
    pub grid: GridConfig,
    /// Smooth truncation for `decompose`, `extract` and `coeff-bounds`.
    pub eps: f64,
    /// Sharp truncations for `corollary`.
    pub ladder: Vec<f64>,
    pub corpus: CorpusConfig,
    /// Drives grids, Monte Carlo trials and random models.
    pub seed: u64,
    pub trials: usize,
    /// Random grids swept by `coeff-bounds`.
    pub grids: usize,
    pub eta: f64,
    /// Mesh level for `sparse`.
    pub sparse_mesh: u32,
    pub norm: NormConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "base".into(),
            kernel: "beurling-re".into(),
            quadrature: QuadratureSpec::default(),
            grid: GridConfig::default(),
            eps: 0.125,
            ladder: (-5..=2).map(|k| (k as f64).exp2()).collect(),
            corpus: CorpusConfig::default(),
            seed: 7,
            trials: 200,
            grids: 4,
            eta: 0.5,
            sparse_mesh: 8,
            norm: NormConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        BilinearKernel::builtin(&self.kernel).map_err(|e| Error::Config(e.to_string()))?;
        if self.grid.n != 1 {
            return bad(format!("grid.n = {}: experiments run in one dimension", self.grid.n));
        }
        if self.grid.mesh == 0 || self.grid.mesh > MAX_MESH {
            return bad(format!("grid.mesh = {} must lie in 1..={MAX_MESH}", self.grid.mesh));
        }
        if self.grid.coarse < 0 || self.grid.r == 0 {
            return bad("grid.coarse must be ≥ 0 and grid.r ≥ 1".into());
        }
        if !(self.grid.alpha > 0.0 && self.grid.alpha <= 1.0) {
            return bad(format!("grid.alpha = {} must lie in (0,1]", self.grid.alpha));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps = {} must be positive", self.eps));
        }
        if self.ladder.is_empty() || self.ladder.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return bad("ladder must be a non-empty list of positive numbers".into());
        }
        let cell = (-(self.grid.mesh as f64)).exp2();
        if self.ladder.iter().any(|e| *e < 2.0 * cell) {
            return bad(format!("ladder scales must be at least two mesh cells ({})", 2.0 * cell));
        }
        if self.corpus.triples == 0 || self.trials == 0 || self.grids == 0 {
            return bad("corpus.triples, trials and grids must be positive".into());
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad(format!("eta = {} must lie in (0,1)", self.eta));
        }
        if self.sparse_mesh < 2 || self.sparse_mesh > 12 {
            return bad(format!("sparse_mesh = {} must lie in 2..=12", self.sparse_mesh));
        }
        let nc = &self.norm;
        if nc.shifts == 0 || nc.pairs == 0 || !(nc.p > 1.0 && nc.q > 1.0) || nc.mesh < 2 || nc.mesh > 12 {
            return bad("norm needs positive counts, exponents above 1 and mesh in 2..=12".into());
        }
        if self.quadrature.order == 0 || self.quadrature.near_factor < 2 {
            return bad("quadrature needs order ≥ 1 and near_factor ≥ 2".into());
        }
        Ok(())
    }

    pub fn params(&self) -> Result<GoodnessParams> {
        GoodnessParams::from_alpha(self.grid.alpha, self.grid.n, self.grid.r)
    }

    fn kernel(&self) -> Result<BilinearKernel> {
        BilinearKernel::builtin(&self.kernel)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Constant,
    Indicator,
    Step,
    Trig,
    Haar,
    Spike,
    Bump,
    Uniform,
}

const VARIED: [Family; 7] =
    [Family::Indicator, Family::Step, Family::Trig, Family::Haar, Family::Spike, Family::Bump, Family::Uniform];

/// Families of triple `t`: triple 0 is all constants.
pub fn families(t: usize) -> [Family; 3] {
    if t == 0 {
        return [Family::Constant; 3];
    }
    let at = |j: usize| VARIED[((t - 1) * 3 + j * 5 + (t - 1) / 7) % VARIED.len()];
    [at(0), at(1), at(2)]
}

/// One corpus function on `[0,1)` at mesh level `mesh`.
pub fn corpus_function<R: Rng>(rng: &mut R, family: Family, mesh: u32) -> MeshFunction {
    let cells = CellBox::unit(1, mesh);
    let n = 1i64 << mesh;
    let x = move |c: &[i64]| (c[0] as f64 + 0.5) / n as f64;
    match family {
        Family::Constant => MeshFunction::from_cells(mesh, cells, |_| 1.0),
        Family::Indicator => {
            let level = rng.gen_range(1..=3.min(mesh as i32));
            let side = n >> level;
            let lo = rng.gen_range(0..(1i64 << level)) * side;
            MeshFunction::from_cells(mesh, cells, |c| if (lo..lo + side).contains(&c[0]) { 1.0 } else { 0.0 })
        }
        Family::Step => {
            let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            MeshFunction::from_cells(mesh, cells, |c| v[(c[0] * 4 / n) as usize])
        }
        Family::Trig => {
            let k = rng.gen_range(1..=4) as f64;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            MeshFunction::from_cells(mesh, cells, |c| (std::f64::consts::TAU * k * x(c) + phase).sin())
        }
        Family::Haar => random_test_function(rng, &DyadicGrid::standard(1, mesh, 0), &cells),
        Family::Spike => {
            let at = rng.gen_range(0..n);
            MeshFunction::from_cells(mesh, cells, |c| if c[0] == at { 10.0 } else { 0.1 })
        }
        Family::Bump => {
            let centre = rng.gen_range(0.2..0.8);
            let width = rng.gen_range(0.05..0.3);
            MeshFunction::from_cells(mesh, cells, |c| (1.0 - (x(c) - centre).abs() / width).max(0.0))
        }
        Family::Uniform => {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            MeshFunction::from_values(mesh, cells, v).expect("length matches the unit box")
        }
    }
}

/// Triple `t` of the corpus.
pub fn corpus_triple(cfg: &CorpusConfig, t: usize, mesh: u32) -> [MeshFunction; 3] {
    let fam = families(t);
    let mut r = rng::trial(cfg.seed, t as u64);
    let f = corpus_function(&mut r, fam[0], mesh);
    let g = corpus_function(&mut r, fam[1], mesh);
    let h = corpus_function(&mut r, fam[2], mesh);
    [f, g, h]
}

pub fn corpus(cfg: &CorpusConfig, mesh: u32) -> Vec<[MeshFunction; 3]> {
    (0..cfg.triples).map(|t| corpus_triple(cfg, t, mesh)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Decompose,
    Extract,
    CoeffBounds,
    PiGood,
    Sparse,
    Norms,
    Corollary,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Decompose => "decompose",
            Command::Extract => "extract",
            Command::CoeffBounds => "coeff-bounds",
            Command::PiGood => "pi-good",
            Command::Sparse => "sparse",
            Command::Norms => "norms",
            Command::Corollary => "corollary",
        }
    }
}

/// What a command produced.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub report: Value,
    pub csv: Vec<u8>,
    pub summary: String,
    /// A tolerance or normalization gate failed.
    pub gate_failed: bool,
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn run(cmd: Command, cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    match cmd {
        Command::Decompose => decompose(cfg),
        Command::Extract => extract(cfg),
        Command::CoeffBounds => coeff_bounds(cfg),
        Command::PiGood => pi_good(cfg),
        Command::Sparse => sparse(cfg),
        Command::Norms => norms(cfg),
        Command::Corollary => corollary(cfg),
    }
}

/// Writes `<cmd>.json`, `<cmd>.csv` and the resolved `<cmd>.config.json`.
pub fn write_outcome(dir: &Path, cmd: Command, cfg: &ExperimentConfig, out: &Outcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    let name = cmd.name();
    fs::write(dir.join(format!("{name}.config.json")), serde_json::to_string_pretty(cfg)? + "\n")?;
    fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&out.report)? + "\n")?;
    fs::write(dir.join(format!("{name}.csv")), &out.csv)?;
    Ok(())
}

fn context(cfg: &ExperimentConfig) -> Result<Context> {
    Context::new(&cfg.kernel()?, &TruncationSpec::smooth(cfg.eps), &cfg.quadrature, cfg.grid.mesh)
}

fn grid_for_trial(cfg: &ExperimentConfig, t: usize) -> DyadicGrid {
    let mut r = rng::trial(cfg.seed, t as u64);
    sample_grid_with(&mut r, cfg.grid.n, cfg.grid.mesh, cfg.grid.coarse)
}

#[derive(Serialize)]
struct DecomposeRow {
    triple: usize,
    sigma1: f64,
    sigma2: f64,
    sigma3: f64,
    remainder: f64,
    total: f64,
    reference: f64,
    rel_error: f64,
}

fn decompose(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ctx = context(cfg)?;
    let triples = corpus(&cfg.corpus, cfg.grid.mesh);
    let rows: Vec<DecomposeRow> = triples
        .iter()
        .enumerate()
        .map(|(t, [f, g, h])| {
            let d = ctx.martingale_split(&grid_for_trial(cfg, t), f, g, h)?;
            Ok(DecomposeRow {
                triple: t,
                sigma1: d.sigma1,
                sigma2: d.sigma2,
                sigma3: d.sigma3,
                remainder: d.remainder,
                total: d.total,
                reference: d.reference,
                rel_error: d.rel_error,
            })
        })
        .collect::<Result<_>>()?;
    let worst = rows.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let gate_failed = worst > SPLIT_TOL;
    Ok(Outcome {
        report: json!({ "command": "decompose", "tolerance": SPLIT_TOL, "max_rel_error": worst, "triples": rows.len(),
            "rows": serde_json::to_value(&rows)? }),
        csv: to_csv(&rows)?,
        summary: format!("decompose: {} triples, max relative error {worst:.3e} (tolerance {SPLIT_TOL:e})", rows.len()),
        gate_failed,
    })
}

#[derive(Serialize)]
struct ExtractRow {
    triple: usize,
    status: String,
    shifts: usize,
    paraproducts: usize,
    residual: f64,
    target: f64,
    reassembled: f64,
    rel_error: f64,
    max_ratio: f64,
}

fn extract(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ctx = context(cfg)?;
    let params = cfg.params()?;
    let triples = corpus(&cfg.corpus, cfg.grid.mesh);
    let mut failed = 0;
    let mut rows = Vec::with_capacity(triples.len());
    for (t, [f, g, h]) in triples.iter().enumerate() {
        let grid = grid_for_trial(cfg, t);
        let row = match ctx.extract_representation(&grid, &params, f, g, h) {
            Ok(e) => ExtractRow {
                triple: t,
                status: "ok".into(),
                shifts: e.shifts.len(),
                paraproducts: e.paraproducts.len(),
                residual: e.residual.total(),
                target: e.target.iter().sum(),
                reassembled: e.reassembled,
                rel_error: e.rel_error,
                max_ratio: e.ratios.iter().map(|r| r.max_ratio).fold(0.0, f64::max),
            },
            Err(err @ (Error::Tolerance(_) | Error::Normalization { .. })) => {
                failed += 1;
                ExtractRow {
                    triple: t,
                    status: err.to_string(),
                    shifts: 0,
                    paraproducts: 0,
                    residual: f64::NAN,
                    target: f64::NAN,
                    reassembled: f64::NAN,
                    rel_error: f64::NAN,
                    max_ratio: f64::NAN,
                }
            }
            Err(e) => return Err(e),
        };
        rows.push(row);
    }
    let max_ratio = rows.iter().map(|r| r.max_ratio).filter(|v| !v.is_nan()).fold(0.0, f64::max);
    let max_err = rows.iter().map(|r| r.rel_error).filter(|v| !v.is_nan()).fold(0.0, f64::max);
    Ok(Outcome {
        report: json!({ "command": "extract", "constants": ctx.constants()?, "params": params, "failed": failed,
            "max_ratio": max_ratio, "max_rel_error": max_err, "rows": serde_json::to_value(&rows)? }),
        csv: to_csv(&rows)?,
        summary: format!(
            "extract: {} triples, {failed} gate failures, max coefficient ratio {max_ratio:.4}, max reassembly error {max_err:.3e}",
            rows.len()
        ),
        gate_failed: failed > 0,
    })
}

#[derive(Serialize)]
struct BoundsCsvRow {
    grid: usize,
    engine: String,
    bucket: String,
    count: usize,
    measured: f64,
    divisor: f64,
    max_ratio: f64,
    passed: usize,
}

fn coeff_bounds(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ctx = context(cfg)?;
    let params = cfg.params()?;
    let constants = ctx.constants()?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for gi in 0..cfg.grids {
        let rep = ctx.coefficient_bounds(&grid_for_trial(cfg, gi), &params, &constants)?;
        for r in &rep.rows {
            rows.push(BoundsCsvRow {
                grid: gi,
                engine: format!("{:?}", r.engine),
                bucket: format!("{:?}", r.bucket),
                count: r.count,
                measured: r.measured,
                divisor: r.divisor,
                max_ratio: r.max_ratio,
                passed: r.passed,
            });
        }
        reports.push(rep);
    }
    let total: usize = rows.iter().map(|r| r.count).sum();
    let passed: usize = rows.iter().map(|r| r.passed).sum();
    let max_ratio = rows.iter().map(|r| r.max_ratio).fold(0.0, f64::max);
    let mut table = String::new();
    for r in rows.iter().filter(|r| r.grid == 0) {
        table.push_str(&format!("\n  {:<7} {:<10} {:>7} {:>10.4}", r.engine, r.bucket, r.count, r.max_ratio));
    }
    Ok(Outcome {
        report: json!({ "command": "coeff-bounds", "constants": constants, "params": params, "coefficients": total,
            "passed": passed, "max_ratio": max_ratio, "grids": serde_json::to_value(&reports)? }),
        csv: to_csv(&rows)?,
        summary: format!(
            "coeff-bounds: {passed}/{total} coefficients within their divisors over {} grids, max ratio {max_ratio:.4}\n  engine  bucket       count  max ratio (grid 0){table}",
            cfg.grids
        ),
        gate_failed: passed < total,
    })
}

#[derive(Serialize)]
struct PiRow {
    base_level: i32,
    trials: u64,
    good: u64,
    estimate: f64,
    std_err: f64,
    ci_lo: f64,
    ci_hi: f64,
}

fn pi_good(cfg: &ExperimentConfig) -> Result<Outcome> {
    let params = cfg.params()?;
    let g = &cfg.grid;
    // finer meshes are allowed here: no window tensors are built
    let mesh = g.mesh.max(10);
    let rows: Vec<PiRow> = (0..=mesh as i32)
        .map(|base| {
            let e = estimate_pi_good(&params, g.n, mesh, g.coarse, base, cfg.trials as u64, cfg.seed)?;
            Ok(PiRow {
                base_level: base,
                trials: e.trials,
                good: e.good,
                estimate: e.estimate,
                std_err: e.std_err,
                ci_lo: (e.estimate - 1.96 * e.std_err).max(0.0),
                ci_hi: (e.estimate + 1.96 * e.std_err).min(1.0),
            })
        })
        .collect::<Result<_>>()?;
    // levels with a goodness test above them
    let tested: Vec<&PiRow> = rows.iter().filter(|r| r.base_level - g.r as i32 >= -g.coarse).collect();
    let mut z_max: f64 = 0.0;
    for a in &tested {
        for b in &tested {
            let s = (a.std_err.powi(2) + b.std_err.powi(2)).sqrt();
            let d = (a.estimate - b.estimate).abs();
            z_max = z_max.max(if s > 0.0 { d / s } else if d > 0.0 { f64::INFINITY } else { 0.0 });
        }
    }
    let mut lines = String::new();
    for r in &rows {
        lines.push_str(&format!(
            "\n  level {:>2}: π = {:.4} ± {:.4}  (95% CI [{:.4}, {:.4}])",
            r.base_level, r.estimate, r.std_err, r.ci_lo, r.ci_hi
        ));
    }
    Ok(Outcome {
        report: json!({ "command": "pi-good", "params": params, "mesh": mesh, "coarse": g.coarse,
            "max_pairwise_z": if z_max.is_finite() { json!(z_max) } else { json!("inf") },
            "rows": serde_json::to_value(&rows)? }),
        csv: to_csv(&rows)?,
        summary: format!(
            "pi-good: r = {}, γ = {:.6}, {} trials per level; largest pairwise gap between tested levels {z_max:.2}σ{lines}",
            params.r, params.gamma, cfg.trials
        ),
        gate_failed: false,
    })
}

#[derive(Serialize)]
struct SparseRow {
    triple: usize,
    form: String,
    bound_b: f64,
    rho: u32,
    ratio: f64,
    cubes: usize,
    major_ratio_min: f64,
    sparse: bool,
    stages_ok: bool,
    universal_cubes: usize,
    universal_ratio: f64,
    random_universal_ratio: f64,
}

/// A random shift with one coefficient per cube above its depth, its
/// boundedness constant from the norm harness, as an `S^ρ` form.
pub fn random_shift_form(seed: u64, t: usize, mesh: u32) -> Result<(String, RhoForm)> {
    let mut r = rng::trial(seed ^ 0xf0f0, t as u64);
    let ijk = (r.gen_range(0..=2u32), r.gen_range(0..=2u32), r.gen_range(0..=2u32));
    let mode = [HaarMode::HH, HaarMode::H0H, HaarMode::HH0][r.gen_range(0..3)];
    let depth = ijk.0.max(ijk.1).max(ijk.2) as i32;
    let grid = DyadicGrid::standard(1, mesh, 0);
    let tops: Vec<DyadicCube> = (0..mesh as i32 - depth)
        .flat_map(|l| (0..1i64 << l).map(move |p| DyadicCube::new(l, vec![p << (mesh as i32 - l)], mesh)))
        .collect();
    let spec = random_shift(&mut r, &grid, &tops, ijk, mode, 1)?;
    let b = norm_harness(&spec, &grid, 4.0, 4.0, 20, r.gen())?.max_ratio;
    let id = format!("S^{{{},{},{}}}/{mode:?}", ijk.0, ijk.1, ijk.2);
    Ok((id, RhoForm::from_shift(&spec, b, [4.0, 4.0, 2.0])?))
}

fn sparse(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mesh = cfg.sparse_mesh;
    let grid = DyadicGrid::standard(1, mesh, 0);
    let triples = corpus(&cfg.corpus, mesh);
    let rows: Vec<SparseRow> = triples
        .par_iter()
        .enumerate()
        .map(|(t, [f, g, h])| {
            let (fa, ga, ha) = (f.abs(), g.abs(), h.abs());
            let built = build_sparse([&fa, &ga, &ha], cfg.eta, &grid)?;
            let check = verify_sparse(&built.collection)?;
            let u = universal_sparse([&fa, &ga, &ha], cfg.eta, &grid)?;
            let universal_ratio = universal_dominates(&built.collection, &u.collection, f, g, h)?;
            let mut r = rng::trial(cfg.seed ^ 0x5a5a, t as u64);
            let random = random_sparse(&mut r, &DyadicCube::new(0, vec![0], mesh), cfg.eta, 512)?;
            let random_universal_ratio = universal_dominates(&random, &u.collection, f, g, h)?;
            let (id, form) = random_shift_form(cfg.seed, t, mesh)?;
            let dom = sparse_dominate(&form, f, g, h, cfg.eta)?;
            Ok(SparseRow {
                triple: t,
                form: id,
                bound_b: form.bound_b,
                rho: form.rho,
                ratio: dom.ratio,
                cubes: built.collection.cubes.len(),
                major_ratio_min: check.ratio_min,
                sparse: check.sparse,
                stages_ok: built.stages.iter().all(|s| s.within_bound),
                universal_cubes: u.collection.cubes.len(),
                universal_ratio,
                random_universal_ratio,
            })
        })
        .collect::<Result<_>>()?;
    let families: Vec<Value> = triples
        .iter()
        .map(|[f, g, h]| {
            let b = build_sparse([&f.abs(), &g.abs(), &h.abs()], cfg.eta, &grid)?;
            Ok(json!({ "c0": b.c0, "collection": b.collection }))
        })
        .collect::<Result<_>>()?;
    let failures = rows.iter().filter(|r| !r.sparse || !r.stages_ok).count();
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let max_u = rows.iter().map(|r| r.universal_ratio.max(r.random_universal_ratio)).fold(0.0, f64::max);
    let root = &families[0]["collection"]["cubes"];
    Ok(Outcome {
        report: json!({ "command": "sparse", "eta": cfg.eta, "mesh": mesh, "failures": failures,
            "max_domination_ratio": max_ratio, "max_universal_ratio": max_u,
            "rows": serde_json::to_value(&rows)?, "families": families }),
        csv: to_csv(&rows)?,
        summary: format!(
            "sparse: η = {}, {} triples, {failures} sparsity or stage failures; max form/((𝓑+ρ+1)Λ) {max_ratio:.4}, max Λ_𝒮/Λ_𝒰 {max_u:.4}; triple 0 family {root}",
            cfg.eta,
            rows.len()
        ),
        gate_failed: failures > 0,
    })
}

#[derive(Serialize)]
struct NormRow {
    shift: usize,
    form: String,
    max: f64,
    median: f64,
    mean: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Norm ratios of random shifts: per shift, `‖S(f,g)‖_r / (‖f‖_p‖g‖_q)`
/// over random function pairs.
pub struct NormSweep {
    pub per_shift: Vec<(String, Vec<f64>)>,
    /// Per shift, the largest ratio over its pairs.
    pub norms: Vec<f64>,
    pub max: f64,
    /// Median of `norms`.
    pub median: f64,
}

pub fn norm_sweep(cfg: &ExperimentConfig) -> Result<NormSweep> {
    let nc = &cfg.norm;
    let mesh = nc.mesh;
    let grid = DyadicGrid::standard(1, mesh, 0);
    let unit = CellBox::unit(1, mesh);
    let per_shift: Vec<(String, Vec<f64>)> = (0..nc.shifts)
        .into_par_iter()
        .map(|s| {
            let mut r = rng::trial(cfg.seed ^ 0x0a0a, s as u64);
            let ijk = (r.gen_range(0..=2u32), r.gen_range(0..=2u32), r.gen_range(0..=2u32));
            let mode = [HaarMode::HH, HaarMode::H0H, HaarMode::HH0][r.gen_range(0..3)];
            let depth = ijk.0.max(ijk.1).max(ijk.2) as i32;
            let tops: Vec<DyadicCube> = (0..mesh as i32 - depth)
                .flat_map(|l| (0..1i64 << l).map(move |p| DyadicCube::new(l, vec![p << (mesh as i32 - l)], mesh)))
                .collect();
            let spec = random_shift(&mut r, &grid, &tops, ijk, mode, 8)?;
            let ratios = (0..nc.pairs)
                .map(|_| {
                    let f = random_test_function(&mut r, &grid, &unit);
                    let g = random_test_function(&mut r, &grid, &unit);
                    norm_ratio(&spec, &f, &g, nc.p, nc.q)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((format!("S^{{{},{},{}}}/{mode:?}", ijk.0, ijk.1, ijk.2), ratios))
        })
        .collect::<Result<_>>()?;
    let norms: Vec<f64> = per_shift.iter().map(|(_, v)| v.iter().copied().fold(0.0, f64::max)).collect();
    let max = norms.iter().copied().fold(0.0, f64::max);
    let median = median(&mut norms.clone());
    Ok(NormSweep { per_shift, norms, max, median })
}

fn norms(cfg: &ExperimentConfig) -> Result<Outcome> {
    let sweep = norm_sweep(cfg)?;
    let (max, med) = (sweep.max, sweep.median);
    let rows: Vec<NormRow> = sweep
        .per_shift
        .iter()
        .enumerate()
        .map(|(s, (form, v))| {
            let mut v = v.clone();
            NormRow {
                shift: s,
                form: form.clone(),
                max: v.iter().copied().fold(0.0, f64::max),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                median: median(&mut v),
            }
        })
        .collect();
    let spread = if med > 0.0 { max / med } else { 0.0 };
    Ok(Outcome {
        report: json!({ "command": "norms", "p": cfg.norm.p, "q": cfg.norm.q, "shifts": cfg.norm.shifts,
            "pairs": cfg.norm.pairs, "max": max, "median": med, "max_over_median": spread,
            "rows": serde_json::to_value(&rows)? }),
        csv: to_csv(&rows)?,
        summary: format!(
            "norms: {} shifts × {} pairs; per-shift empirical norm max {max:.4}, median {med:.4}, max/median {spread:.2}",
            cfg.norm.shifts, cfg.norm.pairs
        ),
        gate_failed: spread > 10.0,
    })
}

#[derive(Serialize)]
struct CorollaryRow {
    triple: usize,
    sup: f64,
    lambda: f64,
    c_est: f64,
    ratio: f64,
    cubes: usize,
}

/// Constants for `corollary`, measured at the finest ladder scale.
pub fn corollary_constants(cfg: &ExperimentConfig) -> Result<CorollaryConstants> {
    let eps = cfg.ladder.iter().copied().fold(f64::INFINITY, f64::min);
    CorollaryConstants::measure(&cfg.kernel()?, &TruncationSpec::smooth(eps), cfg.grid.mesh, &cfg.quadrature)
}

fn corollary(cfg: &ExperimentConfig) -> Result<Outcome> {
    let k = cfg.kernel()?;
    let constants = corollary_constants(cfg)?;
    let triples = corpus(&cfg.corpus, cfg.grid.mesh);
    let rows: Vec<CorollaryRow> = triples
        .iter()
        .enumerate()
        .map(|(t, [f, g, h])| {
            let rep = corollary_check(&k, &cfg.ladder, f, g, h, cfg.eta, &cfg.quadrature, &constants)?;
            Ok(CorollaryRow { triple: t, sup: rep.sup, lambda: rep.lambda, c_est: rep.c_est, ratio: rep.ratio, cubes: rep.sparse_cubes })
        })
        .collect::<Result<_>>()?;
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let fails = rows.iter().filter(|r| r.ratio > 1.0).count();
    Ok(Outcome {
        report: json!({ "command": "corollary", "constants": constants, "c_est": constants.c_est(), "ladder": cfg.ladder,
            "max_ratio": max_ratio, "failures": fails, "rows": serde_json::to_value(&rows)? }),
        csv: to_csv(&rows)?,
        summary: format!(
            "corollary: {} triples, C_est = {:.4}, max sup|⟨T_ε(f,g),h⟩|/(C_est Λ) = {max_ratio:.4}, {fails} above 1",
            rows.len(),
            constants.c_est()
        ),
        gate_failed: fails > 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_roundtrips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.ladder.len(), 8);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"eta":0.25,"grid":{"r":2}}"#).unwrap();
        assert_eq!(partial.grid.mesh, 6);
        assert_eq!(partial.grid.r, 2);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"etaa":0.25}"#).is_err());
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let mut cfg = ExperimentConfig { kernel: "nope".into(), ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.kernel = "zero".into();
        cfg.eta = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.eta = 0.5;
        cfg.grid.mesh = 9;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn corpus_is_deterministic_and_varied() {
        let cfg = CorpusConfig::default();
        let a = corpus(&cfg, 6);
        let b = corpus(&cfg, 6);
        assert_eq!(a.len(), 20);
        for (x, y) in a.iter().zip(&b) {
            for j in 0..3 {
                assert_eq!(x[j].values, y[j].values);
            }
        }
        assert!(a[0].iter().all(|f| f.values.iter().all(|v| *v == 1.0)));
        let mut seen = std::collections::BTreeSet::new();
        for t in 1..20 {
            for fam in families(t) {
                seen.insert(format!("{fam:?}"));
            }
        }
        assert_eq!(seen.len(), VARIED.len());
    }

    #[test]
    fn zero_kernel_decomposes_to_zero() {
        let cfg = ExperimentConfig {
            kernel: "zero".into(),
            grid: GridConfig { mesh: 4, ..Default::default() },
            ladder: vec![0.125, 0.25, 0.5],
            corpus: CorpusConfig { triples: 3, seed: 1 },
            ..Default::default()
        };
        let out = run(Command::Decompose, &cfg).unwrap();
        assert!(!out.gate_failed);
        for row in out.report["rows"].as_array().unwrap() {
            for key in ["sigma1", "sigma2", "sigma3", "remainder", "total", "reference"] {
                assert_eq!(row[key].as_f64().unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn sparse_on_constants_is_the_root() {
        let cfg = ExperimentConfig { corpus: CorpusConfig { triples: 1, seed: 1 }, sparse_mesh: 5, ..Default::default() };
        let out = run(Command::Sparse, &cfg).unwrap();
        assert!(!out.gate_failed);
        let cubes = out.report["families"][0]["collection"]["cubes"].as_array().unwrap();
        assert_eq!(cubes.len(), 1);
        assert_eq!(cubes[0]["level"], 0);
    }

    #[test]
    fn csv_is_reproducible() {
        let cfg = ExperimentConfig {
            grid: GridConfig { mesh: 4, ..Default::default() },
            ladder: vec![0.125, 0.25, 0.5],
            corpus: CorpusConfig { triples: 4, seed: 3 },
            ..Default::default()
        };
        let a = run(Command::Decompose, &cfg).unwrap();
        let b = run(Command::Decompose, &cfg).unwrap();
        assert_eq!(a.csv, b.csv);
        assert!(!a.gate_failed);
    }
}
