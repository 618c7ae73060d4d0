//! Stage runner: solve → operators → distributions → norms → scans, plus the
//! `report` merge. Every emitted file is listed in the run manifest.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use fmdlab_core::distribution::{dist_fn, LevelGrid};
use fmdlab_core::funcspaces::{norm_report, NormReport, NormSpec};
use fmdlab_core::grid::{DomainGrid, ScalarField, ShapeTag, VectorField, DIM};
use fmdlab_core::maximal::{frac_maximal, RadiusSet};
use fmdlab_core::pde::{self, OperatorSpec, ProblemSpec, SolveOptions};
use fmdlab_core::verify::{self, ComparisonPair, GammaSweep, LocalMode, SmoothDraw};
use fmdlab_core::{io, Field, Grid, Maximal, Problem, Solution};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Format, ProblemKindConfig, ScanConfig};
use crate::expr::Expr;

/// `manifest.json` for `run`, `manifest_<command>.json` for the single-stage commands.
pub fn manifest_name(cmd: Command) -> String {
    match cmd {
        Command::Run => "manifest.json".into(),
        other => format!("manifest_{}.json", other.name()),
    }
}
pub const SUMMARY: &str = "summary";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Run,
    Solve,
    Maximal,
    Norms,
    Verify,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::Solve => "solve",
            Command::Maximal => "maximal",
            Command::Norms => "norms",
            Command::Verify => "verify",
            Command::Report => "report",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Solve,
    Operators,
    Distributions,
    Norms,
    Scans,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Solve => "solve",
            Stage::Operators => "operators",
            Stage::Distributions => "distributions",
            Stage::Norms => "norms",
            Stage::Scans => "scans",
            Stage::Report => "report",
        }
    }
}

/// Stages executed, and whose files are emitted, by `cmd`.
pub fn stages_for(cmd: Command, cfg: &ExperimentConfig) -> Vec<Stage> {
    match cmd {
        Command::Run => {
            let mut s = Vec::new();
            if cfg.problem.is_some() {
                s.push(Stage::Solve);
            }
            s.extend([Stage::Operators, Stage::Distributions]);
            if !cfg.spaces.norms.is_empty() {
                s.push(Stage::Norms);
            }
            if cfg.scan.is_some() {
                s.push(Stage::Scans);
            }
            s
        }
        Command::Solve => vec![Stage::Solve],
        Command::Maximal => vec![Stage::Operators],
        Command::Norms => vec![Stage::Norms],
        Command::Verify => vec![Stage::Scans],
        Command::Report => vec![Stage::Report],
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    pub stage: Stage,
    pub seconds: f64,
    pub completed: bool,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Seeds {
    pub run: u64,
    pub data_draw: Option<u64>,
    pub ball_sampling: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub config_hash: String,
    pub seeds: Seeds,
    pub threads: usize,
    pub status: String,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    /// Set when a stage failed after emitting some of its files.
    pub partial: bool,
    pub stages: Vec<StageRecord>,
    /// Every emitted file except the manifest itself, sorted by path.
    pub files: Vec<FileEntry>,
    pub resolved_config: ExperimentConfig,
}

struct Emitter {
    dir: PathBuf,
    formats: Vec<Format>,
    files: Vec<String>,
}

impl Emitter {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn on(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }

    fn csv(&mut self, name: &str, fill: impl FnOnce(&mut Vec<u8>) -> fmdlab_core::Result<()>) -> Result<()> {
        if !self.on(Format::Csv) {
            return Ok(());
        }
        let mut b = Vec::new();
        fill(&mut b)?;
        self.put(&format!("{name}.csv"), &b)
    }

    fn rows<S: Serialize>(&mut self, name: &str, rows: &[S]) -> Result<()> {
        self.csv(name, |b| io::write_rows_csv(b, rows))
    }

    fn json<S: Serialize>(&mut self, name: &str, v: &S) -> Result<()> {
        if !self.on(Format::Json) {
            return Ok(());
        }
        self.put(&format!("{name}.json"), io::to_json(v)?.as_bytes())
    }

    fn dat(&mut self, name: &str, title: &str, columns: (&str, &str), points: &[(f64, f64)]) -> Result<()> {
        if !self.on(Format::Dat) {
            return Ok(());
        }
        let mut b = Vec::new();
        io::write_dat(&mut b, title, columns, points)?;
        self.put(&format!("{name}.dat"), &b)
    }
}

#[derive(Serialize)]
struct SolveDoc<'a> {
    kind: &'a str,
    lambda: f64,
    data_nonzero: bool,
    meta: &'a pde::SolveMeta,
}

#[derive(Serialize)]
struct ErrorDoc {
    exact: String,
    max_abs_error: f64,
    max_rel_error: f64,
    l2_error: f64,
}

#[derive(Serialize)]
struct NormRow {
    target: String,
    alpha: Option<f64>,
    space: String,
    value: f64,
}

#[derive(Serialize)]
struct NormDoc {
    target: String,
    alpha: Option<f64>,
    report: NormReport,
}

#[derive(Serialize)]
struct BallRow {
    center: usize,
    i: usize,
    j: usize,
    radius: f64,
}

#[derive(Serialize)]
struct Ingredients {
    gamma: Option<f64>,
    gamma_source: &'static str,
    sweep_gamma: Option<f64>,
    sweep_sup_ratio: Option<f64>,
    local_comparison: verify::LocalComparisonTable,
    quasi_triangle: verify::QuasiTriangleReport,
    global_ratio: f64,
}

#[derive(Serialize)]
struct SummaryRow {
    file: String,
    key: String,
    value: String,
}

struct Ctx {
    cfg: ExperimentConfig,
    grid: Option<Arc<Grid>>,
    spec: Option<Problem>,
    sol: Option<Solution>,
    pair: Option<ComparisonPair<f64>>,
    input: Option<Field>,
    maximals: HashMap<(String, u64), Arc<Maximal>>,
    balls: Option<Vec<(usize, f64)>>,
    sweep: Option<GammaSweep>,
}

fn expr(src: &str) -> Expr {
    Expr::parse(src).expect("expressions are checked when the config is resolved")
}

fn field_of(grid: &Arc<Grid>, src: &str) -> Field {
    let e = expr(src);
    ScalarField::from_fn(grid.clone(), |x, y| e.eval(x, y))
}

fn alpha_tag(a: f64) -> String {
    format!("alpha{a}")
}

impl Ctx {
    fn new(cfg: ExperimentConfig) -> Self {
        Self {
            cfg,
            grid: None,
            spec: None,
            sol: None,
            pair: None,
            input: None,
            maximals: HashMap::new(),
            balls: None,
            sweep: None,
        }
    }

    fn scan_cfg(&self) -> ScanConfig {
        self.cfg.scan.clone().unwrap_or_default()
    }

    fn ball_seed(&self) -> u64 {
        self.cfg.scan.as_ref().and_then(|s| s.ball_seed).unwrap_or(self.cfg.seed)
    }

    fn grid(&mut self) -> Result<Arc<Grid>> {
        if let Some(g) = &self.grid {
            return Ok(g.clone());
        }
        let d = self.cfg.domain.as_ref().ok_or_else(|| anyhow!("no [domain] section"))?;
        let shape: ShapeTag = d.shape.parse()?;
        let g = Arc::new(DomainGrid::new(shape, d.n, d.ny.unwrap_or(d.n), d.h.unwrap_or(1.0 / d.n as f64))?);
        self.grid = Some(g.clone());
        Ok(g)
    }

    fn radii(&self, grid: &Grid) -> Result<RadiusSet<f64>> {
        Ok(match self.cfg.operators.radius_max {
            Some(r) => RadiusSet::up_to(grid, r)?,
            None => RadiusSet::default_for(grid),
        })
    }

    fn build_problem(&mut self) -> Result<Problem> {
        let grid = self.grid()?;
        let p = self.cfg.problem.clone().ok_or_else(|| anyhow!("no [problem] section"))?;
        let coeff = field_of(&grid, &p.a);
        let op = match p.lambda {
            Some(l) => OperatorSpec::new(p.p, p.varsigma, l, coeff)?,
            None => {
                let cells = grid.cells();
                let lo = cells.iter().map(|&k| coeff.get(k)).fold(f64::INFINITY, f64::min);
                let hi = cells.iter().map(|&k| coeff.get(k)).fold(0.0, f64::max);
                if !(lo > 0.0) {
                    bail!("coefficient a has minimum {lo} on the domain; it must be positive");
                }
                OperatorSpec::new(p.p, p.varsigma, hi.max(1.0 / lo).max(1.0), coeff)?
            }
        };
        let f = match (&p.f, &p.draw) {
            (Some([fx, fy]), _) => {
                let (ex, ey) = (expr(fx), expr(fy));
                VectorField::from_fn(grid.clone(), |x, y| (ex.eval(x, y), ey.eval(x, y)))
            }
            (None, Some(d)) => SmoothDraw::new(d.seed.unwrap_or(self.cfg.seed), d.kmax).field(grid.clone()),
            (None, None) => VectorField::zeros(grid.clone()),
        };
        let g = field_of(&grid, &p.g);
        let spec = match p.kind {
            ProblemKindConfig::Dirichlet => ProblemSpec::dirichlet(op, f, g),
            ProblemKindConfig::DoubleObstacle => {
                let f1 = field_of(&grid, p.f1.as_deref().unwrap_or("0"));
                let f2 = field_of(&grid, p.f2.as_deref().unwrap_or("0"));
                ProblemSpec::double_obstacle(op, f, g, f1, f2)
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    fn solve(&mut self) -> Result<()> {
        if self.sol.is_some() {
            return Ok(());
        }
        let spec = self.build_problem()?;
        let p = self.cfg.problem.as_ref().expect("checked in build_problem");
        let opts = SolveOptions { tol_rel: p.tol_rel, tol_abs: p.tol_abs, max_iter: p.max_iter, paper_strict: p.paper_strict };
        let sol = pde::solve(&spec, &opts)?;
        self.spec = Some(spec);
        self.sol = Some(sol);
        Ok(())
    }

    fn pair(&mut self) -> Result<&ComparisonPair<f64>> {
        if self.pair.is_none() {
            self.solve()?;
            let (spec, sol) = (self.spec.as_ref().expect("solved"), self.sol.as_ref().expect("solved"));
            let pair = match spec.kind {
                pde::ProblemKind::DoubleObstacle => ComparisonPair::p2(spec, sol)?,
                _ => ComparisonPair::p1(spec, sol)?,
            };
            let radii = self.radii(pair.grid())?;
            self.pair = Some(pair.with_radii(radii));
        }
        Ok(self.pair.as_ref().expect("set above"))
    }

    fn input(&mut self) -> Result<Option<Field>> {
        if self.input.is_none() {
            if let Some(i) = &self.cfg.input {
                let f = io::load_field(&i.field).with_context(|| format!("loading input field {}", i.field.display()))?;
                self.input = Some(f);
            }
        }
        Ok(self.input.clone())
    }

    /// The fields the operators act on: the input field, or `G` and (when
    /// nonzero) `F` of the solved problem.
    fn bases(&mut self) -> Result<Vec<(String, Field)>> {
        if let Some(f) = self.input()? {
            return Ok(vec![("field".into(), f)]);
        }
        let pair = self.pair()?;
        let mut out = vec![("G".to_string(), pair.g.clone())];
        if pair.f.max_abs() > 0.0 {
            out.push(("F".into(), pair.f.clone()));
        }
        Ok(out)
    }

    fn maximal(&mut self, name: &str, f: &Field, alpha: f64) -> Result<Arc<Maximal>> {
        let key = (name.to_string(), alpha.to_bits());
        if let Some(m) = self.maximals.get(&key) {
            return Ok(m.clone());
        }
        let radii = self.radii(f.grid())?;
        let m = Arc::new(frac_maximal(f, alpha, &radii)?);
        self.maximals.insert(key, m.clone());
        Ok(m)
    }

    fn levels(&self, top: f64) -> Result<LevelGrid<f64>> {
        let l = &self.cfg.levels;
        Ok(LevelGrid::log_spaced(top * 10f64.powf(-l.decades), top, l.count)?)
    }

    fn balls(&mut self) -> Result<Vec<(usize, f64)>> {
        if let Some(b) = &self.balls {
            return Ok(b.clone());
        }
        let s = self.scan_cfg();
        let seed = self.ball_seed();
        let grid = self.pair()?.grid().clone();
        let b = verify::sample_balls(&grid, seed, s.interior, s.boundary, grid.diam() / 2.0)?;
        self.balls = Some(b.clone());
        Ok(b)
    }

    fn sweep(&mut self) -> Result<GammaSweep> {
        if let Some(s) = &self.sweep {
            return Ok(s.clone());
        }
        let balls = self.balls()?;
        let cap = self.scan_cfg().gamma_cap;
        let p = self.cfg.problem.as_ref().map_or(2.0, |p| p.p);
        let s = verify::pair_gamma_sweep(self.pair()?, LocalMode::Averaged, &balls, p, cap)?;
        self.sweep = Some(s.clone());
        Ok(s)
    }

    fn stage(&mut self, stage: Stage, out: &mut Emitter) -> Result<()> {
        match stage {
            Stage::Solve => self.stage_solve(out),
            Stage::Operators => self.stage_operators(out),
            Stage::Distributions => self.stage_distributions(out),
            Stage::Norms => self.stage_norms(out),
            Stage::Scans => self.stage_scans(out),
            Stage::Report => self.stage_report(out),
        }
    }

    fn stage_solve(&mut self, out: &mut Emitter) -> Result<()> {
        self.solve()?;
        let (spec, sol) = (self.spec.as_ref().expect("solved"), self.sol.as_ref().expect("solved"));
        let data_nonzero = spec.f.norm().max_abs() > 0.0;
        out.csv("solution", |b| io::write_field_csv(b, &sol.u))?;
        out.json("solution", &sol.u.grid().header())?;
        if data_nonzero {
            out.csv("data_F", |b| io::write_vector_csv(b, &spec.f))?;
        }
        let doc = SolveDoc { kind: &spec.kind.to_string(), lambda: spec.op.lambda, data_nonzero, meta: &sol.meta };
        out.json("solve", &doc)?;
        let energy: Vec<(f64, f64)> = sol.energy().iter().enumerate().map(|(i, &e)| (i as f64, e)).collect();
        out.dat("energy", "discrete energy per accepted step", ("step", "energy"), &energy)?;
        if let Some(src) = self.cfg.problem.as_ref().and_then(|p| p.exact.clone()) {
            let e = expr(&src);
            let g = sol.u.grid();
            let (mut max_err, mut max_val, mut sq) = (0.0f64, 0.0f64, 0.0);
            for k in g.cells() {
                let (x, y) = g.center(k);
                let v = e.eval(x, y);
                let d = (sol.u.get(k) - v).abs();
                max_err = max_err.max(d);
                max_val = max_val.max(v.abs());
                sq += d * d * g.cell_measure();
            }
            let doc = ErrorDoc {
                exact: src,
                max_abs_error: max_err,
                max_rel_error: if max_val > 0.0 { max_err / max_val } else { max_err },
                l2_error: sq.sqrt(),
            };
            out.json("error", &doc)?;
        }
        Ok(())
    }

    fn stage_operators(&mut self, out: &mut Emitter) -> Result<()> {
        for (name, f) in self.bases()? {
            for alpha in self.cfg.operators.alpha.clone() {
                let m = self.maximal(&name, &f, alpha)?;
                let stem = format!("maximal_{name}_{}", alpha_tag(alpha));
                out.csv(&stem, |b| io::write_field_csv(b, &m.field))?;
                out.json(&stem, &io::maximal_doc(&m))?;
            }
        }
        Ok(())
    }

    fn stage_distributions(&mut self, out: &mut Emitter) -> Result<()> {
        for (name, f) in self.bases()? {
            for alpha in self.cfg.operators.alpha.clone() {
                let m = self.maximal(&name, &f, alpha)?;
                let top = m.field.max_abs();
                if !(top > 0.0) {
                    continue;
                }
                let profile = dist_fn(&m.field, &self.levels(top)?);
                let stem = format!("fmd_{name}_{}", alpha_tag(alpha));
                out.csv(&stem, |b| io::write_profile_csv(b, &profile))?;
                let pts: Vec<(f64, f64)> = profile.lambdas().iter().copied().zip(profile.measures.iter().copied()).collect();
                out.dat(&stem, &format!("distribution of M_alpha {name}, alpha = {alpha}"), ("lambda", "measure"), &pts)?;
            }
        }
        Ok(())
    }

    fn stage_norms(&mut self, out: &mut Emitter) -> Result<()> {
        if self.cfg.spaces.norms.is_empty() {
            bail!("no [[spaces.norms]] configured");
        }
        let spaces: Vec<NormSpec<f64>> = self.cfg.spaces.norms.iter().map(|n| n.build()).collect::<fmdlab_core::Result<_>>()?;
        let (mut rows, mut docs) = (Vec::new(), Vec::new());
        let mut push = |target: &str, alpha: Option<f64>, r: NormReport| {
            rows.push(NormRow { target: target.into(), alpha, space: r.space.clone(), value: r.value });
            docs.push(NormDoc { target: target.into(), alpha, report: r });
        };
        let input = self.input()?;
        if let Some(f) = &input {
            for s in &spaces {
                push("field", None, norm_report(s, f)?);
            }
        }
        for (name, f) in self.bases()? {
            for alpha in self.cfg.operators.alpha.clone() {
                let m = self.maximal(&name, &f, alpha)?;
                for s in &spaces {
                    push(&format!("M_alpha {name}"), Some(alpha), norm_report(s, &m.field)?);
                }
            }
        }
        out.rows("norms", &rows)?;
        out.json("norms", &docs)?;
        let wants_pair = input.is_none() && self.cfg.spaces.compare && self.cfg.problem.is_some();
        if wants_pair && self.pair()?.f.max_abs() > 0.0 {
            let mode = self.cfg.spaces.mode;
            let gamma = match (mode, self.cfg.spaces.gamma) {
                (LocalMode::Bounded, g) => g,
                (LocalMode::Averaged, Some(g)) => Some(g),
                (LocalMode::Averaged, None) => {
                    let g = self.sweep()?.gamma.ok_or_else(|| anyhow!("the reverse Hölder sweep found no γ > 1"))?;
                    Some(g)
                }
            };
            let mut cmp = Vec::new();
            for alpha in self.cfg.operators.alpha.clone() {
                for s in &spaces {
                    cmp.push(verify::norm_comparison_report(self.pair()?, alpha, s, mode, gamma)?);
                }
            }
            out.rows("comparisons", &cmp)?;
            out.json("comparisons", &cmp)?;
        }
        Ok(())
    }

    fn stage_scans(&mut self, out: &mut Emitter) -> Result<()> {
        let s = self.scan_cfg();
        let alphas = self.cfg.operators.alpha.clone();
        let lcfg = self.cfg.levels.clone();
        let balls = self.balls()?;
        let grid = self.pair()?.grid().clone();
        let rows: Vec<BallRow> = balls
            .iter()
            .map(|&(c, r)| {
                let (i, j) = grid.ij(c);
                BallRow { center: c, i, j, radius: r }
            })
            .collect();
        out.rows("balls", &rows)?;
        let sweep = self.sweep()?;
        out.json("reverse_holder", &sweep)?;
        out.dat("reverse_holder", "reverse Holder sup ratio against gamma", ("gamma", "sup_ratio"), &sweep.curve)?;
        let (gamma, source) = match (s.gamma, sweep.gamma) {
            (Some(g), _) => (Some(g), "config"),
            (None, Some(g)) => (Some(g), "sweep"),
            (None, None) => (None, "none"),
        };
        let pair = self.pair()?;
        let ing = Ingredients {
            gamma,
            gamma_source: source,
            sweep_gamma: sweep.gamma,
            sweep_sup_ratio: sweep.sup_ratio,
            local_comparison: verify::check_local_comparison(pair, LocalMode::Averaged, &s.ingredient_eps, &balls)?,
            quasi_triangle: verify::pair_quasi_triangle(pair, LocalMode::Averaged, &balls)?,
            global_ratio: verify::check_global_comparison(pair)?,
        };
        out.json("ingredients", &ing)?;
        let n = DIM as f64;
        for &mode in &s.modes {
            let mtag = match mode {
                LocalMode::Averaged => "averaged",
                LocalMode::Bounded => "bounded",
            };
            let table = verify::check_local_comparison(pair, mode, &s.eps, &balls)?;
            out.rows(&format!("local_{mtag}"), &table.rows)?;
            out.json(&format!("local_{mtag}"), &table)?;
            for &alpha in &alphas {
                let top = pair.maximals(alpha)?.levels_g.values().last().copied().unwrap_or(0.0);
                if !(top > 0.0) {
                    bail!("M_α G vanishes at α = {alpha}");
                }
                let levels = LevelGrid::log_spaced(top * 10f64.powf(-lcfg.decades), top, lcfg.count)?;
                let g = match mode {
                    LocalMode::Averaged => {
                        let g = gamma.ok_or_else(|| anyhow!("the averaged scan needs γ and the sweep found none"))?;
                        Some(if alpha > 0.0 { g.min(n / (2.0 * alpha)) } else { g })
                    }
                    LocalMode::Bounded => None,
                };
                let report = verify::goodlambda_scan(pair, alpha, g, &table, &levels)?;
                let stem = format!("goodlambda_{mtag}_{}", alpha_tag(alpha));
                out.rows(&stem, &report.rows)?;
                out.json(&stem, &report)?;
                let pts: Vec<(f64, f64)> = report.summary.iter().map(|r| (r.eps, r.c_sup)).collect();
                out.dat(&format!("c_eps_{mtag}_{}", alpha_tag(alpha)), &format!("fitted C(eps), {mtag}, alpha = {alpha}"), ("eps", "C"), &pts)?;
            }
        }
        Ok(())
    }

    fn stage_report(&mut self, out: &mut Emitter) -> Result<()> {
        let inputs = if self.cfg.report.inputs.is_empty() {
            vec![self.cfg.output.dir.clone()]
        } else {
            self.cfg.report.inputs.clone()
        };
        let mut files = Vec::new();
        for p in inputs {
            if p.is_dir() {
                let mut found: Vec<PathBuf> = fs::read_dir(&p)
                    .with_context(|| format!("listing {}", p.display()))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|f| {
                        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
                        f.extension().is_some_and(|e| e == "json") && !name.starts_with("manifest") && name != format!("{SUMMARY}.json")
                    })
                    .collect();
                found.sort();
                files.extend(found);
            } else {
                files.push(p);
            }
        }
        if files.is_empty() {
            bail!("no JSON reports to merge");
        }
        let mut rows = Vec::new();
        let mut merged = BTreeMap::new();
        for f in &files {
            let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
            let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", f.display()))?;
            let label = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let mut flat = BTreeMap::new();
            flatten("", &v, &mut flat);
            for (k, val) in &flat {
                rows.push(SummaryRow { file: label.clone(), key: k.clone(), value: val.clone() });
            }
            merged.insert(label, flat);
        }
        out.rows(SUMMARY, &rows)?;
        out.json(SUMMARY, &merged)?;
        Ok(())
    }
}

/// Scalar leaves keyed by dotted path; arrays longer than 16 collapse to their length.
fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    use serde_json::Value;
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                flatten(&join(k), x, out);
            }
        }
        Value::Array(a) if a.len() > 16 => {
            out.insert(join("len"), a.len().to_string());
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                flatten(&format!("{prefix}[{i}]"), x, out);
            }
        }
        Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

fn inventory(dir: &Path, names: &[String]) -> Result<Vec<FileEntry>> {
    let mut names: Vec<&String> = names.iter().collect();
    names.sort();
    names.dedup();
    names
        .into_iter()
        .map(|n| {
            let bytes = fs::read(dir.join(n)).with_context(|| format!("reading back {n}"))?;
            Ok(FileEntry { path: n.clone(), bytes: bytes.len() as u64, sha256: hex::encode(Sha256::digest(&bytes)) })
        })
        .collect()
}

/// Runs `cmd` and writes the manifest. The error of a failed stage is returned
/// alongside the manifest that records it.
pub fn execute(cmd: Command, cfg: ExperimentConfig) -> Result<(RunManifest, Option<anyhow::Error>)> {
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let stages = stages_for(cmd, &cfg);
    let mut ctx = Ctx::new(cfg.clone());
    let mut records = Vec::new();
    let mut all = Vec::new();
    let mut failure = None;
    for stage in stages {
        let mut out = Emitter { dir: dir.clone(), formats: cfg.output.formats.clone(), files: Vec::new() };
        let t = Instant::now();
        let r = ctx.stage(stage, &mut out);
        records.push(StageRecord {
            stage,
            seconds: t.elapsed().as_secs_f64(),
            completed: r.is_ok(),
            files: out.files.clone(),
        });
        all.extend(out.files);
        if let Err(e) = r {
            failure = Some((stage, e.context(format!("stage `{}` failed", stage.name()))));
            break;
        }
    }
    let partial = failure.is_some() && records.last().is_some_and(|r| !r.files.is_empty());
    let manifest = RunManifest {
        tool: "fmdlab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cmd,
        config_hash: cfg.hash(),
        seeds: Seeds {
            run: cfg.seed,
            data_draw: cfg.problem.as_ref().and_then(|p| p.draw.as_ref()).map(|d| d.seed.unwrap_or(cfg.seed)),
            ball_sampling: ctx.ball_seed(),
        },
        threads: rayon::current_num_threads(),
        status: if failure.is_some() { "failed".into() } else { "ok".into() },
        failed_stage: failure.as_ref().map(|f| f.0),
        error: failure.as_ref().map(|f| format!("{:#}", f.1)),
        partial,
        stages: records,
        files: inventory(&dir, &all)?,
        resolved_config: cfg,
    };
    fs::write(dir.join(manifest_name(cmd)), io::to_json(&manifest)?)?;
    Ok((manifest, failure.map(|f| f.1)))
}
