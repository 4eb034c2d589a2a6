//! Pipeline stages and the subcommands built from them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use spectral_dmri::analysis::{
    c_delta, parseval_report, record_difference, remove_one_significance, rgb_direction,
    significant_modes, sta_adc, AnalysisError,
};
use spectral_dmri::btspec::{bt_eigendecomposition, support_region, BtEig};
use spectral_dmri::eig::{length_scale, read_eig, solve_interval, write_eig, EigReport, LaplaceEig};
use spectral_dmri::fem::{assemble_centered, FemMatrices};
use spectral_dmri::mesh::{generate_box_mesh, load_mesh, Mesh, MeshReport};
use spectral_dmri::mf::{mf_signal, mfga_signal, MfModel};
use spectral_dmri::records::{Method, SignalRecord};
use spectral_dmri::seq::{amplitude_for_b, bvalue, Gradient, Pgse};

use crate::config::{MeshSource, MethodKind, RunConfig, Weighting};
use crate::error::{CliError, Result};
use crate::manifest::{CacheInfo, Manifest};
use crate::output::{num, read_signal_csv, sha256_hex, signal_csv, write_atomic, OutputDir, SignalRow, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    MeshInfo,
    Eig,
    Signal,
    Btspec,
    Sta,
    Run,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MeshInfo => "mesh-info",
            Command::Eig => "eig",
            Command::Signal => "signal",
            Command::Btspec => "btspec",
            Command::Sta => "sta",
            Command::Run => "run",
        }
    }
}

/// Command-line settings that take precedence over the configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub rms: bool,
    pub dump_matrices: bool,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out: OutputDir,
    manifest: Manifest,
    rms: bool,
    dump: bool,
}

struct Prepared {
    mesh: Mesh,
    fingerprint: [u8; 32],
}

/// Runs `cmd` and writes its outputs plus `manifest.json`. The manifest is
/// written with `complete = false` before any stage runs and again, with the
/// error, if a stage fails.
pub fn execute(cmd: Command, cfg: &RunConfig, ov: &Overrides) -> Result<PathBuf> {
    let root = ov.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    let threads = ov
        .threads
        .or(cfg.output.threads)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Numeric {
            stage: "setup",
            message: e.to_string(),
        })?;
    let out = OutputDir::create(&root)?;
    let mut ctx = Ctx {
        cfg,
        out,
        manifest: Manifest::new(cmd.name(), Some(cfg.hash.clone()), threads),
        rms: ov.rms || cfg.output.rms,
        dump: ov.dump_matrices || cfg.output.dump_matrices,
    };
    ctx.manifest.write(&ctx.out)?;
    let result = pool.install(|| dispatch(cmd, &mut ctx));
    match result {
        Ok(()) => {
            ctx.manifest.complete = true;
            ctx.manifest.write(&ctx.out)?;
            Ok(root)
        }
        Err(e) => {
            ctx.manifest.error = Some(e.to_string());
            // The stage error is what the caller needs; a failed manifest
            // write here only loses the diagnostic copy.
            let _ = ctx.manifest.write(&ctx.out);
            Err(e)
        }
    }
}

fn dispatch(cmd: Command, ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    match cmd {
        Command::MeshInfo => {
            mesh_stage(ctx)?;
        }
        Command::Eig => {
            let p = mesh_stage(ctx)?;
            let fem = assemble_stage(ctx, &p)?;
            eig_stage(ctx, &p, &fem)?;
        }
        Command::Signal | Command::Run => {
            cfg.require_signals()?;
            let p = mesh_stage(ctx)?;
            let fem = assemble_stage(ctx, &p)?;
            let needs_eig = cfg.methods.iter().any(|m| m.needs_eig());
            let (eig, model) = if needs_eig {
                let eig = eig_stage(ctx, &p, &fem)?;
                let model = model_stage(ctx, &p, &fem, &eig)?;
                (Some(eig), Some(model))
            } else {
                (None, None)
            };
            let records = signal_stage(ctx, &fem, model.as_ref())?;
            if cmd == Command::Run {
                compare_stage(ctx, &records)?;
                if cfg.methods.contains(&MethodKind::Sta) {
                    sta_stage(ctx, &p, model.as_ref())?;
                }
                if let (Some(eig), Some(model)) = (&eig, &model) {
                    if cfg.methods.contains(&MethodKind::Significance) {
                        significance_stage(ctx, &p, model)?;
                    }
                    if cfg.methods.contains(&MethodKind::Btspec) {
                        btspec_stage(ctx, eig, model)?;
                    }
                }
            }
        }
        Command::Btspec => {
            if cfg.sequences.is_empty() {
                return Err(CliError::config("sequence", "at least one [[sequence]] is required"));
            }
            cfg.weighting()?;
            let p = mesh_stage(ctx)?;
            let fem = assemble_stage(ctx, &p)?;
            let eig = eig_stage(ctx, &p, &fem)?;
            let model = model_stage(ctx, &p, &fem, &eig)?;
            btspec_stage(ctx, &eig, &model)?;
        }
        Command::Sta => {
            if cfg.sequences.is_empty() {
                return Err(CliError::config("sequence", "at least one [[sequence]] is required"));
            }
            let p = mesh_stage(ctx)?;
            let model = match cfg.eig() {
                Ok(_) => {
                    let fem = assemble_stage(ctx, &p)?;
                    let eig = eig_stage(ctx, &p, &fem)?;
                    Some(model_stage(ctx, &p, &fem, &eig)?)
                }
                Err(_) => None,
            };
            sta_stage(ctx, &p, model.as_ref())?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct MeshInfo {
    nodes: usize,
    elements: usize,
    boundary_faces: usize,
    volume_um3: f64,
    surface_area_um2: f64,
    directional_area_um2: BTreeMap<&'static str, f64>,
    centroid_um: [f64; 3],
    bounding_box_um: [[f64; 3]; 2],
    fingerprint: String,
    dangling_nodes_removed: usize,
    reoriented_elements: usize,
    discarded_markers: bool,
    warnings: Vec<String>,
}

fn mesh_stage(ctx: &mut Ctx) -> Result<Prepared> {
    let cfg = ctx.cfg;
    let source = cfg.mesh()?.clone();
    let (mesh, report) = ctx.manifest.stage("mesh", || {
        let (mesh, report) = match &source {
            MeshSource::Files { node, ele } => load_mesh(node, ele).map_err(|e| CliError::stage("mesh", e))?,
            MeshSource::Box { extent, cells } => (
                generate_box_mesh(*extent, *cells).map_err(|e| CliError::stage("mesh", e))?,
                MeshReport::default(),
            ),
        };
        let mesh = if report.dangling_nodes.is_empty() {
            mesh
        } else {
            log::warn!("removing {} unreferenced nodes", report.dangling_nodes.len());
            mesh.compact().0
        };
        Ok((mesh, report))
    })?;
    let fingerprint = mesh.fingerprint();
    let axis = |u: [f64; 3]| mesh.directional_area(u).map_err(|e| CliError::stage("mesh", e));
    let (lo, hi) = mesh.bounding_box();
    let info = MeshInfo {
        nodes: mesh.n_nodes(),
        elements: mesh.n_elements(),
        boundary_faces: mesh.boundary_faces().len(),
        volume_um3: mesh.volume(),
        surface_area_um2: mesh.surface_area(),
        directional_area_um2: BTreeMap::from([
            ("x", axis([1.0, 0.0, 0.0])?),
            ("y", axis([0.0, 1.0, 0.0])?),
            ("z", axis([0.0, 0.0, 1.0])?),
        ]),
        centroid_um: mesh.centroid(),
        bounding_box_um: [lo, hi],
        fingerprint: hex::encode(fingerprint),
        dangling_nodes_removed: report.dangling_nodes.len(),
        reoriented_elements: report.reoriented,
        discarded_markers: report.discarded_markers,
        warnings: report.warnings.clone(),
    };
    for w in &report.warnings {
        log::warn!("{w}");
    }
    ctx.out.write_json("mesh_info.json", &info)?;
    Ok(Prepared { mesh, fingerprint })
}

fn assemble_stage(ctx: &mut Ctx, p: &Prepared) -> Result<FemMatrices> {
    let d0 = ctx.cfg.d0;
    let fem = ctx
        .manifest
        .stage("assemble", || assemble_centered(&p.mesh, d0).map_err(|e| CliError::stage("assemble", e)))?;
    if ctx.dump {
        ctx.out.write("matrices/mass.mtx", fem.mass.to_coordinate_text().as_bytes())?;
        ctx.out.write("matrices/stiffness.mtx", fem.stiffness.to_coordinate_text().as_bytes())?;
        for (i, axis) in ["x", "y", "z"].iter().enumerate() {
            ctx.out.write(
                &format!("matrices/moment_{axis}.mtx"),
                fem.moments[i].to_coordinate_text().as_bytes(),
            )?;
        }
    }
    Ok(fem)
}

/// Cache file for the key (mesh fingerprint, D₀, l_s_min).
pub fn cache_path(dir: &Path, fingerprint: &[u8; 32], d0: f64, ls_min: f64) -> PathBuf {
    let mut h = Sha256::new();
    h.update(fingerprint);
    h.update(d0.to_le_bytes());
    h.update(ls_min.to_le_bytes());
    let key = hex::encode(h.finalize());
    dir.join(format!("eig-{}.mfeig", &key[..24]))
}

fn load_cached(path: &Path, p: &Prepared, d0: f64, ls_min: f64) -> Option<(LaplaceEig, Vec<u8>)> {
    let bytes = fs::read(path).ok()?;
    match read_eig(bytes.as_slice(), Some(&p.fingerprint)) {
        Ok(eig) if eig.d0 == d0 && eig.ls_min == ls_min && eig.n_nodes() == p.mesh.n_nodes() => Some((eig, bytes)),
        Ok(_) => {
            log::warn!("{}: cache key mismatch, recomputing", path.display());
            None
        }
        Err(e) => {
            log::warn!("{}: {e}, recomputing", path.display());
            None
        }
    }
}

fn eig_stage(ctx: &mut Ctx, p: &Prepared, fem: &FemMatrices) -> Result<LaplaceEig> {
    let cfg = ctx.cfg;
    let settings = cfg.eig()?.clone();
    let dir = settings.cache_dir.clone().unwrap_or_else(|| ctx.out.path("cache"));
    let path = cache_path(&dir, &p.fingerprint, cfg.d0, settings.ls_min);
    let mut hit = false;
    let (eig, bytes) = ctx.manifest.stage("eig", || {
        if let Some(found) = load_cached(&path, p, cfg.d0, settings.ls_min) {
            hit = true;
            return Ok(found);
        }
        let (eig, report): (LaplaceEig, EigReport) =
            solve_interval(fem, settings.ls_min, p.fingerprint, &settings.options)
                .map_err(|e| CliError::stage("eig", e))?;
        log::info!(
            "{} eigenpairs ({:?}, {} slices, {} factorizations, max residual {:e})",
            eig.neig(),
            report.solver,
            report.slices,
            report.factorizations,
            report.max_residual
        );
        let mut bytes = Vec::new();
        write_eig(&eig, &mut bytes).map_err(|e| CliError::stage("eig", e))?;
        write_atomic(&path, &bytes)?;
        Ok((eig, bytes))
    })?;
    ctx.manifest.mark_cache_hit("eig", hit);
    ctx.manifest.eig_cache = Some(CacheInfo {
        path: path.display().to_string(),
        hit,
        sha256: sha256_hex(&bytes),
        neig: eig.neig(),
    });
    let mut t = Table::new(["n", "lambda_ms^-1", "l_s_um"]);
    for (i, &l) in eig.lambdas.iter().enumerate() {
        let ls = if i == 0 {
            String::new()
        } else {
            num(length_scale(l, eig.d0).map_err(|e| CliError::stage("eig", e))?)
        };
        t.push(vec![(i + 1).to_string(), num(l), ls]);
    }
    ctx.out.write_table("eigenvalues.csv", &t)?;
    Ok(eig)
}

fn model_stage(ctx: &mut Ctx, p: &Prepared, fem: &FemMatrices, eig: &LaplaceEig) -> Result<MfModel> {
    let rho = ctx.cfg.rho;
    ctx.manifest.stage("mf_model", || {
        MfModel::build(eig, fem, rho, &p.fingerprint).map_err(|e| CliError::stage("mf_model", e))
    })
}

/// One configured (sequence, weighting) pair with its amplitude and b-value.
#[derive(Debug, Clone)]
struct Shell {
    seq_index: usize,
    pgse: Pgse,
    amplitude: f64,
    bvalue: f64,
}

fn shells(cfg: &RunConfig) -> Result<Vec<Shell>> {
    let mut out = Vec::new();
    for (seq_index, s) in cfg.sequences.iter().enumerate() {
        match cfg.weighting()? {
            Weighting::BValues(bs) => {
                for &b in bs {
                    let amplitude = amplitude_for_b(&s.pgse, b).map_err(|e| CliError::stage("signal", e))?;
                    out.push(Shell {
                        seq_index,
                        pgse: s.pgse,
                        amplitude,
                        bvalue: b,
                    });
                }
            }
            Weighting::Amplitudes(gs) => {
                for &amplitude in gs {
                    out.push(Shell {
                        seq_index,
                        pgse: s.pgse,
                        amplitude,
                        bvalue: bvalue(&s.pgse, amplitude),
                    });
                }
            }
        }
    }
    Ok(out)
}

fn b_label(b: f64) -> String {
    if b.fract() == 0.0 && b.abs() < 1e15 {
        format!("{}", b as i64)
    } else {
        num(b)
    }
}

fn signal_stage(ctx: &mut Ctx, fem: &FemMatrices, model: Option<&MfModel>) -> Result<Vec<(String, SignalRecord)>> {
    let cfg = ctx.cfg;
    let shells = shells(cfg)?;
    let methods: Vec<Method> = cfg
        .methods
        .iter()
        .filter_map(|m| match m {
            MethodKind::Mf => Some(Method::Mf),
            MethodKind::Mfga => Some(Method::Mfga),
            MethodKind::Btpde => Some(Method::Btpde),
            _ => None,
        })
        .collect();
    let mut items = Vec::new();
    for shell in &shells {
        for dir in &cfg.directions {
            for &m in &methods {
                items.push((shell, *dir, m));
            }
        }
    }
    let results = ctx.manifest.stage("signal", || {
        items
            .par_iter()
            .map(|&(shell, dir, method)| {
                let g = Gradient::new(dir, shell.amplitude).map_err(|e| CliError::stage("signal", e))?;
                let start = Instant::now();
                let mut rec = match method {
                    Method::Mf => mf_signal(model.expect("eig stage ran"), &g, &shell.pgse),
                    Method::Mfga => mfga_signal(model.expect("eig stage ran"), shell.bvalue, &g, &shell.pgse)
                        .map_err(|e| CliError::stage("signal", e))?,
                    Method::Btpde => spectral_dmri::btpde::btpde_signal(fem, &g, &shell.pgse, &cfg.btpde, cfg.rho)
                        .map_err(|e| CliError::stage("signal", e))?,
                };
                let secs = start.elapsed().as_secs_f64();
                rec.bvalue = shell.bvalue;
                if !(rec.signal.re.is_finite() && rec.signal.im.is_finite()) {
                    return Err(CliError::Numeric {
                        stage: "signal",
                        message: format!("non-finite {} signal", method.tag()),
                    });
                }
                Ok((cfg.sequences[shell.seq_index].id.clone(), rec, secs))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut rows = Vec::with_capacity(results.len());
    let mut records = Vec::with_capacity(results.len());
    for (id, rec, secs) in results {
        ctx.manifest.add_signal_time(rec.method.tag(), secs);
        rows.push(SignalRow::from_record(&id, &rec));
        records.push((id, rec));
    }
    ctx.out.write("signals.csv", &signal_csv(&rows))?;
    ctx.out.write_json("signals.json", &rows)?;
    Ok(records)
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupDifference {
    pub seq_id: String,
    pub bvalue_s_mm2: f64,
    pub directions: usize,
    pub e: f64,
    pub e_percent: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rms: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub method: String,
    pub reference: String,
    pub groups: Vec<GroupDifference>,
    pub overall_e: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overall_rms: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub comparisons: Vec<Comparison>,
}

type Keyed<'a> = Vec<(&'a str, &'a SignalRecord)>;

/// Groups rows of one method by (sequence id, b-value) in first-seen order.
fn group<'a>(records: &'a [(String, SignalRecord)], method: Method) -> Vec<((String, u64), Keyed<'a>)> {
    let mut out: Vec<((String, u64), Keyed<'a>)> = Vec::new();
    for (id, r) in records.iter().filter(|(_, r)| r.method == method) {
        let key = (id.clone(), r.bvalue.to_bits());
        match out.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push((id, r)),
            None => out.push((key, vec![(id, r)])),
        }
    }
    out
}

fn mismatch(msg: String) -> CliError {
    CliError::stage("compare", AnalysisError::MismatchedSweep(msg))
}

/// E of `method` against `reference` for every (sequence, b) group.
pub fn compare_records(
    records: &[(String, SignalRecord)],
    reference: &[(String, SignalRecord)],
    method: Method,
    ref_method: Method,
    rms: bool,
) -> Result<Comparison> {
    let a = group(records, method);
    let b = group(reference, ref_method);
    if a.is_empty() {
        return Err(mismatch(format!("no {} rows", method.tag())));
    }
    if a.len() != b.len() {
        return Err(mismatch(format!("{} groups against {} reference groups", a.len(), b.len())));
    }
    let mut groups = Vec::new();
    let mut all_a = Vec::new();
    let mut all_b = Vec::new();
    for ((ka, ra), (kb, rb)) in a.iter().zip(&b) {
        if ka != kb {
            return Err(mismatch(format!(
                "group ({}, b={}) against ({}, b={})",
                ka.0,
                f64::from_bits(ka.1),
                kb.0,
                f64::from_bits(kb.1)
            )));
        }
        let xa: Vec<SignalRecord> = ra.iter().map(|(_, r)| (*r).clone()).collect();
        let xb: Vec<SignalRecord> = rb.iter().map(|(_, r)| (*r).clone()).collect();
        let d = record_difference(&xa, &xb).map_err(|e| CliError::stage("compare", e))?;
        groups.push(GroupDifference {
            seq_id: ka.0.clone(),
            bvalue_s_mm2: f64::from_bits(ka.1),
            directions: d.count,
            e: d.e,
            e_percent: d.percent(),
            rms: rms.then_some(d.rms),
        });
        all_a.extend(xa);
        all_b.extend(xb);
    }
    let d = record_difference(&all_a, &all_b).map_err(|e| CliError::stage("compare", e))?;
    Ok(Comparison {
        method: method.tag().to_string(),
        reference: ref_method.tag().to_string(),
        groups,
        overall_e: d.e,
        overall_rms: rms.then_some(d.rms),
    })
}

fn compare_stage(ctx: &mut Ctx, records: &[(String, SignalRecord)]) -> Result<()> {
    let methods = &ctx.cfg.methods;
    let mut pairs = Vec::new();
    if methods.contains(&MethodKind::Btpde) {
        for (k, m) in [(MethodKind::Mf, Method::Mf), (MethodKind::Mfga, Method::Mfga)] {
            if methods.contains(&k) {
                pairs.push((m, Method::Btpde));
            }
        }
    } else if methods.contains(&MethodKind::Mf) && methods.contains(&MethodKind::Mfga) {
        pairs.push((Method::Mfga, Method::Mf));
    }
    if pairs.is_empty() {
        return Ok(());
    }
    let rms = ctx.rms;
    let report = ctx.manifest.stage("compare", || {
        let comparisons = pairs
            .iter()
            .map(|&(m, r)| compare_records(records, records, m, r, rms))
            .collect::<Result<Vec<_>>>()?;
        Ok(CompareReport { comparisons })
    })?;
    ctx.out.write_json("compare.json", &report)
}

fn sole_method(rows: &[SignalRow], flag: Option<&str>, path: &Path) -> Result<Method> {
    let tag = match flag {
        Some(t) => t.to_uppercase(),
        None => {
            let mut tags: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
            tags.sort_unstable();
            tags.dedup();
            match tags.as_slice() {
                [one] => one.to_string(),
                [] => {
                    return Err(CliError::Format {
                        path: path.to_path_buf(),
                        message: "no signal rows".into(),
                    })
                }
                _ => {
                    return Err(CliError::Format {
                        path: path.to_path_buf(),
                        message: format!("several methods present ({}); select one", tags.join(", ")),
                    })
                }
            }
        }
    };
    Method::from_tag(&tag).ok_or_else(|| CliError::Format {
        path: path.to_path_buf(),
        message: format!("unknown method `{tag}`"),
    })
}

fn read_records(path: &Path) -> Result<(Vec<SignalRow>, Vec<(String, SignalRecord)>)> {
    let rows = read_signal_csv(path)?;
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.to_record().map(|rec| (r.seq_id.clone(), rec)).map_err(|message| CliError::Format {
                path: path.to_path_buf(),
                message: format!("row {}: {message}", i + 1),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, records))
}

/// Options of the `compare` subcommand.
#[derive(Debug, Clone)]
pub struct CompareArgs {
    pub signals: PathBuf,
    pub reference: PathBuf,
    pub method: Option<String>,
    pub reference_method: Option<String>,
    pub out: PathBuf,
    pub rms: bool,
}

/// Compares two signal CSV files and writes `compare.json` to `args.out`.
pub fn compare_files(args: &CompareArgs) -> Result<CompareReport> {
    let out = OutputDir::create(&args.out)?;
    let mut manifest = Manifest::new("compare", None, 1);
    manifest.write(&out)?;
    let result = (|| -> Result<CompareReport> {
        let (rows_a, rec_a) = read_records(&args.signals)?;
        let (rows_b, rec_b) = read_records(&args.reference)?;
        let m = sole_method(&rows_a, args.method.as_deref(), &args.signals)?;
        let r = sole_method(&rows_b, args.reference_method.as_deref(), &args.reference)?;
        let report = manifest.stage("compare", || {
            Ok(CompareReport {
                comparisons: vec![compare_records(&rec_a, &rec_b, m, r, args.rms)?],
            })
        })?;
        out.write_json("compare.json", &report)?;
        Ok(report)
    })();
    match result {
        Ok(report) => {
            manifest.complete = true;
            manifest.write(&out)?;
            Ok(report)
        }
        Err(e) => {
            manifest.error = Some(e.to_string());
            let _ = manifest.write(&out);
            Err(e)
        }
    }
}

const AXES: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn sta_stage(ctx: &mut Ctx, p: &Prepared, model: Option<&MfModel>) -> Result<()> {
    let cfg = ctx.cfg;
    let dirs: Vec<[f64; 3]> = if cfg.directions.is_empty() {
        AXES.to_vec()
    } else {
        cfg.directions.clone()
    };
    let table = ctx.manifest.stage("sta", || {
        let mut t = Table::new([
            "seq_id",
            "delta_ms",
            "Delta_ms",
            "ux",
            "uy",
            "uz",
            "C_delta_ms^0.5",
            "A_u_over_V_um^-1",
            "sta_adc_um2_per_ms",
            "mf_adc_um2_per_ms",
        ]);
        let volume = p.mesh.volume();
        for s in &cfg.sequences {
            for &u in &dirs {
                let area = p.mesh.directional_area(u).map_err(|e| CliError::stage("sta", e))?;
                let sta = sta_adc(&p.mesh, cfg.d0, &s.pgse, u).map_err(|e| CliError::stage("sta", e))?;
                let mf = model.map(|m| num(m.adc(&s.pgse, u))).unwrap_or_default();
                t.push(vec![
                    s.id.clone(),
                    num(s.pgse.delta()),
                    num(s.pgse.big_delta()),
                    num(u[0]),
                    num(u[1]),
                    num(u[2]),
                    num(c_delta(&s.pgse)),
                    num(area / volume),
                    num(sta),
                    mf,
                ]);
            }
        }
        Ok(t)
    })?;
    ctx.out.write_table("sta.csv", &table)
}

#[derive(Serialize)]
struct SignificantSet {
    column: String,
    threshold: f64,
    /// 1-based mode indices.
    modes: Vec<usize>,
}

#[derive(Serialize)]
struct SignificanceSummary {
    parameter_count: usize,
    parseval_truncated: [f64; 3],
    parseval_exact: [f64; 3],
    significant: Vec<SignificantSet>,
}

fn significance_stage(ctx: &mut Ctx, p: &Prepared, model: &MfModel) -> Result<()> {
    let cfg = ctx.cfg;
    let shells: Vec<Shell> = shells(cfg)?.into_iter().filter(|s| s.bvalue > 0.0).collect();
    let columns = ctx.manifest.stage("significance", || {
        shells
            .iter()
            .map(|s| {
                let grads = cfg
                    .directions
                    .iter()
                    .map(|&d| Gradient::new(d, s.amplitude))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| CliError::stage("significance", e))?;
                let e = remove_one_significance(model, &grads, &s.pgse)
                    .map_err(|e| CliError::stage("significance", e))?;
                let name = format!("E_rm_{}_b{}", cfg.sequences[s.seq_index].id, b_label(s.bvalue));
                Ok((name, e))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut header: Vec<String> = [
        "n",
        "lambda_ms^-1",
        "l_s_um",
        "a1x",
        "a1y",
        "a1z",
        "rgb_r",
        "rgb_g",
        "rgb_b",
        "undirected",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(columns.iter().map(|(n, _)| n.clone()));
    let mut t = Table::new(header);
    for i in 0..model.neig() {
        let a = model.first_row(i);
        let rgb = rgb_direction(a);
        let l = model.lambdas[i];
        let ls = if i == 0 {
            String::new()
        } else {
            num(length_scale(l, model.d0).map_err(|e| CliError::stage("significance", e))?)
        };
        let mut row = vec![
            (i + 1).to_string(),
            num(l),
            ls,
            num(a[0]),
            num(a[1]),
            num(a[2]),
            num(rgb.rgb[0]),
            num(rgb.rgb[1]),
            num(rgb.rgb[2]),
            rgb.undirected.to_string(),
        ];
        for (_, e) in &columns {
            row.push(if i == 0 { String::new() } else { num(e[i - 1]) });
        }
        t.push(row);
    }
    ctx.out.write_table("significance.csv", &t)?;
    let mut significant = Vec::new();
    for (name, e) in &columns {
        for &thr in &cfg.significance_thresholds {
            let flags = significant_modes(e, thr);
            significant.push(SignificantSet {
                column: name.clone(),
                threshold: thr,
                modes: flags
                    .iter()
                    .enumerate()
                    .filter(|(_, &f)| f)
                    .map(|(k, _)| k + 2)
                    .collect(),
            });
        }
    }
    let parseval = parseval_report(model, &p.mesh);
    ctx.out.write_json(
        "significance.json",
        &SignificanceSummary {
            parameter_count: model.parameter_count(),
            parseval_truncated: parseval.truncated,
            parseval_exact: parseval.exact,
            significant,
        },
    )
}

#[derive(Serialize)]
struct BtSummary {
    seq_id: String,
    bvalue_s_mm2: f64,
    amplitude_t_m: f64,
    direction: [f64; 3],
    modes: usize,
    significant: usize,
    condition: f64,
    residual: f64,
    ill_conditioned: bool,
}

fn btspec_stage(ctx: &mut Ctx, eig: &LaplaceEig, model: &MfModel) -> Result<()> {
    let cfg = ctx.cfg;
    let settings = cfg.btspec.clone();
    let dirs: Vec<[f64; 3]> = if cfg.directions.is_empty() {
        vec![AXES[0]]
    } else if settings.all_directions {
        cfg.directions.clone()
    } else {
        vec![cfg.directions[0]]
    };
    let shells: Vec<Shell> = shells(cfg)?.into_iter().filter(|s| s.amplitude > 0.0).collect();
    let mut items = Vec::new();
    for s in &shells {
        for (k, &d) in dirs.iter().enumerate() {
            items.push((s, k, d));
        }
    }
    let out = &ctx.out;
    let summaries = ctx.manifest.stage("btspec", || {
        items
            .par_iter()
            .map(|&(s, k, d)| {
                let g = d.map(|c| c * s.amplitude);
                let bt = bt_eigendecomposition(model, g).map_err(|e| CliError::stage("btspec", e))?;
                let id = &cfg.sequences[s.seq_index].id;
                let dir = format!("btspec/{}_b{}_d{}", id, b_label(s.bvalue), k + 1);
                write_bt(out, &dir, &bt, eig, &s.pgse, &settings)?;
                Ok(BtSummary {
                    seq_id: id.clone(),
                    bvalue_s_mm2: s.bvalue,
                    amplitude_t_m: s.amplitude,
                    direction: d,
                    modes: bt.len(),
                    significant: bt.significant(settings.projection_threshold).len(),
                    condition: bt.condition,
                    residual: bt.residual,
                    ill_conditioned: bt.ill_conditioned,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    ctx.out.write_json("btspec/summary.json", &summaries)
}

fn write_bt(
    out: &OutputDir,
    dir: &str,
    bt: &BtEig,
    eig: &LaplaceEig,
    seq: &Pgse,
    settings: &crate::config::BtspecSettings,
) -> Result<()> {
    let significant = bt.significant(settings.projection_threshold);
    let mut modes = Table::new(["j", "re_mu_ms^-1", "im_mu_ms^-1", "abs_V1j", "significant"]);
    for j in 0..bt.len() {
        modes.push(vec![
            (j + 1).to_string(),
            num(bt.mus[j].re),
            num(bt.mus[j].im),
            num(bt.projection(j).norm()),
            significant.contains(&j).to_string(),
        ]);
    }
    out.write_table(&format!("{dir}/bt_modes.csv"), &modes)?;

    let a = bt.a_delta(seq.delta()).map_err(|e| CliError::stage("btspec", e))?;
    let mut grid = Table::new(["j", "k", "abs_Ajk", "marked"]);
    for j in 0..a.nrows() {
        for k in 0..a.ncols() {
            let v = a[(j, k)].norm();
            grid.push(vec![
                (j + 1).to_string(),
                (k + 1).to_string(),
                num(v),
                (v >= settings.a_delta_threshold).to_string(),
            ]);
        }
    }
    out.write_table(&format!("{dir}/a_delta_grid.csv"), &grid)?;

    for &j in &significant {
        let support = support_region(bt, eig, j, settings.support_fraction).map_err(|e| CliError::stage("btspec", e))?;
        let mut t = Table::new(["node_index", "abs_psi"]);
        for (node, v) in support {
            t.push(vec![(node + 1).to_string(), num(v)]);
        }
        out.write_table(&format!("{dir}/support_{}.csv", j + 1), &t)?;
    }
    Ok(())
}
