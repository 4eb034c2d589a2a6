//! TOML run configuration. Every physical quantity carries its unit in the
//! key name.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};
use spectral_dmri::btpde::BtpdeOptions;
use spectral_dmri::eig::EigOptions;
use spectral_dmri::seq::{directions, Pgse};

use crate::error::{CliError, Result};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    mesh: Option<RawMesh>,
    physics: Option<RawPhysics>,
    eig: Option<RawEig>,
    #[serde(default)]
    sequence: Vec<RawSequence>,
    gradients: Option<RawGradients>,
    run: Option<RawRun>,
    btpde: Option<RawBtpde>,
    btspec: Option<RawBtspec>,
    significance: Option<RawSignificance>,
    output: Option<RawOutput>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMesh {
    node_file: Option<PathBuf>,
    ele_file: Option<PathBuf>,
    box_extent_um: Option<[f64; 3]>,
    box_cells: Option<[usize; 3]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPhysics {
    #[serde(rename = "D0_um2_per_ms")]
    d0_um2_per_ms: Option<f64>,
    rho: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEig {
    ls_min_um: f64,
    cache_dir: Option<PathBuf>,
    dense_threshold: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSequence {
    id: String,
    #[serde(rename = "type", default = "pgse_tag")]
    kind: String,
    delta_ms: f64,
    #[serde(rename = "Delta_ms")]
    big_delta_ms: f64,
}

fn pgse_tag() -> String {
    "pgse".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGradients {
    bvalues_s_per_mm2: Option<Vec<f64>>,
    #[serde(rename = "amplitudes_T_per_m")]
    amplitudes_t_per_m: Option<Vec<f64>>,
    directions: Option<usize>,
    hemisphere: Option<bool>,
    direction_list: Option<Vec<[f64; 3]>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    methods: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBtpde {
    atol: Option<f64>,
    rtol: Option<f64>,
    theta: Option<f64>,
    max_step_ms: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBtspec {
    projection_threshold: Option<f64>,
    a_delta_threshold: Option<f64>,
    support_fraction: Option<f64>,
    all_directions: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSignificance {
    thresholds: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    threads: Option<usize>,
    rms: Option<bool>,
    dump_matrices: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeshSource {
    Files { node: PathBuf, ele: PathBuf },
    Box { extent: [f64; 3], cells: [usize; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MethodKind {
    Mf,
    Mfga,
    Btpde,
    Btspec,
    Sta,
    Significance,
}

impl MethodKind {
    fn parse(s: &str) -> Option<MethodKind> {
        Some(match s {
            "mf" => MethodKind::Mf,
            "mfga" => MethodKind::Mfga,
            "btpde" => MethodKind::Btpde,
            "btspec" => MethodKind::Btspec,
            "sta" => MethodKind::Sta,
            "significance" => MethodKind::Significance,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Mf => "mf",
            MethodKind::Mfga => "mfga",
            MethodKind::Btpde => "btpde",
            MethodKind::Btspec => "btspec",
            MethodKind::Sta => "sta",
            MethodKind::Significance => "significance",
        }
    }

    /// Methods whose evaluation needs the Laplace eigendecomposition.
    pub fn needs_eig(&self) -> bool {
        !matches!(self, MethodKind::Btpde)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSpec {
    pub id: String,
    pub pgse: Pgse,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    BValues(Vec<f64>),
    Amplitudes(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigSettings {
    pub ls_min: f64,
    pub cache_dir: Option<PathBuf>,
    pub options: EigOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BtspecSettings {
    pub projection_threshold: f64,
    pub a_delta_threshold: f64,
    pub support_fraction: f64,
    pub all_directions: bool,
}

impl Default for BtspecSettings {
    fn default() -> Self {
        BtspecSettings {
            projection_threshold: 0.01,
            a_delta_threshold: 0.001,
            support_fraction: 0.01,
            all_directions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSettings {
    pub dir: PathBuf,
    pub threads: Option<usize>,
    pub rms: bool,
    pub dump_matrices: bool,
}

/// A validated configuration. Sections a subcommand does not need may be
/// absent; the accessors report the missing field.
#[derive(Debug, Clone)]
pub struct RunConfig {
    mesh: Option<MeshSource>,
    pub d0: f64,
    pub rho: f64,
    eig: Option<EigSettings>,
    pub sequences: Vec<SequenceSpec>,
    weighting: Option<Weighting>,
    pub directions: Vec<[f64; 3]>,
    pub methods: BTreeSet<MethodKind>,
    pub btpde: BtpdeOptions,
    pub btspec: BtspecSettings,
    pub significance_thresholds: Vec<f64>,
    pub output: OutputSettings,
    /// SHA-256 of the configuration file bytes, hex encoded.
    pub hash: String,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = RunConfig::parse(&text, base)?;
        cfg.hash = hex::encode(Sha256::digest(text.as_bytes()));
        Ok(cfg)
    }

    /// Parses and validates `text`; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<RunConfig> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| format!("byte {}", s.start))
                .unwrap_or_else(|| "<document>".into());
            CliError::config(field, e.message().to_string())
        })?;
        validate(raw, base, hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn mesh(&self) -> Result<&MeshSource> {
        self.mesh
            .as_ref()
            .ok_or_else(|| CliError::config("mesh", "section is required"))
    }

    pub fn eig(&self) -> Result<&EigSettings> {
        self.eig
            .as_ref()
            .ok_or_else(|| CliError::config("eig", "section is required"))
    }

    pub fn weighting(&self) -> Result<&Weighting> {
        self.weighting
            .as_ref()
            .ok_or_else(|| CliError::config("gradients", "section is required"))
    }

    /// Checks what signal-producing commands need.
    pub fn require_signals(&self) -> Result<()> {
        self.mesh()?;
        if self.sequences.is_empty() {
            return Err(CliError::config("sequence", "at least one [[sequence]] is required"));
        }
        self.weighting()?;
        if self.directions.is_empty() {
            return Err(CliError::config("gradients.directions", "at least one direction is required"));
        }
        if self.methods.is_empty() {
            return Err(CliError::config("run.methods", "at least one method is required"));
        }
        if self.methods.iter().any(|m| m.needs_eig()) {
            self.eig()?;
        }
        Ok(())
    }
}

fn positive(field: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::config(field, format!("must be positive and finite, got {v}")))
    }
}

fn validate(raw: RawConfig, base: &Path, hash: String) -> Result<RunConfig> {
    let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };

    let mesh = match raw.mesh {
        None => None,
        Some(m) => Some(match (m.node_file, m.ele_file, m.box_extent_um, m.box_cells) {
            (Some(node), Some(ele), None, None) => MeshSource::Files {
                node: resolve(node),
                ele: resolve(ele),
            },
            (None, None, Some(extent), Some(cells)) => {
                for (i, &e) in extent.iter().enumerate() {
                    positive(&format!("mesh.box_extent_um[{i}]"), e)?;
                }
                for (i, &c) in cells.iter().enumerate() {
                    if c == 0 {
                        return Err(CliError::config(format!("mesh.box_cells[{i}]"), "must be at least 1"));
                    }
                }
                MeshSource::Box { extent, cells }
            }
            (Some(_), None, ..) | (None, Some(_), ..) => {
                return Err(CliError::config(
                    "mesh",
                    "node_file and ele_file must be given together",
                ))
            }
            _ => {
                return Err(CliError::config(
                    "mesh",
                    "give exactly one source: node_file + ele_file, or box_extent_um + box_cells",
                ))
            }
        }),
    };

    let (d0, rho) = match raw.physics {
        None => (2.0, 1.0),
        Some(p) => (
            positive("physics.D0_um2_per_ms", p.d0_um2_per_ms.unwrap_or(2.0))?,
            positive("physics.rho", p.rho.unwrap_or(1.0))?,
        ),
    };

    let eig = match raw.eig {
        None => None,
        Some(e) => {
            let mut options = EigOptions::default();
            if let Some(t) = e.dense_threshold {
                options.dense_threshold = t;
            }
            Some(EigSettings {
                ls_min: positive("eig.ls_min_um", e.ls_min_um)?,
                cache_dir: e.cache_dir.map(resolve),
                options,
            })
        }
    };

    let mut sequences = Vec::with_capacity(raw.sequence.len());
    let mut ids = HashSet::new();
    for (i, s) in raw.sequence.into_iter().enumerate() {
        let field = |k: &str| format!("sequence[{i}].{k}");
        if s.kind != "pgse" {
            return Err(CliError::config(field("type"), format!("unsupported sequence type `{}`", s.kind)));
        }
        if s.id.is_empty() || !s.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(CliError::config(field("id"), "must be non-empty and use only [A-Za-z0-9_-]"));
        }
        if !ids.insert(s.id.clone()) {
            return Err(CliError::config(field("id"), format!("duplicate id `{}`", s.id)));
        }
        let pgse = Pgse::new(s.delta_ms, s.big_delta_ms)
            .map_err(|e| CliError::config(field("delta_ms"), e.to_string()))?;
        sequences.push(SequenceSpec { id: s.id, pgse });
    }

    let (weighting, dirs) = match raw.gradients {
        None => (None, Vec::new()),
        Some(g) => {
            let weighting = match (g.bvalues_s_per_mm2, g.amplitudes_t_per_m) {
                (Some(b), None) => Weighting::BValues(check_list("gradients.bvalues_s_per_mm2", b)?),
                (None, Some(a)) => Weighting::Amplitudes(check_list("gradients.amplitudes_T_per_m", a)?),
                _ => {
                    return Err(CliError::config(
                        "gradients",
                        "give exactly one of bvalues_s_per_mm2 and amplitudes_T_per_m",
                    ))
                }
            };
            let dirs = match (g.direction_list, g.directions) {
                (Some(list), None) => {
                    for (i, d) in list.iter().enumerate() {
                        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                        if (n - 1.0).abs() > 1e-12 {
                            return Err(CliError::config(
                                format!("gradients.direction_list[{i}]"),
                                format!("must be a unit vector, norm is {n}"),
                            ));
                        }
                    }
                    if list.is_empty() {
                        return Err(CliError::config("gradients.direction_list", "must not be empty"));
                    }
                    list
                }
                (None, count) => directions(count.unwrap_or(30), g.hemisphere.unwrap_or(false))
                    .map_err(|e| CliError::config("gradients.directions", e.to_string()))?,
                (Some(_), Some(_)) => {
                    return Err(CliError::config(
                        "gradients",
                        "give at most one of directions and direction_list",
                    ))
                }
            };
            (Some(weighting), dirs)
        }
    };

    let mut methods = BTreeSet::new();
    if let Some(run) = raw.run {
        for (i, m) in run.methods.iter().enumerate() {
            let kind = MethodKind::parse(m).ok_or_else(|| {
                CliError::config(
                    format!("run.methods[{i}]"),
                    format!("unknown method `{m}` (expected mf, mfga, btpde, btspec, sta or significance)"),
                )
            })?;
            methods.insert(kind);
        }
    }

    let mut btpde = BtpdeOptions::default();
    if let Some(b) = raw.btpde {
        if let Some(v) = b.atol {
            btpde.atol = positive("btpde.atol", v)?;
        }
        if let Some(v) = b.rtol {
            btpde.rtol = positive("btpde.rtol", v)?;
        }
        if let Some(v) = b.theta {
            if !(0.5..=1.0).contains(&v) {
                return Err(CliError::config("btpde.theta", format!("must lie in [0.5, 1], got {v}")));
            }
            btpde.theta = v;
        }
        if let Some(v) = b.max_step_ms {
            btpde.max_step = Some(positive("btpde.max_step_ms", v)?);
        }
    }

    let mut btspec = BtspecSettings::default();
    if let Some(b) = raw.btspec {
        if let Some(v) = b.projection_threshold {
            btspec.projection_threshold = positive("btspec.projection_threshold", v)?;
        }
        if let Some(v) = b.a_delta_threshold {
            btspec.a_delta_threshold = positive("btspec.a_delta_threshold", v)?;
        }
        if let Some(v) = b.support_fraction {
            if !(v > 0.0 && v <= 1.0) {
                return Err(CliError::config("btspec.support_fraction", format!("must lie in (0, 1], got {v}")));
            }
            btspec.support_fraction = v;
        }
        btspec.all_directions = b.all_directions.unwrap_or(false);
    }

    let significance_thresholds = match raw.significance {
        None => vec![0.001, 0.01],
        Some(s) => {
            for (i, &t) in s.thresholds.iter().enumerate() {
                positive(&format!("significance.thresholds[{i}]"), t)?;
            }
            s.thresholds
        }
    };

    let output = match raw.output {
        None => OutputSettings {
            dir: base.join("out"),
            threads: None,
            rms: false,
            dump_matrices: false,
        },
        Some(o) => {
            if o.threads == Some(0) {
                return Err(CliError::config("output.threads", "must be at least 1"));
            }
            OutputSettings {
                dir: resolve(o.dir.unwrap_or_else(|| PathBuf::from("out"))),
                threads: o.threads,
                rms: o.rms.unwrap_or(false),
                dump_matrices: o.dump_matrices.unwrap_or(false),
            }
        }
    };

    Ok(RunConfig {
        mesh,
        d0,
        rho,
        eig,
        sequences,
        weighting,
        directions: dirs,
        methods,
        btpde,
        btspec,
        significance_thresholds,
        output,
        hash,
    })
}

fn check_list(field: &str, values: Vec<f64>) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(CliError::config(field, "must not be empty"));
    }
    for (i, &v) in values.iter().enumerate() {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(CliError::config(format!("{field}[{i}]"), format!("must be non-negative, got {v}")));
        }
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
[mesh]
box_extent_um = [10.0, 10.0, 10.0]
box_cells = [4, 4, 4]

[physics]
D0_um2_per_ms = 2.0

[eig]
ls_min_um = 5.0

[[sequence]]
id = "seq1"
delta_ms = 10.6
Delta_ms = 13.0

[gradients]
bvalues_s_per_mm2 = [0.0, 1000.0]
directions = 6

[run]
methods = ["mf", "btpde"]
"#;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/tmp/x"))
    }

    #[test]
    fn parses_full_config() {
        let c = parse(FULL).unwrap();
        assert_eq!(c.sequences[0].id, "seq1");
        assert_eq!(c.directions.len(), 6);
        assert_eq!(c.btpde.atol, 1e-4);
        assert_eq!(c.btpde.rtol, 1e-2);
        assert_eq!(c.output.dir, Path::new("/tmp/x/out"));
        assert!(c.require_signals().is_ok());
    }

    fn field_of(text: &str) -> String {
        match parse(text).unwrap_err() {
            CliError::Config { field, .. } => field,
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn reports_field_paths() {
        let neg = FULL.replace("[0.0, 1000.0]", "[0.0, -1.0]");
        assert_eq!(field_of(&neg), "gradients.bvalues_s_per_mm2[1]");
        let bad = FULL.replace("\"btpde\"]", "\"fem\"]");
        assert_eq!(field_of(&bad), "run.methods[1]");
        let both = FULL.replace("box_cells = [4, 4, 4]", "box_cells = [4, 4, 4]\nnode_file = \"a.node\"");
        assert_eq!(field_of(&both), "mesh");
        let timing = FULL.replace("Delta_ms = 13.0", "Delta_ms = 5.0");
        assert_eq!(field_of(&timing), "sequence[0].delta_ms");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = FULL.replace("[physics]", "[physics]\nD0 = 3.0");
        assert!(matches!(parse(&text), Err(CliError::Config { .. })));
    }

    #[test]
    fn missing_sections_are_reported_on_use() {
        let c = parse("[mesh]\nbox_extent_um = [1.0, 1.0, 1.0]\nbox_cells = [1, 1, 1]\n").unwrap();
        assert!(c.mesh().is_ok());
        assert!(matches!(c.require_signals(), Err(CliError::Config { .. })));
    }
}
