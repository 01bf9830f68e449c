//! Run artifacts: the frozen solution CSV schema, checker verdict blocks,
//! the run manifest with content checksums, and the plain-text report
//! renderer. Everything here is deterministic given the inputs, except the
//! manifest's wall-clock timings.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{AprioriReport, NormReport};
use crate::chain::ChainApprox;
use crate::error::{Error, Result};
use crate::pathsim::PathBundle;
use crate::solver::SolutionQuadruple;

/// Version of the manifest/report layout; bumped on any schema change.
pub const FORMAT_VERSION: u32 = 1;

/// Frozen header of the solution CSV.
pub const SOLUTION_CSV_HEADER: &str = "m,t,x,regime,Y,Z,Kplus,Kminus,contact_flag";

/// Outcome of one checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    #[serde(rename = "PASS")]
    Pass,
    #[serde(rename = "FAIL")]
    Fail,
    #[serde(rename = "NOT-APPLICABLE")]
    NotApplicable,
}

impl Status {
    pub fn label(&self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::NotApplicable => "NOT-APPLICABLE",
        }
    }
}

/// JSON-compatible verdict block emitted by every checker invocation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Verdict {
    pub name: String,
    pub status: Status,
    /// Most adverse margin the checker saw (negative = slack), when the
    /// check has a numeric margin at all.
    #[serde(default)]
    pub worst_margin: Option<f64>,
    /// Worst node as `(step, state)`, when one exists.
    #[serde(default)]
    pub witness: Option<(usize, usize)>,
    pub detail: String,
}

impl Verdict {
    pub fn pass(name: &str, detail: String) -> Self {
        Verdict { name: name.into(), status: Status::Pass, worst_margin: None, witness: None, detail }
    }

    pub fn fail(name: &str, detail: String) -> Self {
        Verdict { name: name.into(), status: Status::Fail, worst_margin: None, witness: None, detail }
    }

    pub fn not_applicable(name: &str, detail: String) -> Self {
        Verdict {
            name: name.into(),
            status: Status::NotApplicable,
            worst_margin: None,
            witness: None,
            detail,
        }
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.worst_margin = Some(margin);
        self
    }

    pub fn with_witness(mut self, m: usize, s: usize) -> Self {
        self.witness = Some((m, s));
        self
    }
}

/// Exit code implied by a verdict list: 0 iff nothing failed.
pub fn exit_code(verdicts: &[Verdict]) -> i32 {
    if verdicts.iter().any(|v| v.status == Status::Fail) { 1 } else { 0 }
}

/// One timed phase of a run, in milliseconds.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timing {
    pub phase: String,
    pub millis: f64,
}

/// Run manifest: configuration hash, tool version, per-file checksums of
/// every artifact written next to it, timings, and the verdicts.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub tool_version: String,
    pub subcommand: String,
    /// SHA-256 of the canonical JSON form of the effective configuration
    /// (after any `--seed` override).
    pub config_sha256: String,
    pub seed: u64,
    /// `file name → SHA-256` of artifacts in the run directory.
    pub files: BTreeMap<String, String>,
    pub timings: Vec<Timing>,
    pub verdicts: Vec<Verdict>,
    #[serde(default)]
    pub norms: Option<NormReport>,
    #[serde(default)]
    pub apriori: Option<AprioriReport>,
}

impl Manifest {
    pub fn new(subcommand: &str, config_sha256: String, seed: u64) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.into(),
            config_sha256,
            seed,
            files: BTreeMap::new(),
            timings: Vec::new(),
            verdicts: Vec::new(),
            norms: None,
            apriori: None,
        }
    }

    pub fn from_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            Error::Config(format!(
                "manifest parse error at line {}, column {}: {e}",
                e.line(),
                e.column()
            ))
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization cannot fail")
    }
}

/// Hex-encoded SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Renders the solution CSV under the frozen schema; floats use the
/// shortest round-trip decimal form, so the file re-parses exactly and is
/// byte-stable across runs.
pub fn solution_csv(chain: &ChainApprox, sol: &SolutionQuadruple) -> String {
    let n = chain.n_nodes();
    // Flush negative zeros so the dump is visually and byte-wise canonical.
    let clean = |v: f64| if v == 0.0 { 0.0 } else { v };
    let mut out = String::from(SOLUTION_CSV_HEADER);
    out.push('\n');
    for m in 0..=sol.m_steps {
        let t = chain.times[m];
        for s in 0..sol.n_states {
            let flag = sol.contact[m * sol.n_states + s];
            out.push_str(&format!(
                "{m},{t},{x},{i},{y},{z},{kp},{km},{flag}\n",
                x = chain.x_nodes[s % n],
                i = s / n,
                y = clean(sol.y_at(m, s)),
                z = clean(sol.z_at(m, s)),
                kp = clean(sol.kplus_cumulative(m, s)),
                km = clean(sol.kminus_cumulative(m, s)),
            ));
        }
    }
    out
}

/// One parsed row of a solution CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolutionRecord {
    pub m: usize,
    pub t: f64,
    pub x: f64,
    pub regime: usize,
    pub y: f64,
    pub z: f64,
    pub kplus: f64,
    pub kminus: f64,
    pub contact_flag: i8,
}

/// Parses a solution CSV produced by [`solution_csv`]; errors carry the
/// 1-based line number.
pub fn parse_solution_csv(text: &str) -> Result<Vec<SolutionRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == SOLUTION_CSV_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Config(format!(
                "solution CSV line 1: bad header `{h}`, expected `{SOLUTION_CSV_HEADER}`"
            )));
        }
        None => return Err(Error::Config("solution CSV is empty".into())),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Config(format!(
                "solution CSV line {lineno}: expected 9 fields, got {}",
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Config(format!("solution CSV line {lineno}: bad {what}"));
        let float = |pos: usize, what: &str| -> Result<f64> {
            let v: f64 = fields[pos].parse().map_err(|_| bad(what))?;
            if v.is_finite() { Ok(v) } else { Err(bad(what)) }
        };
        rows.push(SolutionRecord {
            m: fields[0].parse().map_err(|_| bad("step index m"))?,
            t: float(1, "time t")?,
            x: float(2, "coordinate x")?,
            regime: fields[3].parse().map_err(|_| bad("regime"))?,
            y: float(4, "Y")?,
            z: float(5, "Z")?,
            kplus: float(6, "Kplus")?,
            kminus: float(7, "Kminus")?,
            contact_flag: match fields[8] {
                "-1" => -1,
                "0" => 0,
                "1" => 1,
                _ => return Err(Error::Config(format!(
                    "solution CSV line {lineno}: contact_flag must be -1, 0 or 1"
                ))),
            },
        });
    }
    Ok(rows)
}

/// Renders the optional path dump: one row per (path, grid point).
pub fn paths_csv(bundle: &PathBundle) -> String {
    let mut out = String::from("path,t");
    for l in 0..bundle.d {
        out.push_str(&format!(",x_{}", l + 1));
    }
    out.push_str(",regime\n");
    for p in 0..bundle.n_paths {
        for (m, &t) in bundle.grid.iter().enumerate() {
            out.push_str(&format!("{p},{t}"));
            for &xl in bundle.x(p, m) {
                out.push_str(&format!(",{xl}"));
            }
            out.push_str(&format!(",{}\n", bundle.regime(p, m)));
        }
    }
    out
}

/// Result of re-reading a run directory against its manifest.
#[derive(Clone, Debug)]
pub struct ReportSummary {
    pub text: String,
    /// False on any checksum mismatch or FAIL verdict.
    pub clean: bool,
}

fn fmt_margin(v: Option<f64>) -> String {
    match v {
        Some(m) => format!("{m:>13.4e}"),
        None => format!("{:>13}", "-"),
    }
}

/// Renders the human-readable summary for a run directory: verifies the
/// per-file checksums, then prints the check, norm, and (when present)
/// a priori tables in manifest order. Refuses directories written by a
/// different tool version.
pub fn render_report(dir: &Path, manifest: &Manifest) -> Result<ReportSummary> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "manifest format version {} unsupported (this tool writes {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let current = env!("CARGO_PKG_VERSION");
    if manifest.tool_version != current {
        return Err(Error::Config(format!(
            "run directory written by version {}, this tool is {current}; refusing mixed versions",
            manifest.tool_version
        )));
    }

    let mut text = String::new();
    let mut clean = true;
    text.push_str(&format!(
        "run: subcommand={} seed={} config_sha256={}\n",
        manifest.subcommand, manifest.seed, manifest.config_sha256
    ));

    text.push_str("\nartifacts:\n");
    for (name, recorded) in &manifest.files {
        let line = match std::fs::read(dir.join(name)) {
            Ok(bytes) => {
                if sha256_hex(&bytes) == *recorded {
                    format!("  {name:<24} checksum OK\n")
                } else {
                    clean = false;
                    format!("  {name:<24} CHECKSUM MISMATCH (file modified after the run)\n")
                }
            }
            Err(_) => {
                clean = false;
                format!("  {name:<24} MISSING\n")
            }
        };
        text.push_str(&line);
    }

    text.push_str("\nchecks:\n");
    text.push_str(&format!(
        "  {:<20} {:<16} {:>13}  witness\n",
        "name", "status", "worst margin"
    ));
    for v in &manifest.verdicts {
        if v.status == Status::Fail {
            clean = false;
        }
        let witness = match v.witness {
            Some((m, s)) => format!("(m={m}, s={s})"),
            None => "-".into(),
        };
        text.push_str(&format!(
            "  {:<20} {:<16} {}  {}\n",
            v.name,
            v.status.label(),
            fmt_margin(v.worst_margin),
            witness
        ));
    }

    if let Some(n) = &manifest.norms {
        text.push_str("\nnorms (squared):\n");
        for (label, value) in [
            ("S2(Y)", n.s2_y),
            ("H2(Z)", n.h2_z),
            ("H2_mu(V)", n.hmu2_v),
            ("S2(K+)", n.s2_kplus),
            ("S2(K-)", n.s2_kminus),
            ("data size", n.data_size),
        ] {
            text.push_str(&format!("  {label:<12} {value:.6e}\n"));
        }
    }

    if let Some(ap) = &manifest.apriori {
        text.push_str("\na priori sequence (last entry = reference):\n");
        text.push_str(&format!(
            "  {:>3} {:>13} {:>13} {:>13}\n",
            "n", "diff solution", "diff data", "control ratio"
        ));
        for (i, e) in ap.entries.iter().enumerate() {
            let ratio = match e.control_ratio {
                Some(r) => format!("{r:>13.4e}"),
                None => format!("{:>13}", "-"),
            };
            text.push_str(&format!(
                "  {:>3} {:>13.4e} {:>13.4e} {}\n",
                i, e.diff_solution, e.diff_data, ratio
            ));
        }
        text.push_str(&format!(
            "  diffs decreasing: {}; common barriers: {}; max solution/data ratio: {:.4e}\n",
            ap.diffs_decreasing, ap.common_barriers, ap.max_solution_to_data_ratio
        ));
    }

    text.push_str("\ntimings:\n");
    for t in &manifest.timings {
        text.push_str(&format!("  {:<20} {:>10.1} ms\n", t.phase, t.millis));
    }
    text.push_str(&format!("\noverall: {}\n", if clean { "CLEAN" } else { "FLAGGED" }));
    Ok(ReportSummary { text, clean })
}
