//! Architecture parameters: the schema describing one WindMill instance,
//! its validation rules, the standard preset and the text file format.
//!
//! Arch file grammar (UTF-8, `#` starts a comment):
//!
//! ```text
//! [array]
//! rows = 8                 # >= 2
//! cols = 8                 # >= 2
//! topology = mesh2d        # mesh2d | onehop | torus
//! exec_mode = mcmd         # mcmd | scmd
//! context_depth_mcmd = 16
//! shared_reg_mode = global # line | row | quadrant | global
//! shared_reg_count = 4
//! data_width = 32
//! cpe = on                 # on | off; off turns every C cell into a G cell
//! row = LLLLLLLL           # optional, repeated once per grid row (G/L/C)
//!
//! [memory]
//! sm_banks = 16
//! bank_depth = 256
//! bank_width = 32
//!
//! [system]
//! rpu_count = 4
//! ```
//!
//! `rows` and `cols` are mandatory; every other key defaults to the
//! standard preset value. Without `row` lines the grid is the perimeter
//! layout (LSU ring around GPEs, CPE at (1,1) when `cpe = on`).

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interconnect;
use crate::pe::context_capacity;

/// Grid coordinate, ordered row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Coord {
    pub row: usize,
    pub col: usize,
}

impl Coord {
    pub const fn new(row: usize, col: usize) -> Self {
        Coord { row, col }
    }

    pub fn manhattan(self, other: Coord) -> usize {
        self.row.abs_diff(other.row) + self.col.abs_diff(other.col)
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PeType {
    Gpe,
    Lsu,
    Cpe,
}

impl PeType {
    pub fn letter(self) -> char {
        match self {
            PeType::Gpe => 'G',
            PeType::Lsu => 'L',
            PeType::Cpe => 'C',
        }
    }

    fn from_letter(c: char) -> Option<Self> {
        match c {
            'G' => Some(PeType::Gpe),
            'L' => Some(PeType::Lsu),
            'C' => Some(PeType::Cpe),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Topology {
    Mesh2D,
    OneHop,
    Torus,
}

impl Topology {
    pub fn keyword(self) -> &'static str {
        match self {
            Topology::Mesh2D => "mesh2d",
            Topology::OneHop => "onehop",
            Topology::Torus => "torus",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Self> {
        match s {
            "mesh2d" | "mesh" => Some(Topology::Mesh2D),
            "onehop" | "1hop" => Some(Topology::OneHop),
            "torus" => Some(Topology::Torus),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExecMode {
    /// One configuration stream shared by every PE of a row.
    Scmd,
    /// Private configuration stream per PE.
    Mcmd,
}

/// Scope of the shared register file. `Line` is column scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SharedRegMode {
    Line,
    Row,
    Quadrant,
    Global,
}

impl SharedRegMode {
    pub fn keyword(self) -> &'static str {
        match self {
            SharedRegMode::Line => "line",
            SharedRegMode::Row => "row",
            SharedRegMode::Quadrant => "quadrant",
            SharedRegMode::Global => "global",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchParams {
    pub rows: usize,
    pub cols: usize,
    /// Row-major PE type map, `rows * cols` entries.
    pub pe_types: Vec<PeType>,
    pub topology: Topology,
    pub exec_mode: ExecMode,
    pub sm_banks: usize,
    pub bank_depth: usize,
    pub bank_width: u32,
    pub context_depth_mcmd: usize,
    pub shared_reg_mode: SharedRegMode,
    pub shared_reg_count: usize,
    pub rpu_count: usize,
    pub data_width: u32,
}

/// Location of the controller PE in the standard layout: the interior cell
/// next to the host bridge corner.
pub const STANDARD_CPE: Coord = Coord::new(1, 1);

/// Perimeter LSUs around GPEs, optionally with one CPE at (1,1).
pub fn perimeter_layout(rows: usize, cols: usize, with_cpe: bool) -> Vec<PeType> {
    let mut map = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let edge = r == 0 || c == 0 || r + 1 == rows || c + 1 == cols;
            map.push(if edge { PeType::Lsu } else { PeType::Gpe });
        }
    }
    if with_cpe && rows > 2 && cols > 2 {
        map[STANDARD_CPE.row * cols + STANDARD_CPE.col] = PeType::Cpe;
    }
    map
}

impl ArchParams {
    /// The standard 8x8 instance: 28 perimeter LSUs, 35 GPEs, one CPE,
    /// 16 banks of 256 x 32-bit words, four RPUs.
    pub fn standard() -> Self {
        ArchParams {
            rows: 8,
            cols: 8,
            pe_types: perimeter_layout(8, 8, true),
            topology: Topology::Mesh2D,
            exec_mode: ExecMode::Mcmd,
            sm_banks: 16,
            bank_depth: 256,
            bank_width: 32,
            context_depth_mcmd: 16,
            shared_reg_mode: SharedRegMode::Global,
            shared_reg_count: 4,
            rpu_count: 4,
            data_width: 32,
        }
    }

    /// Perimeter-layout instance of arbitrary size, other fields standard.
    pub fn with_grid(rows: usize, cols: usize, with_cpe: bool) -> Self {
        ArchParams { rows, cols, pe_types: perimeter_layout(rows, cols, with_cpe), ..ArchParams::standard() }
    }

    pub fn pe_type(&self, at: Coord) -> PeType {
        self.pe_types[at.row * self.cols + at.col]
    }

    pub fn contains(&self, at: Coord) -> bool {
        at.row < self.rows && at.col < self.cols
    }

    pub fn index(&self, at: Coord) -> usize {
        at.row * self.cols + at.col
    }

    pub fn coord(&self, index: usize) -> Coord {
        Coord::new(index / self.cols, index % self.cols)
    }

    /// All coordinates in row-major order.
    pub fn coords(&self) -> impl Iterator<Item = Coord> + '_ {
        (0..self.rows * self.cols).map(|i| self.coord(i))
    }

    /// LSU coordinates in row-major order; position in this list is the
    /// LSU's requester index at the parallel access interface.
    pub fn lsus(&self) -> Vec<Coord> {
        self.coords().filter(|&c| self.pe_type(c) == PeType::Lsu).collect()
    }

    pub fn cpe(&self) -> Option<Coord> {
        self.coords().find(|&c| self.pe_type(c) == PeType::Cpe)
    }

    pub fn context_capacity(&self) -> usize {
        context_capacity(self.exec_mode, self.context_depth_mcmd)
    }

    /// Shared memory capacity in words.
    pub fn sm_words(&self) -> usize {
        self.sm_banks * self.bank_depth
    }

    /// Runs every check and returns all violations.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut v = Vec::new();
        let mut bad = |field: &'static str, message: String| v.push(Violation { field, message });
        if self.rows < 2 {
            bad("rows", "rows ≥ 2".into());
        }
        if self.cols < 2 {
            bad("cols", "cols ≥ 2".into());
        }
        if self.rows > 254 {
            bad("rows", "rows ≤ 254".into());
        }
        if self.cols > 254 {
            bad("cols", "cols ≤ 254".into());
        }
        if self.pe_types.len() != self.rows * self.cols {
            bad(
                "pe_types",
                format!("grid map has {} cells, expected rows×cols = {}", self.pe_types.len(), self.rows * self.cols),
            );
        } else {
            let cpes = self.pe_types.iter().filter(|&&t| t == PeType::Cpe).count();
            if cpes > 1 {
                bad("pe_types", format!("at most one CPE per RPU, found {cpes}"));
            }
        }
        if self.data_width != 32 {
            bad("data_width", "data_width must be 32".into());
        }
        if self.bank_width != self.data_width {
            bad("bank_width", "bank_width must equal data_width".into());
        }
        if self.sm_banks == 0 || !self.sm_banks.is_power_of_two() {
            bad("sm_banks", "sm_banks must be a power of two".into());
        }
        if self.bank_depth < 2 || !self.bank_depth.is_power_of_two() {
            bad("bank_depth", "bank_depth must be a power of two ≥ 2".into());
        }
        if self.sm_words() > 32768 {
            bad("bank_depth", "sm_banks×bank_depth must not exceed 32768 words".into());
        }
        if self.context_depth_mcmd == 0 {
            bad("context_depth_mcmd", "context_depth_mcmd ≥ 1".into());
        } else if context_capacity(ExecMode::Scmd, self.context_depth_mcmd) > u16::MAX as usize {
            bad("context_depth_mcmd", "context capacity exceeds 65535 words".into());
        }
        if !(1..=16).contains(&self.shared_reg_count) {
            bad("shared_reg_count", "shared_reg_count must be in 1..=16".into());
        }
        if !(1..=8).contains(&self.rpu_count) {
            bad("rpu_count", "rpu_count must be in 1..=8".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(ValidationError { violations: v })
        }
    }

    pub fn validated(self) -> Result<Self, ValidationError> {
        self.validate().map(|()| self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid architecture: {}", .violations.iter().map(|v| format!("{}: {}", v.field, v.message)).collect::<Vec<_>>().join("; "))]
pub struct ValidationError {
    pub violations: Vec<Violation>,
}

impl ValidationError {
    pub fn fields(&self) -> Vec<&'static str> {
        self.violations.iter().map(|v| v.field).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArchError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

/// Resource counts standing in for silicon area in architecture sweeps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub rows: usize,
    pub cols: usize,
    pub topology: Topology,
    pub exec_mode: ExecMode,
    pub gpe: usize,
    pub lsu: usize,
    pub cpe: usize,
    /// Configuration words per PE.
    pub context_words_per_pe: usize,
    pub context_bits_total: u64,
    pub sm_banks: usize,
    pub bank_depth: usize,
    pub bank_width: u32,
    pub sm_bits: u64,
    pub sm_bytes: u64,
    /// Directed neighbor links (one per output port wire).
    pub links: usize,
    pub shared_regs_total: usize,
    pub rpu_count: usize,
}

impl ResourceReport {
    pub const CSV_HEADER: &'static str = "rows,cols,topology,exec_mode,gpe,lsu,cpe,context_words_per_pe,context_bits_total,sm_banks,bank_depth,bank_width,sm_bytes,links,shared_regs_total,rpu_count";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.rows,
            self.cols,
            self.topology.keyword(),
            match self.exec_mode {
                ExecMode::Scmd => "scmd",
                ExecMode::Mcmd => "mcmd",
            },
            self.gpe,
            self.lsu,
            self.cpe,
            self.context_words_per_pe,
            self.context_bits_total,
            self.sm_banks,
            self.bank_depth,
            self.bank_width,
            self.sm_bytes,
            self.links,
            self.shared_regs_total,
            self.rpu_count
        )
    }
}

/// Resource counts of one RPU. Pure function of the parameters.
pub fn derive_counts(params: &ArchParams) -> ResourceReport {
    let count = |t| params.pe_types.iter().filter(|&&x| x == t).count();
    let pes = params.rows * params.cols;
    let ctx = params.context_capacity();
    let sm_bits = (params.sm_banks * params.bank_depth) as u64 * params.bank_width as u64;
    let instances = interconnect::scope_instances(params.shared_reg_mode, params.rows, params.cols);
    ResourceReport {
        rows: params.rows,
        cols: params.cols,
        topology: params.topology,
        exec_mode: params.exec_mode,
        gpe: count(PeType::Gpe),
        lsu: count(PeType::Lsu),
        cpe: count(PeType::Cpe),
        context_words_per_pe: ctx,
        context_bits_total: pes as u64 * ctx as u64 * 64,
        sm_banks: params.sm_banks,
        bank_depth: params.bank_depth,
        bank_width: params.bank_width,
        sm_bits,
        sm_bytes: sm_bits / 8,
        links: interconnect::directed_links(params.topology, params.rows, params.cols),
        shared_regs_total: instances * params.shared_reg_count,
        rpu_count: params.rpu_count,
    }
}

/// Parses an arch description and validates it.
pub fn parse_arch_file(text: &str) -> Result<ArchParams, ArchError> {
    let params = parse_unvalidated(text)?;
    params.validate()?;
    Ok(params)
}

fn parse_unvalidated(text: &str) -> Result<ArchParams, ParseError> {
    #[derive(PartialEq, Clone, Copy)]
    enum Section {
        None,
        Array,
        Memory,
        System,
    }
    let err = |line: usize, message: String| ParseError { line, message };

    let mut p = ArchParams::standard();
    let mut section = Section::None;
    let mut seen: Vec<&str> = Vec::new();
    let mut grid: Vec<(usize, String)> = Vec::new();
    let mut rows = None;
    let mut cols = None;
    let mut cpe: Option<bool> = None;
    let mut any_section = false;

    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name =
                name.strip_suffix(']').ok_or_else(|| err(ln, format!("malformed section header `{line}`")))?.trim();
            section = match name {
                "array" => Section::Array,
                "memory" => Section::Memory,
                "system" => Section::System,
                other => return Err(err(ln, format!("unknown section `[{other}]`"))),
            };
            any_section = true;
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| err(ln, format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if section == Section::None {
            return Err(err(ln, format!("key `{key}` outside of any section")));
        }
        let num = |v: &str| -> Result<usize, ParseError> {
            v.parse::<usize>().map_err(|_| err(ln, format!("`{key}` expects an unsigned integer, got `{v}`")))
        };
        let known: &[&str] = match section {
            Section::Array => &[
                "rows",
                "cols",
                "topology",
                "exec_mode",
                "context_depth_mcmd",
                "shared_reg_mode",
                "shared_reg_count",
                "data_width",
                "cpe",
                "row",
            ],
            Section::Memory => &["sm_banks", "bank_depth", "bank_width"],
            Section::System => &["rpu_count"],
            Section::None => &[],
        };
        let Some(&static_key) = known.iter().find(|&&k| k == key) else {
            return Err(err(ln, format!("unknown key `{key}`")));
        };
        if static_key != "row" {
            if seen.contains(&static_key) {
                return Err(err(ln, format!("duplicate key `{key}`")));
            }
            seen.push(static_key);
        }
        match static_key {
            "rows" => rows = Some(num(value)?),
            "cols" => cols = Some(num(value)?),
            "topology" => {
                p.topology =
                    Topology::from_keyword(value).ok_or_else(|| err(ln, format!("unknown topology `{value}`")))?
            }
            "exec_mode" => {
                p.exec_mode = match value {
                    "scmd" => ExecMode::Scmd,
                    "mcmd" => ExecMode::Mcmd,
                    _ => return Err(err(ln, format!("unknown exec_mode `{value}`"))),
                }
            }
            "context_depth_mcmd" => p.context_depth_mcmd = num(value)?,
            "shared_reg_mode" => {
                p.shared_reg_mode = match value {
                    "line" => SharedRegMode::Line,
                    "row" => SharedRegMode::Row,
                    "quadrant" => SharedRegMode::Quadrant,
                    "global" => SharedRegMode::Global,
                    _ => return Err(err(ln, format!("unknown shared_reg_mode `{value}`"))),
                }
            }
            "shared_reg_count" => p.shared_reg_count = num(value)?,
            "data_width" => p.data_width = num(value)? as u32,
            "cpe" => {
                cpe = Some(match value {
                    "on" => true,
                    "off" => false,
                    _ => return Err(err(ln, format!("`cpe` expects on|off, got `{value}`"))),
                })
            }
            "row" => grid.push((ln, value.to_string())),
            "sm_banks" => p.sm_banks = num(value)?,
            "bank_depth" => p.bank_depth = num(value)?,
            "bank_width" => p.bank_width = num(value)? as u32,
            "rpu_count" => p.rpu_count = num(value)?,
            _ => unreachable!(),
        }
    }

    if !any_section {
        return Err(err(1, "empty architecture description".into()));
    }
    let last = text.lines().count().max(1);
    p.rows = rows.ok_or_else(|| err(last, "missing `rows` in [array]".into()))?;
    p.cols = cols.ok_or_else(|| err(last, "missing `cols` in [array]".into()))?;

    if grid.is_empty() {
        p.pe_types = perimeter_layout(p.rows, p.cols, cpe.unwrap_or(true));
    } else {
        if grid.len() != p.rows {
            return Err(err(grid[grid.len() - 1].0, format!("grid has {} rows, expected {}", grid.len(), p.rows)));
        }
        let mut map = Vec::with_capacity(p.rows * p.cols);
        for (ln, row) in &grid {
            if row.chars().count() != p.cols {
                return Err(err(*ln, format!("grid row `{row}` must have {} cells", p.cols)));
            }
            for ch in row.chars() {
                let t = PeType::from_letter(ch)
                    .ok_or_else(|| err(*ln, format!("unknown PE code `{ch}` (expected G/L/C)")))?;
                map.push(t);
            }
        }
        match cpe {
            Some(false) => {
                for t in map.iter_mut().filter(|t| **t == PeType::Cpe) {
                    *t = PeType::Gpe;
                }
            }
            Some(true) if !map.contains(&PeType::Cpe) => {
                return Err(err(grid[0].0, "`cpe = on` but the grid has no C cell".into()));
            }
            _ => {}
        }
        p.pe_types = map;
    }
    Ok(p)
}

/// Writes `params` in the arch file format, grid included.
pub fn serialize_arch(params: &ArchParams) -> String {
    let mut s = String::new();
    s.push_str("[array]\n");
    s.push_str(&format!("rows = {}\n", params.rows));
    s.push_str(&format!("cols = {}\n", params.cols));
    s.push_str(&format!("topology = {}\n", params.topology.keyword()));
    s.push_str(&format!(
        "exec_mode = {}\n",
        match params.exec_mode {
            ExecMode::Scmd => "scmd",
            ExecMode::Mcmd => "mcmd",
        }
    ));
    s.push_str(&format!("context_depth_mcmd = {}\n", params.context_depth_mcmd));
    s.push_str(&format!("shared_reg_mode = {}\n", params.shared_reg_mode.keyword()));
    s.push_str(&format!("shared_reg_count = {}\n", params.shared_reg_count));
    s.push_str(&format!("data_width = {}\n", params.data_width));
    let has_cpe = params.pe_types.contains(&PeType::Cpe);
    s.push_str(&format!("cpe = {}\n", if has_cpe { "on" } else { "off" }));
    for r in 0..params.rows {
        let row: String = (0..params.cols).map(|c| params.pe_types[r * params.cols + c].letter()).collect();
        s.push_str(&format!("row = {row}\n"));
    }
    s.push_str("\n[memory]\n");
    s.push_str(&format!("sm_banks = {}\n", params.sm_banks));
    s.push_str(&format!("bank_depth = {}\n", params.bank_depth));
    s.push_str(&format!("bank_width = {}\n", params.bank_width));
    s.push_str("\n[system]\n");
    s.push_str(&format!("rpu_count = {}\n", params.rpu_count));
    s
}
