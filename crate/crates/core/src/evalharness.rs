//! Evaluation grids, family taxonomy, and report generation.
//!
//! Robustness is measured on two grids: single-step cells sweep each
//! primitive over its published parameter list, and compositional cells
//! enumerate ordered pairs of primitives at reduced strengths. Cells are
//! scored independently with seeded rng streams keyed by cell index, so a
//! report is reproducible bit for bit and cells could be evaluated in any
//! order or in parallel. Aggregates are arithmetic means over member cells;
//! capacity is computed per cell first and averaged afterwards, never from
//! the averaged accuracy.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, Family, Primitive};
use crate::config::EvalConfig;
use crate::watermark::WatermarkModel;
use crate::{metrics, rng, Error, Result};

/// Which grid a report was produced on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    SingleStep,
    Compositional,
}

/// One evaluation cell: a short chain of (primitive, grid value) ops applied
/// in order. The identity cell has a single identity op; the combined cell
/// chains three.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub ops: Vec<(Primitive, f64)>,
}

impl GridCell {
    fn identity() -> Self {
        Self { ops: vec![(Primitive::Identity, 0.0)] }
    }

    /// Fixed mid-strength chain reported as its own "Combined" cell:
    /// compression, then crop, then brightness.
    fn combined() -> Self {
        Self {
            ops: vec![
                (Primitive::Jpeg, 60.0),
                (Primitive::Crop, 0.71),
                (Primitive::Brightness, 0.75),
            ],
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.ops.as_slice(), [(Primitive::Identity, _)])
    }

    /// Human-readable attack spec, e.g. `rotate=5` or `jpeg=60 -> crop=0.71`.
    pub fn spec(&self) -> String {
        if self.is_identity() {
            return "identity".into();
        }
        self.ops
            .iter()
            .map(|&(p, v)| format!("{}={}", p.info().id, fmt_value(v)))
            .collect::<Vec<_>>()
            .join(" -> ")
    }

    /// Aggregate key this cell reports under.
    pub fn family_label(&self) -> String {
        if self.is_identity() {
            return Family::Identity.label().into();
        }
        match self.ops.as_slice() {
            [(p, _)] => p.info().family.label().into(),
            [(a, _), (b, _)] => pair_label(a.info().family, b.info().family),
            _ => "Combined".into(),
        }
    }
}

fn fmt_value(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e6 {
        format!("{v:.0}")
    } else {
        format!("{v}")
    }
}

/// Deterministically ordered list of evaluation cells.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGrid {
    pub mode: GridMode,
    pub cells: Vec<GridCell>,
}

/// Family of a registry id.
pub fn classify_family(id: &str) -> Result<Family> {
    Ok(attacks::by_id(id)?.family)
}

/// Unordered family-pair label: `Val+Comp` covers both op orders.
pub fn classify_pair(id_a: &str, id_b: &str) -> Result<String> {
    Ok(pair_label(classify_family(id_a)?, classify_family(id_b)?))
}

/// Report-column order of families within pair labels.
fn pair_rank(f: Family) -> u8 {
    match f {
        Family::Value => 0,
        Family::Compression => 1,
        Family::Geometric => 2,
        Family::Identity => 3,
    }
}

fn pair_label(a: Family, b: Family) -> String {
    let (lo, hi) = if pair_rank(a) <= pair_rank(b) { (a, b) } else { (b, a) };
    format!("{}+{}", lo.label(), hi.label())
}

/// All ordered pairs over `prims`, excluding the self-pairs of binary
/// toggles: flip twice is the identity and grayscale twice is grayscale,
/// both already covered by other cells.
pub fn ordered_pairs(prims: &[Primitive]) -> Vec<(Primitive, Primitive)> {
    let mut out = Vec::with_capacity(prims.len() * prims.len());
    for &a in prims {
        for &b in prims {
            let binary = matches!(a, Primitive::Hflip | Primitive::Grayscale);
            if a == b && binary {
                continue;
            }
            out.push((a, b));
        }
    }
    out
}

/// Builds the cell list for `mode` from the per-primitive value lists in
/// `config`. Cell order is registry order (values in listed order), with the
/// identity cell first; single-step grids end with the combined chain cell.
pub fn build_grid(mode: GridMode, config: &EvalConfig) -> Result<EvalGrid> {
    let map = match mode {
        GridMode::SingleStep => &config.single,
        GridMode::Compositional => &config.pair,
    };
    for (id, values) in map {
        let info = attacks::by_id(id)?;
        for &v in values {
            if !info.range.contains(v) {
                return Err(Error::OutOfRangeParam {
                    primitive: info.id,
                    value: v,
                    range: format!("{:?}", info.range),
                });
            }
        }
    }

    let listed: Vec<&attacks::AttackPrimitive> = attacks::registry()
        .iter()
        .filter(|p| p.kind != Primitive::Identity)
        .filter(|p| map.get(p.id).is_some_and(|v| !v.is_empty()))
        .collect();

    let mut cells = vec![GridCell::identity()];
    match mode {
        GridMode::SingleStep => {
            for info in &listed {
                for &v in &map[info.id] {
                    cells.push(GridCell { ops: vec![(info.kind, v)] });
                }
            }
            cells.push(GridCell::combined());
        }
        GridMode::Compositional => {
            let prims: Vec<Primitive> = listed.iter().map(|p| p.kind).collect();
            for (a, b) in ordered_pairs(&prims) {
                for &va in &map[a.info().id] {
                    for &vb in &map[b.info().id] {
                        cells.push(GridCell { ops: vec![(a, va), (b, vb)] });
                    }
                }
            }
        }
    }
    Ok(EvalGrid { mode, cells })
}

/// Metadata attached to every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalContext {
    pub seed: u64,
    /// Watermarked samples per cell, drawn with replacement from the pool.
    pub samples: usize,
    /// Embedding strength used for evaluation.
    pub alpha: f64,
    pub config_hash: String,
    pub checkpoint: String,
}

/// Scores of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub index: usize,
    pub spec: String,
    pub family: String,
    pub samples: usize,
    pub bit_accuracy: f64,
    pub capacity_bits: f64,
    pub p_value: f64,
}

/// Arithmetic means over a group of cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub label: String,
    pub cells: usize,
    pub samples: usize,
    pub bit_accuracy: f64,
    pub capacity_bits: f64,
    pub p_value: f64,
}

/// Full evaluation output: per-cell records, per-family means, and the
/// overall mean over non-identity cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `single`, `compositional`, `forward`, or `backward`.
    pub label: String,
    pub context: EvalContext,
    pub payload_bits: usize,
    pub cells: Vec<CellRecord>,
    pub families: Vec<Aggregate>,
    pub overall: Aggregate,
}

fn mean_aggregate(label: &str, members: &[&CellRecord]) -> Aggregate {
    // an empty group reports zeros, keeping the record JSON-serializable
    let n = members.len().max(1) as f64;
    Aggregate {
        label: label.to_string(),
        cells: members.len(),
        samples: members.iter().map(|c| c.samples).sum(),
        bit_accuracy: members.iter().map(|c| c.bit_accuracy).sum::<f64>() / n,
        capacity_bits: members.iter().map(|c| c.capacity_bits).sum::<f64>() / n,
        p_value: members.iter().map(|c| c.p_value).sum::<f64>() / n,
    }
}

/// Groups cells by family label (first-appearance order) and computes the
/// family and overall aggregates.
pub fn aggregate_report(cells: &[CellRecord]) -> (Vec<Aggregate>, Aggregate) {
    let mut order: Vec<String> = Vec::new();
    for c in cells {
        if !order.contains(&c.family) {
            order.push(c.family.clone());
        }
    }
    let families = order
        .iter()
        .map(|label| {
            let members: Vec<&CellRecord> = cells.iter().filter(|c| &c.family == label).collect();
            mean_aggregate(label, &members)
        })
        .collect();
    let non_identity: Vec<&CellRecord> =
        cells.iter().filter(|c| c.family != Family::Identity.label()).collect();
    (families, mean_aggregate("Overall", &non_identity))
}

fn evaluate_cell(
    model: &WatermarkModel,
    pool: &Tensor,
    cell: &GridCell,
    index: usize,
    ctx: &EvalContext,
) -> Result<CellRecord> {
    let (n_pool, _c, _h, _w) = pool.dims4()?;
    let d_m = model.d_m();
    let dev = pool.device();
    let mut r = rng::stream(ctx.seed, "eval-cell", index as u64);

    let picks: Vec<u32> = (0..ctx.samples)
        .map(|_| (rng::uniform_open01(&mut r) * n_pool as f64) as u32)
        .collect();
    let x = pool.index_select(&Tensor::from_vec(picks, ctx.samples, dev)?, 0)?;
    let bits: Vec<f32> = (0..ctx.samples * d_m)
        .map(|_| (rng::uniform_open01(&mut r) < 0.5) as u8 as f32)
        .collect();
    let m = Tensor::from_vec(bits, (ctx.samples, d_m), dev)?;

    let mut y = model.embed(&x, &m, ctx.alpha)?.detach();
    for &(p, v) in &cell.ops {
        let params = attacks::params_for_grid(p, v, &mut r)?;
        y = attacks::apply_tensor(&y, &params)?;
    }
    let scores = model.extract(&y)?.detach();

    let s: Vec<Vec<f32>> = scores.to_vec2()?;
    let mm: Vec<Vec<f32>> = m.to_vec2()?;
    let mut correct = 0u64;
    for (row_s, row_m) in s.iter().zip(mm.iter()) {
        for (&sv, &mv) in row_s.iter().zip(row_m.iter()) {
            if (sv > 0.0) == (mv > 0.5) {
                correct += 1;
            }
        }
    }
    let total = (ctx.samples * d_m) as u64;
    let acc = correct as f64 / total as f64;
    Ok(CellRecord {
        index,
        spec: cell.spec(),
        family: cell.family_label(),
        samples: ctx.samples,
        bit_accuracy: acc,
        capacity_bits: metrics::capacity(acc, d_m)?,
        p_value: metrics::binomial_pvalue(correct, total)?,
    })
}

/// Scores every cell of `grid` on images drawn from `pool` and fills the
/// aggregates. Fully determined by `(grid, pool, model, ctx)`.
pub fn evaluate(
    model: &WatermarkModel,
    pool: &Tensor,
    grid: &EvalGrid,
    label: &str,
    ctx: &EvalContext,
) -> Result<EvalReport> {
    if pool.dims4()?.0 == 0 {
        return Err(Error::EmptyDataset("evaluation pool".into()));
    }
    let mut cells = Vec::with_capacity(grid.cells.len());
    for (index, cell) in grid.cells.iter().enumerate() {
        cells.push(evaluate_cell(model, pool, cell, index, ctx)?);
    }
    let (families, overall) = aggregate_report(&cells);
    Ok(EvalReport {
        label: label.to_string(),
        context: ctx.clone(),
        payload_bits: model.d_m(),
        cells,
        families,
        overall,
    })
}

/// Cross-depth evaluation: a model trained at depth 1 is scored on the
/// compositional grid (`forward`), a model trained at depth 2 on the
/// single-step grid (`backward`).
pub fn transfer_eval(
    model: &WatermarkModel,
    pool: &Tensor,
    config: &EvalConfig,
    t_train: usize,
    ctx: &EvalContext,
) -> Result<EvalReport> {
    let (mode, label) = match t_train {
        1 => (GridMode::Compositional, "forward"),
        2 => (GridMode::SingleStep, "backward"),
        other => {
            return Err(Error::DomainError(format!(
                "transfer evaluation needs training depth 1 or 2, got {other}"
            )))
        }
    };
    evaluate(model, pool, &build_grid(mode, config)?, label, ctx)
}

/// Output formats of [`export_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
    Both,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    kind: &'a str,
    index: Option<usize>,
    label: &'a str,
    family: &'a str,
    cells: usize,
    samples: usize,
    bit_accuracy: f64,
    capacity_bits: f64,
    p_value: f64,
    config_hash: &'a str,
    checkpoint: &'a str,
}

/// Writes `eval_{label}.csv` (one row per cell, then per-family and overall
/// aggregate rows) and/or `eval_{label}.json` (cells nested under their
/// family). Returns the written paths.
pub fn export_report(report: &EvalReport, dir: &Path, format: ExportFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if matches!(format, ExportFormat::Csv | ExportFormat::Both) {
        let path = dir.join(format!("eval_{}.csv", report.label));
        write_csv(report, &path)?;
        written.push(path);
    }
    if matches!(format, ExportFormat::Json | ExportFormat::Both) {
        let path = dir.join(format!("eval_{}.json", report.label));
        fs::write(&path, serde_json::to_string_pretty(&JsonReport::from(report))?)?;
        written.push(path);
    }
    Ok(written)
}

fn write_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let hash = report.context.config_hash.as_str();
    let ckpt = report.context.checkpoint.as_str();
    let mut w = csv::Writer::from_path(path)?;
    for c in &report.cells {
        w.serialize(CsvRow {
            kind: "cell",
            index: Some(c.index),
            label: &c.spec,
            family: &c.family,
            cells: 1,
            samples: c.samples,
            bit_accuracy: c.bit_accuracy,
            capacity_bits: c.capacity_bits,
            p_value: c.p_value,
            config_hash: hash,
            checkpoint: ckpt,
        })?;
    }
    for a in report.families.iter().chain(std::iter::once(&report.overall)) {
        let kind = if a.label == "Overall" { "overall" } else { "family" };
        w.serialize(CsvRow {
            kind,
            index: None,
            label: &a.label,
            family: &a.label,
            cells: a.cells,
            samples: a.samples,
            bit_accuracy: a.bit_accuracy,
            capacity_bits: a.capacity_bits,
            p_value: a.p_value,
            config_hash: hash,
            checkpoint: ckpt,
        })?;
    }
    w.flush().map_err(std::io::Error::from)?;
    Ok(())
}

/// JSON shape: cells grouped under their family aggregate.
#[derive(Serialize, Deserialize)]
struct JsonFamily {
    aggregate: Aggregate,
    cells: Vec<CellRecord>,
}

#[derive(Serialize, Deserialize)]
struct JsonReport {
    label: String,
    context: EvalContext,
    payload_bits: usize,
    families: Vec<JsonFamily>,
    overall: Aggregate,
}

impl From<&EvalReport> for JsonReport {
    fn from(r: &EvalReport) -> Self {
        let families = r
            .families
            .iter()
            .map(|a| JsonFamily {
                aggregate: a.clone(),
                cells: r.cells.iter().filter(|c| c.family == a.label).cloned().collect(),
            })
            .collect();
        Self {
            label: r.label.clone(),
            context: r.context.clone(),
            payload_bits: r.payload_bits,
            families,
            overall: r.overall.clone(),
        }
    }
}

/// Reads a report written by [`export_report`]'s JSON form back into the
/// flat in-memory shape.
pub fn import_json(path: &Path) -> Result<EvalReport> {
    let j: JsonReport = serde_json::from_str(&fs::read_to_string(path)?)?;
    let mut cells: Vec<CellRecord> = j.families.iter().flat_map(|f| f.cells.clone()).collect();
    cells.sort_by_key(|c| c.index);
    Ok(EvalReport {
        label: j.label,
        context: j.context,
        payload_bits: j.payload_bits,
        cells,
        families: j.families.into_iter().map(|f| f.aggregate).collect(),
        overall: j.overall,
    })
}
