//! Graph text, CSV datasets and JSON reports.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::estimator::EstimationResult;
use crate::graph::{GraphError, MDag, NodeRef};
use crate::ident::{IdReport, IdTree, IndSet, PrunedVariant, SelectionProfile, TraceEvent};
use crate::sim::{McSummary, ReplicateRecord};

pub const REPORT_VERSION: &str = "missforest-report/1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("line {line}: {source}")]
    Semantic { line: usize, source: GraphError },
}

/// Parses `vars: K` followed by one `A -> B` edge per line.
///
/// ```
/// let g = missforest::io::parse_graph("vars: 2\nX2 -> R1\nX1 -> R2\n").unwrap();
/// assert_eq!(g.edges().len(), 2);
/// ```
pub fn parse_graph(text: &str) -> Result<MDag, ParseError> {
    let mut k = None;
    let mut edges: Vec<(NodeRef, NodeRef)> = Vec::new();
    let mut lines = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        if content.trim().is_empty() {
            continue;
        }
        let indent = content.len() - content.trim_start().len();
        let body = content.trim();
        let syntax = |column: usize, message: String| ParseError::Syntax { line, column, message };
        let Some(kv) = k else {
            let rest = body.strip_prefix("vars:").ok_or_else(|| syntax(indent + 1, "expected header 'vars: <K>'".into()))?;
            let num = rest.trim();
            let col = indent + 1 + body.len() - rest.trim_start().len();
            let parsed: usize = num.parse().map_err(|_| syntax(col, format!("'{num}' is not a variable count")))?;
            if parsed == 0 {
                return Err(ParseError::Semantic { line, source: GraphError::EmptyGraph });
            }
            k = Some(parsed);
            continue;
        };
        let arrow = body.find("->").ok_or_else(|| syntax(indent + 1, "expected '<name> -> <name>'".into()))?;
        let (lhs, rhs) = (&body[..arrow], &body[arrow + 2..]);
        let node = |part: &str, offset: usize| -> Result<NodeRef, ParseError> {
            let name = part.trim();
            let col = indent + 1 + offset + (part.len() - part.trim_start().len());
            if name.is_empty() {
                return Err(syntax(col, "missing node name".into()));
            }
            let n: NodeRef = name.parse().map_err(|_| syntax(col, format!("'{name}' is not a node name like X3 or R2")))?;
            let idx = match n {
                NodeRef::Var(i) | NodeRef::Ind(i) => i,
            };
            if idx > kv {
                return Err(ParseError::Semantic { line, source: GraphError::UnknownNode(name.to_string()) });
            }
            Ok(n)
        };
        let tail = node(lhs, 0)?;
        let head = node(rhs, arrow + 2)?;
        edges.push((tail, head));
        lines.push(line);
        MDag::new(kv, edges.clone()).map_err(|source| ParseError::Semantic { line, source })?;
    }
    let k = k.ok_or(ParseError::Syntax { line: 1, column: 1, message: "missing header 'vars: <K>'".into() })?;
    MDag::new(k, edges).map_err(|source| ParseError::Semantic { line: lines.last().copied().unwrap_or(1), source })
}

/// Inverse of [`parse_graph`].
pub fn render_graph(g: &MDag) -> String {
    g.to_string()
}

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("cannot read data: {0}")]
    Io(#[from] std::io::Error),
    #[error("data file is empty")]
    EmptyFile,
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("row {row}, column {column}: cannot parse '{value}'")]
    UnparsableCell { row: usize, column: String, value: String },
    #[error("malformed CSV: {0}")]
    Malformed(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub fn load_csv(path: &Path, k: usize) -> Result<Dataset, CsvError> {
    read_csv(std::fs::File::open(path)?, k)
}

/// Reads a table whose header names `X1..XK` in any order. Empty cells and
/// `NA` are missing.
pub fn read_csv<R: Read>(reader: R, k: usize) -> Result<Dataset, CsvError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| CsvError::Malformed(e.to_string()))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(CsvError::EmptyFile);
    }
    let mut position = vec![usize::MAX; k];
    for (c, h) in headers.iter().enumerate() {
        let j = match h.parse::<NodeRef>() {
            Ok(NodeRef::Var(j)) if j <= k => j,
            _ => return Err(CsvError::HeaderMismatch(format!("unexpected column '{h}' for {k} variables"))),
        };
        if position[j - 1] != usize::MAX {
            return Err(CsvError::HeaderMismatch(format!("duplicate column '{h}'")));
        }
        position[j - 1] = c;
    }
    if let Some(j) = position.iter().position(|&p| p == usize::MAX) {
        return Err(CsvError::HeaderMismatch(format!("missing column X{}", j + 1)));
    }
    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CsvError::Malformed(e.to_string()))?;
        if rec.len() != headers.len() {
            return Err(CsvError::Malformed(format!("row {} has {} cells, expected {}", r + 1, rec.len(), headers.len())));
        }
        let mut cells = Vec::with_capacity(k);
        for &c in &position {
            let v = &rec[c];
            if v.is_empty() || v == "NA" {
                cells.push(None);
            } else {
                let x: f64 = v.parse().map_err(|_| CsvError::UnparsableCell { row: r + 1, column: headers[c].to_string(), value: v.to_string() })?;
                if !x.is_finite() {
                    return Err(CsvError::UnparsableCell { row: r + 1, column: headers[c].to_string(), value: v.to_string() });
                }
                cells.push(Some(x));
            }
        }
        rows.push(cells);
    }
    Ok(Dataset::new(k, rows)?)
}

/// Writes `X1..XK` with `NA` for missing cells. Values use the shortest
/// representation that round-trips exactly (at most 17 significant digits).
pub fn write_csv<W: Write>(data: &Dataset, writer: W) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(writer);
    let map = |e: csv::Error| CsvError::Malformed(e.to_string());
    w.write_record((1..=data.k()).map(|j| format!("X{j}"))).map_err(map)?;
    for row in 0..data.n() {
        w.write_record((1..=data.k()).map(|j| data.x(row, j).map_or("NA".to_string(), |v| format!("{v:?}")))).map_err(map)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_records_csv<W: Write>(records: &[ReplicateRecord], writer: W) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(writer);
    let map = |e: csv::Error| CsvError::Malformed(e.to_string());
    w.write_record(["replicate", "estimator", "estimate", "se", "error"]).map_err(map)?;
    for r in records {
        let num = |x: Option<f64>| x.map_or("NA".to_string(), |v| format!("{v:?}"));
        w.write_record([r.replicate.to_string(), r.estimator.to_string(), num(r.estimate), num(r.se), r.error.clone().unwrap_or_default()])
            .map_err(map)?;
    }
    w.flush()?;
    Ok(())
}

fn ind_list(s: &IndSet) -> Value {
    Value::Array(s.iter().map(|i| Value::String(format!("R{i}"))).collect())
}

fn tree_json(t: &IdTree) -> Value {
    let mut m = Map::new();
    m.insert("root".into(), json!(format!("R{}", t.root)));
    m.insert("children".into(), Value::Array(t.children.iter().map(tree_json).collect()));
    if !t.pruned.is_empty() {
        m.insert("pruned".into(), ind_list(&t.pruned.iter().copied().collect()));
    }
    m.insert("signature".into(), json!(t.signature()));
    Value::Object(m)
}

fn profile_fields(p: &SelectionProfile, m: &mut Map<String, Value>) {
    m.insert("s_x".into(), ind_list(&p.s_x));
    m.insert("r_p".into(), ind_list(&p.r_p));
    m.insert("colluder_self".into(), ind_list(&p.colluder_self));
    m.insert("tree_children".into(), ind_list(&p.tree_children));
    m.insert("s_pre".into(), ind_list(&p.s_pre));
    m.insert("s_r".into(), ind_list(&p.s_r));
    m.insert("s_full".into(), ind_list(&p.s_full));
}

fn trace_json(e: &TraceEvent) -> Value {
    let r = |i: &usize| format!("R{i}");
    match e {
        TraceEvent::Check { root, children, r_d } => {
            json!({"event": "check", "root": r(root), "children": children.iter().map(r).collect::<Vec<_>>(), "r_d": ind_list(r_d)})
        }
        TraceEvent::PruneColluder { root, child } => json!({"event": "prune_colluder", "root": r(root), "child": r(child)}),
        TraceEvent::PruneTrigger { root, child, via_branch_update, via_child_parents, via_root_parents } => json!({
            "event": "prune_trigger", "root": r(root), "child": r(child),
            "via_branch_update": via_branch_update, "via_child_parents": via_child_parents, "via_root_parents": via_root_parents
        }),
        TraceEvent::Reidentified { root, child, signature } => {
            json!({"event": "reidentified", "root": r(root), "child": r(child), "signature": signature})
        }
        TraceEvent::Dropped { root, child } => json!({"event": "dropped", "root": r(root), "child": r(child)}),
        TraceEvent::Stalled { root } => json!({"event": "stalled", "root": r(root)}),
    }
}

/// JSON form of an identification report. Sets are arrays of indicator
/// names sorted by index.
pub fn report_json(report: &IdReport, g: &MDag) -> Value {
    let mut indicators = Map::new();
    for k in 1..=report.k {
        let mut m = Map::new();
        m.insert("identified".into(), json!(report.is_identified(k)));
        let parents = g.parents(NodeRef::Ind(k)).map(|p| p.iter().map(|n| n.to_string()).collect::<Vec<_>>()).unwrap_or_default();
        m.insert("parents".into(), json!(parents));
        if let Some(p) = report.profiles.get(&k) {
            profile_fields(p, &mut m);
        }
        m.insert("tree".into(), report.tree(k).map_or(Value::Null, tree_json));
        let variants = report.variants.get(&k).map_or(vec![], |vs| {
            vs.iter()
                .map(|v| {
                    let mut vm = Map::new();
                    vm.insert("tree".into(), tree_json(&v.tree));
                    profile_fields(&v.profile, &mut vm);
                    Value::Object(vm)
                })
                .collect()
        });
        m.insert("pruned_variants".into(), Value::Array(variants));
        indicators.insert(format!("R{k}"), Value::Object(m));
    }
    json!({
        "version": REPORT_VERSION,
        "k": report.k,
        "order": report.order.iter().map(|i| format!("R{i}")).collect::<Vec<_>>(),
        "D": ind_list(&report.not_identified),
        "target_law_identified": report.target_law_identified,
        "indicators": Value::Object(indicators),
        "trace": report.trace.iter().map(trace_json).collect::<Vec<_>>(),
    })
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("malformed report JSON: {0}")]
pub struct ReportJsonError(String);

fn bad(msg: impl Into<String>) -> ReportJsonError {
    ReportJsonError(msg.into())
}

fn ind_name(v: &Value) -> Result<usize, ReportJsonError> {
    match v.as_str().and_then(|s| s.parse::<NodeRef>().ok()) {
        Some(NodeRef::Ind(i)) => Ok(i),
        _ => Err(bad(format!("expected an indicator name, got {v}"))),
    }
}

fn ind_set(v: &Value) -> Result<IndSet, ReportJsonError> {
    v.as_array().ok_or_else(|| bad("expected an array"))?.iter().map(ind_name).collect()
}

fn field<'a>(m: &'a Value, key: &str) -> Result<&'a Value, ReportJsonError> {
    m.get(key).ok_or_else(|| bad(format!("missing field '{key}'")))
}

fn tree_from(v: &Value) -> Result<IdTree, ReportJsonError> {
    let children = field(v, "children")?.as_array().ok_or_else(|| bad("children"))?.iter().map(tree_from).collect::<Result<_, _>>()?;
    let pruned = match v.get("pruned") {
        Some(p) => p.as_array().ok_or_else(|| bad("pruned"))?.iter().map(ind_name).collect::<Result<_, _>>()?,
        None => Vec::new(),
    };
    Ok(IdTree { root: ind_name(field(v, "root")?)?, children, pruned })
}

fn profile_from(v: &Value) -> Result<SelectionProfile, ReportJsonError> {
    Ok(SelectionProfile {
        s_x: ind_set(field(v, "s_x")?)?,
        r_p: ind_set(field(v, "r_p")?)?,
        colluder_self: ind_set(field(v, "colluder_self")?)?,
        tree_children: ind_set(field(v, "tree_children")?)?,
        s_pre: ind_set(field(v, "s_pre")?)?,
        s_r: ind_set(field(v, "s_r")?)?,
        s_full: ind_set(field(v, "s_full")?)?,
    })
}

fn trace_from(v: &Value) -> Result<TraceEvent, ReportJsonError> {
    let root = ind_name(field(v, "root")?)?;
    let child = || ind_name(field(v, "child")?);
    let flag = |k: &str| field(v, k)?.as_bool().ok_or_else(|| bad(k.to_string()));
    Ok(match field(v, "event")?.as_str() {
        Some("check") => TraceEvent::Check {
            root,
            children: field(v, "children")?.as_array().ok_or_else(|| bad("children"))?.iter().map(ind_name).collect::<Result<_, _>>()?,
            r_d: ind_set(field(v, "r_d")?)?,
        },
        Some("prune_colluder") => TraceEvent::PruneColluder { root, child: child()? },
        Some("prune_trigger") => TraceEvent::PruneTrigger {
            root,
            child: child()?,
            via_branch_update: flag("via_branch_update")?,
            via_child_parents: flag("via_child_parents")?,
            via_root_parents: flag("via_root_parents")?,
        },
        Some("reidentified") => TraceEvent::Reidentified {
            root,
            child: child()?,
            signature: field(v, "signature")?.as_str().ok_or_else(|| bad("signature"))?.to_string(),
        },
        Some("dropped") => TraceEvent::Dropped { root, child: child()? },
        Some("stalled") => TraceEvent::Stalled { root },
        other => return Err(bad(format!("unknown event {other:?}"))),
    })
}

/// Rebuilds an [`IdReport`] from [`report_json`] output.
pub fn report_from_json(v: &Value) -> Result<IdReport, ReportJsonError> {
    if field(v, "version")?.as_str() != Some(REPORT_VERSION) {
        return Err(bad("unsupported version"));
    }
    let k = field(v, "k")?.as_u64().ok_or_else(|| bad("k"))? as usize;
    let order = field(v, "order")?.as_array().ok_or_else(|| bad("order"))?.iter().map(ind_name).collect::<Result<_, _>>()?;
    let not_identified = ind_set(field(v, "D")?)?;
    let indicators = field(v, "indicators")?;
    let mut forest = BTreeMap::new();
    let mut failed_trees = BTreeMap::new();
    let mut profiles = BTreeMap::new();
    let mut variants = BTreeMap::new();
    for i in 1..=k {
        let m = field(indicators, &format!("R{i}"))?;
        profiles.insert(i, profile_from(m)?);
        let tree = field(m, "tree")?;
        if !tree.is_null() {
            let t = tree_from(tree)?;
            if field(m, "identified")?.as_bool() == Some(true) {
                forest.insert(i, t);
            } else {
                failed_trees.insert(i, t);
            }
        }
        let vs: Vec<PrunedVariant> = field(m, "pruned_variants")?
            .as_array()
            .ok_or_else(|| bad("pruned_variants"))?
            .iter()
            .map(|pv| Ok(PrunedVariant { tree: tree_from(field(pv, "tree")?)?, profile: profile_from(pv)? }))
            .collect::<Result<_, ReportJsonError>>()?;
        if !vs.is_empty() {
            variants.insert(i, vs);
        }
    }
    let trace = field(v, "trace")?.as_array().ok_or_else(|| bad("trace"))?.iter().map(trace_from).collect::<Result<_, _>>()?;
    Ok(IdReport {
        k,
        order,
        forest,
        failed_trees,
        profiles,
        variants,
        not_identified,
        target_law_identified: field(v, "target_law_identified")?.as_bool().ok_or_else(|| bad("target_law_identified"))?,
        trace,
    })
}

/// Estimation output. `covariance` is the finite-sample covariance `V/n`.
pub fn estimation_json(result: &EstimationResult) -> Value {
    let mut v = serde_json::to_value(result).expect("estimation results serialize");
    if let Value::Object(m) = &mut v {
        m.insert("version".into(), json!(REPORT_VERSION));
        m.insert("standard_errors".into(), json!(result.standard_errors()));
        m.insert("closure_set".into(), ind_list(&result.closure_set));
        if result.diagnostics.blocks.is_empty() {
            if let Some(Value::Object(d)) = m.get_mut("diagnostics") {
                d.insert("blocks".into(), Value::Null);
            }
        }
    }
    v
}

pub fn summaries_json(summaries: &[McSummary]) -> Value {
    json!({ "version": REPORT_VERSION, "summaries": summaries })
}

/// Pretty JSON with sorted keys and a trailing newline.
pub fn emit(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("values serialize");
    s.push('\n');
    s
}

/// Indicator names of a set, e.g. `{R1, R3}`.
pub fn set_text(s: &BTreeSet<usize>) -> String {
    let names: Vec<String> = s.iter().map(|i| format!("R{i}")).collect();
    format!("{{{}}}", names.join(", "))
}
