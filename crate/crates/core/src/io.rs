//! On-disk formats: regime CSVs with a manifest, ground-truth files, model
//! checkpoints and the line-delimited training log.
//!
//! A dataset directory holds
//!
//! ```text
//! manifest.txt     d=, intervention_std=, optional nonlinearity=, then one CSV name per line
//! regime_000.csv   `# target=<indices>` header, one sample per row
//! graph.txt        ground-truth edge list (optional)
//! sigma_z.csv      ground-truth noise covariance (optional)
//! weights.csv      ground-truth edge weights (optional)
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::{DirectedMixedGraph, VertexSet};
use crate::implicit_flow::root::SolverOptions;
use crate::implicit_flow::FlowModel;
use crate::nnet::{Activation, Dense, MaskMode, MaskedMlp};
use crate::sem_sim::{Nonlinearity, RegimeDataset, SemSpec};
use crate::structure_learn::TrainRecord;

pub const MANIFEST: &str = "manifest.txt";
pub const GRAPH_FILE: &str = "graph.txt";
pub const SIGMA_FILE: &str = "sigma_z.csv";
pub const WEIGHTS_FILE: &str = "weights.csv";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_row(line: &str, context: &str) -> Result<Vec<f64>> {
    line.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(context, format!("bad number `{}`: {e}", t.trim())))
        })
        .collect()
}

pub fn format_target(target: &VertexSet) -> String {
    target.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_target(text: &str) -> Result<VertexSet> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(VertexSet::new());
    }
    text.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| Error::parse("target", format!("`{t}`: {e}"))))
        .collect()
}

pub fn write_regime_csv(path: &Path, regime: &RegimeDataset) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "# target={}", format_target(&regime.target)).map_err(io)?;
    for x in &regime.samples {
        writeln!(w, "{}", join(x.iter().copied())).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads one regime; `d` checks the column count.
pub fn read_regime_csv(path: &Path, d: usize, intervention_std: f64) -> Result<RegimeDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(path, e))?
        .ok_or_else(|| Error::parse(&ctx, "empty file"))?;
    let target = header
        .trim()
        .strip_prefix("# target=")
        .ok_or_else(|| Error::parse(&ctx, format!("expected `# target=` header, got `{header}`")))
        .and_then(parse_target)?;
    if let Some(&v) = target.iter().find(|&&v| v >= d) {
        return Err(Error::parse(&ctx, format!("target {v} out of range for d={d}")));
    }
    let mut samples = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_row(&line, &ctx)?;
        if row.len() != d {
            return Err(Error::parse(&ctx, format!("row {} has {} columns, expected {d}", samples.len() + 1, row.len())));
        }
        samples.push(DVector::from_vec(row));
    }
    Ok(RegimeDataset { target, samples, intervention_std })
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let text: String = m.row_iter().map(|r| join(r.iter().copied()) + "\n").collect();
    write_text(path, &text)
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let ctx = path.display().to_string();
    let rows: Vec<Vec<f64>> = read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| parse_row(l, &ctx))
        .collect::<Result<_>>()?;
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::parse(&ctx, "ragged rows"));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.into_iter().flatten()))
}

/// Writes the regimes in order and, when given, the generating model.
pub fn write_dataset(dir: &Path, regimes: &[RegimeDataset], truth: Option<&SemSpec>) -> Result<()> {
    let first = regimes.first().ok_or_else(|| Error::InvalidArgument("no regimes to write".into()))?;
    let d = truth
        .map(|s| s.graph.num_vertices())
        .or_else(|| regimes.iter().find_map(RegimeDataset::dim))
        .ok_or_else(|| Error::InvalidArgument("cannot infer d from empty regimes".into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("d={d}\nintervention_std={}\n", first.intervention_std);
    if let Some(spec) = truth {
        manifest += &format!("nonlinearity={}\n", spec.nonlinearity);
    }
    for (k, r) in regimes.iter().enumerate() {
        let name = format!("regime_{k:03}.csv");
        write_regime_csv(&dir.join(&name), r)?;
        manifest += &name;
        manifest.push('\n');
    }
    write_text(&dir.join(MANIFEST), &manifest)?;
    if let Some(spec) = truth {
        write_text(&dir.join(GRAPH_FILE), &spec.graph.to_edge_list())?;
        write_matrix_csv(&dir.join(SIGMA_FILE), &spec.sigma_z)?;
        write_matrix_csv(&dir.join(WEIGHTS_FILE), &spec.weights)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub d: usize,
    pub intervention_std: f64,
    pub nonlinearity: Option<Nonlinearity>,
    pub regimes: Vec<PathBuf>,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::InvalidArgument(format!("missing manifest {}", path.display())));
    }
    let ctx = path.display().to_string();
    let (mut d, mut std, mut nonlinearity, mut regimes) = (None, 1.0, None, Vec::new());
    for line in read_text(&path)?.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        if let Some(v) = line.strip_prefix("d=") {
            d = Some(v.parse::<usize>().map_err(|e| Error::parse(&ctx, format!("d: {e}")))?);
        } else if let Some(v) = line.strip_prefix("intervention_std=") {
            std = v.parse::<f64>().map_err(|e| Error::parse(&ctx, format!("intervention_std: {e}")))?;
        } else if let Some(v) = line.strip_prefix("nonlinearity=") {
            nonlinearity = Some(v.parse()?);
        } else {
            regimes.push(dir.join(line));
        }
    }
    let d = d.ok_or_else(|| Error::parse(&ctx, "missing `d=` line"))?;
    if regimes.is_empty() {
        return Err(Error::parse(&ctx, "no regime files listed"));
    }
    Ok(Manifest { d, intervention_std: std, nonlinearity, regimes })
}

pub fn read_dataset(dir: &Path) -> Result<Vec<RegimeDataset>> {
    let m = read_manifest(dir)?;
    m.regimes.iter().map(|p| read_regime_csv(p, m.d, m.intervention_std)).collect()
}

/// Generating model stored next to the data, if the directory has one.
pub fn read_ground_truth(dir: &Path) -> Result<Option<SemSpec>> {
    if !dir.join(GRAPH_FILE).exists() {
        return Ok(None);
    }
    let m = read_manifest(dir)?;
    let graph = DirectedMixedGraph::parse_edge_list(&read_text(&dir.join(GRAPH_FILE))?)?;
    let sigma_z = read_matrix_csv(&dir.join(SIGMA_FILE))?;
    let weights = read_matrix_csv(&dir.join(WEIGHTS_FILE))?;
    let spec = SemSpec {
        graph,
        weights,
        nonlinearity: m.nonlinearity.unwrap_or(Nonlinearity::Linear),
        sigma_z,
        intervention_std: m.intervention_std,
    };
    spec.validate()?;
    if spec.graph.num_vertices() != m.d {
        return Err(Error::DimensionMismatch { expected: m.d, got: spec.graph.num_vertices() });
    }
    Ok(Some(spec))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetHeader {
    activation: Activation,
    mask_mode: MaskMode,
    lipschitz_cap: f64,
    layers: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    d: usize,
    intervention_std: f64,
    g_x: NetHeader,
    g_z: NetHeader,
    tensors: Vec<TensorHeader>,
}

const CHECKPOINT_FORMAT: &str = "dccd-checkpoint";

fn net_tensors(prefix: &str, net: &MaskedMlp, out: &mut Vec<(String, Vec<usize>, Vec<f64>)>) {
    for (k, l) in net.layers.iter().enumerate() {
        let w = &l.weight;
        out.push((format!("{prefix}.{k}.weight"), vec![w.nrows(), w.ncols()], w.transpose().iter().copied().collect()));
        out.push((format!("{prefix}.{k}.bias"), vec![l.bias.len()], l.bias.iter().copied().collect()));
    }
}

fn matrix_tensor(name: &str, m: &DMatrix<f64>) -> (String, Vec<usize>, Vec<f64>) {
    (name.to_string(), vec![m.nrows(), m.ncols()], m.transpose().iter().copied().collect())
}

/// JSON header line naming every tensor and its shape, then one line of
/// row-major values per tensor.
pub fn write_checkpoint(path: &Path, model: &FlowModel) -> Result<()> {
    let mut tensors = Vec::new();
    net_tensors("g_x", &model.g_x, &mut tensors);
    net_tensors("g_z", &model.g_z, &mut tensors);
    tensors.push(matrix_tensor("edge_logits", &model.edge_logits));
    tensors.push(matrix_tensor("sigma_z", &model.sigma_z));
    if let Some(l) = &model.precondition {
        tensors.push(("precondition".into(), vec![l.len()], l.iter().copied().collect()));
    }
    let net = |n: &MaskedMlp| NetHeader {
        activation: n.activation,
        mask_mode: n.mask_mode,
        lipschitz_cap: n.lipschitz_cap,
        layers: n.layers.len(),
    };
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        d: model.dim(),
        intervention_std: model.intervention_std,
        g_x: net(&model.g_x),
        g_z: net(&model.g_z),
        tensors: tensors.iter().map(|(n, s, _)| TensorHeader { name: n.clone(), shape: s.clone() }).collect(),
    };
    let mut text = serde_json::to_string(&header).map_err(|e| Error::parse("checkpoint header", e.to_string()))?;
    text.push('\n');
    for (_, _, values) in &tensors {
        text += &join(values.iter().copied());
        text.push('\n');
    }
    write_text(path, &text)
}

struct Tensors {
    ctx: String,
    values: HashMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Tensors {
    fn take(&mut self, name: &str, rank: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        match self.values.remove(name) {
            Some((s, v)) if s.len() == rank => Ok((s, v)),
            _ => Err(Error::parse(&self.ctx, format!("missing or malformed tensor {name}"))),
        }
    }

    fn matrix(&mut self, name: &str) -> Result<DMatrix<f64>> {
        let (s, v) = self.take(name, 2)?;
        Ok(DMatrix::from_row_slice(s[0], s[1], &v))
    }

    fn vector(&mut self, name: &str) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.take(name, 1)?.1))
    }

    fn net(&mut self, prefix: &str, h: &NetHeader) -> Result<MaskedMlp> {
        let layers = (0..h.layers)
            .map(|k| {
                Ok(Dense {
                    weight: self.matrix(&format!("{prefix}.{k}.weight"))?,
                    bias: self.vector(&format!("{prefix}.{k}.bias"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MaskedMlp { layers, activation: h.activation, mask_mode: h.mask_mode, lipschitz_cap: h.lipschitz_cap })
    }
}

pub fn read_checkpoint(path: &Path) -> Result<FlowModel> {
    let ctx = path.display().to_string();
    let text = read_text(path)?;
    let mut lines = text.lines();
    let header: CheckpointHeader = serde_json::from_str(lines.next().unwrap_or(""))
        .map_err(|e| Error::parse(&ctx, format!("header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(Error::parse(&ctx, format!("unsupported checkpoint {} v{}", header.format, header.version)));
    }
    let mut values = HashMap::new();
    for t in &header.tensors {
        let line = lines.next().ok_or_else(|| Error::parse(&ctx, format!("missing data for {}", t.name)))?;
        let v = if line.trim().is_empty() { Vec::new() } else { parse_row(line, &ctx)? };
        if v.len() != t.shape.iter().product::<usize>() {
            return Err(Error::parse(&ctx, format!("{} has {} values for shape {:?}", t.name, v.len(), t.shape)));
        }
        values.insert(t.name.clone(), (t.shape.clone(), v));
    }
    let has_precondition = values.contains_key("precondition");
    let mut t = Tensors { ctx: ctx.clone(), values };
    let model = FlowModel {
        g_x: t.net("g_x", &header.g_x)?,
        g_z: t.net("g_z", &header.g_z)?,
        edge_logits: t.matrix("edge_logits")?,
        sigma_z: t.matrix("sigma_z")?,
        precondition: if has_precondition { Some(t.vector("precondition")?) } else { None },
        intervention_std: header.intervention_std,
        solver: SolverOptions::default(),
    };
    let d = header.d;
    if model.edge_logits.shape() != (d, d) || model.sigma_z.shape() != (d, d) || model.g_x.dim() != d || model.g_z.dim() != d {
        return Err(Error::parse(&ctx, format!("tensor shapes inconsistent with d={d}")));
    }
    Ok(model)
}

/// One JSON object per line.
pub fn write_train_log(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text += &serde_json::to_string(r).map_err(|e| Error::parse("training log", e.to_string()))?;
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_train_log(path: &Path) -> Result<Vec<TrainRecord>> {
    let ctx = path.display().to_string();
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::parse(&ctx, e.to_string())))
        .collect()
}
