//! File formats: numeric CSV, `estimate.json`, GraphML and run manifests.
//!
//! Every write goes to a temporary file in the target directory and is then
//! renamed into place, so readers never see a partial file.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{EstimateMeta, TopologyEstimate};

pub const ESTIMATE_SCHEMA: &str = "netsem.estimate/1";
pub const MANIFEST_SCHEMA: &str = "netsem.manifest/1";

/// A numeric table plus the header row, when the file had one.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedMatrix {
    pub data: DMatrix<f64>,
    pub labels: Option<Vec<String>>,
}

/// Parse CSV text. The first row is a header iff none of its cells is numeric.
/// `origin` only labels error messages.
pub fn parse_matrix_csv(text: &str, origin: &Path, expect: Option<(usize, usize)>) -> Result<LoadedMatrix> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut labels = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(k + 1, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(k + 1, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_err(line, format!("expected {w} fields, found {}", record.len())));
            }
            _ => {}
        }
        if k == 0 && record.iter().all(|c| c.parse::<f64>().is_err()) {
            labels = Some(record.iter().map(str::to_owned).collect());
            continue;
        }
        let row = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>()
                    .map_err(|_| parse_err(line, format!("column {}: `{cell}` is not a number", c + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let cols = width.unwrap_or(0);
    if rows.is_empty() {
        return Err(parse_err(1, "no numeric rows".into()));
    }
    if let Some((er, ec)) = expect {
        if (rows.len(), cols) != (er, ec) {
            return Err(parse_err(
                rows.len(),
                format!("expected a {er}x{ec} matrix, found {}x{cols}", rows.len()),
            ));
        }
    }
    let data = DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]);
    Ok(LoadedMatrix { data, labels })
}

pub fn load_matrix_csv(path: &Path, expect: Option<(usize, usize)>) -> Result<LoadedMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(&text, path, expect)
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

pub fn matrix_csv<T: Copy + 'static + std::fmt::Debug + PartialEq>(
    m: &DMatrix<T>,
    header: Option<&[String]>,
    cell: impl Fn(T) -> String,
) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|&v| cell(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_matrix_csv(path: &Path, m: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    write_atomic(path, matrix_csv(m, header, fmt_f64).as_bytes())
}

pub fn save_adjacency_csv(path: &Path, a: &DMatrix<u8>) -> Result<()> {
    write_atomic(path, matrix_csv(a, None, |v| v.to_string()).as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Binary adjacency from a numeric matrix; any value other than 0 or 1 is rejected.
pub fn to_adjacency(m: &DMatrix<f64>, origin: &Path) -> Result<DMatrix<u8>> {
    if let Some(pos) = m.iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Parse {
            path: origin.to_path_buf(),
            line: pos % m.nrows() + 1,
            message: format!("adjacency entry {} is not 0 or 1", m[pos]),
        });
    }
    Ok(m.map(|v| v as u8))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce a command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub rng_seed: u64,
    pub rng_version: String,
    pub version: String,
    /// Output file names, relative to the manifest.
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
    #[serde(default)]
    pub convergence: Option<serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, rng_seed: u64) -> Self {
        RunManifest {
            schema: MANIFEST_SCHEMA.into(),
            command: command.into(),
            args: Vec::new(),
            config,
            inputs: Vec::new(),
            rng_seed,
            rng_version: crate::synth::RNG_VERSION.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            outputs: Vec::new(),
            wall_clock_seconds: 0.0,
            convergence: None,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub score: f64,
}

/// On-disk estimate. Matrices are row-major; `adjacency[i][j] = 1` is the
/// directed edge `i -> j` (node `i` enters the equation of node `j`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateFile {
    pub schema: String,
    pub nodes: usize,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    pub adjacency: Vec<Vec<u8>>,
    pub scores: Vec<Vec<f64>>,
    pub b_diag: Vec<f64>,
    pub edges: Vec<Edge>,
    pub meta: EstimateMeta,
    pub manifest: String,
}

fn rows_of<T: Copy + nalgebra::Scalar>(m: &DMatrix<T>) -> Vec<Vec<T>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows<T: Copy + nalgebra::Scalar>(rows: &[Vec<T>], n: usize, what: &str) -> Result<DMatrix<T>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidInput(format!("estimate {what} is not {n}x{n}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl EstimateFile {
    pub fn from_estimate(est: &TopologyEstimate, labels: Option<&[String]>, manifest: &str) -> Self {
        let n = est.scores.nrows();
        let edges = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| est.adjacency[(i, j)] == 1)
            .map(|(i, j)| Edge {
                source: i,
                target: j,
                score: est.scores[(i, j)],
            })
            .collect();
        EstimateFile {
            schema: ESTIMATE_SCHEMA.into(),
            nodes: n,
            labels: labels.map(<[String]>::to_vec),
            adjacency: rows_of(&est.adjacency),
            scores: rows_of(&est.scores),
            b_diag: est.b_diag.iter().copied().collect(),
            edges,
            meta: est.meta.clone(),
            manifest: manifest.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: EstimateFile = read_json(path)?;
        if f.schema != ESTIMATE_SCHEMA {
            return Err(Error::InvalidInput(format!(
                "{}: unsupported estimate schema `{}`",
                path.display(),
                f.schema
            )));
        }
        f.adjacency_matrix()?;
        f.scores_matrix()?;
        if f.b_diag.len() != f.nodes {
            return Err(Error::InvalidInput(format!(
                "{}: b_diag length mismatch",
                path.display()
            )));
        }
        Ok(f)
    }

    pub fn adjacency_matrix(&self) -> Result<DMatrix<u8>> {
        let a = from_rows(&self.adjacency, self.nodes, "adjacency")?;
        if a.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("adjacency entries must be 0 or 1".into()));
        }
        Ok(a)
    }

    pub fn scores_matrix(&self) -> Result<DMatrix<f64>> {
        from_rows(&self.scores, self.nodes, "scores")
    }

    pub fn b_diag(&self) -> DVector<f64> {
        DVector::from_vec(self.b_diag.clone())
    }
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

/// Directed graph with a `score` attribute on every edge.
pub fn graphml(adjacency: &DMatrix<u8>, scores: &DMatrix<f64>, labels: Option<&[String]>) -> String {
    let n = adjacency.nrows();
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    s.push_str("<graphml xmlns=\"http://graphml.graphdrawing.org/xmlns\">\n");
    s.push_str("  <key id=\"label\" for=\"node\" attr.name=\"label\" attr.type=\"string\"/>\n");
    s.push_str("  <key id=\"score\" for=\"edge\" attr.name=\"score\" attr.type=\"double\"/>\n");
    s.push_str("  <graph id=\"G\" edgedefault=\"directed\">\n");
    for i in 0..n {
        let label = labels.map_or_else(|| format!("n{i}"), |l| l[i].clone());
        let _ = writeln!(
            s,
            "    <node id=\"n{i}\"><data key=\"label\">{}</data></node>",
            xml_escape(&label)
        );
    }
    for i in 0..n {
        for j in 0..n {
            if adjacency[(i, j)] == 1 {
                let _ = writeln!(
                    s,
                    "    <edge source=\"n{i}\" target=\"n{j}\"><data key=\"score\">{}</data></edge>",
                    fmt_f64(scores[(i, j)])
                );
            }
        }
    }
    s.push_str("  </graph>\n</graphml>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<LoadedMatrix> {
        parse_matrix_csv(s, Path::new("t.csv"), None)
    }

    #[test]
    fn plain_matrix() {
        let m = parse("1,2\n3,4").unwrap();
        assert_eq!(m.data, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert!(m.labels.is_none());
    }

    #[test]
    fn header_detected() {
        let m = parse("g1,g2\n1,2\n3,4\n").unwrap();
        assert_eq!(m.labels.unwrap(), vec!["g1", "g2"]);
        assert_eq!(m.data.shape(), (2, 2));
    }

    #[test]
    fn ragged_row_reports_line() {
        match parse("1,2\n3") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_reports_line() {
        match parse("1,2\n3,x\n") {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("column 2"));
            }
            other => panic!("{other:?}"),
        }
        // A partly numeric first row is data, not a header.
        assert!(matches!(parse("1,x\n3,4"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn dimension_expectation() {
        let e = parse_matrix_csv("1,2\n3,4", Path::new("t"), Some((3, 2)));
        assert!(matches!(e, Err(Error::Parse { .. })));
        assert!(parse_matrix_csv("1,2\n3,4", Path::new("t"), Some((2, 2))).is_ok());
        assert!(matches!(parse(""), Err(Error::Parse { .. })));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut m = DMatrix::from_fn(20, 7, |_, _| {
            let e: i32 = rng.random_range(-300..300);
            rng.random_range(-1.0..1.0) * 10f64.powi(e)
        });
        m[(0, 0)] = 0.1 + 0.2;
        m[(1, 0)] = f64::MIN_POSITIVE;
        m[(2, 0)] = f64::MAX;
        m[(3, 0)] = -0.0;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        save_matrix_csv(&p, &m, None).unwrap();
        let back = load_matrix_csv(&p, Some((20, 7))).unwrap().data;
        for (a, b) in m.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let labels = vec!["a".to_string(), "b".to_string()];
        save_matrix_csv(&p, &DMatrix::from_element(2, 2, 0.5), Some(&labels)).unwrap();
        assert_eq!(load_matrix_csv(&p, None).unwrap().labels.unwrap(), labels);
    }

    #[test]
    fn adjacency_conversion() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(to_adjacency(&m, Path::new("a")).unwrap()[(0, 1)], 1);
        let bad = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 1.0, 0.0]);
        assert!(to_adjacency(&bad, Path::new("a")).is_err());
    }

    #[test]
    fn graphml_lists_edges() {
        let a = DMatrix::from_row_slice(2, 2, &[0u8, 1, 0, 0]);
        let s = DMatrix::from_row_slice(2, 2, &[0.0, 0.25, 0.0, 0.0]);
        let labels = vec!["x&y".to_string(), "z".to_string()];
        let g = graphml(&a, &s, Some(&labels));
        assert!(g.contains("<edge source=\"n0\" target=\"n1\"><data key=\"score\">0.25</data>"));
        assert!(g.contains("x&amp;y"));
        assert_eq!(g.matches("<edge ").count(), 1);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
