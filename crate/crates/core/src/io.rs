//! On-disk formats: dataset and prediction CSVs, the line-delimited JSON chain file,
//! sweep diagnostics and small JSON documents.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gibbs::SweepStats;
use crate::model::{Component, ComponentId, Dataset, Hyperparams, MixtureState};

pub const CHAIN_SCHEMA: &str = "immgp-chain";
pub const CHAIN_VERSION: u32 = 1;

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.display().to_string(),
            row: 0,
            column: 0,
            message: format!("{other:?}"),
        },
    }
}

fn dataset_header(d: usize, m: usize) -> Vec<String> {
    (0..d)
        .map(|j| format!("x{j}"))
        .chain((0..m).map(|l| format!("y{l}")))
        .collect()
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(dataset_header(data.input_dim(), data.output_dim()))
        .map_err(|e| csv_error(path, e))?;
    for (x, y) in data.xs.iter().zip(&data.ys) {
        w.write_record(x.iter().chain(y.iter()).map(|v| fmt_f64(*v)))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Counts leading `{prefix}0, {prefix}1, …` names starting at `from`.
fn prefixed_run(header: &csv::StringRecord, from: usize, prefix: char) -> usize {
    header
        .iter()
        .skip(from)
        .enumerate()
        .take_while(|(k, name)| {
            name.strip_prefix(prefix)
                .and_then(|rest| rest.parse::<usize>().ok())
                == Some(*k)
        })
        .count()
}

/// Parses a numeric CSV, returning the header and the rows. Row numbers in errors
/// count the header as row 1; columns are 1-based.
fn read_numeric(path: &Path) -> Result<(csv::StringRecord, Vec<Vec<f64>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    let parse_err = |row: usize, column: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        row,
        column,
        message,
    };
    let mut rows = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => {
                parse_err(row, 0, format!("expected {} fields", header.len()))
            }
            _ => csv_error(path, e),
        })?;
        let mut vals = Vec::with_capacity(rec.len());
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(row, j + 1, format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(row, j + 1, format!("`{field}` is not finite")));
            }
            vals.push(v);
        }
        rows.push(vals);
    }
    Ok((header, rows))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let (header, rows) = read_numeric(path)?;
    let d = prefixed_run(&header, 0, 'x');
    let m = prefixed_run(&header, d, 'y');
    if d + m != header.len() || m == 0 {
        return Err(Error::Parse {
            path: path.display().to_string(),
            row: 1,
            column: d + m + 1,
            message: "header must be x0..x{D-1},y0..y{M-1}".into(),
        });
    }
    let xs = rows.iter().map(|r| DVector::from_row_slice(&r[..d])).collect();
    let ys = rows.iter().map(|r| DVector::from_row_slice(&r[d..])).collect();
    Dataset::new(xs, ys, d, m)
}

pub fn write_predictions(path: &Path, means: &[DVector<f64>], m: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record((0..m).map(|l| format!("y{l}")))
        .map_err(|e| csv_error(path, e))?;
    for p in means {
        w.write_record(p.iter().map(|v| fmt_f64(*v)))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<DVector<f64>>> {
    let (header, rows) = read_numeric(path)?;
    let m = prefixed_run(&header, 0, 'y');
    if m != header.len() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            row: 1,
            column: m + 1,
            message: "header must be y0..y{M-1}".into(),
        });
    }
    Ok(rows.iter().map(|r| DVector::from_row_slice(r)).collect())
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    for r in rows {
        if r.len() != n {
            return Err(Error::SchemaMismatch("matrix is not square".into()));
        }
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparamsRecord {
    pub a0: f64,
    pub b0: f64,
    pub mu0: Vec<f64>,
    pub r0: Vec<Vec<f64>>,
    pub w0: Vec<Vec<f64>>,
    pub nu0: f64,
    pub a1: f64,
    pub b1: f64,
    pub w1: Vec<Vec<f64>>,
    pub nu1: f64,
    pub mu1: f64,
    pub r1: f64,
    pub a2: f64,
    pub b2: f64,
}

impl From<&Hyperparams> for HyperparamsRecord {
    fn from(h: &Hyperparams) -> Self {
        Self {
            a0: h.a0,
            b0: h.b0,
            mu0: h.mu0.iter().copied().collect(),
            r0: matrix_rows(&h.r0),
            w0: matrix_rows(&h.w0),
            nu0: h.nu0,
            a1: h.a1,
            b1: h.b1,
            w1: matrix_rows(&h.w1),
            nu1: h.nu1,
            mu1: h.mu1,
            r1: h.r1,
            a2: h.a2,
            b2: h.b2,
        }
    }
}

impl HyperparamsRecord {
    pub fn to_hyperparams(&self) -> Result<Hyperparams> {
        Ok(Hyperparams {
            a0: self.a0,
            b0: self.b0,
            mu0: DVector::from_vec(self.mu0.clone()),
            r0: matrix_from_rows(&self.r0)?,
            w0: matrix_from_rows(&self.w0)?,
            nu0: self.nu0,
            a1: self.a1,
            b1: self.b1,
            w1: matrix_from_rows(&self.w1)?,
            nu1: self.nu1,
            mu1: self.mu1,
            r1: self.r1,
            a2: self.a2,
            b2: self.b2,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub id: ComponentId,
    pub mu: Vec<f64>,
    pub r: Vec<Vec<f64>>,
    pub sigma0: f64,
    pub k: Vec<Vec<f64>>,
    pub w: Vec<f64>,
    pub noise: Vec<f64>,
}

impl ComponentRecord {
    pub fn new(id: ComponentId, c: &Component) -> Self {
        Self {
            id,
            mu: c.mu.iter().copied().collect(),
            r: matrix_rows(&c.r),
            sigma0: c.sigma0,
            k: matrix_rows(&c.k),
            w: c.w.iter().copied().collect(),
            noise: c.noise.iter().copied().collect(),
        }
    }

    pub fn to_component(&self) -> Result<Component> {
        Ok(Component {
            mu: DVector::from_vec(self.mu.clone()),
            r: matrix_from_rows(&self.r)?,
            sigma0: self.sigma0,
            k: matrix_from_rows(&self.k)?,
            w: DVector::from_vec(self.w.clone()),
            noise: DVector::from_vec(self.noise.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub alpha: f64,
    pub assignments: Vec<ComponentId>,
    pub components: Vec<ComponentRecord>,
}

impl StateRecord {
    pub fn new(s: &MixtureState) -> Self {
        Self {
            alpha: s.alpha,
            assignments: s.assignments.clone(),
            components: s
                .components
                .iter()
                .map(|(id, c)| ComponentRecord::new(*id, c))
                .collect(),
        }
    }

    pub fn to_state(&self) -> Result<MixtureState> {
        let components = self
            .components
            .iter()
            .map(|c| Ok((c.id, c.to_component()?)))
            .collect::<Result<_>>()?;
        let s = MixtureState::new(self.alpha, self.assignments.clone(), components);
        s.check_invariants()?;
        Ok(s)
    }
}

/// First line of a chain file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainHeader {
    pub schema: String,
    pub version: u32,
    pub input_dim: usize,
    pub output_dim: usize,
    pub n_train: usize,
    /// Digest of the training CSV the chain was fitted to.
    pub train_sha256: String,
    pub seed: u64,
    pub chain: usize,
    pub hyperparams: HyperparamsRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleLine {
    sample: usize,
    #[serde(flatten)]
    state: StateRecord,
}

pub fn write_chain(path: &Path, header: &ChainHeader, samples: &[MixtureState]) -> Result<()> {
    let mut w = create(path)?;
    let line = |w: &mut BufWriter<File>, v: String| {
        w.write_all(v.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))
    };
    line(&mut w, serde_json::to_string(header).expect("serializable"))?;
    for (k, s) in samples.iter().enumerate() {
        let rec = SampleLine {
            sample: k,
            state: StateRecord::new(s),
        };
        line(&mut w, serde_json::to_string(&rec).expect("serializable"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_chain(path: &Path) -> Result<(ChainHeader, Vec<MixtureState>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |row: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        row,
        column: 0,
        message,
    };
    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty chain file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: ChainHeader =
        serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    if header.schema != CHAIN_SCHEMA || header.version != CHAIN_VERSION {
        return Err(Error::SchemaMismatch(format!(
            "expected {CHAIN_SCHEMA} version {CHAIN_VERSION}, found {} version {}",
            header.schema, header.version
        )));
    }
    let mut samples = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleLine =
            serde_json::from_str(&line).map_err(|e| parse_err(k + 2, e.to_string()))?;
        let state = rec.state.to_state()?;
        if state.len() != header.n_train {
            return Err(Error::SchemaMismatch(format!(
                "sample {} has {} assignments, header says {}",
                rec.sample,
                state.len(),
                header.n_train
            )));
        }
        samples.push(state);
    }
    Ok((header, samples))
}

pub fn write_diagnostics(path: &Path, stats: &[SweepStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record([
        "sweep",
        "log_joint",
        "components",
        "alpha",
        "accept_sigma0",
        "accept_k",
        "accept_w",
        "accept_noise",
        "accept_alpha",
        "divergences",
    ])
    .map_err(|e| csv_error(path, e))?;
    for s in stats {
        w.write_record([
            s.sweep.to_string(),
            fmt_f64(s.log_joint),
            s.components.to_string(),
            fmt_f64(s.alpha),
            fmt_f64(s.moves.sigma0.rate()),
            fmt_f64(s.moves.k.rate()),
            fmt_f64(s.moves.w.rate()),
            fmt_f64(s.moves.noise.rate()),
            fmt_f64(s.alpha_move.rate()),
            s.moves.divergences.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).expect("serializable");
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        row: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::SeededRng;
    use crate::model::tests::random_component;
    use std::collections::BTreeMap;

    fn dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let t = dir();
        let p = t.path().join("d.csv");
        let data = Dataset::new(
            vec![DVector::from_vec(vec![0.1, 1.0 / 3.0]), DVector::from_vec(vec![-1e-300, 7e22])],
            vec![DVector::from_vec(vec![std::f64::consts::PI]), DVector::from_vec(vec![-0.0])],
            2,
            1,
        )
        .unwrap();
        write_dataset(&p, &data).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("x0,x1,y0\n"));
        assert_eq!(read_dataset(&p).unwrap(), data);
    }

    #[test]
    fn empty_dataset_round_trip() {
        let t = dir();
        let p = t.path().join("d.csv");
        let data = Dataset::new(vec![], vec![], 2, 2).unwrap();
        write_dataset(&p, &data).unwrap();
        let back = read_dataset(&p).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.output_dim(), 2);
    }

    #[test]
    fn non_finite_is_located() {
        let t = dir();
        let p = t.path().join("d.csv");
        std::fs::write(&p, "x0,y0\n1,2\n3,NaN\n").unwrap();
        match read_dataset(&p) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (3, 2)),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "x0,y0\ninf,2\n").unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Parse { row: 2, column: 1, .. })));
        std::fs::write(&p, "x0,y0\n1,abc\n").unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Parse { row: 2, column: 2, .. })));
    }

    #[test]
    fn bad_header_rejected() {
        let t = dir();
        let p = t.path().join("d.csv");
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Parse { row: 1, .. })));
        std::fs::write(&p, "x0,x2,y0\n1,2,3\n").unwrap();
        assert!(read_dataset(&p).is_err());
    }

    #[test]
    fn missing_file_is_io() {
        let e = read_dataset(Path::new("/nonexistent/file.csv")).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn chain_round_trip_is_bitwise() {
        let t = dir();
        let p = t.path().join("chain.jsonl");
        let mut rng = SeededRng::new(1);
        let mut comps = BTreeMap::new();
        comps.insert(ComponentId(0), random_component(2, 2, &mut rng));
        comps.insert(ComponentId(3), random_component(2, 2, &mut rng));
        let s = MixtureState::new(
            0.123456789,
            vec![ComponentId(0), ComponentId(3), ComponentId(3)],
            comps,
        );
        let hp = Hyperparams::generation_preset(2, 2);
        let header = ChainHeader {
            schema: CHAIN_SCHEMA.into(),
            version: CHAIN_VERSION,
            input_dim: 2,
            output_dim: 2,
            n_train: 3,
            train_sha256: "00".into(),
            seed: 4,
            chain: 0,
            hyperparams: (&hp).into(),
        };
        write_chain(&p, &header, &[s.clone(), s.clone()]).unwrap();
        let (h, samples) = read_chain(&p).unwrap();
        assert_eq!(h, header);
        assert_eq!(h.hyperparams.to_hyperparams().unwrap(), hp);
        assert_eq!(samples, vec![s.clone(), s]);
    }

    #[test]
    fn wrong_schema_version_rejected() {
        let t = dir();
        let p = t.path().join("chain.jsonl");
        let hp = Hyperparams::generation_preset(1, 1);
        let header = ChainHeader {
            schema: CHAIN_SCHEMA.into(),
            version: CHAIN_VERSION + 1,
            input_dim: 1,
            output_dim: 1,
            n_train: 0,
            train_sha256: String::new(),
            seed: 0,
            chain: 0,
            hyperparams: (&hp).into(),
        };
        write_chain(&p, &header, &[]).unwrap();
        assert!(matches!(read_chain(&p), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn predictions_round_trip() {
        let t = dir();
        let p = t.path().join("p.csv");
        let rows = vec![DVector::from_vec(vec![1.5, -2.25])];
        write_predictions(&p, &rows, 2).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), rows);
        write_predictions(&p, &[], 2).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "y0,y1\n");
    }

    #[test]
    fn digest_of_known_input() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
