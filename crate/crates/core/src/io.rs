//! File formats: JSON for structured artifacts, CSV for series and results.
//!
//! Floats are written in their shortest round-trip form, so reading a file and
//! writing it back reproduces it byte for byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{NetinfError, Result};
use crate::eval::{TopologyScore, TrialResult};
use crate::netsim::{Experiment, NoiseSetting};
use crate::topology::Method;

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| with_path(path, e))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn with_path(path: &Path, e: std::io::Error) -> NetinfError {
    NetinfError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| with_path(path, e))?;
    serde_json::from_str(&text).map_err(|e| NetinfError::Format(format!("{}: {e}", path.display())))
}

/// Metadata stored next to an experiment CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSidecar {
    pub n_points: usize,
    pub observed: usize,
    pub inputs: usize,
    pub noise: NoiseSetting,
    /// Process-noise variance implied by `noise`.
    pub noise_variance: f64,
    pub seed: Option<u64>,
}

/// `run.csv` -> `run.json`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

/// Writes one row per time step (`y1..yp, u1..um`) and the JSON sidecar.
pub fn write_experiment(path: &Path, exp: &Experiment) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> =
        (1..=exp.observed()).map(|i| format!("y{i}")).chain((1..=exp.inputs()).map(|k| format!("u{k}"))).collect();
    w.write_record(&header)?;
    for t in 0..exp.n_points() {
        let row: Vec<String> = exp.y.column(t).iter().chain(exp.u.column(t).iter()).map(|v| v.to_string()).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    let meta = ExperimentSidecar {
        n_points: exp.n_points(),
        observed: exp.observed(),
        inputs: exp.inputs(),
        noise: exp.noise,
        noise_variance: exp.noise.noise_variance(),
        seed: exp.seed,
    };
    write_json(&sidecar_path(path), &meta)
}

pub fn read_experiment(path: &Path) -> Result<Experiment> {
    let meta: ExperimentSidecar = read_json(&sidecar_path(path))?;
    let mut r = csv::Reader::from_reader(File::open(path).map_err(|e| with_path(path, e))?);
    let header = r.headers()?.clone();
    let expected: Vec<String> =
        (1..=meta.observed).map(|i| format!("y{i}")).chain((1..=meta.inputs).map(|k| format!("u{k}"))).collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(NetinfError::Format(format!(
            "{}: header {:?} does not match the sidecar ({} outputs, {} inputs)",
            path.display(),
            header.iter().collect::<Vec<_>>(),
            meta.observed,
            meta.inputs
        )));
    }
    let (p, m) = (meta.observed, meta.inputs);
    let mut y = DMatrix::zeros(p, meta.n_points);
    let mut u = DMatrix::zeros(m, meta.n_points);
    let mut rows = 0;
    for (t, record) in r.records().enumerate() {
        let record = record?;
        if t >= meta.n_points {
            rows = t + 1;
            break;
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| NetinfError::Format(format!("{}: row {}, column {}: `{field}` is not a number", path.display(), t + 2, c + 1)))?;
            if c < p {
                y[(c, t)] = v;
            } else {
                u[(c - p, t)] = v;
            }
        }
        rows = t + 1;
    }
    if rows != meta.n_points {
        return Err(NetinfError::Format(format!("{}: sidecar says {} rows", path.display(), meta.n_points)));
    }
    let mut exp = Experiment::new(y, u, meta.noise)?;
    exp.seed = meta.seed;
    Ok(exp)
}

/// Flat CSV form of [`TrialResult`].
#[derive(Debug, Serialize, Deserialize)]
struct TrialRow {
    trial: usize,
    seed: u64,
    topology: String,
    noise: NoiseSetting,
    n_points: usize,
    method: Method,
    tpr: Option<f64>,
    prec: Option<f64>,
    true_links: Option<usize>,
    inferred_links: Option<usize>,
    true_positives: Option<usize>,
    mean_fitness: Option<f64>,
    /// `;`-separated, `-` for an undefined node.
    fitness_per_node: String,
    /// `;`-separated node indices (0-based).
    unresolved_nodes: String,
    runtime_secs: f64,
    error: Option<String>,
}

fn join<T, F: Fn(&T) -> String>(items: &[T], f: F) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(";")
}

fn split<T, F: Fn(&str) -> Result<T>>(s: &str, f: F) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(f).collect()
}

impl From<&TrialResult> for TrialRow {
    fn from(t: &TrialResult) -> Self {
        Self {
            trial: t.trial,
            seed: t.seed,
            topology: t.topology.clone(),
            noise: t.noise,
            n_points: t.n_points,
            method: t.method,
            tpr: t.score.map(|s| s.tpr),
            prec: t.score.map(|s| s.prec),
            true_links: t.score.map(|s| s.true_links),
            inferred_links: t.score.map(|s| s.inferred_links),
            true_positives: t.score.map(|s| s.true_positives),
            mean_fitness: t.mean_fitness,
            fitness_per_node: join(&t.fitness_per_node, |f| f.map_or("-".into(), |v| v.to_string())),
            unresolved_nodes: join(&t.unresolved_nodes, |n| n.to_string()),
            runtime_secs: t.runtime_secs,
            error: t.error.clone(),
        }
    }
}

impl TryFrom<TrialRow> for TrialResult {
    type Error = NetinfError;

    fn try_from(r: TrialRow) -> Result<Self> {
        let bad = |what: &str, v: &str| NetinfError::Format(format!("trial {}: bad {what} entry `{v}`", r.trial));
        let score = match (r.tpr, r.prec, r.true_links, r.inferred_links, r.true_positives) {
            (Some(tpr), Some(prec), Some(true_links), Some(inferred_links), Some(true_positives)) => {
                Some(TopologyScore { tpr, prec, true_links, inferred_links, true_positives })
            }
            (None, None, None, None, None) => None,
            _ => return Err(NetinfError::Format(format!("trial {}: partially filled score columns", r.trial))),
        };
        let fitness_per_node = split(&r.fitness_per_node, |v| {
            if v == "-" {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| bad("fitness", v))
            }
        })?;
        let unresolved_nodes = split(&r.unresolved_nodes, |v| v.parse().map_err(|_| bad("node", v)))?;
        Ok(TrialResult {
            trial: r.trial,
            seed: r.seed,
            topology: r.topology,
            noise: r.noise,
            n_points: r.n_points,
            method: r.method,
            score,
            fitness_per_node,
            mean_fitness: r.mean_fitness,
            unresolved_nodes,
            runtime_secs: r.runtime_secs,
            error: r.error,
        })
    }
}

pub const TRIAL_CSV_HEADER: [&str; 16] = [
    "trial",
    "seed",
    "topology",
    "noise",
    "n_points",
    "method",
    "tpr",
    "prec",
    "true_links",
    "inferred_links",
    "true_positives",
    "mean_fitness",
    "fitness_per_node",
    "unresolved_nodes",
    "runtime_secs",
    "error",
];

/// One row per trial; the header is written even when `trials` is empty.
pub fn write_trials_csv(path: &Path, trials: &[TrialResult]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(TRIAL_CSV_HEADER)?;
    for t in trials {
        w.serialize(TrialRow::from(t))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trials_csv(path: &Path) -> Result<Vec<TrialResult>> {
    let mut r = csv::Reader::from_reader(File::open(path).map_err(|e| with_path(path, e))?);
    if r.headers()?.iter().ne(TRIAL_CSV_HEADER) {
        return Err(NetinfError::Format(format!("{}: unexpected header", path.display())));
    }
    r.deserialize::<TrialRow>().map(|row| TrialResult::try_from(row?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let y = DMatrix::from_row_slice(2, 3, &[0.1, -2.5e-9, 3.0, 1.0 / 3.0, 7.0, -0.0]);
        let u = DMatrix::from_row_slice(1, 3, &[1e300, 2.0, -1.25]);
        let mut exp = Experiment::new(y, u, NoiseSetting::SnrDb(10.0)).unwrap();
        exp.seed = Some(42);
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_experiment(&a, &exp).unwrap();
        let back = read_experiment(&a).unwrap();
        assert_eq!(back, exp);
        write_experiment(&b, &back).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(std::fs::read(sidecar_path(&a)).unwrap(), std::fs::read(sidecar_path(&b)).unwrap());
    }

    #[test]
    fn header_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let exp = Experiment::new(DMatrix::zeros(2, 4), DMatrix::zeros(1, 4), NoiseSetting::NoNoise).unwrap();
        write_experiment(&a, &exp).unwrap();
        std::fs::write(&a, "y1,y2,u9\n0,0,0\n0,0,0\n0,0,0\n0,0,0\n").unwrap();
        assert!(matches!(read_experiment(&a), Err(NetinfError::Format(_))));
    }

    #[test]
    fn trial_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ok = TrialResult {
            trial: 0,
            seed: 99,
            topology: "random".into(),
            noise: NoiseSetting::NoNoise,
            n_points: 85,
            method: Method::Vi,
            score: Some(TopologyScore { tpr: 0.9, prec: 1.0, true_links: 10, inferred_links: 9, true_positives: 9 }),
            fitness_per_node: vec![Some(99.5), None, Some(0.1 + 0.2)],
            mean_fitness: Some(49.9),
            unresolved_nodes: vec![1],
            runtime_secs: 1.25,
            error: None,
        };
        let failed = TrialResult {
            trial: 1,
            score: None,
            fitness_per_node: vec![],
            mean_fitness: None,
            unresolved_nodes: vec![],
            error: Some("numerical failure, with a comma".into()),
            noise: NoiseSetting::SnrDb(-3.5),
            method: Method::KebTc,
            ..ok.clone()
        };
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_trials_csv(&a, &[ok.clone(), failed.clone()]).unwrap();
        let back = read_trials_csv(&a).unwrap();
        assert_eq!(back, vec![ok, failed]);
        write_trials_csv(&b, &back).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        write_trials_csv(&a, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&a).unwrap().lines().count(), 1);
        assert!(read_trials_csv(&a).unwrap().is_empty());
    }
}
