use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};

use super::{KnodeModel, MlpParams, Record, TrainingDataset, NET_INPUT_DIM, NET_OUTPUT_DIM};
use crate::dynamics::{ControlInput, QuadrotorParams, State};
use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// On-disk layout of a trained model. Matrices are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub activation: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub nominal_mass: f64,
    pub nominal_inertia: [f64; 3],
    pub nominal_gravity: [f64; 3],
    pub input_scale: Vec<f64>,
    pub residual_scale: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl From<&KnodeModel> for ModelFile {
    fn from(m: &KnodeModel) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            activation: "tanh".into(),
            input_dim: NET_INPUT_DIM,
            hidden_dim: m.theta.hidden(),
            output_dim: NET_OUTPUT_DIM,
            nominal_mass: m.nominal.mass,
            nominal_inertia: m.nominal.inertia.into(),
            nominal_gravity: m.nominal.gravity.into(),
            input_scale: m.theta.input_scale.clone(),
            residual_scale: m.residual_scale.as_slice().to_vec(),
            w1: row_major(&m.theta.w1),
            b1: m.theta.b1.as_slice().to_vec(),
            w2: row_major(&m.theta.w2),
            b2: m.theta.b2.as_slice().to_vec(),
        }
    }
}

impl TryFrom<ModelFile> for KnodeModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        if f.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
                f.format_version
            )));
        }
        if f.activation != "tanh" {
            return Err(Error::Format(format!("unsupported activation '{}'", f.activation)));
        }
        if f.input_dim != NET_INPUT_DIM || f.output_dim != NET_OUTPUT_DIM {
            return Err(Error::Format(format!(
                "network must map {NET_INPUT_DIM} -> {NET_OUTPUT_DIM}, file has {} -> {}",
                f.input_dim, f.output_dim
            )));
        }
        let h = f.hidden_dim;
        let check = |name: &str, got: usize, want: usize| {
            if got != want {
                Err(Error::Format(format!("{name} has {got} entries, expected {want}")))
            } else {
                Ok(())
            }
        };
        check("w1", f.w1.len(), h * NET_INPUT_DIM)?;
        check("b1", f.b1.len(), h)?;
        check("w2", f.w2.len(), NET_OUTPUT_DIM * h)?;
        check("b2", f.b2.len(), NET_OUTPUT_DIM)?;
        check("residual_scale", f.residual_scale.len(), NET_OUTPUT_DIM)?;
        let mut nominal = QuadrotorParams::new(f.nominal_mass, Vector3::from(f.nominal_inertia))?;
        nominal.gravity = Vector3::from(f.nominal_gravity);
        let model = KnodeModel {
            nominal,
            theta: MlpParams {
                input_scale: f.input_scale,
                w1: DMatrix::from_row_slice(h, NET_INPUT_DIM, &f.w1),
                b1: DVector::from_vec(f.b1),
                w2: DMatrix::from_row_slice(NET_OUTPUT_DIM, h, &f.w2),
                b2: DVector::from_vec(f.b2),
            },
            residual_scale: Vector6::from_column_slice(&f.residual_scale),
        };
        model.validate()?;
        Ok(model)
    }
}

pub fn save_model(model: &KnodeModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &ModelFile::from(model))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<KnodeModel> {
    let file: ModelFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    KnodeModel::try_from(file)
}

const STATE_COLS: [&str; 13] = [
    "rx", "ry", "rz", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "wx", "wy", "wz",
];
const INPUT_COLS: [&str; 4] = ["thrust", "tau_x", "tau_y", "tau_z"];

pub(crate) fn state_header(prefix: &str) -> Vec<String> {
    STATE_COLS.iter().map(|c| format!("{prefix}{c}")).collect()
}

pub(crate) fn input_header() -> Vec<String> {
    INPUT_COLS.iter().map(|c| c.to_string()).collect()
}

fn dataset_header() -> Vec<String> {
    let mut h = state_header("");
    h.extend(input_header());
    h.extend(state_header("next_"));
    h.push("h".into());
    h
}

pub(crate) fn state_fields(x: &State) -> impl Iterator<Item = String> {
    x.to_vector().iter().map(|v| v.to_string()).collect::<Vec<_>>().into_iter()
}

pub(crate) fn input_fields(u: &ControlInput) -> impl Iterator<Item = String> {
    u.to_vector().iter().map(|v| v.to_string()).collect::<Vec<_>>().into_iter()
}

pub fn save_dataset(ds: &TrainingDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(dataset_header())?;
    for rec in &ds.records {
        let row: Vec<String> = state_fields(&rec.x)
            .chain(input_fields(&rec.u))
            .chain(state_fields(&rec.x_next))
            .chain(std::iter::once(ds.h.to_string()))
            .collect();
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn state_from(vals: &[f64]) -> State {
    State {
        r: Vector3::new(vals[0], vals[1], vals[2]),
        v: Vector3::new(vals[3], vals[4], vals[5]),
        q: Vector4::new(vals[6], vals[7], vals[8], vals[9]),
        omega: Vector3::new(vals[10], vals[11], vals[12]),
    }
}

pub fn load_dataset(path: &Path) -> Result<TrainingDataset> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != dataset_header() {
        return Err(Error::Format(format!("unexpected dataset header in {}", path.display())));
    }
    let mut records = Vec::new();
    let mut step: Option<f64> = None;
    for (line, row) in r.records().enumerate() {
        let row = row?;
        let vals = row
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("row {}: {e}", line + 1)))?;
        let h = vals[30];
        match step {
            None => step = Some(h),
            Some(h0) if h0 != h => {
                return Err(Error::Format(format!("row {}: step {h} differs from {h0}", line + 1)))
            }
            _ => {}
        }
        records.push(Record {
            x: state_from(&vals[0..13]),
            u: ControlInput::new(vals[13], Vector3::new(vals[14], vals[15], vals[16])),
            x_next: state_from(&vals[17..30]),
        });
    }
    let source = path.display().to_string();
    TrainingDataset::new(records, step.unwrap_or(0.0), source)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_file_round_trip() {
        let mut m = KnodeModel::untrained(QuadrotorParams::with_mass(0.03).unwrap(), 5, 2).unwrap();
        m.theta.w2[(1, 3)] = 0.25;
        m.theta.b2[4] = -1.5;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, m);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"format_version\": 1"));
    }

    #[test]
    fn wrong_version_rejected() {
        let m = KnodeModel::untrained(QuadrotorParams::with_mass(0.03).unwrap(), 3, 2).unwrap();
        let mut f = ModelFile::from(&m);
        f.format_version = 99;
        assert!(matches!(KnodeModel::try_from(f), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_header_has_31_columns() {
        assert_eq!(dataset_header().len(), 13 + 4 + 13 + 1);
    }
}
