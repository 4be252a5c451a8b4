//! Dataset and model persistence.
//!
//! Datasets travel as long-format CSV with header `unit,role,row,col,value`
//! (1-based indices, role `x` or `y`, dense blocks per unit/role) with an
//! optional `labels.csv` sidecar (`unit,label`). Fitted models travel as
//! versioned JSON with row-major parameter arrays.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baselines::{FmrComponentParams, MmnCwmComponentParams, MmnCwmParams};
use crate::cwm::{ComponentParams, CwmParams, Dataset, FitParams, FittedModel, ModelKind};
use crate::error::{Error, Result};
use crate::matnorm::SpdMatrix;
use crate::scalar::Scalar;

/// Bumped whenever the JSON model schema changes incompatibly.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Writes `content` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn atomic_write(path: &Path, content: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{ext}.tmp"),
        None => "tmp".to_string(),
    });
    fs::write(&tmp, content)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn sidecar_labels_path(data_path: &Path) -> PathBuf {
    data_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("labels.csv")
}

/// Saves a dataset as long-format CSV; if labels are attached, a
/// `labels.csv` sidecar is written next to it.
pub fn save_dataset<T: Scalar>(path: &Path, data: &Dataset<T>) -> Result<()> {
    let mut out = String::from("unit,role,row,col,value\n");
    for i in 0..data.n() {
        for (role, mat) in [("x", &data.x()[i]), ("y", &data.y()[i])] {
            for row in 0..mat.nrows() {
                for col in 0..mat.ncols() {
                    let v = mat[(row, col)].to_f64();
                    out.push_str(&format!("{},{},{},{},{}\n", i + 1, role, row + 1, col + 1, v));
                }
            }
        }
    }
    atomic_write(path, out.as_bytes())?;
    if let Some(labels) = data.labels() {
        save_labels(&sidecar_labels_path(path), labels)?;
    }
    Ok(())
}

/// Saves cluster labels as `unit,label` CSV (units 1-based, labels as-is).
pub fn save_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = String::from("unit,label\n");
    for (i, l) in labels.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, l));
    }
    atomic_write(path, out.as_bytes())
}

/// Loads a `unit,label` CSV, ordered by unit.
pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut by_unit: BTreeMap<usize, usize> = BTreeMap::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 2 fields, got {}", rec.len()),
            });
        }
        let unit: usize = rec[0].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad unit {:?}", &rec[0]),
        })?;
        let label: usize = rec[1].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad label {:?}", &rec[1]),
        })?;
        if by_unit.insert(unit, label).is_some() {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate unit {unit}"),
            });
        }
    }
    Ok(by_unit.into_values().collect())
}

type Block = BTreeMap<(usize, usize), f64>;

fn block_to_matrix<T: Scalar>(unit: usize, role: &str, block: &Block) -> Result<DMatrix<T>> {
    let rows = block.keys().map(|&(r, _)| r).max().unwrap_or(0);
    let cols = block.keys().map(|&(_, c)| c).max().unwrap_or(0);
    if block.len() != rows * cols {
        return Err(Error::Shape {
            unit,
            role: role.to_string(),
            msg: format!(
                "block is not dense: {} cells present, {rows}x{cols} implied",
                block.len()
            ),
        });
    }
    let mut m = DMatrix::zeros(rows, cols);
    for (&(r, c), &v) in block {
        m[(r - 1, c - 1)] = T::of_f64(v);
    }
    Ok(m)
}

/// Loads a long-format CSV dataset; picks up a `labels.csv` sidecar if one
/// exists in the same directory.
pub fn load_dataset<T: Scalar>(path: &Path) -> Result<Dataset<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    {
        let headers = rdr.headers()?;
        let expect = ["unit", "role", "row", "col", "value"];
        if headers.len() != 5 || headers.iter().zip(expect).any(|(h, e)| h.trim() != e) {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header unit,role,row,col,value, got {headers:?}"),
            });
        }
    }
    // unit -> (x block, y block)
    let mut units: BTreeMap<usize, (Block, Block)> = BTreeMap::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec?;
        if rec.len() != 5 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 5 fields, got {}", rec.len()),
            });
        }
        let parse_int = |s: &str, what: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad {what} {s:?}"),
            })
        };
        let unit = parse_int(&rec[0], "unit")?;
        let role = rec[1].trim().to_string();
        let row = parse_int(&rec[2], "row")?;
        let col = parse_int(&rec[3], "col")?;
        let value: f64 = rec[4].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad value {:?}", &rec[4]),
        })?;
        if row == 0 || col == 0 {
            return Err(Error::Parse {
                line,
                msg: "row/col indices are 1-based".to_string(),
            });
        }
        let entry = units.entry(unit).or_default();
        let block = match role.as_str() {
            "x" => &mut entry.0,
            "y" => &mut entry.1,
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("role must be x or y, got {other:?}"),
                })
            }
        };
        if block.insert((row, col), value).is_some() {
            return Err(Error::DuplicateCell {
                unit,
                role,
                row,
                col,
            });
        }
    }
    if units.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "dataset contains no units".to_string(),
        });
    }
    let mut xs = Vec::with_capacity(units.len());
    let mut ys = Vec::with_capacity(units.len());
    for (&unit, (bx, by)) in &units {
        if bx.is_empty() {
            return Err(Error::Shape {
                unit,
                role: "x".to_string(),
                msg: "missing block".to_string(),
            });
        }
        if by.is_empty() {
            return Err(Error::Shape {
                unit,
                role: "y".to_string(),
                msg: "missing block".to_string(),
            });
        }
        xs.push(block_to_matrix(unit, "x", bx)?);
        ys.push(block_to_matrix(unit, "y", by)?);
    }
    let (q, r) = (xs[0].nrows(), xs[0].ncols());
    let (p, ry) = (ys[0].nrows(), ys[0].ncols());
    for (i, (&unit, _)) in units.iter().enumerate() {
        if xs[i].shape() != (q, r) {
            return Err(Error::Shape {
                unit,
                role: "x".to_string(),
                msg: format!("expected {q}x{r}, got {}x{}", xs[i].nrows(), xs[i].ncols()),
            });
        }
        if ys[i].shape() != (p, ry) {
            return Err(Error::Shape {
                unit,
                role: "y".to_string(),
                msg: format!("expected {p}x{ry}, got {}x{}", ys[i].nrows(), ys[i].ncols()),
            });
        }
    }
    if ry != r {
        return Err(Error::Shape {
            unit: *units.keys().next().unwrap(),
            role: "y".to_string(),
            msg: format!("x blocks have {r} columns but y blocks have {ry}"),
        });
    }
    let labels_path = sidecar_labels_path(path);
    let labels = if labels_path.exists() {
        let l = load_labels(&labels_path)?;
        if l.len() != units.len() {
            return Err(Error::Parse {
                line: 1,
                msg: format!(
                    "labels.csv has {} units but the dataset has {}",
                    l.len(),
                    units.len()
                ),
            });
        }
        Some(l)
    } else {
        None
    };
    Dataset::new(xs, ys, labels)
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixDto {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

impl MatrixDto {
    fn from_matrix<T: Scalar>(m: &DMatrix<T>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)].to_f64());
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    fn to_matrix<T: Scalar>(&self, what: &str) -> Result<DMatrix<T>> {
        if self.rows * self.cols != self.data.len() {
            return Err(Error::InvariantViolation(format!(
                "{what}: {}x{} declared but {} entries stored",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(
            self.rows,
            self.cols,
            &self.data.iter().map(|&v| T::of_f64(v)).collect::<Vec<T>>(),
        ))
    }

    fn to_spd<T: Scalar>(&self, what: &str) -> Result<SpdMatrix<T>> {
        SpdMatrix::new(self.to_matrix(what)?)
            .map_err(|e| Error::InvariantViolation(format!("{what}: {e}")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
enum ComponentDto {
    Cwm {
        pi: f64,
        m: MatrixDto,
        phi_x: MatrixDto,
        psi_x: MatrixDto,
        bstar: MatrixDto,
        phi_y: MatrixDto,
        psi_y: MatrixDto,
    },
    Fmr {
        pi: f64,
        bstar: MatrixDto,
        phi_y: MatrixDto,
        psi_y: MatrixDto,
    },
    Mmn {
        pi: f64,
        mu: MatrixDto,
        sigma_x: MatrixDto,
        c: MatrixDto,
        sigma_y: MatrixDto,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct DimsDto {
    p: usize,
    q: usize,
    r: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDto {
    version: u32,
    model_kind: String,
    dims: DimsDto,
    loglik: f64,
    bic: f64,
    n_params: usize,
    converged: bool,
    iterations: usize,
    components: Vec<ComponentDto>,
}

/// Everything reloadable from a persisted model file.
#[derive(Debug, Clone)]
pub struct ModelRecord<T: Scalar> {
    pub model_kind: ModelKind,
    /// (p, q, r) of the data the model was fitted to.
    pub dims: (usize, usize, usize),
    pub params: FitParams<T>,
    pub loglik: T,
    pub bic: T,
    pub n_params: usize,
    pub converged: bool,
    pub iterations: usize,
}

fn params_to_dtos<T: Scalar>(params: &FitParams<T>) -> Vec<ComponentDto> {
    match params {
        FitParams::Cwm(p) => p
            .components
            .iter()
            .map(|c| ComponentDto::Cwm {
                pi: c.pi.to_f64(),
                m: MatrixDto::from_matrix(&c.m),
                phi_x: MatrixDto::from_matrix(c.phi_x.matrix()),
                psi_x: MatrixDto::from_matrix(c.psi_x.matrix()),
                bstar: MatrixDto::from_matrix(&c.bstar),
                phi_y: MatrixDto::from_matrix(c.phi_y.matrix()),
                psi_y: MatrixDto::from_matrix(c.psi_y.matrix()),
            })
            .collect(),
        FitParams::Fmr(p) => p
            .iter()
            .map(|c| ComponentDto::Fmr {
                pi: c.pi.to_f64(),
                bstar: MatrixDto::from_matrix(&c.bstar),
                phi_y: MatrixDto::from_matrix(c.phi_y.matrix()),
                psi_y: MatrixDto::from_matrix(c.psi_y.matrix()),
            })
            .collect(),
        FitParams::Mmn(p) => p
            .components
            .iter()
            .map(|c| ComponentDto::Mmn {
                pi: c.pi.to_f64(),
                mu: MatrixDto::from_matrix(&c.mu),
                sigma_x: MatrixDto::from_matrix(c.sigma_x.matrix()),
                c: MatrixDto::from_matrix(&c.c),
                sigma_y: MatrixDto::from_matrix(c.sigma_y.matrix()),
            })
            .collect(),
    }
}

fn dtos_to_params<T: Scalar>(kind: ModelKind, dtos: &[ComponentDto]) -> Result<FitParams<T>> {
    let mismatch = || Error::InvariantViolation("component family does not match model_kind".into());
    match kind {
        ModelKind::MnCwm => {
            let mut comps = Vec::with_capacity(dtos.len());
            for d in dtos {
                let ComponentDto::Cwm {
                    pi,
                    m,
                    phi_x,
                    psi_x,
                    bstar,
                    phi_y,
                    psi_y,
                } = d
                else {
                    return Err(mismatch());
                };
                comps.push(ComponentParams {
                    pi: T::of_f64(*pi),
                    m: m.to_matrix("m")?,
                    phi_x: phi_x.to_spd("phi_x")?,
                    psi_x: psi_x.to_spd("psi_x")?,
                    bstar: bstar.to_matrix("bstar")?,
                    phi_y: phi_y.to_spd("phi_y")?,
                    psi_y: psi_y.to_spd("psi_y")?,
                });
            }
            Ok(FitParams::Cwm(CwmParams::new(comps)?))
        }
        ModelKind::MnFmr => {
            let mut comps = Vec::with_capacity(dtos.len());
            for d in dtos {
                let ComponentDto::Fmr {
                    pi,
                    bstar,
                    phi_y,
                    psi_y,
                } = d
                else {
                    return Err(mismatch());
                };
                comps.push(FmrComponentParams {
                    pi: T::of_f64(*pi),
                    bstar: bstar.to_matrix("bstar")?,
                    phi_y: phi_y.to_spd("phi_y")?,
                    psi_y: psi_y.to_spd("psi_y")?,
                });
            }
            Ok(FitParams::Fmr(comps))
        }
        ModelKind::MmnCwm => {
            let mut comps = Vec::with_capacity(dtos.len());
            for d in dtos {
                let ComponentDto::Mmn {
                    pi,
                    mu,
                    sigma_x,
                    c,
                    sigma_y,
                } = d
                else {
                    return Err(mismatch());
                };
                comps.push(MmnCwmComponentParams {
                    pi: T::of_f64(*pi),
                    mu: mu.to_matrix("mu")?,
                    sigma_x: sigma_x.to_spd("sigma_x")?,
                    c: c.to_matrix("c")?,
                    sigma_y: sigma_y.to_spd("sigma_y")?,
                });
            }
            Ok(FitParams::Mmn(MmnCwmParams { components: comps }))
        }
    }
}

fn check_dims<T: Scalar>(params: &FitParams<T>, dims: (usize, usize, usize)) -> Result<()> {
    let (p, q, r) = dims;
    let bad = |msg: String| Err(Error::InvariantViolation(msg));
    match params {
        FitParams::Cwm(cp) => {
            if (cp.p(), cp.q(), cp.r()) != (p, q, r) {
                return bad(format!(
                    "declared dims ({p},{q},{r}) do not match components ({},{},{})",
                    cp.p(),
                    cp.q(),
                    cp.r()
                ));
            }
        }
        FitParams::Fmr(comps) => {
            for c in comps {
                if c.bstar.shape() != (p, 1 + q)
                    || c.phi_y.dim() != p
                    || c.psi_y.dim() != r
                {
                    return bad("component shapes do not match declared dims".into());
                }
            }
        }
        FitParams::Mmn(mp) => {
            for c in &mp.components {
                if c.mu.shape() != (q * r, 1)
                    || c.sigma_x.dim() != q * r
                    || c.c.shape() != (p * r, 1 + q * r)
                    || c.sigma_y.dim() != p * r
                {
                    return bad("component shapes do not match declared dims".into());
                }
            }
        }
    }
    Ok(())
}

fn parse_kind(s: &str) -> Result<ModelKind> {
    match s {
        "MN-CWM" => Ok(ModelKind::MnCwm),
        "MN-FMR" => Ok(ModelKind::MnFmr),
        "MMN-CWM" => Ok(ModelKind::MmnCwm),
        other => Err(Error::InvariantViolation(format!(
            "unknown model_kind {other:?}"
        ))),
    }
}

/// Persists a fitted model as versioned JSON. `dims` is the (p, q, r) of
/// the training data (not recoverable from vectorized baseline parameters).
pub fn save_model<T: Scalar>(
    path: &Path,
    model: &FittedModel<T>,
    dims: (usize, usize, usize),
) -> Result<()> {
    let dto = ModelDto {
        version: MODEL_FORMAT_VERSION,
        model_kind: model.model_kind.as_str().to_string(),
        dims: DimsDto {
            p: dims.0,
            q: dims.1,
            r: dims.2,
        },
        loglik: model.loglik.to_f64(),
        bic: model.bic.to_f64(),
        n_params: model.n_params,
        converged: model.converged,
        iterations: model.iterations,
        components: params_to_dtos(&model.params),
    };
    let json = serde_json::to_string_pretty(&dto)?;
    atomic_write(path, json.as_bytes())
}

/// Loads a persisted model, validating the format version and every
/// parameter invariant (weights, SPD covariances, shape consistency).
pub fn load_model<T: Scalar>(path: &Path) -> Result<ModelRecord<T>> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("version") {
        None => {
            return Err(Error::VersionMismatch(
                "model file has no version field".to_string(),
            ))
        }
        Some(v) if v.as_u64() != Some(MODEL_FORMAT_VERSION as u64) => {
            return Err(Error::VersionMismatch(format!(
                "model format version {v} (this build reads {MODEL_FORMAT_VERSION})"
            )))
        }
        Some(_) => {}
    }
    let dto: ModelDto = serde_json::from_value(value)?;
    let kind = parse_kind(&dto.model_kind)?;
    let params = dtos_to_params::<T>(kind, &dto.components)?;
    let dims = (dto.dims.p, dto.dims.q, dto.dims.r);
    check_dims(&params, dims)?;
    Ok(ModelRecord {
        model_kind: kind,
        dims,
        params,
        loglik: T::of_f64(dto.loglik),
        bic: T::of_f64(dto.bic),
        n_params: dto.n_params,
        converged: dto.converged,
        iterations: dto.iterations,
    })
}
