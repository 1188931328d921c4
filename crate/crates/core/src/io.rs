//! File formats: JSON operators, binary signal datasets, atomic writes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::SignalSet;
use crate::oblique::{AnalysisOperator, ObliquePoint};
use crate::tensor::DenseMatrix;

pub const OPERATOR_FORMAT: &str = "saol-operator-v1";
pub const DATASET_MAGIC: &[u8; 8] = b"SAOLSIG1";

/// Row-norm deviation up to which loaded rows are kept verbatim.
const KEEP_TOL: f64 = 1e-10;
/// Renormalized without comment.
const SILENT_TOL: f64 = 1e-8;
/// Renormalized with a warning; anything larger is rejected.
const WARN_TOL: f64 = 1e-6;

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> std::io::Result<()>,
{
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        write(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorMetadata {
    pub nu: f64,
    pub kappa: f64,
    pub mu: f64,
    pub seed: u64,
    pub iterations: usize,
    /// RFC 3339 timestamp.
    pub created: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FactorRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OperatorRecord {
    format: String,
    separable: bool,
    factors: Vec<FactorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<OperatorMetadata>,
}

pub fn operator_to_json(op: &AnalysisOperator, metadata: Option<&OperatorMetadata>) -> Result<String> {
    let record = OperatorRecord {
        format: OPERATOR_FORMAT.into(),
        separable: op.is_separable(),
        factors: op
            .factors()
            .iter()
            .map(|f| FactorRecord {
                rows: f.rows(),
                cols: f.cols(),
                data: f.matrix().data().to_vec(),
            })
            .collect(),
        metadata: metadata.cloned(),
    };
    let mut s = serde_json::to_string_pretty(&record).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn factor_from_record(path: &Path, index: usize, f: FactorRecord) -> Result<ObliquePoint> {
    let format_err = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if f.rows == 0 || f.cols == 0 || f.data.len() != f.rows * f.cols {
        return Err(format_err(format!(
            "factor {index}: {}x{} with {} values",
            f.rows,
            f.cols,
            f.data.len()
        )));
    }
    let m = DenseMatrix::new(f.rows, f.cols, f.data)?;
    let dev = (0..m.rows())
        .map(|r| (m.row(r).iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs())
        .fold(0.0, f64::max);
    if !dev.is_finite() || dev > WARN_TOL {
        return Err(format_err(format!(
            "factor {index}: row norms deviate from 1 by {dev:e}"
        )));
    }
    if dev <= KEEP_TOL {
        return ObliquePoint::new(m);
    }
    if dev > SILENT_TOL {
        log::warn!(
            "{}: factor {index} rows off unit norm by {dev:e}; renormalizing",
            path.display()
        );
    }
    ObliquePoint::normalized(m)
}

pub fn operator_from_json(text: &str, path: &Path) -> Result<(AnalysisOperator, Option<OperatorMetadata>)> {
    let record: OperatorRecord = serde_json::from_str(text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if record.format != OPERATOR_FORMAT {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: OPERATOR_FORMAT.into(),
        });
    }
    if record.separable != (record.factors.len() > 1) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!(
                "separable flag {} disagrees with {} factor(s)",
                record.separable,
                record.factors.len()
            ),
        });
    }
    let factors = record
        .factors
        .into_iter()
        .enumerate()
        .map(|(i, f)| factor_from_record(path, i, f))
        .collect::<Result<Vec<_>>>()?;
    Ok((AnalysisOperator::new(factors)?, record.metadata))
}

pub fn save_operator(path: &Path, op: &AnalysisOperator, metadata: Option<&OperatorMetadata>) -> Result<()> {
    let text = operator_to_json(op, metadata)?;
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

pub fn load_operator(path: &Path) -> Result<(AnalysisOperator, Option<OperatorMetadata>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    operator_from_json(&text, path)
}

pub fn encode_dataset(set: &SignalSet) -> Vec<u8> {
    let modes = set.mode_sizes();
    let mut out = Vec::with_capacity(20 + 4 * modes.len() + 8 * set.data().len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(modes.len() as u32).to_le_bytes());
    for &p in modes {
        out.extend_from_slice(&(p as u32).to_le_bytes());
    }
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for v in set.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<SignalSet> {
    let truncated = |expected: u64| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        actual: bytes.len() as u64,
    };
    let magic_len = DATASET_MAGIC.len().min(bytes.len());
    if bytes[..magic_len] != DATASET_MAGIC[..magic_len] {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
        });
    }
    let u32_at = |pos: usize| -> Result<u32> {
        bytes
            .get(pos..pos + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| truncated(pos as u64 + 4))
    };
    let order = u32_at(8)? as usize;
    let mut modes = Vec::with_capacity(order.min(64));
    for t in 0..order {
        modes.push(u32_at(12 + 4 * t)? as usize);
    }
    let count_pos = 12 + 4 * order;
    let count = bytes
        .get(count_pos..count_pos + 8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| truncated(count_pos as u64 + 8))?;
    let header = (count_pos + 8) as u64;
    let p: u64 = modes.iter().map(|&m| m as u64).product();
    let expected = count
        .checked_mul(p)
        .and_then(|v| v.checked_mul(8))
        .and_then(|v| v.checked_add(header))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            message: format!("header declares an impossible size ({count} samples of length {p})"),
        })?;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(truncated(expected));
    }
    if actual > expected {
        return Err(Error::TrailingBytes {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    let data = bytes[header as usize..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    SignalSet::new(modes, data).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn save_dataset(path: &Path, set: &SignalSet) -> Result<()> {
    let bytes = encode_dataset(set);
    write_atomic(path, |w| w.write_all(&bytes))
}

pub fn load_dataset(path: &Path) -> Result<SignalSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn meta() -> OperatorMetadata {
        OperatorMetadata {
            nu: 500.0,
            kappa: 6500.0,
            mu: 1e-4,
            seed: 7,
            iterations: 12,
            created: "2020-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn operator_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let op = AnalysisOperator::random(&[(4, 3), (5, 2)], &mut rng).unwrap();
        let text = operator_to_json(&op, Some(&meta())).unwrap();
        let (back, m) = operator_from_json(&text, Path::new("op.json")).unwrap();
        assert_eq!(m, Some(meta()));
        for (a, b) in op.factors().iter().zip(back.factors()) {
            let bits = |x: &ObliquePoint| x.matrix().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(operator_to_json(&back, Some(&meta())).unwrap(), text);
    }

    #[test]
    fn one_by_one_operator() {
        let text = r#"{"format":"saol-operator-v1","separable":false,"factors":[{"rows":1,"cols":1,"data":[-1.0]}]}"#;
        let (op, m) = operator_from_json(text, Path::new("x")).unwrap();
        assert!(m.is_none());
        assert_eq!(op.num_factors(), 1);
        assert_eq!(op.factors()[0].matrix().data(), &[-1.0]);
    }

    #[test]
    fn row_norm_tolerances() {
        let load = |v: f64| {
            let text = format!(
                r#"{{"format":"saol-operator-v1","separable":false,"factors":[{{"rows":1,"cols":2,"data":[{v},0.0]}}]}}"#
            );
            operator_from_json(&text, Path::new("x"))
        };
        assert_eq!(load(1.0 + 1e-9).unwrap().0.factors()[0].matrix().data(), &[1.0, 0.0]);
        assert_eq!(load(1.0 + 1e-7).unwrap().0.factors()[0].matrix().data(), &[1.0, 0.0]);
        assert!(matches!(load(1.0 + 1e-5), Err(Error::Format { .. })));
    }

    #[test]
    fn operator_format_errors() {
        let p = Path::new("x");
        assert!(matches!(
            operator_from_json(r#"{"format":"other","separable":false,"factors":[]}"#, p),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(operator_from_json("{", p), Err(Error::Format { .. })));
        assert!(operator_from_json(
            r#"{"format":"saol-operator-v1","separable":true,"factors":[{"rows":1,"cols":1,"data":[1.0]}]}"#,
            p
        )
        .is_err());
        assert!(operator_from_json(
            r#"{"format":"saol-operator-v1","separable":false,"factors":[{"rows":2,"cols":1,"data":[1.0]}]}"#,
            p
        )
        .is_err());
    }

    #[test]
    fn dataset_round_trip_and_layout() {
        let set = SignalSet::new(vec![2, 3], (0..12).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
        let bytes = encode_dataset(&set);
        assert_eq!(bytes.len(), 8 + 4 + 4 * 2 + 8 + 8 * 12);
        assert_eq!(&bytes[..8], b"SAOLSIG1");
        let back = decode_dataset(&bytes, Path::new("d")).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn dataset_errors_are_distinct() {
        let set = SignalSet::new(vec![3], vec![1.0; 6]).unwrap();
        let bytes = encode_dataset(&set);
        let p = Path::new("d.bin");
        match decode_dataset(&bytes[..bytes.len() - 3], p) {
            Err(Error::Truncated { expected, .. }) => assert_eq!(expected, bytes.len() as u64),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_dataset(&bytes[..10], p), Err(Error::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_dataset(&long, p), Err(Error::TrailingBytes { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad, p), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let set = SignalSet::new(vec![2], vec![0.5, -0.25]).unwrap();
        save_dataset(&path, &set).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), set);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(matches!(load_dataset(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
