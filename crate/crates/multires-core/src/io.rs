//! CSV import/export for resolution layers.
//!
//! Format, one file per (layer, split): header `id,loc0,…,loc{L−1},label,f0,…,
//! f{D−1}`, then one row per instance. Labels are −1 (unlabeled), 0, or 1.
//! Floats are written with 17 significant digits so a save → load round trip
//! reproduces every value bit-exactly. All errors cite the 1-based line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{DataError, Instance, Label, MultiResDataset, ResolutionLayer};

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:1: bad header: expected `{expected}`, got `{got}`")]
    Header {
        path: PathBuf,
        expected: String,
        got: String,
    },
    #[error("{path}:{line}: expected {expected} fields, got {got}")]
    Arity {
        path: PathBuf,
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("{path}:{line}: field `{field}`: `{value}` is not a number")]
    NotANumber {
        path: PathBuf,
        line: usize,
        field: String,
        value: String,
    },
    #[error("{path}:{line}: label `{value}` is not one of -1, 0, 1")]
    BadLabel {
        path: PathBuf,
        line: usize,
        value: String,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

fn expected_header(location_dim: usize, feature_dim: usize) -> String {
    let mut h = String::from("id");
    for l in 0..location_dim {
        write!(h, ",loc{l}").unwrap();
    }
    h.push_str(",label");
    for f in 0..feature_dim {
        write!(h, ",f{f}").unwrap();
    }
    h
}

/// Serialize one float with 17 significant digits (round-trips bit-exactly).
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write instances to CSV. Dimensions are passed explicitly so empty layers
/// still get a well-formed header.
pub fn save_csv(
    path: &Path,
    instances: &[Instance],
    location_dim: usize,
    feature_dim: usize,
) -> Result<(), CsvError> {
    let mut out = expected_header(location_dim, feature_dim);
    out.push('\n');
    for inst in instances {
        write!(out, "{}", inst.id).unwrap();
        for l in &inst.location {
            write!(out, ",{}", format_f64(*l)).unwrap();
        }
        let label = match inst.label {
            Label::Unlabeled => -1,
            Label::Negative => 0,
            Label::Positive => 1,
        };
        write!(out, ",{label}").unwrap();
        for f in &inst.features {
            write!(out, ",{}", format_f64(*f)).unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| CsvError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Instances read from one CSV file, with the dimensions its header declared.
#[derive(Debug)]
pub struct CsvLayer {
    pub instances: Vec<Instance>,
    pub location_dim: usize,
    pub feature_dim: usize,
}

/// Parse a layer CSV. The header determines location and feature
/// dimensionality; every row is validated against it.
pub fn load_csv(path: &Path) -> Result<CsvLayer, CsvError> {
    let text = std::fs::read_to_string(path).map_err(|source| CsvError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let (location_dim, feature_dim) = parse_header(path, header)?;

    let parse_num = |line: usize, field: &str, value: &str| -> Result<f64, CsvError> {
        value.parse::<f64>().map_err(|_| CsvError::NotANumber {
            path: path.to_path_buf(),
            line,
            field: field.to_string(),
            value: value.to_string(),
        })
    };

    let mut instances = Vec::new();
    let expected = 2 + location_dim + feature_dim;
    for (i, row) in lines.enumerate() {
        let line = i + 2; // 1-based, after the header
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != expected {
            return Err(CsvError::Arity {
                path: path.to_path_buf(),
                line,
                expected,
                got: fields.len(),
            });
        }
        let id = fields[0].parse::<usize>().map_err(|_| CsvError::NotANumber {
            path: path.to_path_buf(),
            line,
            field: "id".to_string(),
            value: fields[0].to_string(),
        })?;
        let mut location = Vec::with_capacity(location_dim);
        for l in 0..location_dim {
            location.push(parse_num(line, &format!("loc{l}"), fields[1 + l])?);
        }
        let label = match fields[1 + location_dim] {
            "-1" => Label::Unlabeled,
            "0" => Label::Negative,
            "1" => Label::Positive,
            other => {
                return Err(CsvError::BadLabel {
                    path: path.to_path_buf(),
                    line,
                    value: other.to_string(),
                })
            }
        };
        let mut features = Vec::with_capacity(feature_dim);
        for f in 0..feature_dim {
            features.push(parse_num(
                line,
                &format!("f{f}"),
                fields[2 + location_dim + f],
            )?);
        }
        instances.push(Instance::new(id, location, features, label));
    }
    Ok(CsvLayer {
        instances,
        location_dim,
        feature_dim,
    })
}

fn parse_header(path: &Path, header: &str) -> Result<(usize, usize), CsvError> {
    let fields: Vec<&str> = header.split(',').collect();
    let bad = |hint: &str| CsvError::Header {
        path: path.to_path_buf(),
        expected: hint.to_string(),
        got: header.to_string(),
    };
    if fields.first() != Some(&"id") {
        return Err(bad("id,loc0,…,label,f0,…"));
    }
    let mut location_dim = 0;
    let mut idx = 1;
    while idx < fields.len() && fields[idx] == format!("loc{location_dim}") {
        location_dim += 1;
        idx += 1;
    }
    if fields.get(idx) != Some(&"label") {
        return Err(bad(&expected_header(location_dim, 0)));
    }
    idx += 1;
    let mut feature_dim = 0;
    while idx < fields.len() && fields[idx] == format!("f{feature_dim}") {
        feature_dim += 1;
        idx += 1;
    }
    if idx != fields.len() {
        return Err(bad(&expected_header(location_dim, feature_dim)));
    }
    Ok((location_dim, feature_dim))
}

// ── Dataset directory layout ────────────────────────────────────────────

/// File names inside a dataset directory: `fine_labeled.csv`,
/// `fine_unlabeled.csv`, `fine_test.csv`, and per coarse resolution k,
/// `coarse{k}_labeled.csv` and `coarse{k}_unlabeled.csv`.
pub fn layer_file_name(resolution_id: usize, split: &str) -> String {
    if resolution_id == 0 {
        format!("fine_{split}.csv")
    } else {
        format!("coarse{resolution_id}_{split}.csv")
    }
}

/// Write every layer and the test split of a dataset into `dir`.
pub fn save_dataset(dir: &Path, dataset: &MultiResDataset) -> Result<(), CsvError> {
    let loc = dataset.location_dim;
    let save_layer = |layer: &ResolutionLayer| -> Result<(), CsvError> {
        let k = layer.resolution_id;
        save_csv(
            &dir.join(layer_file_name(k, "labeled")),
            &layer.labeled,
            loc,
            layer.feature_dim,
        )?;
        save_csv(
            &dir.join(layer_file_name(k, "unlabeled")),
            &layer.unlabeled,
            loc,
            layer.feature_dim,
        )
    };
    save_layer(&dataset.fine)?;
    for layer in &dataset.coarse {
        save_layer(layer)?;
    }
    save_csv(
        &dir.join("fine_test.csv"),
        &dataset.fine_test,
        loc,
        dataset.fine.feature_dim,
    )
}

/// Load a dataset directory written by [`save_dataset`]. Coarse resolutions
/// are discovered by probing `coarse1_labeled.csv`, `coarse2_labeled.csv`, …
pub fn load_dataset(dir: &Path) -> Result<MultiResDataset, CsvError> {
    let load_layer = |resolution_id: usize| -> Result<ResolutionLayer, CsvError> {
        let labeled = load_csv(&dir.join(layer_file_name(resolution_id, "labeled")))?;
        let unlabeled = load_csv(&dir.join(layer_file_name(resolution_id, "unlabeled")))?;
        Ok(ResolutionLayer::new(
            resolution_id,
            labeled.feature_dim,
            labeled.instances,
            unlabeled.instances,
        )?)
    };
    let fine = load_layer(0)?;
    let mut coarse = Vec::new();
    let mut k = 1;
    while dir.join(layer_file_name(k, "labeled")).exists() {
        coarse.push(load_layer(k)?);
        k += 1;
    }
    let test = load_csv(&dir.join("fine_test.csv"))?;
    let location_dim = test.location_dim;
    Ok(MultiResDataset::new(
        fine,
        coarse,
        location_dim,
        test.instances,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn temp_file(name: &str) -> PathBuf {
        let dir = tempfile::tempdir().unwrap();
        // keep the dir alive by leaking it; tests are short-lived
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let instances: Vec<Instance> = (0..10)
            .map(|i| {
                Instance::new(
                    i,
                    vec![rng.gen_range(-1e3..1e3), rng.gen::<f64>() * 1e-7],
                    vec![rng.gen_range(-50.0..50.0); 3],
                    match i % 3 {
                        0 => Label::Negative,
                        1 => Label::Positive,
                        _ => Label::Unlabeled,
                    },
                )
            })
            .collect();
        let path = temp_file("layer.csv");
        save_csv(&path, &instances, 2, 3).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(loaded.location_dim, 2);
        assert_eq!(loaded.feature_dim, 3);
        assert_eq!(loaded.instances.len(), instances.len());
        for (a, b) in instances.iter().zip(&loaded.instances) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.label, b.label);
            for (x, y) in a.location.iter().zip(&b.location) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.features.iter().zip(&b.features) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn header_only_file_is_an_empty_layer() {
        let path = temp_file("empty.csv");
        save_csv(&path, &[], 1, 2).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert!(loaded.instances.is_empty());
        assert_eq!((loaded.location_dim, loaded.feature_dim), (1, 2));
    }

    #[test]
    fn bad_label_cites_its_line() {
        let path = temp_file("bad_label.csv");
        std::fs::write(
            &path,
            "id,loc0,label,f0\n\
             0,0.0,1,0.0\n\
             1,0.0,0,0.0\n\
             2,0.0,-1,0.0\n\
             3,0.0,2,0.0\n",
        )
        .unwrap();
        match load_csv(&path) {
            Err(CsvError::BadLabel { line, value, .. }) => {
                assert_eq!(line, 5);
                assert_eq!(value, "2");
            }
            other => panic!("expected BadLabel, got {other:?}"),
        }
    }

    #[test]
    fn arity_mismatch_cites_its_line() {
        let path = temp_file("arity.csv");
        std::fs::write(&path, "id,loc0,label,f0\n0,0.0,1\n").unwrap();
        match load_csv(&path) {
            Err(CsvError::Arity { line, expected, got, .. }) => {
                assert_eq!((line, expected, got), (2, 4, 3));
            }
            other => panic!("expected Arity, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_field_cites_line_and_field() {
        let path = temp_file("nan.csv");
        std::fs::write(&path, "id,loc0,label,f0\n0,0.0,1,abc\n").unwrap();
        match load_csv(&path) {
            Err(CsvError::NotANumber { line, field, value, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "f0");
                assert_eq!(value, "abc");
            }
            other => panic!("expected NotANumber, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header_is_rejected() {
        let path = temp_file("hdr.csv");
        std::fs::write(&path, "id,x0,label,f0\n").unwrap();
        assert!(matches!(load_csv(&path), Err(CsvError::Header { .. })));
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let err = load_csv(Path::new("/nonexistent/layer.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/layer.csv"));
    }
}
