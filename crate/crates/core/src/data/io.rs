use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{first_non_finite, LabeledSeries};
use crate::error::{Error, Result};

/// On-disk layouts understood by [`load_series`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesFormat {
    /// Comma-separated, one timestep per row. `header` marks a leading
    /// row of channel names.
    Csv { header: bool },
    /// Little-endian f32, timestep-major, with a `{ "L", "d" }` JSON sidecar.
    F32Bin,
}

impl SeriesFormat {
    pub fn from_path(path: &Path, header: bool) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(SeriesFormat::Csv { header }),
            Some("f32bin") | Some("bin") => Ok(SeriesFormat::F32Bin),
            _ => Err(Error::Config(format!(
                "cannot infer series format from {}",
                path.display()
            ))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BinHeader {
    #[serde(rename = "L")]
    l: usize,
    d: usize,
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

/// Reads a series and, if `<stem>.labels` exists next to it, its labels.
pub fn load_series(path: &Path, format: SeriesFormat) -> Result<LabeledSeries> {
    load_series_inner(path, format, true)
}

/// Like [`load_series`] but never touches the label sidecar.
pub fn load_series_unlabeled(path: &Path, format: SeriesFormat) -> Result<LabeledSeries> {
    load_series_inner(path, format, false)
}

fn load_series_inner(path: &Path, format: SeriesFormat, with_labels: bool) -> Result<LabeledSeries> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let (values, names) = match format {
        SeriesFormat::Csv { header } => read_csv(path, header)?,
        SeriesFormat::F32Bin => (read_f32bin(path)?, None),
    };
    let labels_path = sidecar(path, "labels");
    let labels = if with_labels && labels_path.exists() {
        Some(read_labels(&labels_path)?)
    } else {
        None
    };
    let series = LabeledSeries {
        values,
        labels,
        channel_names: names,
        source: path.display().to_string(),
    };
    series.validate()?;
    Ok(series)
}

fn read_csv(path: &Path, header: bool) -> Result<(Array2<f64>, Option<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, 0, e))?;
    let names = if header {
        let h = reader.headers().map_err(|e| csv_err(path, 0, e))?;
        Some(h.iter().map(str::to_owned).collect::<Vec<_>>())
    } else {
        None
    };
    let mut data = Vec::new();
    let mut d = None;
    let mut rows = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, row, e))?;
        if *d.get_or_insert(record.len()) != record.len() {
            return Err(Error::Parse {
                path: path.into(),
                row,
                msg: format!("expected {} columns, found {}", d.unwrap(), record.len()),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.into(),
                row,
                msg: format!("column {col}: cannot parse {cell:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col });
            }
            data.push(v);
        }
        rows += 1;
    }
    let d = d.unwrap_or(0);
    let values = Array2::from_shape_vec((rows, d), data)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((values, names))
}

fn csv_err(path: &Path, row: usize, e: csv::Error) -> Error {
    Error::Parse {
        path: path.into(),
        row,
        msg: e.to_string(),
    }
}

fn read_f32bin(path: &Path) -> Result<Array2<f64>> {
    let header_path = sidecar(path, "json");
    let header_text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: BinHeader = serde_json::from_str(&header_text).map_err(|e| Error::Parse {
        path: header_path.clone(),
        row: 0,
        msg: e.to_string(),
    })?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != header.l * header.d * 4 {
        return Err(Error::Parse {
            path: path.into(),
            row: 0,
            msg: format!(
                "expected {} bytes for {}x{} f32, found {}",
                header.l * header.d * 4,
                header.l,
                header.d,
                bytes.len()
            ),
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let values = Array2::from_shape_vec((header.l, header.d), data)
        .map_err(|e| Error::Shape(e.to_string()))?;
    if let Some((row, col)) = first_non_finite(&values) {
        return Err(Error::NonFinite { row, col });
    }
    Ok(values)
}

fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for (row, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        labels.push(match line {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Parse {
                    path: path.into(),
                    row,
                    msg: format!("label must be 0 or 1, found {other:?}"),
                })
            }
        });
    }
    Ok(labels)
}

/// Writes `series` in `format`, plus the label sidecar when labels exist.
pub fn write_series(path: &Path, series: &LabeledSeries, format: SeriesFormat) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    match format {
        SeriesFormat::Csv { header } => {
            let mut out = String::new();
            if header {
                let names: Vec<String> = match &series.channel_names {
                    Some(n) => n.clone(),
                    None => (0..series.channels()).map(|c| format!("c{c}")).collect(),
                };
                out.push_str(&names.join(","));
                out.push('\n');
            }
            for row in series.values.rows() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
            fs::write(path, out).map_err(|e| Error::io(path, e))?;
        }
        SeriesFormat::F32Bin => {
            let mut bytes = Vec::with_capacity(series.values.len() * 4);
            for v in series.values.iter() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
            let header = BinHeader {
                l: series.len(),
                d: series.channels(),
            };
            let header_path = sidecar(path, "json");
            fs::write(&header_path, serde_json::to_string(&header).expect("plain struct"))
                .map_err(|e| Error::io(&header_path, e))?;
        }
    }
    if let Some(labels) = &series.labels {
        write_labels(&sidecar(path, "labels"), labels)?;
    }
    Ok(())
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = String::with_capacity(labels.len() * 2);
    for y in labels {
        buf.push(if *y == 0 { '0' } else { '1' });
        buf.push('\n');
    }
    file.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_csv_loads_without_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.csv");
        fs::write(&p, "0,0\n0,0\n0,0\n").unwrap();
        let s = load_series(&p, SeriesFormat::Csv { header: false }).unwrap();
        assert_eq!(s.values, Array2::<f64>::zeros((3, 2)));
        assert!(s.labels.is_none());
    }

    #[test]
    fn nan_cell_names_its_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.csv");
        let mut text = String::new();
        for i in 0..8 {
            text.push_str(if i == 5 { "1.0,NaN\n" } else { "1.0,2.0\n" });
        }
        fs::write(&p, text).unwrap();
        let err = load_series(&p, SeriesFormat::Csv { header: false }).unwrap_err();
        match err {
            Error::NonFinite { row, col } => assert_eq!((row, col), (5, 1)),
            other => panic!("unexpected error {other}"),
        }
        assert!(load_series(&p, SeriesFormat::Csv { header: false })
            .unwrap_err()
            .to_string()
            .contains("row 5"));
    }

    #[test]
    fn header_row_becomes_channel_names() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        fs::write(&p, "a,b\n1,2\n3,4\n").unwrap();
        let s = load_series(&p, SeriesFormat::Csv { header: true }).unwrap();
        assert_eq!(s.channel_names.as_deref().unwrap(), &["a", "b"]);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_series(Path::new("/nonexistent/x.csv"), SeriesFormat::Csv { header: false })
            .unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn f32bin_round_trip_with_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.f32bin");
        let values = Array2::from_shape_fn((100, 25), |(i, j)| (i as f64) * 0.5 - j as f64);
        let labels: Vec<u8> = (0..100).map(|i| (i % 7 == 0) as u8).collect();
        let s = LabeledSeries::new(values.clone(), "x").unwrap().with_labels(labels.clone()).unwrap();
        write_series(&p, &s, SeriesFormat::F32Bin).unwrap();
        let back = load_series(&p, SeriesFormat::F32Bin).unwrap();
        assert_eq!(back.values.dim(), (100, 25));
        assert_eq!(back.values, values);
        assert_eq!(back.labels.as_deref(), Some(&labels[..]));
    }

    #[test]
    fn label_length_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "1\n2\n3\n").unwrap();
        fs::write(dir.path().join("m.labels"), "0\n1\n").unwrap();
        let err = load_series(&p, SeriesFormat::Csv { header: false }).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(load_series_unlabeled(&p, SeriesFormat::Csv { header: false }).is_ok());
    }
}
