use std::io::Read;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};

use super::TrainError;

/// How rows are divided chronologically into train/val/test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    /// Train and test sizes are `floor(fraction * rows)`; validation takes
    /// the rows in between.
    Fractions { train: f64, test: f64 },
    /// Exact row counts; rows beyond their sum are ignored.
    Counts { train: usize, val: usize, test: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions {
            train: 0.7,
            test: 0.2,
        }
    }
}

impl std::str::FromStr for SplitSpec {
    type Err = String;

    /// `0.7,0.1,0.2` (fractions) or `8545,2881,2881` (counts).
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!("expected three comma-separated values, got {s:?}"));
        }
        if let Ok(c) = parts.iter().map(|p| p.parse::<usize>()).collect::<Result<Vec<_>, _>>() {
            return Ok(SplitSpec::Counts {
                train: c[0],
                val: c[1],
                test: c[2],
            });
        }
        let f = parts
            .iter()
            .map(|p| p.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| format!("cannot parse split {s:?}"))?;
        if f.iter().any(|&v| !(0.0..=1.0).contains(&v)) || f.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(format!("split fractions must be in [0, 1] and sum to at most 1: {s:?}"));
        }
        Ok(SplitSpec::Fractions {
            train: f[0],
            test: f[2],
        })
    }
}

impl SplitSpec {
    /// `(train, val, test)` row counts for a file of `rows` rows.
    pub fn sizes(&self, rows: usize) -> Result<(usize, usize, usize), TrainError> {
        match *self {
            SplitSpec::Fractions { train, test } => {
                let tr = (train * rows as f64).floor() as usize;
                let te = (test * rows as f64).floor() as usize;
                Ok((tr, rows.saturating_sub(tr + te), te))
            }
            SplitSpec::Counts { train, val, test } => {
                if train + val + test > rows {
                    return Err(TrainError::InvalidConfig(format!(
                        "split {train}/{val}/{test} needs {} rows, file has {rows}",
                        train + val + test
                    )));
                }
                Ok((train, val, test))
            }
        }
    }
}

/// Per-variate standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Population statistics; zero deviations are replaced by one.
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean: Vec<f64> = x.axis_iter(Axis(1)).map(|c| c.sum() / n).collect();
        let std = x
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(c, m)| {
                let s = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for (j, mut c) in out.axis_iter_mut(Axis(1)).enumerate() {
            c.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        out
    }
}

/// A benchmark table split chronologically.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkData {
    /// Variate names (the header without its timestamp column).
    pub columns: Vec<String>,
    pub train: Array2<f64>,
    pub val: Array2<f64>,
    pub test: Array2<f64>,
    /// Set when the splits were standardized with training statistics.
    pub scaler: Option<Scaler>,
}

impl BenchmarkData {
    pub fn variates(&self) -> usize {
        self.columns.len()
    }
}

/// Parses a CSV with a header row, a leading timestamp column and numeric
/// variate columns. Reported rows and columns are 1-based positions in the
/// file, the header being row 1.
pub fn parse_benchmark_csv<R: Read>(
    reader: R,
    split: SplitSpec,
    standardize: bool,
) -> Result<BenchmarkData, TrainError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let parse_err = |e: csv::Error| {
        let (row, message) = match e.position() {
            Some(p) => (p.line() as usize, e.to_string()),
            None => (0, e.to_string()),
        };
        TrainError::ParseError {
            row,
            column: 0,
            message,
        }
    };
    let header = rdr.headers().map_err(parse_err)?.clone();
    if header.len() < 2 {
        return Err(TrainError::ParseError {
            row: 1,
            column: header.len(),
            message: "need a timestamp column and at least one variate".into(),
        });
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let n = columns.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(parse_err)?;
        let row = i + 2;
        if rec.len() != n + 1 {
            return Err(TrainError::ParseError {
                row,
                column: rec.len(),
                message: format!("expected {} fields, found {}", n + 1, rec.len()),
            });
        }
        for (j, cell) in rec.iter().enumerate().skip(1) {
            let v: f64 = cell.parse().map_err(|_| TrainError::NonNumericCell {
                row,
                column: j + 1,
                value: cell.to_string(),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    let table = Array2::from_shape_vec((rows, n), values).expect("row lengths checked");
    let (tr, va, te) = split.sizes(rows)?;
    let mut train = table.slice(s![..tr, ..]).to_owned();
    let mut val = table.slice(s![tr..tr + va, ..]).to_owned();
    let mut test = table.slice(s![tr + va..tr + va + te, ..]).to_owned();
    let scaler = standardize.then(|| Scaler::fit(train.view()));
    if let Some(sc) = &scaler {
        train = sc.transform(train.view());
        val = sc.transform(val.view());
        test = sc.transform(test.view());
    }
    Ok(BenchmarkData {
        columns,
        train,
        val,
        test,
        scaler,
    })
}

pub fn load_benchmark_csv(
    path: impl AsRef<Path>,
    split: SplitSpec,
    standardize: bool,
) -> Result<BenchmarkData, TrainError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_benchmark_csv(std::io::BufReader::new(file), split, standardize)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: usize, cols: usize) -> String {
        let mut s = String::from("date");
        for j in 0..cols {
            s.push_str(&format!(",v{j}"));
        }
        s.push('\n');
        for i in 0..rows {
            s.push_str(&format!("2016-07-01 {i:05}"));
            for j in 0..cols {
                s.push_str(&format!(",{}", i * 10 + j));
            }
            s.push('\n');
        }
        s
    }

    #[test]
    fn explicit_counts() {
        let text = table(14_307, 7);
        let split = "8545,2881,2881".parse().unwrap();
        let d = parse_benchmark_csv(text.as_bytes(), split, false).unwrap();
        assert_eq!(d.variates(), 7);
        assert_eq!((d.train.nrows(), d.val.nrows(), d.test.nrows()), (8545, 2881, 2881));
        // chronological: last train row precedes the first val row
        assert!(d.train[[8544, 0]] < d.val[[0, 0]] && d.val[[2880, 0]] < d.test[[0, 0]]);
    }

    #[test]
    fn fractions_and_train_only_scaling() {
        let text = table(100, 2);
        let d = parse_benchmark_csv(text.as_bytes(), SplitSpec::default(), true).unwrap();
        assert_eq!((d.train.nrows(), d.val.nrows(), d.test.nrows()), (70, 10, 20));
        let sc = d.scaler.unwrap();
        // mean of 0, 10, ..., 690
        assert_eq!(sc.mean[0], 345.0);
        let m: f64 = d.train.column(0).sum() / 70.0;
        assert!(m.abs() < 1e-12);
        // the test split is shifted by training statistics, so it is not centred
        assert!(d.test.column(0).sum() / 20.0 > 1.0);
    }

    #[test]
    fn non_numeric_cell_is_located() {
        let text = "date,a,b\nt0,1,2\nt1,3,oops\n";
        match parse_benchmark_csv(text.as_bytes(), SplitSpec::default(), false) {
            Err(TrainError::NonNumericCell { row, column, value }) => {
                assert_eq!((row, column, value.as_str()), (3, 3, "oops"));
            }
            other => panic!("{other:?}"),
        }
        let ragged = "date,a,b\nt0,1\n";
        assert!(matches!(
            parse_benchmark_csv(ragged.as_bytes(), SplitSpec::default(), false),
            Err(TrainError::ParseError { row: 2, .. })
        ));
    }

    #[test]
    fn split_parsing() {
        assert!(matches!("0.6,0.2,0.2".parse::<SplitSpec>(), Ok(SplitSpec::Fractions { .. })));
        assert!("0.9,0.2,0.2".parse::<SplitSpec>().is_err());
        assert!("1,2".parse::<SplitSpec>().is_err());
        assert!(SplitSpec::Counts { train: 5, val: 5, test: 5 }.sizes(10).is_err());
    }
}
