//! Dataset loaders, feature scaling and train/test splits.
//!
//! Binary labels are held as -1 / +1 throughout; `label_names` only changes
//! how class indices are printed (index 0 is the label -1, index 1 is +1).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Labels;

/// Per-feature affine map `scaled = raw * scale + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub description: String,
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl Scaling {
    pub fn identity(n_x: usize) -> Self {
        Scaling {
            description: "none".into(),
            scale: vec![1.0; n_x],
            offset: vec![0.0; n_x],
        }
    }

    /// Maps scaled features back to raw values.
    pub fn invert(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut raw = x.clone();
        for (mut col, (s, o)) in raw.columns_mut().into_iter().zip(self.scale.iter().zip(&self.offset)) {
            col.mapv_inplace(|v| (v - o) / s);
        }
        raw
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: Array2<f64>,
    pub labels: Labels,
    pub scaling: Scaling,
    /// Display name of each class index.
    pub label_names: Vec<String>,
    pub source: Option<PathBuf>,
    /// SHA-256 of the source file, hex encoded.
    pub source_sha256: Option<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn n_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), idx),
            labels: self.labels.select(idx),
            ..self.clone()
        }
    }

    /// SHA-256 over the feature values and labels as little-endian bytes.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.x.iter() {
            hasher.update(v.to_le_bytes());
        }
        match &self.labels {
            Labels::Signed(y) => y.iter().for_each(|v| hasher.update(v.to_le_bytes())),
            Labels::Classes(c) => c.iter().for_each(|v| hasher.update((*v as u64).to_le_bytes())),
        }
        hex::encode(hasher.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.x.nrows() {
            return Err(Error::dimension("labels", self.x.nrows(), self.labels.len()));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("dataset {} has non-finite features", self.name)));
        }
        if let Labels::Signed(y) = &self.labels {
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("dataset {} has non-finite labels", self.name)));
            }
        }
        Ok(())
    }
}

fn read_source(path: &Path) -> Result<(String, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let sha = hex::encode(Sha256::digest(&bytes));
    let text = String::from_utf8(bytes).map_err(|e| Error::parse(path, e.to_string()))?;
    Ok((text, sha))
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::parse(path, format!("line {line}: cannot parse {field:?} as a number")))
}

/// Column-wise min-max map onto `[lo, hi]`. Constant columns go to the midpoint.
pub fn min_max_scale(x: &mut Array2<f64>, lo: f64, hi: f64) -> Scaling {
    let mut scale = Vec::with_capacity(x.ncols());
    let mut offset = Vec::with_capacity(x.ncols());
    for mut col in x.columns_mut() {
        let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (s, o) = if max > min {
            let s = (hi - lo) / (max - min);
            (s, lo - min * s)
        } else {
            (1.0, 0.5 * (lo + hi) - min)
        };
        col.mapv_inplace(|v| {
            if v == max && max > min {
                hi
            } else {
                v * s + o
            }
        });
        scale.push(s);
        offset.push(o);
    }
    Scaling {
        description: format!("min-max to [{lo}, {hi}] per feature"),
        scale,
        offset,
    }
}

/// UCI `wdbc.data`: id, diagnosis (M/B), 30 features. Malignant is +1, benign -1;
/// features are min-max scaled to [-1, 1].
pub fn load_wdbc(path: &Path) -> Result<Dataset> {
    let (text, sha) = read_source(path)?;
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 32 {
            return Err(Error::parse(path, format!("line {}: expected 32 columns, found {}", k + 1, fields.len())));
        }
        y.push(match fields[1].trim() {
            "M" => 1.0,
            "B" => -1.0,
            other => return Err(Error::parse(path, format!("line {}: unknown diagnosis {other:?}", k + 1))),
        });
        for f in &fields[2..] {
            rows.push(parse_f64(path, k + 1, f)?);
        }
    }
    let mut x = Array2::from_shape_vec((y.len(), 30), rows).expect("30 features per row");
    let scaling = min_max_scale(&mut x, -1.0, 1.0);
    let ds = Dataset {
        name: "wdbc".into(),
        x,
        labels: Labels::Signed(Array1::from(y)),
        scaling,
        label_names: vec!["B".into(), "M".into()],
        source: Some(path.to_path_buf()),
        source_sha256: Some(sha),
    };
    ds.validate()?;
    Ok(ds)
}

/// Semeion digits: 256 binary pixels then a one-hot block of 10, whitespace
/// separated. Pixels are mapped 0 -> -1, 1 -> +1.
pub fn load_semeion(path: &Path) -> Result<Dataset> {
    let (text, sha) = read_source(path)?;
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 266 {
            return Err(Error::parse(path, format!("line {}: expected 266 columns, found {}", k + 1, fields.len())));
        }
        for f in &fields[..256] {
            let v = parse_f64(path, k + 1, f)?;
            if v != 0.0 && v != 1.0 {
                return Err(Error::parse(path, format!("line {}: pixel value {v} is not 0 or 1", k + 1)));
            }
            rows.push(2.0 * v - 1.0);
        }
        let mut hot = Vec::new();
        for (c, f) in fields[256..].iter().enumerate() {
            match parse_f64(path, k + 1, f)? {
                v if v == 1.0 => hot.push(c),
                v if v == 0.0 => {}
                v => return Err(Error::parse(path, format!("line {}: label entry {v} is not 0 or 1", k + 1))),
            }
        }
        if hot.len() != 1 {
            return Err(Error::parse(path, format!("line {}: label block has {} ones, expected exactly one", k + 1, hot.len())));
        }
        classes.push(hot[0]);
    }
    let n = classes.len();
    let ds = Dataset {
        name: "semeion".into(),
        x: Array2::from_shape_vec((n, 256), rows).expect("256 pixels per row"),
        labels: Labels::Classes(classes),
        scaling: Scaling {
            description: "pixels 0/1 mapped to -1/+1".into(),
            scale: vec![2.0; 256],
            offset: vec![-1.0; 256],
        },
        label_names: (0..10).map(|d| d.to_string()).collect(),
        source: Some(path.to_path_buf()),
        source_sha256: Some(sha),
    };
    ds.validate()?;
    Ok(ds)
}

/// Comparison datasets in comma-separated form, features first and the label last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TabularSchema {
    /// 2 features, labels -1 / 1; features min-max scaled to [0, 8].
    Banana,
    /// 8 features, labels `tested_positive` / `tested_negative`; features min-max scaled to [0, 1].
    Diabetes,
    /// 20 features, labels 0 / 1; features multiplied by 8.
    Twonorm,
}

impl TabularSchema {
    pub fn n_features(self) -> usize {
        match self {
            TabularSchema::Banana => 2,
            TabularSchema::Diabetes => 8,
            TabularSchema::Twonorm => 20,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TabularSchema::Banana => "banana",
            TabularSchema::Diabetes => "diabetes",
            TabularSchema::Twonorm => "twonorm",
        }
    }

    fn label(self, path: &Path, line: usize, field: &str) -> Result<f64> {
        let field = field.trim();
        let bad = || Error::parse(path, format!("line {line}: label {field:?} does not fit the {} schema", self.name()));
        match self {
            TabularSchema::Diabetes => match field {
                "tested_positive" | "1" => Ok(1.0),
                "tested_negative" | "0" => Ok(-1.0),
                _ => Err(bad()),
            },
            TabularSchema::Banana | TabularSchema::Twonorm => {
                let v: f64 = field.parse().map_err(|_| bad())?;
                if v == 1.0 {
                    Ok(1.0)
                } else if v == 0.0 || v == -1.0 {
                    Ok(-1.0)
                } else {
                    Err(bad())
                }
            }
        }
    }
}

/// Loads one of the comparison datasets. A leading header line is skipped when
/// its first field is not numeric.
pub fn load_tabular(path: &Path, schema: TabularSchema) -> Result<Dataset> {
    let (text, sha) = read_source(path)?;
    let n_x = schema.n_features();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if k == 0 && fields[0].trim().parse::<f64>().is_err() {
            continue;
        }
        if fields.len() != n_x + 1 {
            return Err(Error::parse(
                path,
                format!("line {}: expected {} columns for {}, found {}", k + 1, n_x + 1, schema.name(), fields.len()),
            ));
        }
        for f in &fields[..n_x] {
            rows.push(parse_f64(path, k + 1, f)?);
        }
        y.push(schema.label(path, k + 1, fields[n_x])?);
    }
    let mut x = Array2::from_shape_vec((y.len(), n_x), rows).expect("fixed feature count");
    let scaling = match schema {
        TabularSchema::Banana => min_max_scale(&mut x, 0.0, 8.0),
        TabularSchema::Diabetes => min_max_scale(&mut x, 0.0, 1.0),
        TabularSchema::Twonorm => {
            x *= 8.0;
            Scaling {
                description: "multiplied by 8".into(),
                scale: vec![8.0; n_x],
                offset: vec![0.0; n_x],
            }
        }
    };
    let ds = Dataset {
        name: schema.name().into(),
        x,
        labels: Labels::Signed(Array1::from(y)),
        scaling,
        label_names: match schema {
            TabularSchema::Diabetes => vec!["tested_negative".into(), "tested_positive".into()],
            _ => vec!["0".into(), "1".into()],
        },
        source: Some(path.to_path_buf()),
        source_sha256: Some(sha),
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitMode {
    /// `floor(train_frac * n)` training points.
    Fraction { train_frac: f64 },
    /// The first `n_train` points (after the optional shuffle).
    HeadCount { n_train: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(flatten)]
    pub mode: SplitMode,
    #[serde(default)]
    pub shuffle: bool,
    #[serde(default)]
    pub seed: u64,
}

/// Index sets of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    let n_train = match spec.mode {
        SplitMode::Fraction { train_frac } => {
            if !(train_frac > 0.0 && train_frac < 1.0) {
                return Err(Error::Config(format!("train fraction must lie in (0, 1), got {train_frac}")));
            }
            (train_frac * n as f64).floor() as usize
        }
        SplitMode::HeadCount { n_train } => n_train,
    };
    if n_train == 0 || n_train >= n {
        return Err(Error::Config(format!("split of {n} points leaves {n_train} for training; both parts must be nonempty")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if spec.shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    }
    let test = order.split_off(n_train);
    Ok(SplitIndices { train: order, test })
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let idx = split_indices(ds.len(), spec)?;
    Ok((ds.select(&idx.train), ds.select(&idx.test)))
}

/// `n_points` inputs drawn uniformly on `[lo, hi)` with targets `sin(x)`.
pub fn gen_sinusoid(n_points: usize, x_range: (f64, f64), seed: u64) -> Result<Dataset> {
    let (lo, hi) = x_range;
    if n_points < 2 {
        return Err(Error::Config(format!("sinusoid needs at least 2 points, got {n_points}")));
    }
    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
        return Err(Error::Config(format!("sinusoid range [{lo}, {hi}] is empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Array1<f64> = (0..n_points).map(|_| rng.random_range(lo..hi)).collect();
    let y = x.mapv(f64::sin);
    Ok(Dataset {
        name: "sinusoid".into(),
        x: x.insert_axis(Axis(1)),
        labels: Labels::Signed(y),
        scaling: Scaling::identity(1),
        label_names: Vec::new(),
        source: None,
        source_sha256: None,
    })
}

/// Record of where a dataset came from and how it was prepared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub source: Option<PathBuf>,
    pub source_sha256: Option<String>,
    pub content_sha256: String,
    pub n_data: usize,
    pub n_x: usize,
    pub scaling: String,
    pub split: Option<SplitSpec>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
}

pub fn manifest(ds: &Dataset, split: Option<(&SplitSpec, usize, usize)>) -> DatasetManifest {
    DatasetManifest {
        name: ds.name.clone(),
        source: ds.source.clone(),
        source_sha256: ds.source_sha256.clone(),
        content_sha256: ds.content_hash(),
        n_data: ds.len(),
        n_x: ds.n_x(),
        scaling: ds.scaling.description.clone(),
        split: split.map(|s| *s.0),
        n_train: split.map(|s| s.1),
        n_test: split.map(|s| s.2),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn temp_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn wdbc_row(id: usize, diag: &str, base: f64) -> String {
        let feats: Vec<String> = (0..30).map(|j| format!("{}", base + j as f64)).collect();
        format!("{id},{diag},{}\n", feats.join(","))
    }

    #[test]
    fn wdbc_small_file() {
        let text = wdbc_row(1, "M", 3.0) + &wdbc_row(2, "B", -1.0) + &wdbc_row(3, "B", 0.5);
        let ds = load_wdbc(temp_file(&text).path()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.n_x(), 30);
        assert_eq!(ds.labels, Labels::Signed(array![1.0, -1.0, -1.0]));
        for col in ds.x.columns() {
            assert_eq!(col.iter().cloned().fold(f64::INFINITY, f64::min), -1.0);
            assert_eq!(col.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
        }
    }

    #[test]
    fn wdbc_rejects_bad_rows() {
        let bad_code = wdbc_row(1, "X", 0.0);
        assert!(matches!(load_wdbc(temp_file(&bad_code).path()), Err(Error::Parse { .. })));
        assert!(matches!(load_wdbc(temp_file("1,M,2.0,3.0\n").path()), Err(Error::Parse { .. })));
        assert!(matches!(load_wdbc(Path::new("/nonexistent/wdbc.data")), Err(Error::Io { .. })));
    }

    fn semeion_row(pixels_on: &[usize], label: &[usize]) -> String {
        let mut f: Vec<String> = (0..256).map(|k| if pixels_on.contains(&k) { "1.0000".into() } else { "0.0000".into() }).collect();
        f.extend((0..10).map(|c| if label.contains(&c) { "1".to_string() } else { "0".to_string() }));
        f.join(" ") + " \n"
    }

    #[test]
    fn semeion_small_file() {
        let text = semeion_row(&[0, 5], &[3]) + &semeion_row(&[255], &[0]);
        let ds = load_semeion(temp_file(&text).path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.x[[0, 0]], 1.0);
        assert_eq!(ds.x[[0, 1]], -1.0);
        assert_eq!(ds.labels, Labels::Classes(vec![3, 0]));
        let two_hot = semeion_row(&[], &[1, 2]);
        assert!(matches!(load_semeion(temp_file(&two_hot).path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn tabular_schemas() {
        let ds = load_tabular(temp_file("1.0,2.0,-1.0\n3.0,-2.0,1.0\n2.0,0.0,-1\n").path(), TabularSchema::Banana).unwrap();
        assert_eq!(ds.x, array![[0.0, 8.0], [8.0, 0.0], [4.0, 4.0]]);
        assert_eq!(ds.labels, Labels::Signed(array![-1.0, 1.0, -1.0]));
        let ds = load_tabular(temp_file("a,b,label\n1,2,0\n").path().to_owned().as_path(), TabularSchema::Banana);
        assert!(ds.is_ok());
        assert!(load_tabular(temp_file("1.0,2.0,3.0,1\n").path(), TabularSchema::Banana).is_err());
        assert!(load_tabular(temp_file("1.0,2.0,2\n").path(), TabularSchema::Banana).is_err());
        let row = |l: &str| (0..20).map(|k| format!("{k}.5")).collect::<Vec<_>>().join(",") + "," + l + "\n";
        let ds = load_tabular(temp_file(&(row("0") + &row("1"))).path(), TabularSchema::Twonorm).unwrap();
        assert_eq!(ds.x[[0, 1]], 12.0);
        assert_eq!(ds.labels, Labels::Signed(array![-1.0, 1.0]));
    }

    #[test]
    fn scaling_inverts() {
        let raw = array![[1.5, -3.0], [2.25, 10.0], [7.0, 4.5]];
        let mut x = raw.clone();
        let s = min_max_scale(&mut x, -1.0, 1.0);
        let back = s.invert(&x);
        for (a, b) in back.iter().zip(raw.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn split_counts() {
        let idx = split_indices(569, &SplitSpec { mode: SplitMode::Fraction { train_frac: 0.7 }, shuffle: true, seed: 1 }).unwrap();
        assert_eq!((idx.train.len(), idx.test.len()), (398, 171));
        let mut all: Vec<usize> = idx.train.iter().chain(&idx.test).cloned().collect();
        all.sort();
        assert_eq!(all, (0..569).collect::<Vec<_>>());

        let idx = split_indices(1593, &SplitSpec { mode: SplitMode::HeadCount { n_train: 1000 }, shuffle: false, seed: 0 }).unwrap();
        assert_eq!(idx.train, (0..1000).collect::<Vec<_>>());
        assert_eq!(idx.test.len(), 593);

        let idx = split_indices(10, &SplitSpec { mode: SplitMode::Fraction { train_frac: 0.5 }, shuffle: false, seed: 0 }).unwrap();
        assert_eq!((idx.train.len(), idx.test.len()), (5, 5));

        assert!(split_indices(1, &SplitSpec { mode: SplitMode::Fraction { train_frac: 0.5 }, shuffle: false, seed: 0 }).is_err());
        assert!(split_indices(10, &SplitSpec { mode: SplitMode::Fraction { train_frac: 1.0 }, shuffle: false, seed: 0 }).is_err());
        assert!(split_indices(10, &SplitSpec { mode: SplitMode::HeadCount { n_train: 10 }, shuffle: false, seed: 0 }).is_err());
    }

    #[test]
    fn sinusoid_generation() {
        let a = gen_sinusoid(100, (-std::f64::consts::PI, std::f64::consts::PI), 5).unwrap();
        let b = gen_sinusoid(100, (-std::f64::consts::PI, std::f64::consts::PI), 5).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = gen_sinusoid(100, (-std::f64::consts::PI, std::f64::consts::PI), 6).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
        let Labels::Signed(y) = &a.labels else { panic!() };
        for (x, t) in a.x.column(0).iter().zip(y.iter()) {
            assert_eq!(*t, x.sin());
        }
        assert!(gen_sinusoid(1, (0.0, 1.0), 0).is_err());
        assert!(gen_sinusoid(10, (1.0, 1.0), 0).is_err());
        assert_eq!(0.0f64.sin(), 0.0);
        assert_eq!(std::f64::consts::FRAC_PI_2.sin(), 1.0);
    }
}
