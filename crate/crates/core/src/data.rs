//! Multi-view datasets: manifest loading, per-view normalization, on-disk
//! matrix formats, and a seeded synthetic generator.
//!
//! Views are stored features x samples (`d_v x n`).
//!
//! Matrix files come in two flavours, told apart by their first bytes:
//!
//! * text: a `rows cols` header line, then one line per row with values
//!   separated by whitespace or commas;
//! * binary: the 8-byte magic [`BINARY_MAGIC`], `rows` and `cols` as
//!   little-endian `u32`, then `rows * cols` little-endian `f64` in row-major
//!   order.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Mat;

pub const BINARY_MAGIC: &[u8; 8] = b"MVMATF64";
const BINARY_HEADER_LEN: usize = 16;

#[derive(Clone, Debug)]
pub struct MultiViewDataset {
    pub name: String,
    pub views: Vec<Mat>,
    pub truth: Option<Vec<usize>>,
    pub k: usize,
    /// Scheme applied at load time, if any.
    pub normalization: Option<Normalization>,
}

impl MultiViewDataset {
    pub fn new(
        name: impl Into<String>,
        views: Vec<Mat>,
        truth: Option<Vec<usize>>,
        k: usize,
    ) -> Result<Self> {
        let name = name.into();
        let Some(first) = views.first() else {
            return Err(Error::invalid(format!("dataset `{name}` has no views")));
        };
        let n = first.cols();
        for (v, x) in views.iter().enumerate() {
            if x.cols() != n {
                return Err(Error::invalid(format!(
                    "dataset `{name}`: view {v} has {} samples, view 0 has {n}",
                    x.cols()
                )));
            }
        }
        if k < 2 || k > n {
            return Err(Error::invalid(format!(
                "dataset `{name}`: need 2 <= k <= n, got k={k}, n={n}"
            )));
        }
        if let Some(t) = &truth {
            if t.len() != n {
                return Err(Error::invalid(format!(
                    "dataset `{name}`: {} truth labels for {n} samples",
                    t.len()
                )));
            }
            if let Some(bad) = t.iter().find(|&&l| l >= k) {
                return Err(Error::invalid(format!(
                    "dataset `{name}`: truth label {bad} >= k={k}"
                )));
            }
        }
        Ok(Self {
            name,
            views,
            truth,
            k,
            normalization: None,
        })
    }

    pub fn samples(&self) -> usize {
        self.views[0].cols()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(Mat::rows).collect()
    }

    pub fn normalized(mut self, scheme: Normalization) -> Self {
        self.views = self.views.iter().map(|x| normalize(x, scheme)).collect();
        self.normalization = Some(scheme);
        self
    }

    /// All views stacked vertically, `(sum d_v) x n`.
    pub fn concatenated(&self) -> Mat {
        let rows: usize = self.views.iter().map(Mat::rows).sum();
        let mut out = DMatrix::zeros(rows, self.samples());
        let mut offset = 0;
        for x in &self.views {
            out.rows_mut(offset, x.rows()).copy_from(x.as_dmatrix());
            offset += x.rows();
        }
        Mat::from_dmatrix(out).expect("finite inputs")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Normalization {
    /// Every sample (column) scaled to unit Euclidean norm.
    #[default]
    #[serde(rename = "l2-sample")]
    L2Sample,
    /// Every feature (row) mapped affinely onto [0, 1].
    #[serde(rename = "minmax-feature")]
    MinMaxFeature,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::L2Sample => "l2-sample",
            Normalization::MinMaxFeature => "minmax-feature",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2-sample" => Ok(Normalization::L2Sample),
            "minmax-feature" => Ok(Normalization::MinMaxFeature),
            other => Err(Error::invalid(format!(
                "unknown normalization `{other}` (expected l2-sample or minmax-feature)"
            ))),
        }
    }
}

/// Zero columns (l2-sample) and constant rows (minmax-feature) map to zeros.
pub fn normalize(x: &Mat, scheme: Normalization) -> Mat {
    let mut out = x.as_dmatrix().clone();
    match scheme {
        Normalization::L2Sample => {
            for mut col in out.column_iter_mut() {
                let norm = col.norm();
                if norm > 0.0 {
                    col /= norm;
                }
            }
        }
        Normalization::MinMaxFeature => {
            for mut row in out.row_iter_mut() {
                let (lo, hi) = (row.min(), row.max());
                if hi > lo {
                    row.apply(|v| *v = (*v - lo) / (hi - lo));
                } else {
                    row.fill(0.0);
                }
            }
        }
    }
    Mat::from_dmatrix(out).expect("normalization keeps entries finite")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    /// Expected number of features (rows).
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub k: usize,
    pub samples: usize,
    pub views: Vec<ViewEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub normalization: Normalization,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        write_bytes(path, text.as_bytes())
    }
}

/// Loads and normalizes a dataset using the manifest's own scheme.
pub fn load_dataset(manifest_path: &Path) -> Result<MultiViewDataset> {
    load_dataset_with(manifest_path, None)
}

/// Like [`load_dataset`], optionally overriding the normalization scheme.
pub fn load_dataset_with(
    manifest_path: &Path,
    scheme: Option<Normalization>,
) -> Result<MultiViewDataset> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let bad = |msg: String| Error::Format {
        path: manifest_path.to_path_buf(),
        msg,
    };

    if manifest.views.is_empty() {
        return Err(bad("manifest lists no views".into()));
    }
    let mut views = Vec::with_capacity(manifest.views.len());
    for (v, entry) in manifest.views.iter().enumerate() {
        let path = resolve(&entry.path);
        let x = read_matrix(&path)?;
        if x.rows() != entry.dim {
            return Err(bad(format!(
                "view {v} ({}): declared dimension {} but file has {} rows",
                path.display(),
                entry.dim,
                x.rows()
            )));
        }
        if x.cols() != manifest.samples {
            return Err(bad(format!(
                "view {v} ({}): sample-count mismatch, declared {} but file has {} columns",
                path.display(),
                manifest.samples,
                x.cols()
            )));
        }
        views.push(x);
    }
    let truth = match &manifest.truth {
        Some(p) => Some(read_labels(&resolve(p))?),
        None => None,
    };
    let dataset = MultiViewDataset::new(manifest.name.clone(), views, truth, manifest.k)
        .map_err(|e| bad(e.to_string()))?;
    Ok(dataset.normalized(scheme.unwrap_or(manifest.normalization)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixFormat {
    Text,
    Binary,
}

impl MatrixFormat {
    pub fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Text => "txt",
            MatrixFormat::Binary => "bin",
        }
    }
}

impl FromStr for MatrixFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "txt" => Ok(MatrixFormat::Text),
            "binary" | "bin" => Ok(MatrixFormat::Binary),
            other => Err(Error::invalid(format!("unknown matrix format `{other}`"))),
        }
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes through a sibling temporary file and a rename, so readers never
/// observe a partial file.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn read_matrix(path: &Path) -> Result<Mat> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parsed = if bytes.starts_with(BINARY_MAGIC) {
        decode_binary(&bytes)
    } else {
        std::str::from_utf8(&bytes)
            .map_err(|_| "neither a binary matrix nor UTF-8 text".to_string())
            .and_then(decode_text)
    };
    let (rows, cols, data) = parsed.map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })?;
    Mat::from_row_slice(rows, cols, &data).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn decode_binary(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f64>), String> {
    if bytes.len() < BINARY_HEADER_LEN {
        return Err("truncated binary header".into());
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[BINARY_HEADER_LEN..];
    if body.len() != rows * cols * 8 {
        return Err(format!(
            "binary body has {} bytes, expected {} for {rows}x{cols}",
            body.len(),
            rows * cols * 8
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, data))
}

fn decode_text(text: &str) -> std::result::Result<(usize, usize, Vec<f64>), String> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines.next().ok_or("empty matrix file")?;
    let dims: Vec<usize> = split_fields(header)
        .map(|f| {
            f.parse::<usize>()
                .map_err(|_| format!("bad header field `{f}`"))
        })
        .collect::<std::result::Result<_, _>>()?;
    let [rows, cols] = dims[..] else {
        return Err(format!("header must be `rows cols`, got `{header}`"));
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen_rows = 0;
    for (r, line) in lines.enumerate() {
        let before = data.len();
        for f in split_fields(line) {
            data.push(
                f.parse::<f64>()
                    .map_err(|_| format!("row {r}: bad value `{f}`"))?,
            );
        }
        if data.len() - before != cols {
            return Err(format!(
                "row {r} has {} values, expected {cols}",
                data.len() - before
            ));
        }
        seen_rows += 1;
    }
    if seen_rows != rows {
        return Err(format!("found {seen_rows} rows, header declares {rows}"));
    }
    Ok((rows, cols, data))
}

fn split_fields(line: &str) -> impl Iterator<Item = &str> {
    line.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|f| !f.is_empty())
}

pub fn encode_matrix(x: &Mat, format: MatrixFormat) -> Vec<u8> {
    match format {
        MatrixFormat::Binary => {
            let mut out = Vec::with_capacity(BINARY_HEADER_LEN + 8 * x.len());
            out.extend_from_slice(BINARY_MAGIC);
            out.extend_from_slice(&(x.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(x.cols() as u32).to_le_bytes());
            for v in x.to_row_major() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out
        }
        MatrixFormat::Text => {
            let mut out = format!("{} {}\n", x.rows(), x.cols());
            for row in x.row_iter() {
                let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                out.push_str(&fields.join(" "));
                out.push('\n');
            }
            out.into_bytes()
        }
    }
}

pub fn write_matrix(path: &Path, x: &Mat, format: MatrixFormat) -> Result<()> {
    write_bytes(path, &encode_matrix(x, format))
}

/// One non-negative integer per line; blank lines are ignored.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = read_to_string(path)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse::<usize>().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {}: bad label `{l}`", i + 1),
            })
        })
        .collect()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = String::with_capacity(labels.len() * 3);
    for l in labels {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

/// Writes views, truth and a manifest into `dir`; returns the manifest path.
pub fn save_dataset(
    dir: &Path,
    dataset: &MultiViewDataset,
    format: MatrixFormat,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut views = Vec::with_capacity(dataset.views.len());
    for (v, x) in dataset.views.iter().enumerate() {
        let file = PathBuf::from(format!("view{v}.{}", format.extension()));
        write_matrix(&dir.join(&file), x, format)?;
        views.push(ViewEntry {
            path: file,
            dim: x.rows(),
        });
    }
    let truth = match &dataset.truth {
        Some(t) => {
            let file = PathBuf::from("truth.txt");
            write_labels(&dir.join(&file), t)?;
            Some(file)
        }
        None => None,
    };
    let manifest = Manifest {
        name: dataset.name.clone(),
        k: dataset.k,
        samples: dataset.samples(),
        views,
        truth,
        normalization: dataset.normalization.unwrap_or_default(),
    };
    let path = dir.join("manifest.toml");
    manifest.write(&path)?;
    Ok(path)
}

/// Parameters of [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub k: usize,
    pub view_dims: Vec<usize>,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Dimension of a per-view nuisance subspace (0 disables it).
    pub nuisance_dim: usize,
    /// Scale of the nuisance component relative to the cluster signal.
    pub nuisance_scale: f64,
}

impl SyntheticSpec {
    pub fn new(n: usize, k: usize, view_dims: Vec<usize>, noise_sigma: f64, seed: u64) -> Self {
        Self {
            n,
            k,
            view_dims,
            noise_sigma,
            seed,
            nuisance_dim: 0,
            nuisance_scale: 1.0,
        }
    }

    pub fn with_nuisance(mut self, dim: usize, scale: f64) -> Self {
        self.nuisance_dim = dim;
        self.nuisance_scale = scale;
        self
    }

    /// The benchmark used throughout the test-suite: n=300, k=3, three views
    /// of 40/60/80 features, noise 0.1.
    pub fn benchmark(seed: u64) -> Self {
        Self::new(300, 3, vec![40, 60, 80], 0.1, seed)
    }

    fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::invalid(format!(
                "synthetic k must be >= 2, got {}",
                self.k
            )));
        }
        if self.n < 5 * self.k {
            return Err(Error::invalid(format!(
                "synthetic n must be >= 5k = {}, got {}",
                5 * self.k,
                self.n
            )));
        }
        if self.view_dims.is_empty() || self.view_dims.contains(&0) {
            return Err(Error::invalid(
                "synthetic view dimensions must be non-empty and positive",
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(self.nuisance_scale >= 0.0 && self.nuisance_scale.is_finite()) {
            return Err(Error::invalid("nuisance scale must be >= 0"));
        }
        Ok(())
    }
}

impl fmt::Display for SyntheticSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.view_dims.iter().map(usize::to_string).collect();
        write!(
            f,
            "n={},k={},dims={},noise={},seed={}",
            self.n,
            self.k,
            dims.join("/"),
            self.noise_sigma,
            self.seed
        )?;
        if self.nuisance_dim > 0 {
            write!(
                f,
                ",nuisance={},nuisance_scale={}",
                self.nuisance_dim, self.nuisance_scale
            )?;
        }
        Ok(())
    }
}

/// Parses `n=300,k=3,dims=40/60/80,noise=0.1,seed=7[,nuisance=4,nuisance_scale=1]`.
impl FromStr for SyntheticSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::new(0, 0, Vec::new(), 0.0, 0);
        let bad = |field: &str| Error::invalid(format!("bad synthetic field `{field}` in `{s}`"));
        for field in s.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            let (key, value) = field.split_once('=').ok_or_else(|| bad(field))?;
            match key.trim() {
                "n" => spec.n = value.parse().map_err(|_| bad(field))?,
                "k" => spec.k = value.parse().map_err(|_| bad(field))?,
                "dims" => {
                    spec.view_dims = value
                        .split('/')
                        .map(|d| d.parse().map_err(|_| bad(field)))
                        .collect::<Result<_>>()?
                }
                "noise" | "sigma" => spec.noise_sigma = value.parse().map_err(|_| bad(field))?,
                "seed" => spec.seed = value.parse().map_err(|_| bad(field))?,
                "nuisance" => spec.nuisance_dim = value.parse().map_err(|_| bad(field))?,
                "nuisance_scale" => spec.nuisance_scale = value.parse().map_err(|_| bad(field))?,
                _ => return Err(bad(field)),
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Balanced planted clusters observed through one random linear map per view.
///
/// Each view is `M_v Y + sigma E_v` where `Y` is the k x n cluster indicator,
/// `M_v` a standard-normal `d_v x k` map and `E_v` standard-normal noise. With
/// a nuisance subspace, `scale * N_v S_v` is added, where `S_v` holds
/// view-specific standard-normal latent factors unrelated to the clusters.
/// The result is not normalized.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MultiViewDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.k).collect();
    labels.shuffle(&mut rng);

    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    let mut views = Vec::with_capacity(spec.view_dims.len());
    for &d in &spec.view_dims {
        let map = DMatrix::from_fn(d, spec.k, |_, _| normal());
        let mut x = DMatrix::from_fn(d, spec.n, |r, c| map[(r, labels[c])]);
        if spec.noise_sigma > 0.0 {
            x += DMatrix::from_fn(d, spec.n, |_, _| normal()) * spec.noise_sigma;
        }
        if spec.nuisance_dim > 0 {
            let nuisance_map = DMatrix::from_fn(d, spec.nuisance_dim, |_, _| normal());
            let latent = DMatrix::from_fn(spec.nuisance_dim, spec.n, |_, _| normal());
            x += nuisance_map * latent * spec.nuisance_scale;
        }
        views.push(Mat::from_dmatrix(x)?);
    }
    MultiViewDataset::new(format!("synthetic({spec})"), views, Some(labels), spec.k)
}
