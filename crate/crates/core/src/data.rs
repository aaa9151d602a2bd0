//! Datasets: synthetic samplers, MNIST IDX ingestion, scaling and CSV I/O.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::rff::FeatureMap;

/// Per-dimension affine map applied to the raw data: `scaled = (x - shift) * factor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineScale {
    pub shift: Vec<f64>,
    pub factor: Vec<f64>,
}

impl AffineScale {
    pub fn uniform(dims: usize, factor: f64) -> Self {
        Self {
            shift: vec![0.0; dims],
            factor: vec![factor; dims],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.shift.iter().zip(&self.factor))
            .map(|(v, (s, f))| (v - s) * f)
            .collect()
    }

    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.shift.iter().zip(&self.factor))
            .map(|(v, (s, f))| v / f + s)
            .collect()
    }

    /// `other` applied after `self`.
    fn then(&self, other: &AffineScale) -> AffineScale {
        // ((x - s1) f1 - s2) f2 = (x - (s1 + s2 / f1)) f1 f2
        let shift = self
            .shift
            .iter()
            .zip(&self.factor)
            .zip(&other.shift)
            .map(|((s1, f1), s2)| s1 + s2 / f1)
            .collect();
        let factor = self
            .factor
            .iter()
            .zip(&other.factor)
            .map(|(a, b)| a * b)
            .collect();
        AffineScale { shift, factor }
    }
}

/// `N x d` matrix of finite points, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    dims: usize,
    points: Vec<f64>,
    pub scale_applied: Option<AffineScale>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, dims: usize, points: Vec<f64>) -> Result<Self> {
        if dims == 0 || points.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if !points.len().is_multiple_of(dims) {
            return Err(Error::Parse(format!(
                "{} values do not form rows of length {dims}",
                points.len()
            )));
        }
        check_finite("dataset", &points)?;
        Ok(Self {
            name: name.into(),
            dims,
            points,
            scale_applied: None,
        })
    }

    pub fn from_rows(name: impl Into<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let dims = rows.first().map(Vec::len).ok_or(Error::Empty("dataset"))?;
        let mut points = Vec::with_capacity(rows.len() * dims);
        for r in &rows {
            check_len("dataset row", dims, r.len())?;
            points.extend_from_slice(r);
        }
        Self::new(name, dims, points)
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dims..(i + 1) * self.dims]
    }

    pub fn rows(&self) -> Vec<&[f64]> {
        self.points.chunks_exact(self.dims).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.points
    }

    /// Column `j` as a vector.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.points.iter().skip(j).step_by(self.dims).copied().collect()
    }

    /// Maps a point from the scaled training space back to raw data space.
    pub fn unscale(&self, y: &[f64]) -> Vec<f64> {
        match &self.scale_applied {
            Some(s) => s.invert(y),
            None => y.to_vec(),
        }
    }

    fn with_scale(&self, scale: &AffineScale) -> Dataset {
        let points = self.rows().into_iter().flat_map(|r| scale.apply(r)).collect();
        let composed = match &self.scale_applied {
            Some(prev) => prev.then(scale),
            None => scale.clone(),
        };
        Dataset {
            name: self.name.clone(),
            dims: self.dims,
            points,
            scale_applied: Some(composed),
        }
    }

    /// CSV with header `x0,...,x{d-1}` and 17 significant digits per value.
    pub fn to_csv(&self) -> String {
        rows_to_csv(self.dims, self.rows())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        Self::parse_csv(&name, &text)
    }

    pub fn parse_csv(name: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(Error::Empty("csv"))?;
        let dims = header.split(',').count();
        let mut points = Vec::new();
        for (k, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dims {
                return Err(Error::Parse(format!(
                    "{name}: row {} has {} fields, header has {dims}",
                    k + 1,
                    fields.len()
                )));
            }
            for f in fields {
                points.push(f.trim().parse::<f64>().map_err(|e| {
                    Error::Parse(format!("{name}: row {}: {e}: {f:?}", k + 1))
                })?);
            }
        }
        Self::new(name, dims, points)
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn rows_to_csv<R: AsRef<[f64]>>(dims: usize, rows: impl IntoIterator<Item = R>) -> String {
    let mut out = (0..dims)
        .map(|j| format!("x{j}"))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for r in rows {
        let line = r
            .as_ref()
            .iter()
            .map(|v| fmt_f64(*v))
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(out, "{line}");
    }
    out
}

/// Whether the per-component spread values are variances or standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spread {
    #[default]
    Variance,
    StdDev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal spread, interpreted according to [`MixtureSpec::spread`].
    pub spread: Vec<f64>,
}

/// Gaussian mixture with diagonal covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: Vec<MixtureComponent>,
    #[serde(default)]
    pub spread: Spread,
}

impl MixtureSpec {
    /// `0.45 N(-0.6, 0.03) + 0.25 N(0.7, 0.02) + 0.3 N(0, 0.01)`, second
    /// parameter read as a variance.
    pub fn bench_1d() -> Self {
        let c = |w: f64, m: f64, v: f64| MixtureComponent {
            weight: w,
            mean: vec![m],
            spread: vec![v],
        };
        Self {
            components: vec![c(0.45, -0.6, 0.03), c(0.25, 0.7, 0.02), c(0.3, 0.0, 0.01)],
            spread: Spread::Variance,
        }
    }

    /// Equal-weight isotropic mixture centered at `[-0.8, 0.2]`, `[0.8, 0.0]`
    /// and `[0.0, -0.5]`.
    pub fn bench_2d(variance: f64) -> Self {
        let c = |m: [f64; 2]| MixtureComponent {
            weight: 1.0 / 3.0,
            mean: m.to_vec(),
            spread: vec![variance; 2],
        };
        Self {
            components: vec![c([-0.8, 0.2]), c([0.8, 0.0]), c([0.0, -0.5])],
            spread: Spread::Variance,
        }
    }

    pub fn single(mean: Vec<f64>, variance: Vec<f64>) -> Self {
        Self {
            components: vec![MixtureComponent {
                weight: 1.0,
                mean,
                spread: variance,
            }],
            spread: Spread::Variance,
        }
    }

    pub fn dims(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        if self.components.is_empty() || dims == 0 {
            return Err(Error::InvalidParams("mixture needs a component of dimension >= 1".into()));
        }
        let mut total = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::InvalidParams(format!("component {k} weight must be positive")));
            }
            if c.mean.len() != dims || c.spread.len() != dims {
                return Err(Error::InvalidParams(format!("component {k} has wrong dimension")));
            }
            if c.mean.iter().any(|m| !m.is_finite())
                || c.spread.iter().any(|s| !(*s > 0.0) || !s.is_finite())
            {
                return Err(Error::InvalidParams(format!(
                    "component {k} needs finite means and positive spreads"
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParams(format!("weights sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Per-dimension standard deviations of component `k`.
    pub fn std_devs(&self, k: usize) -> Vec<f64> {
        let c = &self.components[k];
        match self.spread {
            Spread::Variance => c.spread.iter().map(|v| v.sqrt()).collect(),
            Spread::StdDev => c.spread.clone(),
        }
    }

    /// `[min_k (mean - w sd), max_k (mean + w sd)]` over components, for dimension `j`.
    pub fn envelope(&self, j: usize, width: f64) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (k, c) in self.components.iter().enumerate() {
            let sd = self.std_devs(k)[j];
            lo = lo.min(c.mean[j] - width * sd);
            hi = hi.max(c.mean[j] + width * sd);
        }
        (lo, hi)
    }
}

/// Samples `n` points; the returned labels are the chosen component indices.
pub fn sample_mixture_labeled<R: Rng>(
    spec: &MixtureSpec,
    n: usize,
    rng: &mut R,
) -> Result<(Dataset, Vec<usize>)> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Empty("mixture sample count"));
    }
    let weights: Vec<f64> = spec.components.iter().map(|c| c.weight).collect();
    let picker = WeightedIndex::new(&weights).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let sds: Vec<Vec<f64>> = (0..spec.components.len()).map(|k| spec.std_devs(k)).collect();
    let dims = spec.dims();
    let mut points = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = picker.sample(rng);
        for (m, sd) in spec.components[k].mean.iter().zip(&sds[k]) {
            let e: f64 = StandardNormal.sample(rng);
            points.push(m + sd * e);
        }
        labels.push(k);
    }
    Ok((Dataset::new("gaussian-mixture", dims, points)?, labels))
}

pub fn sample_mixture<R: Rng>(spec: &MixtureSpec, n: usize, rng: &mut R) -> Result<Dataset> {
    sample_mixture_labeled(spec, n, rng).map(|(ds, _)| ds)
}

/// Scale applied to the unit-circle S curve so it spans `[-1.5, 1.5]` vertically.
pub const S_SCALE: f64 = 0.75;
/// Angular length of each arm.
pub const S_ARM_SPAN: f64 = 1.5 * PI;

/// Noise-free point on the S curve. `upper` selects the arm and
/// `t in [0, 3 pi / 2]` the position along it.
///
/// Upper arm: `0.75 (cos t, 1 + sin t)`, circle centered at `(0, 0.75)`.
/// Lower arm: `0.75 (sin t, cos t - 1)`, circle centered at `(0, -0.75)`.
/// Both arms meet at the origin.
pub fn s_curve_point(upper: bool, t: f64) -> [f64; 2] {
    if upper {
        [S_SCALE * t.cos(), S_SCALE * (1.0 + t.sin())]
    } else {
        [S_SCALE * t.sin(), S_SCALE * (t.cos() - 1.0)]
    }
}

pub fn sample_s_shape<R: Rng>(n: usize, noise_std: f64, rng: &mut R) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Empty("s-shape sample count"));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::InvalidParams(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let mut points = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let upper = rng.random_bool(0.5);
        let t = rng.random_range(0.0..=S_ARM_SPAN);
        let p = s_curve_point(upper, t);
        for v in p {
            let e: f64 = StandardNormal.sample(rng);
            points.push(v + noise_std * e);
        }
    }
    let name = format!(
        "s-shape: upper 0.75*(cos t, 1 + sin t), lower 0.75*(sin t, cos t - 1), \
         t ~ U[0, 3pi/2], arm ~ Bernoulli(0.5), noise N(0, {noise_std}^2 I)"
    );
    Dataset::new(name, 2, points)
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            needed: at + 4,
            got: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Decoded IDX image file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    let count = read_be_u32(bytes, 4, path)? as usize;
    let rows = read_be_u32(bytes, 8, path)? as usize;
    let cols = read_be_u32(bytes, 12, path)? as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            got: bytes.len(),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..needed].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC, path)?;
    let count = read_be_u32(bytes, 4, path)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            needed,
            got: bytes.len(),
        });
    }
    Ok(bytes[8..needed].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IDX_IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub const MNIST_TRAIN_SIZE: usize = 60_000;

/// Loads the first `subset` images (in file order) as `rows * cols`-vectors
/// with pixels scaled to `[0, 1]`. The label file is checked for consistency.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, subset: usize) -> Result<Dataset> {
    if subset == 0 || subset > MNIST_TRAIN_SIZE {
        return Err(Error::Config(format!(
            "MNIST subset must be in 1..={MNIST_TRAIN_SIZE}, got {subset}"
        )));
    }
    let img_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let images = parse_idx_images(&img_bytes, images_path)?;
    let labels = parse_idx_labels(&lbl_bytes, labels_path)?;
    if labels.len() != images.count {
        return Err(Error::IdxShape(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    if subset > images.count {
        return Err(Error::IdxShape(format!(
            "requested {subset} images but the file holds {}",
            images.count
        )));
    }
    let dims = images.rows * images.cols;
    if dims == 0 {
        return Err(Error::IdxShape("zero-sized images".into()));
    }
    let points = images.pixels[..subset * dims]
        .iter()
        .map(|&p| f64::from(p) / 255.0)
        .collect();
    Dataset::new(format!("mnist[{subset}]"), dims, points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiameterMethod {
    /// Maximum pairwise distance.
    Exact,
    /// Norm of the per-dimension ranges; an upper bound.
    RangeBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiameterEstimate {
    pub value: f64,
    pub method: DiameterMethod,
}

/// Largest dataset for which the exact pairwise scan is used.
pub const EXACT_DIAMETER_LIMIT: usize = 5_000;

pub fn diameter_estimate(ds: &Dataset) -> DiameterEstimate {
    let n = ds.len();
    if n <= EXACT_DIAMETER_LIMIT {
        let mut best = 0.0f64;
        for i in 0..n {
            let a = ds.row(i);
            for j in i + 1..n {
                let d2: f64 = a
                    .iter()
                    .zip(ds.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                best = best.max(d2);
            }
        }
        DiameterEstimate {
            value: best.sqrt(),
            method: DiameterMethod::Exact,
        }
    } else {
        let value = (0..ds.dims())
            .map(|j| {
                let col = ds.column(j);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (hi - lo) * (hi - lo)
            })
            .sum::<f64>()
            .sqrt();
        DiameterEstimate {
            value,
            method: DiameterMethod::RangeBound,
        }
    }
}

/// Target fraction of `2 pi` after rescaling.
pub const BIJECTION_MARGIN: f64 = 0.95;

/// Shrinks the dataset uniformly so the contraction condition of the
/// bijectivity check holds with a 5% margin. Returns the dataset unchanged
/// (scale 1) when it already holds.
pub fn rescale_to_bijective(ds: &Dataset, fm: &FeatureMap) -> Result<Dataset> {
    check_len("dataset dimension", fm.dims_in(), ds.dims())?;
    let diameter = diameter_estimate(ds).value;
    let report = fm.check_bijection(diameter);
    if report.contraction_ok {
        return Ok(ds.clone());
    }
    let factor = BIJECTION_MARGIN * std::f64::consts::TAU / report.product_value;
    Ok(ds.with_scale(&AffineScale::uniform(ds.dims(), factor)))
}

/// Uniform factor that [`rescale_to_bijective`] would apply for a given product value.
pub fn bijective_factor(product_value: f64) -> f64 {
    if product_value < std::f64::consts::TAU {
        1.0
    } else {
        BIJECTION_MARGIN * std::f64::consts::TAU / product_value
    }
}
