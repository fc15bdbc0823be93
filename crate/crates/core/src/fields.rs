//! Ground-truth fields, noisy datasets and CSV ingestion.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::eval_jet;
use crate::error::{Error, Result};
use crate::network::{Activation, Mlp, MlpSpec};

/// Observations `y_i = f(x_i) + e_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>, noise_sigma: f64, seed: u64) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::Domain("a dataset needs at least one observation".into()));
        }
        if inputs.nrows() != targets.nrows() {
            return Err(Error::shape(format!(
                "{} inputs but {} targets",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite value in dataset".into()));
        }
        Ok(Dataset {
            inputs,
            targets,
            noise_sigma,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select(Axis(0), rows),
            targets: self.targets.select(Axis(0), rows),
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    /// Shuffle deterministically and split off `fraction` of the rows (at least one
    /// when the dataset has two or more rows). Returns `(rest, held_out)`.
    pub fn split(&self, fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        shuffle(&mut idx, seed);
        let mut k = (fraction * n as f64).round() as usize;
        if n >= 2 {
            k = k.clamp(1, n - 1);
        } else {
            k = 0;
        }
        let (held, rest) = idx.split_at(k);
        (self.select(rest), self.select(held))
    }

    /// Keep the first `n` rows.
    pub fn head(&self, n: usize) -> Dataset {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&rows)
    }

    /// Write `x1,…,xD,y1,…,yK` with 17 significant digits per value.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(File::create(path)?);
        let header: Vec<String> = (1..=self.input_dim())
            .map(|i| format!("x{i}"))
            .chain((1..=self.output_dim()).map(|k| format!("y{k}")))
            .collect();
        writeln!(f, "{}", header.join(","))?;
        for (x, y) in self.inputs.rows().into_iter().zip(self.targets.rows()) {
            let row: Vec<String> = x.iter().chain(y.iter()).map(|v| format!("{v:.16e}")).collect();
            writeln!(f, "{}", row.join(","))?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Fisher–Yates with a seeded stream.
pub fn shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Parse a dataset whose header is `x1,…,xD,y1,…,yK`.
pub fn load_field_csv(path: &Path) -> Result<Dataset> {
    let data_err = |row: usize, msg: String| Error::Data {
        path: path.to_path_buf(),
        row,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let d = header.iter().take_while(|h| h.starts_with('x')).count();
    let k = header.len() - d;
    let well_formed = d >= 1
        && k >= 1
        && header[..d].iter().enumerate().all(|(i, h)| *h == format!("x{}", i + 1))
        && header[d..].iter().enumerate().all(|(i, h)| *h == format!("y{}", i + 1));
    if !well_formed {
        return Err(data_err(0, format!("header must be x1..xD,y1..yK, got {}", header.join(","))));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // data rows are numbered from 1; the header is row 0
        let row = i + 1;
        let record = record.map_err(|e| data_err(row, e.to_string()))?;
        if record.len() != d + k {
            return Err(data_err(row, format!("expected {} columns, found {}", d + k, record.len())));
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| data_err(row, format!("column {}: cannot parse {field:?}", c + 1)))?;
            if !v.is_finite() {
                return Err(data_err(row, format!("column {}: non-finite value {field:?}", c + 1)));
            }
            if c < d {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    let n = xs.len() / d;
    if n == 0 {
        return Err(data_err(1, "no data rows".into()));
    }
    Dataset::new(
        Array2::from_shape_vec((n, d), xs).unwrap(),
        Array2::from_shape_vec((n, k), ys).unwrap(),
        0.0,
        0,
    )
}

/// Axis-aligned box `[lower_i, upper_i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::shape("domain bounds of different length"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::Domain("domain lower bound above upper bound".into()));
        }
        Ok(Domain { lower, upper })
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Self {
        Domain {
            lower: vec![lo; dim],
            upper: vec![hi; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            for k in 0..d {
                row[k] = rng.gen_range(self.lower[k]..=self.upper[k]);
            }
        }
        out
    }
}

/// `m^D` points on a uniform grid including the box corners, first axis slowest.
pub fn prediction_grid(domain: &Domain, m: usize) -> Result<Array2<f64>> {
    if m < 2 {
        return Err(Error::Domain("grid needs at least 2 points per axis".into()));
    }
    let d = domain.dim();
    let total = m.pow(d as u32);
    let mut out = Array2::zeros((total, d));
    for (p, mut row) in out.rows_mut().into_iter().enumerate() {
        let mut rem = p;
        for k in (0..d).rev() {
            let i = rem % m;
            rem /= m;
            let (lo, hi) = (domain.lower[k], domain.upper[k]);
            row[k] = if i == m - 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (m - 1) as f64
            };
        }
    }
    Ok(out)
}

/// A known vector field used to synthesise observations.
pub trait TrueField: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Vec<f64>;

    fn eval_many(&self, xs: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((xs.nrows(), self.output_dim()));
        for (x, mut y) in xs.rows().into_iter().zip(out.rows_mut()) {
            let v = self.eval(&row_vec(x));
            y.assign(&ArrayView1::from(&v));
        }
        out
    }
}

fn row_vec(x: ArrayView1<f64>) -> Vec<f64> {
    x.iter().copied().collect()
}

/// `f1 = e^{-a x1 x2}(a x1 sin(x1 x2) − x1 cos(x1 x2))`,
/// `f2 = e^{-a x1 x2}(x2 cos(x1 x2) − a x2 sin(x1 x2))`.
pub fn divfree_field(x: &[f64], a: f64) -> [f64; 2] {
    let (x1, x2) = (x[0], x[1]);
    let p = x1 * x2;
    let e = (-a * p).exp();
    let (s, c) = p.sin_cos();
    [e * (a * x1 * s - x1 * c), e * (x2 * c - a * x2 * s)]
}

/// [`divfree_field`] plus `(1.1 x1, −0.3 x2)`; divergence 0.8 everywhere.
pub fn affine_field(x: &[f64], a: f64) -> [f64; 2] {
    let [f1, f2] = divfree_field(x, a);
    [f1 + 1.1 * x[0], f2 - 0.3 * x[1]]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DivFreeField {
    pub a: f64,
}

impl TrueField for DivFreeField {
    fn input_dim(&self) -> usize {
        2
    }
    fn output_dim(&self) -> usize {
        2
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        divfree_field(x, self.a).to_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineField {
    pub a: f64,
}

impl TrueField for AffineField {
    fn input_dim(&self) -> usize {
        2
    }
    fn output_dim(&self) -> usize {
        2
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        affine_field(x, self.a).to_vec()
    }
}

/// Cantilever beam geometry and material, SI units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrainParams {
    /// load (N)
    pub load: f64,
    /// elastic modulus (Pa)
    pub modulus: f64,
    pub poisson: f64,
    /// beam length (m)
    pub length: f64,
    /// beam height (m)
    pub height: f64,
    /// beam width (m)
    pub width: f64,
}

impl Default for StrainParams {
    fn default() -> Self {
        StrainParams {
            load: 2e3,
            modulus: 200e9,
            poisson: 0.28,
            length: 20e-3,
            height: 10e-3,
            width: 5e-3,
        }
    }
}

impl StrainParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.load, self.modulus, self.length, self.height, self.width];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Domain("beam parameters must be positive".into()));
        }
        if !(self.poisson > 0.0 && self.poisson < 0.5) {
            return Err(Error::Domain("Poisson ratio must lie in (0, 0.5)".into()));
        }
        Ok(())
    }

    /// Second moment of area `t h³ / 12`.
    pub fn second_moment(&self) -> f64 {
        self.width * self.height.powi(3) / 12.0
    }

    pub fn domain(&self) -> Domain {
        Domain {
            lower: vec![0.0, -self.height / 2.0],
            upper: vec![self.length, self.height / 2.0],
        }
    }
}

/// Saint-Venant cantilever strains `(ε_xx, ε_yy, ε_xy)` at `(x, y)`.
pub fn saint_venant_strain(x: f64, y: f64, p: &StrainParams) -> Result<[f64; 3]> {
    let half = p.height / 2.0;
    if !(0.0..=p.length).contains(&x) || !(-half..=half).contains(&y) {
        return Err(Error::Domain(format!("({x}, {y}) lies outside the beam")));
    }
    let k = p.load / (p.modulus * p.second_moment());
    let nu = p.poisson;
    Ok([
        k * (p.length - x) * y,
        -nu * k * (p.length - x) * y,
        -(1.0 + nu) * k / 2.0 * (half * half - y * y),
    ])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrainField {
    pub params: StrainParams,
}

impl TrueField for StrainField {
    fn input_dim(&self) -> usize {
        2
    }
    fn output_dim(&self) -> usize {
        3
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        // clamp rounding at the boundary
        let d = self.params.domain();
        let xc = x[0].clamp(d.lower[0], d.upper[0]);
        let yc = x[1].clamp(d.lower[1], d.upper[1]);
        saint_venant_strain(xc, yc, &self.params).expect("clamped point").to_vec()
    }
}

/// Gradient of a fixed random `tanh` potential: a smooth curl-free 3D field.
#[derive(Clone, Debug)]
pub struct CurlFreeField {
    pub potential: Mlp,
}

impl CurlFreeField {
    pub fn random(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let spec = MlpSpec::with_hidden(input_dim, &[hidden], 1, Activation::Tanh)
            .expect("valid potential spec");
        let mut potential = Mlp::init(spec, seed);
        // spread the hidden biases so the units saturate in different places
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let bias = potential.spec.layout()[0].bias.clone();
        for b in &mut potential.params.0[bias] {
            *b = rng.gen_range(-1.0..1.0);
        }
        CurlFreeField { potential }
    }
}

impl TrueField for CurlFreeField {
    fn input_dim(&self) -> usize {
        self.potential.spec.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.potential.spec.input_dim()
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        eval_jet(&self.potential, x, 1).expect("tanh potential")[0].grad.clone()
    }
}

/// `n` uniform points in `domain`, targets `field(x) + N(0, σ²)` per component.
pub fn sample_dataset(
    field: &dyn TrueField,
    n: usize,
    domain: &Domain,
    sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Domain("need at least one measurement".into()));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Domain("noise level must be non-negative".into()));
    }
    if domain.dim() != field.input_dim() {
        return Err(Error::shape("domain and field dimension differ"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = domain.sample(n, &mut rng);
    let mut targets = field.eval_many(&inputs);
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).unwrap();
        for v in targets.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    Dataset::new(inputs, targets, sigma, seed)
}

/// Root mean square error over all points and components.
pub fn rmse(pred: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    let n = pred.len() as f64;
    ((pred - truth).mapv(|v| v * v).sum() / n).sqrt()
}

/// Mean over rows of the summed absolute value across columns.
pub fn mean_abs_rows(residuals: &Array2<f64>) -> f64 {
    residuals.map_axis(Axis(1), |r| r.iter().map(|v| v.abs()).sum::<f64>()).mean().unwrap_or(0.0)
}

/// Per-column sample standard deviation.
pub fn column_std(m: &Array2<f64>) -> Vec<f64> {
    (0..m.ncols())
        .map(|c| {
            let col = m.slice(s![.., c]);
            col.std(1.0)
        })
        .collect()
}
