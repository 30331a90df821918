//! Synthetic cross-latent-domain tasks and their CSV form.
//!
//! Classes are grouped into class sets; each class set is observed in exactly
//! one domain during training and in other domains at test time, so every
//! test `(class, domain)` pair is unseen.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GcldrError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Test,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Test => "test",
        })
    }
}

/// Entry of the class-set × domain table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Train,
    Test,
    Absent,
}

/// Which `(class set, domain)` combinations exist and in which role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// `cells[s][r]` for class set `s` and domain `r`.
    pub cells: Vec<Vec<Cell>>,
    /// Class ids of each class set.
    pub class_sets: Vec<Vec<usize>>,
}

/// Splits `0..classes` into `sets` contiguous groups of near-equal size.
fn even_sets(classes: usize, sets: usize) -> Vec<Vec<usize>> {
    (0..sets)
        .map(|s| (s * classes / sets..(s + 1) * classes / sets).collect())
        .collect()
}

impl SplitSpec {
    pub fn new(cells: Vec<Vec<Cell>>, class_sets: Vec<Vec<usize>>) -> Result<Self> {
        let s = SplitSpec { cells, class_sets };
        s.validate()?;
        Ok(s)
    }

    /// `n` class sets and `n` domains, training on the diagonal and testing everywhere else.
    pub fn diagonal(classes: usize, n: usize) -> Result<Self> {
        if n < 2 || classes < n {
            return Err(GcldrError::config(format!("cannot split {classes} classes into {n} sets")));
        }
        let cells = (0..n)
            .map(|s| (0..n).map(|r| if r == s { Cell::Train } else { Cell::Test }).collect())
            .collect();
        SplitSpec::new(cells, even_sets(classes, n))
    }

    /// Three class sets by three domains with diagonal training cells.
    pub fn three_domain(classes: usize) -> Result<Self> {
        SplitSpec::diagonal(classes, 3)
    }

    /// 29 subjects in four groups, two OS domains (0 = iOS, 1 = Android).
    pub fn two_platform() -> Self {
        use Cell::*;
        SplitSpec {
            cells: vec![vec![Train, Test], vec![Test, Train], vec![Absent, Train], vec![Train, Absent]],
            class_sets: vec![(0..6).collect(), (6..12).collect(), (12..15).collect(), (15..29).collect()],
        }
    }

    pub fn domains(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }

    pub fn classes(&self) -> usize {
        self.class_sets.iter().map(Vec::len).sum()
    }

    /// Class set containing `class`.
    pub fn set_of(&self, class: usize) -> Option<usize> {
        self.class_sets.iter().position(|s| s.contains(&class))
    }

    pub fn cell(&self, class: usize, domain: usize) -> Option<Cell> {
        self.set_of(class).and_then(|s| self.cells[s].get(domain).copied())
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != self.class_sets.len() || self.cells.is_empty() {
            return Err(GcldrError::config("split table needs one row per class set"));
        }
        let k = self.domains();
        if k < 2 {
            return Err(GcldrError::config("split table needs at least two domains"));
        }
        let mut seen: Vec<usize> = self.class_sets.iter().flatten().copied().collect();
        seen.sort_unstable();
        if seen.iter().enumerate().any(|(i, &c)| i != c) {
            return Err(GcldrError::config("class sets must partition 0..c"));
        }
        for (s, row) in self.cells.iter().enumerate() {
            if row.len() != k {
                return Err(GcldrError::config(format!("class set {s} has {} cells, expected {k}", row.len())));
            }
            if self.class_sets[s].is_empty() {
                return Err(GcldrError::config(format!("class set {s} is empty")));
            }
            let trains = row.iter().filter(|&&c| c == Cell::Train).count();
            if trains != 1 {
                return Err(GcldrError::config(format!("class set {s} has {trains} training domains, expected 1")));
            }
        }
        if !self.cells.iter().flatten().any(|&c| c == Cell::Test) {
            return Err(GcldrError::config("split table has no test cells"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceKind {
    #[default]
    AdditiveOffset,
    /// Random rotation followed by an offset.
    Affine,
}

/// How domains distort the class signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceSpec {
    pub kind: NuisanceKind,
    /// Offset norm as a multiple of the mean distance between class prototypes.
    pub magnitude: f64,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        NuisanceSpec { kind: NuisanceKind::AdditiveOffset, magnitude: 2.0 }
    }
}

/// Everything `generate` needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    pub per_combo: usize,
    pub noise: f64,
    pub seed: u64,
    pub split: SplitSpec,
    pub nuisance: NuisanceSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 6,
            dim: 20,
            per_combo: 200,
            noise: 0.3,
            seed: 0,
            split: SplitSpec::diagonal(6, 2).expect("valid default split"),
            nuisance: NuisanceSpec::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        if self.split.classes() != self.classes {
            return Err(GcldrError::config(format!(
                "split covers {} classes, config says {}",
                self.split.classes(),
                self.classes
            )));
        }
        if self.classes < 2 || self.dim < 2 || self.per_combo == 0 {
            return Err(GcldrError::config("need ≥ 2 classes, ≥ 2 dimensions and ≥ 1 row per combination"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.nuisance.magnitude >= 0.0 && self.nuisance.magnitude.is_finite()) {
            return Err(GcldrError::config("noise and nuisance magnitude must be finite and ≥ 0"));
        }
        Ok(())
    }
}

/// Features and labels of one role.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub domain: Option<Vec<usize>>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Samples {
        Samples {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            domain: self.domain.as_ref().map(|d| idx.iter().map(|&i| d[i]).collect()),
        }
    }
}

/// Rows with labels, roles and (for diagnostics only) the generating domain.
#[derive(Clone, Debug, PartialEq)]
pub struct GcldrDataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub true_domain: Option<Vec<usize>>,
    pub role: Vec<Role>,
}

impl GcldrDataset {
    pub fn new(x: Tensor, y: Vec<usize>, true_domain: Option<Vec<usize>>, role: Vec<Role>) -> Result<Self> {
        if !x.is_matrix() || x.rows() != y.len() || role.len() != y.len() {
            return Err(GcldrError::dim("x, y and role must have one entry per row"));
        }
        if let Some(d) = &true_domain {
            if d.len() != y.len() {
                return Err(GcldrError::dim("true_domain must have one entry per row"));
            }
        }
        Ok(GcldrDataset { x, y, true_domain, role })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn count(&self, role: Role) -> usize {
        self.role.iter().filter(|&&r| r == role).count()
    }

    pub fn samples(&self, role: Role) -> Samples {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.role[i] == role).collect();
        Samples {
            x: self.x.select_rows(&idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            domain: self.true_domain.as_ref().map(|d| idx.iter().map(|&i| d[i]).collect()),
        }
    }

    /// Checks roles against `spec` using the recorded domains.
    pub fn check_split(&self, spec: &SplitSpec) -> Result<()> {
        let Some(dom) = &self.true_domain else {
            return Err(GcldrError::config("dataset carries no domain column"));
        };
        for i in 0..self.len() {
            let want = match self.role[i] {
                Role::Train => Cell::Train,
                Role::Test => Cell::Test,
            };
            if spec.cell(self.y[i], dom[i]) != Some(want) {
                return Err(GcldrError::Contract(format!(
                    "row {i}: class {} in domain {} should not be a {} row",
                    self.y[i], dom[i], self.role[i]
                )));
            }
        }
        Ok(())
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / n).collect()
}

/// Random orthogonal matrix by Gram–Schmidt on Gaussian columns.
fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            v.iter_mut().zip(b).for_each(|(a, c)| *a -= p * c);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    basis
}

/// Draws a dataset. A pure function of `cfg`.
pub fn generate(cfg: &DataConfig) -> Result<GcldrDataset> {
    cfg.validate()?;
    let (c, d, k) = (cfg.classes, cfg.dim, cfg.split.domains());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos: Vec<Vec<f64>> = (0..c).map(|_| unit_gaussian(&mut rng, d)).collect();

    let mut dist = 0.0;
    for a in 0..c {
        for b in a + 1..c {
            dist += protos[a].iter().zip(&protos[b]).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        }
    }
    dist /= (c * (c - 1) / 2) as f64;
    let scale = cfg.nuisance.magnitude * dist;
    let offsets: Vec<Vec<f64>> = (0..k)
        .map(|_| unit_gaussian(&mut rng, d).into_iter().map(|v| v * scale).collect())
        .collect();
    let rotations: Vec<Vec<Vec<f64>>> = match cfg.nuisance.kind {
        NuisanceKind::AdditiveOffset => Vec::new(),
        NuisanceKind::Affine => (0..k).map(|_| random_rotation(&mut rng, d)).collect(),
    };

    let mut x = Vec::new();
    let (mut y, mut dom, mut role) = (Vec::new(), Vec::new(), Vec::new());
    for (s, set) in cfg.split.class_sets.iter().enumerate() {
        for r in 0..k {
            let which = match cfg.split.cells[s][r] {
                Cell::Train => Role::Train,
                Cell::Test => Role::Test,
                Cell::Absent => continue,
            };
            for &j in set {
                for _ in 0..cfg.per_combo {
                    let clean: Vec<f64> =
                        protos[j].iter().map(|&m| m + cfg.noise * rng.sample::<f64, _>(StandardNormal)).collect();
                    let moved: Vec<f64> = match rotations.get(r) {
                        Some(rot) => rot.iter().map(|row| row.iter().zip(&clean).map(|(a, b)| a * b).sum()).collect(),
                        None => clean,
                    };
                    x.extend(moved.iter().zip(&offsets[r]).map(|(v, o)| v + o));
                    y.push(j);
                    dom.push(r);
                    role.push(which);
                }
            }
        }
    }
    let n = y.len();
    GcldrDataset::new(Tensor::matrix(n, d, x)?, y, Some(dom), role)
}

/// Randomly moves `fraction` of `test` into a validation part.
pub fn split_validation(test: &Samples, fraction: f64, seed: u64) -> Result<(Samples, Samples)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(GcldrError::config(format!("validation fraction {fraction} outside [0,1)")));
    }
    let n = test.len();
    let n_val = (fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val: Vec<usize> = idx[..n_val].to_vec();
    let mut rest: Vec<usize> = idx[n_val..].to_vec();
    val.sort_unstable();
    rest.sort_unstable();
    Ok((test.subset(&val), test.subset(&rest)))
}

pub fn write_csv<W: Write>(ds: &GcldrDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["role".to_string(), "y".into()];
    if ds.true_domain.is_some() {
        header.push("true_domain".into());
    }
    header.extend((0..ds.dim()).map(|j| format!("x_{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..ds.len() {
        let mut rec = vec![ds.role[i].to_string(), ds.y[i].to_string()];
        if let Some(d) = &ds.true_domain {
            rec.push(d[i].to_string());
        }
        rec.extend(ds.x.row(i).iter().map(|v| format!("{v:.16e}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(ds: &GcldrDataset, path: &Path) -> Result<()> {
    write_csv(ds, std::io::BufWriter::new(std::fs::File::create(path)?))
}

fn csv_err(e: csv::Error) -> GcldrError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => GcldrError::Io(io),
        other => GcldrError::Parse { line, msg: format!("{other:?}") },
    }
}

pub fn read_csv<R: Read>(input: R) -> Result<GcldrDataset> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    let parse_err = |line: usize, msg: String| GcldrError::Parse { line, msg };
    if header.get(0) != Some("role") || header.get(1) != Some("y") {
        return Err(parse_err(1, "header must start with role,y".into()));
    }
    let has_domain = header.get(2) == Some("true_domain");
    let first_x = if has_domain { 3 } else { 2 };
    let d = header.len() - first_x;
    for (j, name) in header.iter().skip(first_x).enumerate() {
        if name != format!("x_{j}") {
            return Err(parse_err(1, format!("expected column x_{j}, found {name:?}")));
        }
    }
    if d == 0 {
        return Err(parse_err(1, "no feature columns".into()));
    }

    let (mut x, mut y, mut dom, mut role) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(parse_err(line, format!("expected {} columns, found {}", header.len(), rec.len())));
        }
        role.push(match &rec[0] {
            "train" => Role::Train,
            "test" => Role::Test,
            other => return Err(parse_err(line, format!("unknown role {other:?}"))),
        });
        let int = |s: &str, what: &str| s.parse::<usize>().map_err(|e| parse_err(line, format!("{what} {s:?}: {e}")));
        y.push(int(&rec[1], "label")?);
        if has_domain {
            dom.push(int(&rec[2], "domain")?);
        }
        for s in rec.iter().skip(first_x) {
            x.push(s.parse::<f64>().map_err(|e| parse_err(line, format!("value {s:?}: {e}")))?);
        }
    }
    if y.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    let n = y.len();
    GcldrDataset::new(Tensor::matrix(n, d, x)?, y, has_domain.then_some(dom), role)
}

pub fn load_csv(path: &Path) -> Result<GcldrDataset> {
    read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
}
