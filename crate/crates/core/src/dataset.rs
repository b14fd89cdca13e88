//! Two-domain feature datasets: synthetic generation, feature files, and
//! the stratified train/test split.
//!
//! Training code only ever receives an [`UnlabeledView`]; class labels stay
//! on [`DomainDataset`] for evaluation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Domain::A => 0,
            Domain::B => 1,
        }
    }

    pub fn from_u8(b: u8) -> Option<Domain> {
        match b {
            0 => Some(Domain::A),
            1 => Some(Domain::B),
            _ => None,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Domain> {
        match s {
            "A" => Ok(Domain::A),
            "B" => Ok(Domain::B),
            other => Err(Error::invalid(format!("unknown domain tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: u64,
    pub domain: Domain,
    pub x: Vec<f64>,
    /// Class index, used for evaluation only.
    pub label: Option<usize>,
}

/// All records of one domain. Ids are unique and every vector has the same
/// dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    domain: Domain,
    dim: usize,
    records: Vec<FeatureRecord>,
}

impl DomainDataset {
    pub fn new(domain: Domain, records: Vec<FeatureRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::invalid(format!("domain {domain} dataset is empty")))?;
        let dim = first.x.len();
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.domain != domain {
                return Err(Error::invalid(format!(
                    "record {} belongs to domain {}, expected {domain}",
                    r.id, r.domain
                )));
            }
            if r.x.len() != dim {
                return Err(Error::invalid(format!(
                    "record {} has dimension {}, expected {dim}",
                    r.id,
                    r.x.len()
                )));
            }
            if r.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("record {} has non-finite values", r.id)));
            }
            if !seen.insert(r.id) {
                return Err(Error::invalid(format!("duplicate id {}", r.id)));
            }
        }
        Ok(DomainDataset {
            domain,
            dim,
            records,
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.id).collect()
    }

    /// Labels in record order; `None` if any record is unlabeled.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.records
            .iter()
            .filter_map(|r| r.label)
            .max()
            .map_or(0, |m| m + 1)
    }

    /// Label-free view handed to training.
    pub fn unlabeled(&self) -> UnlabeledView {
        UnlabeledView {
            domain: self.domain,
            dim: self.dim,
            ids: self.ids(),
            xs: self.records.iter().map(|r| r.x.clone()).collect(),
        }
    }
}

/// Training-side view of a domain: ids and inputs, no labels.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledView {
    domain: Domain,
    dim: usize,
    ids: Vec<u64>,
    xs: Vec<Vec<f64>>,
}

impl UnlabeledView {
    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.xs
    }
}

/// Parameters of the synthetic two-domain generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub prototype_separation: f64,
    pub rotation_strength: f64,
    pub bias_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 10,
            samples_per_class: 50,
            input_dim: 32,
            prototype_separation: 1.5,
            rotation_strength: 0.5,
            bias_scale: 3.0,
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes == 0 || self.samples_per_class == 0 || self.input_dim == 0 {
            return bad("classes, per_class and input_dim must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.rotation_strength) {
            return bad("rotation must lie in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise must be a finite non-negative number");
        }
        if !(self.prototype_separation.is_finite() && self.bias_scale.is_finite()) {
            return bad("separation and bias_scale must be finite");
        }
        Ok(())
    }
}

/// Orthonormal basis from modified Gram-Schmidt on a Gaussian matrix
/// (the Q factor of its QR decomposition, columns sign-fixed so that R has a
/// positive diagonal).
fn random_orthonormal(dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v = rng.normal_vec(dim);
        for b in &basis {
            let p = dot(&v, b);
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= p * bi;
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Rotation on the geodesic from the identity (`strength = 0`) to a random
/// rotation (`strength = 1`). The random rotation turns each plane spanned by
/// consecutive basis vector pairs by an angle in (−π, π]; intermediate
/// strengths scale every angle.
pub fn interpolated_rotation(dim: usize, strength: f64, rng: &mut Rng) -> Matrix {
    let basis = random_orthonormal(dim, rng);
    let mut r = Matrix::identity(dim);
    for pair in basis.chunks_exact(2) {
        let theta = strength * rng.uniform_range(-std::f64::consts::PI, std::f64::consts::PI);
        let (c, s) = (theta.cos() - 1.0, theta.sin());
        let (a, b) = (&pair[0], &pair[1]);
        // R += (cosθ − 1)(a aᵀ + b bᵀ) + sinθ (b aᵀ − a bᵀ)
        r.add_outer(c, a, a);
        r.add_outer(c, b, b);
        r.add_outer(s, b, a);
        r.add_outer(-s, a, b);
    }
    r
}

/// Class prototypes shared by both domains, rescaled onto a sphere of radius
/// `prototype_separation`.
fn prototypes(cfg: &SynthConfig, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..cfg.num_classes)
        .map(|_| loop {
            let v = rng.normal_vec(cfg.input_dim);
            let n = norm(&v);
            if n > 1e-8 {
                break v.iter().map(|x| x * cfg.prototype_separation / n).collect();
            }
        })
        .collect()
}

/// Draws the two domains. Domain A samples are `prototype + noise`, domain B
/// samples are `R·prototype + b + noise`. Ids are `0..N_A` for A and
/// `N_A..N_A+N_B` for B.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(DomainDataset, DomainDataset)> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let protos = prototypes(cfg, &mut root.derive(0));
    let rotation = interpolated_rotation(cfg.input_dim, cfg.rotation_strength, &mut root.derive(1));
    let bias: Vec<f64> = {
        let mut rng = root.derive(2);
        let v = rng.normal_vec(cfg.input_dim);
        let n = norm(&v).max(1e-300);
        v.iter().map(|x| x * cfg.bias_scale / n).collect()
    };
    let shifted: Vec<Vec<f64>> = protos
        .iter()
        .map(|p| {
            rotation
                .matvec(p)
                .iter()
                .zip(&bias)
                .map(|(x, b)| x + b)
                .collect()
        })
        .collect();

    let per_domain = cfg.num_classes * cfg.samples_per_class;
    let draw = |centers: &[Vec<f64>], domain: Domain, first_id: u64, mut rng: Rng| {
        let mut records = Vec::with_capacity(per_domain);
        for (class, center) in centers.iter().enumerate() {
            for _ in 0..cfg.samples_per_class {
                let x = center
                    .iter()
                    .map(|c| c + cfg.noise_sigma * rng.normal())
                    .collect();
                records.push(FeatureRecord {
                    id: first_id + records.len() as u64,
                    domain,
                    x,
                    label: Some(class),
                });
            }
        }
        DomainDataset::new(domain, records)
    };
    let a = draw(&protos, Domain::A, 0, root.derive(3))?;
    let b = draw(&shifted, Domain::B, per_domain as u64, root.derive(4))?;
    Ok((a, b))
}

/// Stratified split. Each class keeps `max(1, round(n·(1−ratio)))` samples
/// for test; unlabeled datasets are split as a single group. Record order
/// within each side follows the input order.
pub fn split_train_test(
    dataset: &DomainDataset,
    ratio: f64,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Split(format!("ratio {ratio} must lie in (0, 1)")));
    }
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    let labelled = dataset.records.iter().all(|r| r.label.is_some());
    for (i, r) in dataset.records.iter().enumerate() {
        let key = if labelled { r.label } else { None };
        groups.entry(key).or_default().push(i);
    }
    let mut rng = Rng::new(seed).derive(dataset.domain.as_u8() as u64);
    let mut is_test = vec![false; dataset.len()];
    for (label, mut members) in groups {
        let n = members.len();
        if n < 2 {
            return Err(Error::Split(match label {
                Some(c) => format!("class {c} has {n} sample(s); at least 2 are required"),
                None => format!("{n} sample(s); at least 2 are required"),
            }));
        }
        let n_test = ((n as f64 * (1.0 - ratio)).round() as usize).clamp(1, n - 1);
        rng.shuffle(&mut members);
        for &i in &members[..n_test] {
            is_test[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in dataset.records.iter().zip(is_test) {
        if t {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((
        DomainDataset::new(dataset.domain, train)?,
        DomainDataset::new(dataset.domain, test)?,
    ))
}

const BINARY_MAGIC: &[u8; 4] = b"CODF";
const BINARY_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Text,
    Binary,
}

/// Reads a text or binary feature file; the format is detected from the
/// leading magic bytes.
pub fn load_feature_file(path: impl AsRef<Path>) -> Result<DomainDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    if bytes.starts_with(BINARY_MAGIC) {
        parse_binary(&bytes, &name)
    } else {
        parse_text(&bytes[..], &name)
    }
}

pub fn write_feature_file(
    path: impl AsRef<Path>,
    dataset: &DomainDataset,
    format: FileFormat,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        FileFormat::Text => encode_text(dataset),
        FileFormat::Binary => encode_binary(dataset),
    };
    crate::io::write_atomic(path, &bytes)
}

pub fn encode_text(dataset: &DomainDataset) -> Vec<u8> {
    let mut out = Vec::new();
    writeln!(out, "{} {}", dataset.len(), dataset.dim).unwrap();
    for r in &dataset.records {
        write!(out, "{} {} ", r.id, r.domain).unwrap();
        match r.label {
            Some(l) => write!(out, "{l}").unwrap(),
            None => write!(out, "-").unwrap(),
        }
        for v in &r.x {
            // Display for f64 prints the shortest string that round-trips.
            write!(out, " {v}").unwrap();
        }
        writeln!(out).unwrap();
    }
    out
}

pub fn encode_binary(dataset: &DomainDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(21 + dataset.len() * (17 + 8 * dataset.dim));
    out.extend_from_slice(BINARY_MAGIC);
    out.push(BINARY_VERSION);
    out.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dataset.dim as u64).to_le_bytes());
    for r in &dataset.records {
        out.extend_from_slice(&r.id.to_le_bytes());
        out.push(r.domain.as_u8());
        let label = r.label.map_or(-1, |l| l as i64);
        out.extend_from_slice(&label.to_le_bytes());
        for v in &r.x {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn parse_text(reader: impl Read, name: &str) -> Result<DomainDataset> {
    let err = |line: usize, message: String| Error::Parse {
        path: name.to_string(),
        line,
        message,
    };
    let mut lines = BufReader::new(reader).lines().enumerate();
    let (n, dim) = loop {
        let (i, line) = lines
            .next()
            .ok_or_else(|| err(1, "missing header `N D`".into()))?;
        let line = line.map_err(|e| err(i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parsed = match parts.as_slice() {
            [n, d] => n.parse::<usize>().ok().zip(d.parse::<usize>().ok()),
            _ => None,
        };
        match parsed {
            Some((n, d)) if n > 0 && d > 0 => break (n, d),
            _ => return Err(err(i + 1, format!("malformed header {line:?}, expected `N D`"))),
        }
    };

    let mut records = Vec::with_capacity(n);
    let mut domain = None;
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| err(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        if records.len() == n {
            return Err(err(lineno, format!("more than the {n} declared rows")));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 + dim {
            return Err(err(
                lineno,
                format!("expected {} values after id/domain/label, found {}", dim, fields.len().saturating_sub(3)),
            ));
        }
        let id = fields[0]
            .parse::<u64>()
            .map_err(|_| err(lineno, format!("bad id {:?}", fields[0])))?;
        let d: Domain = fields[1]
            .parse()
            .map_err(|_| err(lineno, format!("bad domain {:?}", fields[1])))?;
        if *domain.get_or_insert(d) != d {
            return Err(err(lineno, "file mixes domains A and B".into()));
        }
        let label = match fields[2] {
            "-" => None,
            s => Some(
                s.parse::<usize>()
                    .map_err(|_| err(lineno, format!("bad label {s:?}")))?,
            ),
        };
        let x = fields[3..]
            .iter()
            .map(|s| match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(lineno, format!("bad or non-finite value {s:?}"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        records.push(FeatureRecord { id, domain: d, x, label });
    }
    if records.len() != n {
        return Err(err(0, format!("header declares {n} rows, found {}", records.len())));
    }
    let domain = domain.expect("n > 0");
    DomainDataset::new(domain, records).map_err(|e| err(0, e.to_string()))
}

fn parse_binary(bytes: &[u8], name: &str) -> Result<DomainDataset> {
    // `line` carries the record index (header = 0) for binary files.
    let err = |line: usize, message: String| Error::Parse {
        path: name.to_string(),
        line,
        message,
    };
    let mut cur = bytes;
    let mut take = |k: usize, at: usize| -> Result<&[u8]> {
        if cur.len() < k {
            return Err(err(at, "unexpected end of file".into()));
        }
        let (head, tail) = cur.split_at(k);
        cur = tail;
        Ok(head)
    };
    let u64_of = |b: &[u8]| u64::from_le_bytes(b.try_into().unwrap());
    take(4, 0)?;
    let version = take(1, 0)?[0];
    if version != BINARY_VERSION {
        return Err(err(0, format!("unsupported version {version}")));
    }
    let n = u64_of(take(8, 0)?) as usize;
    let dim = u64_of(take(8, 0)?) as usize;
    if n == 0 || dim == 0 {
        return Err(err(0, format!("invalid header N={n} D={dim}")));
    }
    let mut records = Vec::with_capacity(n.min(1 << 20));
    let mut domain = None;
    for rec in 1..=n {
        let id = u64_of(take(8, rec)?);
        let d = Domain::from_u8(take(1, rec)?[0])
            .ok_or_else(|| err(rec, "bad domain byte".into()))?;
        if *domain.get_or_insert(d) != d {
            return Err(err(rec, "file mixes domains A and B".into()));
        }
        let label = i64::from_le_bytes(take(8, rec)?.try_into().unwrap());
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(err(rec, format!("bad label {l}"))),
        };
        let raw = take(8 * dim, rec)?;
        let x: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(err(rec, "non-finite value".into()));
        }
        records.push(FeatureRecord { id, domain: d, x, label });
    }
    if !cur.is_empty() {
        return Err(err(n, format!("{} trailing bytes", cur.len())));
    }
    DomainDataset::new(domain.expect("n > 0"), records).map_err(|e| err(0, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn parse(s: &str) -> Result<DomainDataset> {
        parse_text(s.as_bytes(), "mem")
    }

    #[test]
    fn minimal_text_file() {
        let ds = parse("2 3\n0 A 1 0.5 1 2\n1 A - 3 4 5e-3\n").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 3);
        assert_eq!(ds.records()[1].label, None);
        assert_eq!(ds.records()[1].x, vec![3.0, 4.0, 0.005]);
    }

    #[test]
    fn ragged_row_names_line() {
        match parse("2 3\n0 A 1 0.5 1 2\n1 A 0 3 4\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(parse("x y\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("1 1\n0 A 0 nan\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse("1 1\n0 A 0 inf\n"), Err(Error::Parse { line: 2, .. })));
        assert!(parse("2 1\n0 A 0 1\n1 B 0 1\n").is_err());
        assert!(parse("2 1\n0 A 0 1\n").is_err());
        assert!(parse("1 1\n0 A 0 1\n1 A 0 1\n").is_err());
        assert!(parse("2 1\n0 A 0 1\n0 A 0 2\n").is_err());
    }

    #[test]
    fn zero_gap_domain_b_equals_prototypes() {
        let cfg = SynthConfig {
            rotation_strength: 0.0,
            bias_scale: 0.0,
            noise_sigma: 0.0,
            samples_per_class: 3,
            ..SynthConfig::default()
        };
        let (a, b) = generate_synthetic(&cfg).unwrap();
        let protos = prototypes(&cfg, &mut Rng::new(cfg.seed).derive(0));
        for (ra, rb) in a.records().iter().zip(b.records()) {
            let c = ra.label.unwrap();
            assert_eq!(ra.x, protos[c]);
            assert_eq!(rb.x, protos[c]);
        }
    }

    #[test]
    fn noiseless_classes_are_nearest_prototype_separable() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            prototype_separation: 10.0,
            ..SynthConfig::default()
        };
        let (a, b) = generate_synthetic(&cfg).unwrap();
        for ds in [&a, &b] {
            // per-domain class means act as prototypes
            let mut means = vec![vec![0.0; ds.dim()]; cfg.num_classes];
            for r in ds.records() {
                for (m, x) in means[r.label.unwrap()].iter_mut().zip(&r.x) {
                    *m += x / cfg.samples_per_class as f64;
                }
            }
            for r in ds.records() {
                let best = (0..cfg.num_classes)
                    .min_by(|&i, &j| {
                        crate::numerics::squared_distance(&r.x, &means[i])
                            .total_cmp(&crate::numerics::squared_distance(&r.x, &means[j]))
                    })
                    .unwrap();
                assert_eq!(Some(best), r.label);
            }
        }
    }

    #[test]
    fn rotation_is_orthogonal_and_identity_at_zero() {
        let mut rng = Rng::new(3);
        let r = interpolated_rotation(7, 0.7, &mut rng);
        let rtr = r.transpose().matmul(&r);
        let id = Matrix::identity(7);
        for (x, y) in rtr.as_slice().iter().zip(id.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        let r0 = interpolated_rotation(7, 0.0, &mut Rng::new(3));
        for (x, y) in r0.as_slice().iter().zip(id.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_angle_grows_with_strength() {
        let dim = 16;
        let angle = |s: f64| {
            let r = interpolated_rotation(dim, s, &mut Rng::new(21));
            // trace(R) = (D mod 2) + Σ 2cos θ_i, decreasing in |θ|
            (0..dim).map(|i| r[(i, i)]).sum::<f64>()
        };
        let traces: Vec<f64> = [0.0, 0.25, 0.5].iter().map(|&s| angle(s)).collect();
        assert!(traces[0] > traces[1] && traces[1] > traces[2], "{traces:?}");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
    }

    #[test]
    fn split_counts_per_class() {
        let cfg = SynthConfig {
            samples_per_class: 10,
            ..SynthConfig::default()
        };
        let (a, _) = generate_synthetic(&cfg).unwrap();
        let (train, test) = split_train_test(&a, 0.8, 1).unwrap();
        for c in 0..cfg.num_classes {
            assert_eq!(train.records().iter().filter(|r| r.label == Some(c)).count(), 8);
            assert_eq!(test.records().iter().filter(|r| r.label == Some(c)).count(), 2);
        }

        let cfg5 = SynthConfig {
            samples_per_class: 5,
            ..cfg
        };
        let (a5, _) = generate_synthetic(&cfg5).unwrap();
        let (train, test) = split_train_test(&a5, 0.8, 1).unwrap();
        assert_eq!(train.len(), 40);
        assert_eq!(test.len(), 10);
    }

    #[test]
    fn split_errors() {
        let rec = |id, label| FeatureRecord {
            id,
            domain: Domain::A,
            x: vec![1.0],
            label,
        };
        let ds = DomainDataset::new(Domain::A, vec![rec(0, Some(0)), rec(1, Some(0)), rec(2, Some(1))])
            .unwrap();
        assert!(matches!(split_train_test(&ds, 0.8, 0), Err(Error::Split(_))));
        assert!(split_train_test(&ds, 1.0, 0).is_err());
        let unl = DomainDataset::new(Domain::A, (0..10).map(|i| rec(i, None)).collect()).unwrap();
        let (tr, te) = split_train_test(&unl, 0.8, 0).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
    }

    #[test]
    fn unlabeled_view_has_no_labels() {
        let (a, _) = generate_synthetic(&SynthConfig::default()).unwrap();
        let view = a.unlabeled();
        assert_eq!(view.ids(), a.ids().as_slice());
        assert_eq!(view.inputs()[3], a.records()[3].x);
    }

    fn arb_dataset() -> impl Strategy<Value = DomainDataset> {
        (1usize..6, 1usize..8, any::<bool>()).prop_flat_map(|(dim, n, is_b)| {
            prop::collection::vec(
                (
                    prop::collection::vec(
                        prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO,
                        dim,
                    ),
                    prop::option::of(0usize..50),
                ),
                n,
            )
            .prop_map(move |rows| {
                let domain = if is_b { Domain::B } else { Domain::A };
                let records = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (x, label))| FeatureRecord {
                        id: (i as u64) * 7 + 3,
                        domain,
                        x,
                        label,
                    })
                    .collect();
                DomainDataset::new(domain, records).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn feature_files_round_trip_bitwise(ds in arb_dataset()) {
            let text = parse_text(&encode_text(&ds)[..], "mem").unwrap();
            let bin = parse_binary(&encode_binary(&ds), "mem").unwrap();
            for parsed in [&text, &bin] {
                prop_assert_eq!(parsed.ids(), ds.ids());
                for (r, s) in parsed.records().iter().zip(ds.records()) {
                    prop_assert_eq!(r.label, s.label);
                    let bits: Vec<u64> = r.x.iter().map(|v| v.to_bits()).collect();
                    let orig: Vec<u64> = s.x.iter().map(|v| v.to_bits()).collect();
                    prop_assert_eq!(bits, orig);
                }
            }
        }

        #[test]
        fn split_partitions_and_stratifies(per_class in 2usize..12, seed in 0u64..1000) {
            let cfg = SynthConfig { num_classes: 3, samples_per_class: per_class, input_dim: 2, ..SynthConfig::default() };
            let (a, _) = generate_synthetic(&cfg).unwrap();
            let (train, test) = split_train_test(&a, 0.8, seed).unwrap();
            let mut all: Vec<u64> = train.ids().into_iter().chain(test.ids()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, a.ids());
            let expected_test = ((per_class as f64 * 0.2).round() as usize).clamp(1, per_class - 1);
            for c in 0..3 {
                let nt = test.records().iter().filter(|r| r.label == Some(c)).count();
                prop_assert_eq!(nt, expected_test);
                let ideal = per_class as f64 * 0.2;
                prop_assert!((nt as f64 - ideal).abs() <= 1.0);
            }
        }
    }
}
