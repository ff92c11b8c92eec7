//! Synthetic source/target domain pairs and minibatch sampling.
//!
//! Target labels are stored privately on [`DomainPair`]. The training loop
//! only ever sees a [`TrainingData`] view, which has no field for them.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_BATCH: usize = 16;
pub const BLOB_RADIUS: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    pub rotation_deg: f64,
    /// Added to target samples; missing trailing coordinates are zero.
    pub translation: Vec<f64>,
    pub noise: f64,
    pub standardize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoonsSpec {
    /// Samples per domain.
    pub n: usize,
    pub rotation_deg: f64,
    pub noise: f64,
    pub standardize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorSpec {
    Blobs(BlobSpec),
    Moons(MoonsSpec),
    Imported,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainPair {
    pub source_x: Matrix,
    pub source_y: Vec<usize>,
    pub target_x: Matrix,
    target_y: Vec<usize>,
    pub classes: usize,
    pub shift_spec: GeneratorSpec,
}

/// Everything the training loop may read.
#[derive(Clone, Copy, Debug)]
pub struct TrainingData<'a> {
    pub source_x: &'a Matrix,
    pub source_y: &'a [usize],
    pub target_x: &'a Matrix,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchPair {
    pub src_x: Matrix,
    pub src_y: Vec<usize>,
    pub tgt_x: Matrix,
}

impl DomainPair {
    pub fn new(
        source_x: Matrix,
        source_y: Vec<usize>,
        target_x: Matrix,
        target_y: Vec<usize>,
        classes: usize,
        shift_spec: GeneratorSpec,
    ) -> Result<Self> {
        if source_x.rows() != source_y.len() {
            return Err(Error::shape(
                "domain_pair",
                source_x.shape(),
                (source_y.len(), 1),
            ));
        }
        if target_x.rows() != target_y.len() {
            return Err(Error::shape(
                "domain_pair",
                target_x.shape(),
                (target_y.len(), 1),
            ));
        }
        if source_x.cols() != target_x.cols() {
            return Err(Error::shape(
                "domain_pair",
                source_x.shape(),
                target_x.shape(),
            ));
        }
        for &y in source_y.iter().chain(&target_y) {
            if y >= classes {
                return Err(Error::Index {
                    op: "domain_pair",
                    index: y,
                    bound: classes,
                });
            }
        }
        Ok(DomainPair {
            source_x,
            source_y,
            target_x,
            target_y,
            classes,
            shift_spec,
        })
    }

    pub fn dim(&self) -> usize {
        self.source_x.cols()
    }

    pub fn training_view(&self) -> TrainingData<'_> {
        TrainingData {
            source_x: &self.source_x,
            source_y: &self.source_y,
            target_x: &self.target_x,
            classes: self.classes,
        }
    }

    /// Held-out target labels, for evaluation only.
    pub fn target_labels(&self) -> &[usize] {
        &self.target_y
    }

    /// Replaces the held-out target labels.
    pub fn with_target_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.target_y.len() {
            return Err(Error::shape(
                "with_target_labels",
                (self.target_y.len(), 1),
                (labels.len(), 1),
            ));
        }
        self.target_y = labels;
        Ok(self)
    }

    /// Writes `x0..x{d-1},y,domain` rows, source first.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        for j in 0..d {
            let _ = write!(out, "x{j},");
        }
        out.push_str("y,domain\n");
        let mut rows = |x: &Matrix, y: &[usize], name: &str| {
            for (i, label) in y.iter().enumerate() {
                for v in x.row(i) {
                    let _ = write!(out, "{v},");
                }
                let _ = writeln!(out, "{label},{name}");
            }
        };
        rows(&self.source_x, &self.source_y, "source");
        rows(&self.target_x, &self.target_y, "target");
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse("empty dataset csv".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let d = cols.len().saturating_sub(2);
        let header_ok = cols.len() >= 3
            && cols[..d]
                .iter()
                .enumerate()
                .all(|(j, c)| *c == format!("x{j}"))
            && cols[d] == "y"
            && cols[d + 1] == "domain";
        if !header_ok {
            return Err(Error::Parse(format!("bad dataset header: {header}")));
        }
        let (mut sx, mut sy, mut tx, mut ty) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 2 {
                return Err(Error::Parse(format!(
                    "line {}: expected {} fields, got {}",
                    lineno + 1,
                    d + 2,
                    fields.len()
                )));
            }
            let parse_err = |what: &str| Error::Parse(format!("line {}: bad {what}", lineno + 1));
            let mut x = Vec::with_capacity(d);
            for f in &fields[..d] {
                x.push(f.trim().parse::<f64>().map_err(|_| parse_err("feature"))?);
            }
            let y: usize = fields[d].trim().parse().map_err(|_| parse_err("label"))?;
            match fields[d + 1].trim() {
                "source" => {
                    sx.extend(x);
                    sy.push(y);
                }
                "target" => {
                    tx.extend(x);
                    ty.push(y);
                }
                other => {
                    return Err(Error::Parse(format!(
                        "line {}: unknown domain {other}",
                        lineno + 1
                    )))
                }
            }
        }
        let classes = sy.iter().chain(&ty).max().map_or(0, |m| m + 1);
        let source_x = Matrix::from_vec(sy.len(), d, sx)?;
        let target_x = Matrix::from_vec(ty.len(), d, tx)?;
        DomainPair::new(source_x, sy, target_x, ty, classes, GeneratorSpec::Imported)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

fn rotate(x: f64, y: f64, cx: f64, cy: f64, deg: f64) -> (f64, f64) {
    let (s, c) = deg.to_radians().sin_cos();
    let (dx, dy) = (x - cx, y - cy);
    (cx + c * dx - s * dy, cy + s * dx + c * dy)
}

fn normal(sigma: f64) -> Result<Normal<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::param("noise", "must be a non-negative real"));
    }
    Normal::new(0.0, sigma).map_err(|e| Error::param("noise", e.to_string()))
}

/// Scales both domains with the source mean and standard deviation.
fn standardize(source: &mut Matrix, target: &mut Matrix) {
    let (n, d) = source.shape();
    for j in 0..d {
        let mean = (0..n).map(|i| source.get(i, j)).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|i| (source.get(i, j) - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        for m in [&mut *source, &mut *target] {
            for i in 0..m.rows() {
                let v = m.get(i, j);
                m.set(i, j, (v - mean) / std);
            }
        }
    }
}

/// Gaussian blobs on a circle; the target is rotated about the origin and
/// translated.
pub fn gen_blobs(spec: &BlobSpec, seed: u64) -> Result<DomainPair> {
    if spec.classes < 2 {
        return Err(Error::param("classes", "need at least 2"));
    }
    if spec.dim < 2 {
        return Err(Error::param("dim", "need at least 2"));
    }
    if spec.n_per_class < 2 {
        return Err(Error::param(
            "n_per_class",
            "need at least 2 samples per class",
        ));
    }
    if spec.translation.len() > spec.dim {
        return Err(Error::param(
            "translation",
            "longer than the input dimension",
        ));
    }
    let noise = normal(spec.noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, d, per) = (spec.classes, spec.dim, spec.n_per_class);

    let center = |k: usize| {
        let a = 2.0 * std::f64::consts::PI * k as f64 / c as f64;
        (BLOB_RADIUS * a.cos(), BLOB_RADIUS * a.sin())
    };
    let sample = |rng: &mut ChaCha8Rng, shifted: bool| {
        let mut x = Matrix::zeros(c * per, d);
        let mut y = Vec::with_capacity(c * per);
        for k in 0..c {
            let (mut cx, mut cy) = center(k);
            if shifted {
                (cx, cy) = rotate(cx, cy, 0.0, 0.0, spec.rotation_deg);
            }
            for n in 0..per {
                let row = k * per + n;
                for j in 0..d {
                    let base = match j {
                        0 => cx,
                        1 => cy,
                        _ => 0.0,
                    };
                    let offset = if shifted {
                        spec.translation.get(j).copied().unwrap_or(0.0)
                    } else {
                        0.0
                    };
                    x.set(row, j, base + offset + noise.sample(rng));
                }
                y.push(k);
            }
        }
        (x, y)
    };
    let (mut sx, sy) = sample(&mut rng, false);
    let (mut tx, ty) = sample(&mut rng, true);
    if spec.standardize {
        standardize(&mut sx, &mut tx);
    }
    DomainPair::new(sx, sy, tx, ty, c, GeneratorSpec::Blobs(spec.clone()))
}

/// Centroid of the clean two-moons distribution.
const MOONS_CENTROID: (f64, f64) = (0.5, 0.25);

/// Interleaved half-moons; the target is rotated about the centroid.
pub fn gen_moons(spec: &MoonsSpec, seed: u64) -> Result<DomainPair> {
    if spec.n < 4 {
        return Err(Error::param("n", "need at least 4 samples"));
    }
    let noise = normal(spec.noise)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n;
    let n0 = n.div_ceil(2);

    let sample = |rng: &mut ChaCha8Rng, deg: f64| {
        let mut x = Matrix::zeros(n, 2);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let t = rng.gen_range(0.0..std::f64::consts::PI);
            let (px, py, label) = if i < n0 {
                (t.cos(), t.sin(), 0)
            } else {
                (1.0 - t.cos(), 0.5 - t.sin(), 1)
            };
            let (px, py) = rotate(px, py, MOONS_CENTROID.0, MOONS_CENTROID.1, deg);
            x.set(i, 0, px + noise.sample(rng));
            x.set(i, 1, py + noise.sample(rng));
            y.push(label);
        }
        (x, y)
    };
    let (mut sx, sy) = sample(&mut rng, 0.0);
    let (mut tx, ty) = sample(&mut rng, spec.rotation_deg);
    if spec.standardize {
        standardize(&mut sx, &mut tx);
    }
    DomainPair::new(sx, sy, tx, ty, 2, GeneratorSpec::Moons(spec.clone()))
}

/// Endless index stream over one domain: a fresh permutation per epoch.
#[derive(Clone, Debug)]
struct IndexStream {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl IndexStream {
    fn new(n: usize, seed: u64) -> Self {
        IndexStream {
            n,
            order: Vec::new(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Minibatch sampler with independent source and target streams.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    source: IndexStream,
    target: IndexStream,
    batch: usize,
}

impl BatchSampler {
    pub fn new(data: &TrainingData<'_>, batch: usize, seed: u64) -> Result<Self> {
        if data.source_x.rows() == 0 || data.target_x.rows() == 0 {
            return Err(Error::param(
                "dataset",
                "source and target must be nonempty",
            ));
        }
        if batch == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        Ok(BatchSampler {
            source: IndexStream::new(data.source_x.rows(), seeder.gen()),
            target: IndexStream::new(data.target_x.rows(), seeder.gen()),
            batch,
        })
    }

    /// Next pair of index lists `(source, target)`.
    pub fn next_indices(&mut self) -> (Vec<usize>, Vec<usize>) {
        (self.source.take(self.batch), self.target.take(self.batch))
    }

    pub fn next_batch(&mut self, data: &TrainingData<'_>) -> BatchPair {
        let (si, ti) = self.next_indices();
        BatchPair {
            src_x: data.source_x.select_rows(&si),
            src_y: si.iter().map(|&i| data.source_y[i]).collect(),
            tgt_x: data.target_x.select_rows(&ti),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moons(rot: f64, n: usize) -> MoonsSpec {
        MoonsSpec {
            n,
            rotation_deg: rot,
            noise: 0.1,
            standardize: true,
        }
    }

    fn blobs(rot: f64) -> BlobSpec {
        BlobSpec {
            classes: 3,
            n_per_class: 50,
            dim: 2,
            rotation_deg: rot,
            translation: vec![],
            noise: 0.5,
            standardize: true,
        }
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(
            gen_blobs(&blobs(30.0), 4).unwrap(),
            gen_blobs(&blobs(30.0), 4).unwrap()
        );
        assert_eq!(
            gen_moons(&moons(30.0, 100), 4).unwrap(),
            gen_moons(&moons(30.0, 100), 4).unwrap()
        );
        assert_ne!(
            gen_moons(&moons(30.0, 100), 4).unwrap(),
            gen_moons(&moons(30.0, 100), 5).unwrap()
        );
    }

    #[test]
    fn moons_are_balanced() {
        let p = gen_moons(&moons(0.0, 600), 1).unwrap();
        assert_eq!(p.source_y.iter().filter(|&&y| y == 0).count(), 300);
        assert_eq!(p.target_labels().iter().filter(|&&y| y == 1).count(), 300);
        assert_eq!(p.classes, 2);
        assert!(gen_moons(&moons(0.0, 3), 1).is_err());
    }

    #[test]
    fn zero_rotation_moons_share_distribution() {
        // Same distribution: source and target moments agree to sampling error.
        let p = gen_moons(&moons(0.0, 4000), 2).unwrap();
        for j in 0..2 {
            let mean =
                |m: &Matrix| (0..m.rows()).map(|i| m.get(i, j)).sum::<f64>() / m.rows() as f64;
            assert!((mean(&p.source_x) - mean(&p.target_x)).abs() < 0.06);
        }
    }

    #[test]
    fn standardization_uses_source_statistics() {
        let p = gen_moons(&moons(30.0, 500), 3).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..500).map(|i| p.source_x.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 500.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 500.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blob_rotation_flips_antipodal_labels() {
        let spec = BlobSpec {
            classes: 2,
            rotation_deg: 180.0,
            standardize: false,
            ..blobs(0.0)
        };
        let p = gen_blobs(&spec, 0).unwrap();
        // class 0 sits at +x in the source and at -x in the target
        let mean_x = |m: &Matrix, y: &[usize], k: usize| {
            let rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] == k).collect();
            rows.iter().map(|&i| m.get(i, 0)).sum::<f64>() / rows.len() as f64
        };
        assert!(mean_x(&p.source_x, &p.source_y, 0) > 3.0);
        assert!(mean_x(&p.target_x, p.target_labels(), 0) < -3.0);
    }

    #[test]
    fn generator_parameter_errors() {
        assert!(gen_blobs(
            &BlobSpec {
                classes: 1,
                ..blobs(0.0)
            },
            0
        )
        .is_err());
        assert!(gen_blobs(
            &BlobSpec {
                dim: 1,
                ..blobs(0.0)
            },
            0
        )
        .is_err());
        assert!(gen_blobs(
            &BlobSpec {
                n_per_class: 1,
                ..blobs(0.0)
            },
            0
        )
        .is_err());
        assert!(gen_blobs(
            &BlobSpec {
                noise: -1.0,
                ..blobs(0.0)
            },
            0
        )
        .is_err());
    }

    #[test]
    fn batches_have_fixed_shapes_and_cover_epochs() {
        let p = gen_moons(&moons(30.0, 40), 0).unwrap();
        let view = p.training_view();
        let mut s = BatchSampler::new(&view, DEFAULT_BATCH, 9).unwrap();
        let mut seen = Vec::new();
        for _ in 0..5 {
            let b = s.next_batch(&view);
            assert_eq!(b.src_x.shape(), (16, 2));
            assert_eq!(b.src_y.len(), 16);
            assert_eq!(b.tgt_x.shape(), (16, 2));
        }
        let mut s = BatchSampler::new(&view, 8, 9).unwrap();
        for _ in 0..5 {
            seen.extend(s.next_indices().0);
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn different_seeds_give_different_orders() {
        let p = gen_moons(&moons(0.0, 64), 0).unwrap();
        let view = p.training_view();
        let orders = |seed| {
            let mut s = BatchSampler::new(&view, 16, seed).unwrap();
            (0..40).flat_map(|_| s.next_indices().0).collect::<Vec<_>>()
        };
        assert_ne!(orders(1), orders(2));
        assert_eq!(orders(1), orders(1));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let p = gen_blobs(
            &BlobSpec {
                dim: 3,
                ..blobs(20.0)
            },
            8,
        )
        .unwrap();
        let text = p.to_csv();
        assert!(text.starts_with("x0,x1,x2,y,domain\n"));
        let back = DomainPair::from_csv(&text).unwrap();
        assert_eq!(back.source_x, p.source_x);
        assert_eq!(back.target_x, p.target_x);
        assert_eq!(back.source_y, p.source_y);
        assert_eq!(back.target_labels(), p.target_labels());
        assert!(DomainPair::from_csv("a,b\n1,2\n").is_err());
    }
}
