//! Subcommand implementations. Each returns a summary on success and a
//! [`CliError`] carrying the exit code otherwise.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};

use chatty_core::io::{labels_from_csv, labels_to_csv, matrix_from_csv, matrix_to_csv};
use chatty_core::metrics::silhouette;
use chatty_core::train::{self, RunRecord};
use chatty_core::verify::{self, Report, VerifyOptions};
use chatty_core::Matrix;

use crate::config::ExperimentConfig;
use crate::plot::{self, Series};
use crate::CliError;

pub const SEED_ENV: &str = "CHATTY_SEED";

/// Flags accepted by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct GlobalOpts {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub quiet: bool,
}

impl GlobalOpts {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    /// `--seed` wins over the environment, which wins over the file.
    fn seed_override(&self) -> Result<Option<u64>, CliError> {
        if let Some(s) = self.seed {
            return Ok(Some(s));
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| CliError::config(format!("{SEED_ENV}={v:?} is not an integer"))),
            Err(_) => Ok(None),
        }
    }

    fn load(&self, path: &Path) -> Result<ExperimentConfig, CliError> {
        let mut config = ExperimentConfig::load(path)?;
        if let Some(seed) = self.seed_override()? {
            config.seed = seed;
        }
        Ok(config)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents)
        .map_err(|e| CliError::failed(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::failed(format!("cannot create {}: {e}", path.display())))
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub record: RunRecord,
}

/// Trains one configuration and writes every artifact into `out_dir`.
fn train_into(config: &ExperimentConfig, out_dir: &Path) -> Result<RunRecord, CliError> {
    let (pair, train_config) = config.resolve()?;
    let resolved = config.resolved(pair.classes)?;
    create_dir(out_dir)?;
    let outcome = train::run(&pair, &train_config)?;
    let record = outcome.record;

    write(&out_dir.join("metrics.csv"), record.to_csv())?;
    write(&out_dir.join("run.json"), record.to_json()?)?;
    for (iter, logits) in &record.snapshots {
        write(
            &out_dir.join(format!("snapshot_{iter}.csv")),
            matrix_to_csv(logits, "z"),
        )?;
    }
    write(
        &out_dir.join("target_labels.csv"),
        labels_to_csv(pair.target_labels()),
    )?;
    write(&out_dir.join("model.json"), outcome.model.to_json()?)?;
    write(&out_dir.join("resolved_config.toml"), resolved.to_toml())?;
    Ok(record)
}

pub fn cmd_train(config_path: &Path, opts: &GlobalOpts) -> Result<TrainSummary, CliError> {
    let config = opts.load(config_path)?;
    let out_dir = opts.out.clone().unwrap_or_else(|| config.out_dir.clone());
    let record = train_into(&config, &out_dir)?;
    let last = record.final_row();
    opts.say(format!(
        "iter {}: source acc {:.4}, target acc {:.4}, l_total {:.5}; wrote {}",
        last.iter,
        last.src_acc,
        last.tgt_acc,
        last.l_total,
        out_dir.display()
    ));
    Ok(TrainSummary { out_dir, record })
}

#[derive(Clone, Debug)]
pub struct CompareSummary {
    pub names: Vec<String>,
    pub records: Vec<RunRecord>,
    /// Largest absolute difference between any two target-accuracy curves
    /// at a shared evaluation point.
    pub max_gap: f64,
}

fn run_names(paths: &[PathBuf]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("run{i}"));
            if seen.insert(stem.clone()) {
                stem
            } else {
                format!("{i}_{stem}")
            }
        })
        .collect()
}

fn joined_csv(names: &[String], records: &[RunRecord]) -> String {
    let iters: BTreeSet<usize> = records
        .iter()
        .flat_map(|r| r.rows.iter().map(|row| row.iter))
        .collect();
    let mut out = String::from("iter");
    for n in names {
        out.push_str(&format!(",tgt_acc_{n},src_acc_{n},l_total_{n}"));
    }
    out.push('\n');
    for it in iters {
        out.push_str(&it.to_string());
        for r in records {
            match r.rows.iter().find(|row| row.iter == it) {
                Some(row) => {
                    out.push_str(&format!(",{},{},{}", row.tgt_acc, row.src_acc, row.l_total))
                }
                None => out.push_str(",,,"),
            }
        }
        out.push('\n');
    }
    out
}

fn max_gap(records: &[RunRecord]) -> f64 {
    let mut gap: f64 = 0.0;
    for a in records {
        for b in records {
            for ra in &a.rows {
                if let Some(rb) = b.rows.iter().find(|r| r.iter == ra.iter) {
                    gap = gap.max((ra.tgt_acc - rb.tgt_acc).abs());
                }
            }
        }
    }
    gap
}

/// Trains every configuration on the same dataset and overlays the
/// target-accuracy curves.
pub fn cmd_compare(paths: &[PathBuf], opts: &GlobalOpts) -> Result<CompareSummary, CliError> {
    if paths.len() < 2 {
        return Err(CliError::config("compare needs at least two configs"));
    }
    let configs = paths
        .iter()
        .map(|p| opts.load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let seeds: BTreeSet<u64> = configs.iter().map(|c| c.data_seed).collect();
    if seeds.len() > 1 {
        return Err(CliError::config(format!(
            "configs use different data_seed values {seeds:?}; curves would not share a dataset"
        )));
    }
    let out_dir = opts
        .out
        .clone()
        .unwrap_or_else(|| configs[0].out_dir.clone());
    create_dir(&out_dir)?;
    let names = run_names(paths);
    let mut records = Vec::with_capacity(configs.len());
    for (config, name) in configs.iter().zip(&names) {
        let record = train_into(config, &out_dir.join(name))?;
        opts.say(format!(
            "{name}: target acc {:.4}",
            record.final_row().tgt_acc
        ));
        records.push(record);
    }

    write(&out_dir.join("compare.csv"), joined_csv(&names, &records))?;
    let series: Vec<Series<'_>> = names
        .iter()
        .zip(&records)
        .map(|(n, r)| Series {
            name: n,
            points: r
                .rows
                .iter()
                .map(|row| (row.iter as f64, row.tgt_acc))
                .collect(),
        })
        .collect();
    let svg = plot::line_chart("Target accuracy", "iteration", "target accuracy", &series);
    write(&out_dir.join("compare.svg"), svg)?;
    let max_gap = max_gap(&records);
    opts.say(format!("max gap between curves: {max_gap:.4}"));
    Ok(CompareSummary {
        names,
        records,
        max_gap,
    })
}

/// Projects rows onto the two leading principal axes.
///
/// Each axis is oriented so its largest-magnitude component is positive.
pub fn pca2(m: &Matrix) -> Matrix {
    let (n, c) = m.shape();
    if n == 0 {
        return Matrix::zeros(0, 2);
    }
    let x = DMatrix::from_row_slice(n, c, m.data());
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, c, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let pivot = v
                .iter()
                .copied()
                .fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc });
            let s = if pivot < 0.0 { -1.0 } else { 1.0 };
            v.into_iter().map(|x| s * x).collect()
        })
        .collect();
    Matrix::from_fn(n, 2, |i, a| match axes.get(a) {
        Some(axis) => (0..c).map(|j| centered[(i, j)] * axis[j]).sum(),
        None => 0.0,
    })
}

#[derive(Clone, Debug)]
pub struct ScatterOutput {
    pub snapshot: PathBuf,
    pub svg: PathBuf,
    pub silhouette: f64,
}

/// One SVG per snapshot file, coloured by the given labels.
pub fn cmd_scatter(
    snapshots: &[PathBuf],
    labels_path: &Path,
    pca: bool,
    opts: &GlobalOpts,
) -> Result<Vec<ScatterOutput>, CliError> {
    if snapshots.is_empty() {
        return Err(CliError::config("scatter needs at least one snapshot file"));
    }
    let read = |p: &Path| {
        fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))
    };
    let labels = labels_from_csv(&read(labels_path)?)
        .map_err(|e| CliError::config(format!("{}: {e}", labels_path.display())))?;
    let out_dir = opts.out.clone().unwrap_or_else(|| PathBuf::from("."));
    create_dir(&out_dir)?;

    let mut outputs = Vec::new();
    for path in snapshots {
        let logits = matrix_from_csv(&read(path)?)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let (n, c) = logits.shape();
        if c > 3 && !pca {
            return Err(CliError::config(format!(
                "{} has {c} columns; pass --pca to project onto two principal axes",
                path.display()
            )));
        }
        if n > 0 && n != labels.len() {
            return Err(CliError::config(format!(
                "{} has {n} rows but {} has {} labels",
                path.display(),
                labels_path.display(),
                labels.len()
            )));
        }
        let (xy, xlabel, ylabel) = if c >= 3 || pca {
            (pca2(&logits), "PC 1", "PC 2")
        } else if c == 2 {
            (logits.clone(), "z0", "z1")
        } else {
            (
                Matrix::from_fn(n, 2, |i, j| if j == 0 { logits.get(i, 0) } else { 0.0 }),
                "z0",
                "",
            )
        };
        let points: Vec<(f64, f64, usize)> = (0..n)
            .map(|i| (xy.get(i, 0), xy.get(i, 1), labels[i]))
            .collect();
        let score = if n > 0 {
            silhouette(&logits, &labels)
        } else {
            0.0
        };
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "snapshot".into());
        let svg_path = out_dir.join(format!("{stem}.svg"));
        let title = format!("{stem} (silhouette {score:.3})");
        write(&svg_path, plot::scatter(&title, xlabel, ylabel, &points))?;
        opts.say(format!("{}: silhouette {score:.4}", svg_path.display()));
        outputs.push(ScatterOutput {
            snapshot: path.clone(),
            svg: svg_path,
            silhouette: score,
        });
    }
    Ok(outputs)
}

/// Runs the oracle suite; fails naming every failing property.
pub fn cmd_verify(opts: &GlobalOpts, verify_opts: VerifyOptions) -> Result<Report, CliError> {
    let report = verify::run_all(verify_opts);
    opts.say(report.to_string().trim_end());
    if report.passed() {
        Ok(report)
    } else {
        let names: Vec<&str> = report.failures().map(|c| c.name).collect();
        Err(CliError::failed(format!(
            "verification failed: {}",
            names.join(", ")
        )))
    }
}
