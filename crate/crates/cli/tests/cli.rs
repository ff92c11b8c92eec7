use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use chatty_core::data::{gen_moons, MoonsSpec};
use chatty_core::io::matrix_to_csv;
use chatty_core::Matrix;

const SMALL: &str =
    "iterations = 60\neval_every = 20\nsnapshot_iters = [0, 60]\nhidden = [12, 8]\nn = 80\n";

fn chatty(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chatty"))
        .args(args)
        .current_dir(dir)
        .env_remove("CHATTY_SEED")
        .output()
        .expect("spawn chatty")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn parse_svg(path: &Path) {
    let text = fs::read_to_string(path).unwrap();
    roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
}

#[test]
fn empty_config_runs_with_defaults_and_creates_the_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.toml"), "").unwrap();
    let o = chatty(
        dir.path(),
        &["--quiet", "--out", "nested/run", "train", "empty.toml"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("nested/run");
    for f in [
        "metrics.csv",
        "run.json",
        "model.json",
        "resolved_config.toml",
        "target_labels.csv",
        "snapshot_0.csv",
        "snapshot_2500.csv",
        "snapshot_5000.csv",
        "snapshot_10000.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("iter,l_c,l_adv,l_tl,l_mcc,l_total,src_acc,tgt_acc\n"));
    assert_eq!(metrics.lines().count(), 1 + 21);
    let resolved = fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("lambda2 = 0.0248"), "{resolved}");
    assert!(resolved.contains("lr = 0.001"));
}

#[test]
fn rerun_gives_identical_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    for out in ["a", "b"] {
        let o = chatty(dir.path(), &["--quiet", "--out", out, "train", "c.toml"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["metrics.csv", "model.json", "snapshot_60.csv", "run.json"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn bad_configs_exit_2_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("typo.toml"),
        "iterations = 10\nlearnig_rate = 0.1\n",
    )
    .unwrap();
    let o = chatty(dir.path(), &["train", "typo.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(
        err.contains("learnig_rate") && err.contains("line 2"),
        "{err}"
    );

    fs::write(dir.path().join("range.toml"), "lambda = 2.0\n").unwrap();
    let o = chatty(dir.path(), &["train", "range.toml"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = chatty(dir.path(), &["train", "missing.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn non_finite_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut pair = gen_moons(
        &MoonsSpec {
            n: 40,
            rotation_deg: 30.0,
            noise: 0.1,
            standardize: true,
        },
        0,
    )
    .unwrap();
    pair.source_x.set(3, 1, f64::NAN);
    pair.save_csv(dir.path().join("bad.csv")).unwrap();
    fs::write(
        dir.path().join("c.toml"),
        "dataset = \"csv\"\ndata_path = \"bad.csv\"\niterations = 10\nhidden = [4]\n",
    )
    .unwrap();
    let o = chatty(dir.path(), &["--quiet", "--out", "o", "train", "c.toml"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn seed_flag_beats_environment_beats_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), format!("{SMALL}seed = 1\n")).unwrap();
    let run = |out: &str, flag: Option<&str>, env: Option<&str>| {
        let mut args = vec!["--quiet", "--out", out];
        if let Some(s) = flag {
            args.extend(["--seed", s]);
        }
        args.extend(["train", "c.toml"]);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_chatty"));
        cmd.args(&args)
            .current_dir(dir.path())
            .env_remove("CHATTY_SEED");
        if let Some(e) = env {
            cmd.env("CHATTY_SEED", e);
        }
        assert!(cmd.output().unwrap().status.success());
        fs::read_to_string(dir.path().join(out).join("resolved_config.toml")).unwrap()
    };
    assert!(run("file", None, None).contains("seed = 1\n"));
    assert!(run("env", None, Some("5")).contains("seed = 5\n"));
    assert!(run("flag", Some("9"), Some("5")).contains("seed = 9\n"));

    let o = Command::new(env!("CARGO_BIN_EXE_chatty"))
        .args(["--quiet", "train", "c.toml"])
        .current_dir(dir.path())
        .env("CHATTY_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn comparing_a_config_with_itself_gives_zero_gap() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.toml"), SMALL).unwrap();
    let o = chatty(dir.path(), &["--out", "cmp", "compare", "a.toml", "a.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(
        stdout.contains("max gap between curves: 0.0000"),
        "{stdout}"
    );
    let csv = fs::read_to_string(dir.path().join("cmp/compare.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[1..4], f[4..7]);
    }
    parse_svg(&dir.path().join("cmp/compare.svg"));
}

#[test]
fn compare_rejects_mismatched_data_seeds() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.toml"), SMALL).unwrap();
    fs::write(dir.path().join("b.toml"), format!("{SMALL}data_seed = 4\n")).unwrap();
    let o = chatty(dir.path(), &["compare", "a.toml", "b.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data_seed"));
}

#[test]
fn compare_overlays_four_ablation_curves() {
    let dir = tempfile::tempdir().unwrap();
    let variants = [
        ("adv.toml", "lambda2 = 0.0\nmcc = false\n"),
        ("adv_mcc.toml", "lambda2 = 0.0\n"),
        ("adv_tl.toml", "mcc = false\n"),
        ("adv_tl_mcc.toml", ""),
    ];
    for (name, extra) in variants {
        fs::write(dir.path().join(name), format!("{SMALL}{extra}")).unwrap();
    }
    let names: Vec<&str> = variants.iter().map(|v| v.0).collect();
    let mut args = vec!["--quiet", "--out", "abl", "compare"];
    args.extend(names);
    let o = chatty(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(dir.path().join("abl/compare.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
    parse_svg(&dir.path().join("abl/compare.svg"));
    let header = fs::read_to_string(dir.path().join("abl/compare.csv")).unwrap();
    assert!(header.starts_with("iter,tgt_acc_adv,"));
}

#[test]
fn scatter_rejects_wide_snapshots_without_pca() {
    let dir = tempfile::tempdir().unwrap();
    let m = Matrix::from_fn(4, 5, |i, j| (i * j) as f64);
    fs::write(dir.path().join("s.csv"), matrix_to_csv(&m, "z")).unwrap();
    fs::write(dir.path().join("y.csv"), "y\n0\n1\n2\n3\n").unwrap();
    let o = chatty(dir.path(), &["scatter", "--labels", "y.csv", "s.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--pca"));
    let o = chatty(
        dir.path(),
        &["--quiet", "scatter", "--pca", "--labels", "y.csv", "s.csv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    parse_svg(&dir.path().join("s.svg"));
}

#[test]
fn empty_snapshot_gives_axes_only() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.csv"), "z0,z1\n").unwrap();
    fs::write(dir.path().join("y.csv"), "y\n").unwrap();
    let o = chatty(
        dir.path(),
        &["--quiet", "scatter", "--labels", "y.csv", "empty.csv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(dir.path().join("empty.svg")).unwrap();
    assert!(!svg.contains("<circle"));
    parse_svg(&dir.path().join("empty.svg"));
}

fn silhouette_of(stdout: &str, stem: &str) -> f64 {
    let line = stdout
        .lines()
        .find(|l| l.contains(&format!("{stem}.svg")))
        .unwrap_or_else(|| panic!("no line for {stem} in {stdout}"));
    line.rsplit(' ').next().unwrap().parse().unwrap()
}

#[test]
fn moons_snapshots_separate_over_training() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.toml"), "lr = 0.01\n").unwrap();
    let o = chatty(dir.path(), &["--quiet", "--out", "run", "train", "m.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let snaps = ["0", "2500", "5000", "10000"].map(|i| format!("run/snapshot_{i}.csv"));
    let mut args = vec![
        "--out",
        "plots",
        "scatter",
        "--labels",
        "run/target_labels.csv",
    ];
    args.extend(snaps.iter().map(String::as_str));
    let o = chatty(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    for i in ["0", "2500", "5000", "10000"] {
        parse_svg(&dir.path().join(format!("plots/snapshot_{i}.svg")));
    }
    let first = silhouette_of(&stdout, "snapshot_0");
    let last = silhouette_of(&stdout, "snapshot_10000");
    assert!(last > first, "{first} -> {last}");

    let again = chatty(dir.path(), &args);
    assert_eq!(again.stdout, o.stdout);
}

#[test]
fn verify_passes_and_catches_the_reversal_mutation() {
    let dir = tempfile::tempdir().unwrap();
    let o = chatty(dir.path(), &["verify"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let again = chatty(dir.path(), &["verify"]);
    assert_eq!(o.stdout, again.stdout);

    let o = chatty(dir.path(), &["verify", "--inject-reversal-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("gradient-sign contract"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn adapted_curve_ends_above_the_source_only_curve() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("baseline.toml"),
        "lr = 0.01\nlambda1 = 0.0\nlambda2 = 0.0\nmcc = false\n",
    )
    .unwrap();
    fs::write(dir.path().join("chatty.toml"), "lr = 0.01\nmcc = false\n").unwrap();
    let o = chatty(
        dir.path(),
        &[
            "--quiet",
            "--out",
            "cmp",
            "compare",
            "baseline.toml",
            "chatty.toml",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("cmp/compare.csv")).unwrap();
    let last: Vec<f64> = csv
        .lines()
        .last()
        .unwrap()
        .split(',')
        .map(|f| f.parse().unwrap())
        .collect();
    assert!(
        last[4] > last[1],
        "baseline {} vs adapted {}",
        last[1],
        last[4]
    );
}
