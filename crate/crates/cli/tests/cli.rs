use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tasksod::io;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn tasksod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tasksod"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tasksod(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the single stderr line of a failing run.
fn fail(args: &[&str]) -> (i32, String) {
    let out = tasksod(args);
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {stderr:?}");
    (out.status.code().unwrap(), lines[0].to_string())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn build_dataset_matches_hand_computed_scores() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixtures().join("build");
    ok(&["build-dataset", "--input", s(&input), "--out", s(dir.path())]);

    let masks = io::list_png_names(&dir.path().join("masks")).unwrap();
    assert_eq!(masks, ["img000.png", "img001.png", "img002.png"]);

    let mut fixations: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    let text = std::fs::read_to_string(input.join("fixations.csv")).unwrap();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let v = |k: usize| f[k].parse::<f64>().unwrap();
        fixations.entry(f[0].to_string()).or_default().push((v(1), v(2), v(3)));
    }

    let scores = std::fs::read_to_string(dir.path().join("scores.csv")).unwrap();
    let mut rows = scores.lines();
    assert_eq!(rows.next(), Some("image_id,instance_id,category,pixel_count,score,selected"));
    let rows: Vec<Vec<String>> = rows.map(|l| l.split(',').map(str::to_string).collect()).collect();

    for (image_id, points) in &fixations {
        let ids = io::read_instance_ids(&input.join("instances").join(format!("{image_id}.png"))).unwrap();
        let (h, w) = ids.dim();
        let sigma = w as f64 / 20.0;
        let mut density = vec![vec![0.0; w]; h];
        let mut total = 0.0;
        for (y, row) in density.iter_mut().enumerate() {
            for (x, d) in row.iter_mut().enumerate() {
                for &(fx, fy, dur) in points {
                    let r2 = (x as f64 - fx).powi(2) + (y as f64 - fy).powi(2);
                    *d += dur * (-r2 / (2.0 * sigma * sigma)).exp();
                }
                total += *d;
            }
        }
        let mut expected: BTreeMap<u16, (usize, f64)> = BTreeMap::new();
        for y in 0..h {
            for x in 0..w {
                let id = ids[[y, x]];
                if id >= 1000 {
                    let e = expected.entry(id).or_default();
                    e.0 += 1;
                    e.1 += density[y][x] / total;
                }
            }
        }
        let max = expected
            .values()
            .map(|&(n, m)| (1.0 + 1.0 / n as f64) * m)
            .fold(0.0, f64::max);
        let mine: Vec<&Vec<String>> = rows.iter().filter(|r| &r[0] == image_id).collect();
        assert_eq!(mine.len(), expected.len(), "{image_id}");
        let mask = io::read_mask(&dir.path().join("masks").join(format!("{image_id}.png"))).unwrap();
        let mut want_mask = vec![vec![false; w]; h];
        for (row, (&id, &(n, mass))) in mine.iter().zip(&expected) {
            let score = (1.0 + 1.0 / n as f64) * mass;
            let selected = score >= 0.8 * max;
            assert_eq!(row[1], id.to_string());
            assert_eq!(row[3], n.to_string());
            let got: f64 = row[4].parse().unwrap();
            assert!((got - score).abs() < 1e-8, "{image_id}/{id}: {got} vs {score}");
            assert_eq!(row[5], if selected { "1" } else { "0" });
            if selected {
                for y in 0..h {
                    for x in 0..w {
                        want_mask[y][x] |= ids[[y, x]] == id;
                    }
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                assert_eq!(mask[[y, x]], want_mask[y][x], "{image_id} pixel ({x}, {y})");
            }
        }
    }
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("command=build-dataset\n"));
    assert!(manifest.contains("ratio=0.8\n"));
    assert!(manifest.contains("seed="));
}

#[test]
fn evaluate_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let gt = fixtures().join("eval/gt");
    ok(&["evaluate", "--pred", s(&gt), "--gt", s(&gt), "--out", s(dir.path())]);
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let report = tasksod::MetricReport::from_csv(&text).unwrap();
    assert_eq!(report.n_images, 4);
    assert_eq!(report.mae, 0.0);
    assert!((report.f_beta - 1.0).abs() < 1e-12);
    assert!((report.weighted_f_beta - 1.0).abs() < 1e-12);
    assert!((report.s_measure - 1.0).abs() < 1e-12);
}

#[test]
fn benchmark_prints_the_reference_row() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixtures().join("eval");
    let eval_out = dir.path().join("eval");
    ok(&["evaluate", "--pred", s(&f.join("pred")), "--gt", s(&f.join("gt")), "--out", s(&eval_out)]);
    let report = eval_out.join("metrics.csv");
    let stdout = ok(&[
        "benchmark",
        "--method",
        "Ours",
        "--phase",
        "after",
        "--report",
        s(&report),
        "--out",
        s(&dir.path().join("bench")),
    ]);
    assert!(stdout.contains("Ours,after,0.133,0.751,0.811,0.785"), "{stdout}");
    assert!(stdout.contains("MAE            0.133"), "{stdout}");
    let csv = std::fs::read_to_string(dir.path().join("bench/benchmark.csv")).unwrap();
    assert!(csv.lines().nth(2).unwrap().starts_with("delta,,"));

    let (code, line) = fail(&[
        "benchmark",
        "--method",
        "NoSuchNet",
        "--phase",
        "after",
        "--out",
        s(&dir.path().join("b2")),
    ]);
    assert_eq!(code, 2);
    assert!(line.starts_with("error: code=2 kind=usage message="), "{line}");
}

#[test]
fn stats_writes_tables_and_charts() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["stats", "--masks", s(&fixtures().join("train/masks")), "--out", s(dir.path())]);
    let csv = std::fs::read_to_string(dir.path().join("stats.csv")).unwrap();
    let mut sums = BTreeMap::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        *sums.entry(f[0].to_string()).or_insert(0) += f[3].parse::<usize>().unwrap();
    }
    assert_eq!(sums.values().collect::<Vec<_>>(), [&4, &4]);
    for png in ["aam.png", "count_histogram.png", "area_histogram.png", "manifest.txt"] {
        assert!(dir.path().join(png).exists(), "{png}");
    }
    let aam = io::read_gray(&dir.path().join("aam.png")).unwrap();
    assert_eq!(aam.dim(), (32, 64));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    let f = fixtures();

    let (code, line) = fail(&["frobnicate"]);
    assert_eq!(code, 2, "{line}");
    let (code, line) = fail(&["evaluate", "--pred", "x"]);
    assert_eq!(code, 2, "{line}");
    let (code, line) = fail(&[
        "build-dataset",
        "--input",
        s(&f.join("build")),
        "--out",
        out,
        "--set",
        "bogus=1",
    ]);
    assert_eq!((code, line.contains("bogus")), (2, true), "{line}");
    let (code, line) = fail(&[
        "train-general",
        "--images",
        s(&f.join("train/images")),
        "--masks",
        s(&f.join("train/masks")),
        "--out",
        out,
        "--set",
        "learnin_rate=0.1",
    ]);
    assert_eq!(code, 2, "{line}");

    // Predictions and ground truth with no names in common.
    let (code, line) = fail(&[
        "evaluate",
        "--pred",
        s(&f.join("eval/pred")),
        "--gt",
        s(&f.join("train/masks")),
        "--out",
        out,
    ]);
    assert_eq!(code, 3, "{line}");
    assert!(line.starts_with("error: code=3 kind=data message=missing counterpart files: "), "{line}");

    let (code, line) = fail(&[
        "train-general",
        "--images",
        s(&f.join("train/images")),
        "--masks",
        s(&f.join("train/masks")),
        "--out",
        out,
        "--set",
        "iterations=5",
        "--set",
        "learning_rate=1e300",
    ]);
    assert_eq!(code, 4, "{line}");
    assert!(line.contains("diverged"), "{line}");
}

fn listing(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Both training stages, inference and evaluation, run twice into separate
/// directories: every output must be byte-identical and nothing may be
/// written next to the inputs.
#[test]
fn training_pipeline_is_reproducible() {
    let work = tempfile::tempdir().unwrap();
    let data = work.path().join("data");
    let samples = tasksod::synthetic::training_set(4, 32, 64, 3);
    tasksod::synthetic::write_training_set(&data, &samples).unwrap();
    let before = listing(&data);
    let (images, masks) = (data.join("images"), data.join("masks"));
    let config = work.path().join("task.cfg");
    std::fs::write(&config, "# short run\niterations = 12\nbatch_size=2\n").unwrap();

    let run = |name: &str| -> PathBuf {
        let root = work.path().join(name);
        let (g, t, i, e) = (root.join("general"), root.join("task"), root.join("maps"), root.join("eval"));
        ok(&[
            "--deterministic",
            "train-general",
            "--images",
            s(&images),
            "--masks",
            s(&masks),
            "--out",
            s(&g),
            "--set",
            "iterations=8",
        ]);
        let stdout = ok(&[
            "--deterministic",
            "train-task",
            "--images",
            s(&images),
            "--masks",
            s(&masks),
            "--general",
            s(&g.join("final.ckpt")),
            "--config",
            s(&config),
            "--out",
            s(&t),
        ]);
        assert!(stdout.contains("general digest unchanged"), "{stdout}");
        ok(&[
            "--deterministic",
            "infer",
            "--checkpoint",
            s(&t.join("final.ckpt")),
            "--images",
            s(&images),
            "--out",
            s(&i),
        ]);
        ok(&["--deterministic", "evaluate", "--pred", s(&i), "--gt", s(&masks), "--out", s(&e)]);
        root
    };
    let a = run("a");
    let b = run("b");
    let (la, lb) = (listing(&a), listing(&b));
    assert!(la.len() > 20);
    assert_eq!(la.len(), lb.len());
    for ((pa, ba), (pb, bb)) in la.iter().zip(&lb) {
        assert_eq!(pa, pb);
        if pa.file_name().unwrap() == "manifest.txt" {
            // Manifests name their own directories; everything else must match.
            let norm = |bytes: &[u8], root: &Path| String::from_utf8_lossy(bytes).replace(s(root), "<root>");
            assert_eq!(norm(ba, &a), norm(bb, &b), "{pa:?}");
        } else {
            assert!(ba == bb, "{pa:?} differs between identical runs");
        }
    }
    let manifest = std::fs::read_to_string(a.join("task/manifest.txt")).unwrap();
    for line in ["command=train-task", "deterministic=true", "iterations=12", "batch_size=2", "seed="] {
        assert!(manifest.contains(line), "{line} missing from\n{manifest}");
    }
    assert_eq!(listing(&data), before, "inputs were modified");
}

#[test]
fn grad_check_reports_every_group() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["grad-check", "--per-group", "15", "--out", s(dir.path())]);
    assert!(stdout.contains("gradient check passed"), "{stdout}");
    let csv = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    let groups: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(groups, ["general", "akt", "task", "decoder"]);

    let (code, line) = fail(&["grad-check", "--groups", "heads", "--out", s(dir.path())]);
    assert_eq!(code, 2, "{line}");
}
