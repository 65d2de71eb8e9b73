//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line
//! straight to stderr (bypassing output capture) and then asserts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use cedar_core::concepts::{match_axes, top_activating, ConceptVocabulary};
use cedar_core::io::load_embeddings;
use cedar_core::linalg::{expm, norm2, orthogonality_residual, skew_from};
use cedar_core::metrics::{active_count, cknna, cosine_mean, fvu, ic, ln_binomial};
use cedar_core::model::{topk_support, CedarModel};
use cedar_core::train::{column_mean, l1_batch_loss, loss_grad_a, CurriculumSchedule};
use cedar_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn report(n: u32, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n} ({name}): {verdict} [{:.2}s] {detail}",
        elapsed.as_secs_f64()
    );
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn random(n: usize, m: usize, rng: &mut ChaCha8Rng, scale: f64) -> Matrix {
    Matrix::from_fn(n, m, |_, _| rng.random_range(-scale..scale))
}

fn cedar(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cedar"))
        .args(args)
        .current_dir(dir)
        .env("CEDAR_THREADS", "1")
        .output()
        .expect("spawn cedar")
}

fn cedar_ok(args: &[&str], dir: &Path) -> Output {
    let out = cedar(args, dir);
    assert!(
        out.status.success(),
        "cedar {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Synthetic data plus all four trained models, built once per run.
struct Fixture {
    dir: tempfile::TempDir,
    cedar_time: Duration,
    sae_time: Duration,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

const SAE_VARIANTS: [&str; 3] = ["topk", "batchtopk", "relu"];

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        cedar_ok(&["generate", "--out", "data.emb"], d);
        let start = Instant::now();
        cedar_ok(
            &["train-cedar", "--data", "data.emb", "--out", "cedar.model"],
            d,
        );
        let cedar_time = start.elapsed();
        let start = Instant::now();
        for v in SAE_VARIANTS {
            let out = format!("{v}.sae");
            cedar_ok(
                &[
                    "train-sae",
                    "--data",
                    "data.emb",
                    "--out",
                    &out,
                    "--variant",
                    v,
                ],
                d,
            );
        }
        Fixture {
            dir,
            cedar_time,
            sae_time: start.elapsed(),
        }
    })
}

#[test]
fn criterion_1_orthogonality() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_ortho: f64 = 0.0;
    let mut worst_norm: f64 = 0.0;
    for d in [2, 8, 64, 768] {
        let a = random(d, d, &mut rng, 1.0);
        let u = expm(&skew_from(&a).unwrap()).unwrap();
        worst_ortho = worst_ortho.max(orthogonality_residual(&u));
        for _ in 0..5 {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ratio = norm2(&u.mul_vec(&v).unwrap()) / norm2(&v);
            worst_norm = worst_norm.max((ratio - 1.0).abs());
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_ortho <= 1e-8 && worst_norm <= 1e-10 && elapsed < Duration::from_secs(30);
    report(
        1,
        "orthogonality",
        pass,
        elapsed,
        &format!("max |U^T U - I| = {worst_ortho:.3e}, max |ratio - 1| = {worst_norm:.3e}"),
    );
}

/// Row supports plus the sign of every residual entry.
fn pattern(model: &CedarModel, z: &Matrix, k: usize) -> (Vec<Vec<usize>>, Vec<i8>) {
    let rotated = model.transform_batch(z).unwrap();
    let supports = rotated.row_iter().map(|r| topk_support(r, k)).collect();
    let recon = model.reconstruct_batch(z, k).unwrap();
    let signs = z
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| (a - b).partial_cmp(&0.0).map_or(0, |o| o as i8))
        .collect();
    (supports, signs)
}

#[test]
fn criterion_2_gradient_oracle() {
    let start = Instant::now();
    let (d, n, k, h) = (5, 8, 2, 1e-5);
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = random(d, d, &mut rng, 1.0);
        let z = random(n, d, &mut rng, 2.0);
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let model = CedarModel::new(a.clone(), b.clone()).unwrap();
        let grad = loss_grad_a(&model, &z, k).unwrap();
        let base = pattern(&model, &z, k);
        for i in 0..d {
            for j in 0..d {
                let shifted = |delta: f64| {
                    let mut p = a.clone();
                    p.set(i, j, a.get(i, j) + delta);
                    CedarModel::new(p, b.clone()).unwrap()
                };
                let (plus, minus) = (shifted(h), shifted(-h));
                if pattern(&plus, &z, k) != base || pattern(&minus, &z, k) != base {
                    skipped += 1;
                    continue;
                }
                let loss = |m: &CedarModel| {
                    l1_batch_loss(&z, &m.reconstruct_batch(&z, k).unwrap()).unwrap()
                };
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grad.get(i, j);
                // the diagonal is exactly zero on both sides
                worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-8));
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && checked >= 60 && elapsed < Duration::from_secs(10);
    report(
        2,
        "gradient oracle",
        pass,
        elapsed,
        &format!("max relative error {worst:.3e} over {checked} entries ({skipped} skipped)"),
    );
}

#[test]
fn criterion_3_losslessness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for (n, d) in [(50, 2), (200, 16), (100, 64), (300, 33)] {
        let z = random(n, d, &mut rng, 5.0);
        let a = random(d, d, &mut rng, 1.0);
        let model = CedarModel::new(a, column_mean(&z)).unwrap();
        worst = worst.max(fvu(&z, &model.reconstruct_batch(&z, d).unwrap()).unwrap());
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-12 && elapsed < Duration::from_secs(5);
    report(
        3,
        "losslessness",
        pass,
        elapsed,
        &format!("max FVU at k = D: {worst:.3e}"),
    );
}

/// Pairs each learned axis with a distinct true axis, greedily by |cosine|.
/// Returns `(source, cosine)` per learned axis.
fn align(u: &Matrix, q: &Matrix) -> Vec<(usize, f64)> {
    let d = u.rows();
    let mut pairs: Vec<(usize, usize, f64)> = Vec::with_capacity(d * d);
    for a in 0..d {
        for s in 0..d {
            let c =
                cedar_core::linalg::dot(u.row(a), q.row(s)) / (norm2(u.row(a)) * norm2(q.row(s)));
            pairs.push((a, s, c));
        }
    }
    pairs.sort_by(|x, y| {
        y.2.abs()
            .total_cmp(&x.2.abs())
            .then((x.0, x.1).cmp(&(y.0, y.1)))
    });
    let mut out = vec![(usize::MAX, 0.0); d];
    let (mut used_a, mut used_s) = (vec![false; d], vec![false; d]);
    for (a, s, c) in pairs {
        if !used_a[a] && !used_s[s] {
            used_a[a] = true;
            used_s[s] = true;
            out[a] = (s, c);
        }
    }
    out
}

#[test]
fn criterion_4_synthetic_recovery() {
    let fx = fixture();
    let start = Instant::now();
    let z = load_embeddings(fx.path("data.emb")).unwrap();
    let q = load_embeddings(fx.path("data.emb.q.emb")).unwrap();
    let model = CedarModel::load(fx.path("cedar.model")).unwrap();

    let err = fvu(&z, &model.reconstruct_batch(&z, 3).unwrap()).unwrap();
    let rotated = model.transform_batch(&z).unwrap();
    let energy = rotated
        .row_iter()
        .map(|r| {
            let total: f64 = r.iter().map(|v| v * v).sum();
            let top: f64 = topk_support(r, 3).iter().map(|&i| r[i] * r[i]).sum();
            if total > 0.0 {
                top / total
            } else {
                1.0
            }
        })
        .sum::<f64>()
        / z.rows() as f64;
    let aligned = align(model.rotation(), &q)
        .iter()
        .filter(|(_, c)| c.abs() > 0.9)
        .count();
    let elapsed = fx.cedar_time + start.elapsed();
    let pass = err < 0.05 && energy > 0.95 && aligned >= 13 && elapsed < Duration::from_secs(300);
    report(
        4,
        "synthetic recovery",
        pass,
        elapsed,
        &format!("FVU@3 = {err:.4}, top-3 energy = {energy:.4}, aligned axes = {aligned}/16"),
    );
}

fn compare_rows(fx: &Fixture, extra: &[&str]) -> (Output, Vec<Value>) {
    let mut args = vec![
        "compare",
        "--models",
        "cedar.model,topk.sae,batchtopk.sae,relu.sae",
        "--data",
        "data.emb",
        "--labels",
        "data.emb.labels",
        "--out-csv",
        "compare.csv",
        "--out-json",
        "compare.json",
    ];
    args.extend_from_slice(extra);
    let out = cedar(&args, fx.dir.path());
    let text = std::fs::read_to_string(fx.path("compare.json")).expect("compare wrote JSON");
    let rows: Vec<Value> = serde_json::from_str(&text).unwrap();
    (out, rows)
}

fn k_at(rows: &[Value], model: &str, target: f64) -> Option<f64> {
    rows.iter()
        .find(|r| r["model"] == model && r["target_fvu"].as_f64() == Some(target))
        .and_then(|r| r["k_mean"].as_f64())
}

const TARGETS: [f64; 3] = [0.25, 0.30, 0.35];
const MODELS: [&str; 4] = ["cedar", "topk-sae", "batchtopk-sae", "relu-sae"];

#[test]
fn criterion_5_matched_fvu() {
    let fx = fixture();
    let start = Instant::now();
    let (out, rows) = compare_rows(fx, &[]);
    let elapsed = fx.cedar_time + fx.sae_time + start.elapsed();
    let mut problems = Vec::new();
    if !out.status.success() {
        problems.push(format!("compare exited with {:?}", out.status.code()));
    }
    if rows.len() != 12 {
        problems.push(format!("{} rows instead of 12", rows.len()));
    }
    let mut summary = Vec::new();
    for model in MODELS {
        let mut ks = Vec::new();
        for t in TARGETS {
            let row = rows
                .iter()
                .find(|r| r["model"] == model && r["target_fvu"].as_f64() == Some(t));
            match row.and_then(|r| r["fvu"].as_f64()) {
                Some(f) if (f - t).abs() <= 0.005 => {}
                other => problems.push(format!("{model} at {t}: achieved {other:?}")),
            }
            ks.push(k_at(&rows, model, t).unwrap_or(f64::NAN));
        }
        if !(ks[0] >= ks[1] && ks[1] >= ks[2]) {
            problems.push(format!("{model}: K not non-increasing {ks:?}"));
        }
        summary.push(format!("{model} K={:.2}/{:.2}/{:.2}", ks[0], ks[1], ks[2]));
    }
    let pass = problems.is_empty() && elapsed < Duration::from_secs(600);
    let detail = if problems.is_empty() {
        summary.join(", ")
    } else {
        problems.join("; ")
    };
    report(5, "matched FVU", pass, elapsed, &detail);
}

#[test]
fn criterion_6_baseline_ordering() {
    let fx = fixture();
    let start = Instant::now();
    let (out, rows) = compare_rows(fx, &["--assert-trends"]);
    let mut problems = Vec::new();
    let mut summary = Vec::new();
    for t in TARGETS {
        let relu = k_at(&rows, "relu-sae", t).unwrap_or(f64::NAN);
        let topk = k_at(&rows, "topk-sae", t).unwrap_or(f64::NAN);
        let batch = k_at(&rows, "batchtopk-sae", t).unwrap_or(f64::NAN);
        if !(relu > topk && relu > batch) {
            problems.push(format!(
                "target {t}: relu K {relu:.2} vs topk {topk:.2}, batchtopk {batch:.2}"
            ));
        }
        summary.push(format!(
            "{t}: relu {relu:.2} > topk {topk:.2}, batchtopk {batch:.2}"
        ));
    }
    // the CLI's own trend check must agree with this one
    let cli_agrees = out.status.success() == problems.is_empty();
    let elapsed = fx.cedar_time + fx.sae_time + start.elapsed();
    let pass = problems.is_empty() && cli_agrees && elapsed < Duration::from_secs(600);
    let detail = if problems.is_empty() {
        summary.join("; ")
    } else {
        problems.join("; ")
    };
    report(6, "baseline ordering", pass, elapsed, &detail);
}

#[test]
fn criterion_7_metric_identities() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = random(200, 12, &mut rng, 3.0);
    let mean = column_mean(&z);
    let mean_pred = Matrix::from_fn(200, 12, |_, j| mean[j]);
    let f_mean = fvu(&z, &mean_pred).unwrap();

    let row = Matrix::from_rows(&[vec![1.0, 0.0, -2.0, 0.0]]).unwrap();
    let ic4 = ic(4, &row, 0.0);

    // Integer per-row counts with mean 11.549 over 768 latents.
    let h = Matrix::from_fn(1000, 768, |i, j| {
        if j < if i < 549 { 12 } else { 11 } {
            1.0
        } else {
            0.0
        }
    });
    let k_mean = active_count(&h, 0.0);
    let ic_ref = ic(768, &h, 0.0);
    let ic_rel = (ic_ref - 57.381).abs() / 57.381;
    let ln_c_12 = ln_binomial(768.0, 12.0);

    let zk = z.select_rows(&(0..100).collect::<Vec<_>>());
    let self_cknna = cknna(&zk, &zk, 10).unwrap();
    let r = expm(&skew_from(&random(12, 12, &mut rng, 1.0)).unwrap()).unwrap();
    let rot_cknna = cknna(&zk, &zk.matmul(&r).unwrap(), 10).unwrap();
    let cs = cosine_mean(&z, &z.scale(2.0)).unwrap();

    let elapsed = start.elapsed();
    let pass = f_mean == 1.0
        && (ic4 - 6f64.ln()).abs() <= 1e-12
        && (k_mean - 11.549).abs() < 1e-9
        && ic_rel < 0.05
        && (self_cknna - 1.0).abs() < 1e-12
        && (rot_cknna - 1.0).abs() <= 1e-8
        && (cs - 1.0).abs() < 1e-12
        && elapsed < Duration::from_secs(60);
    report(
        7,
        "metric identities",
        pass,
        elapsed,
        &format!(
            "fvu(mean) = {f_mean}, ic(4,2) - ln 6 = {:.1e}, IC at K=11.549 = {ic_ref:.3} ({:.2}% from 57.381; ln C(768,12) = {ln_c_12:.3}), cknna self = {self_cknna}, rotated = {rot_cknna:.12}, CS(Z,2Z) = {cs}",
            ic4 - 6f64.ln(),
            100.0 * ic_rel
        ),
    );
}

#[test]
fn criterion_8_curriculum() {
    let start = Instant::now();
    let (d, tau) = (768, 1200);
    let s = CurriculumSchedule::new(d, tau, 10).unwrap();
    let ends = s.k_of_t(0) == d && s.k_of_t(tau) == 10;
    let monotone = (1..=tau).all(|t| s.k_of_t(t) <= s.k_of_t(t - 1));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let draws: Vec<usize> = (0..100_000).map(|_| s.sample_k(&mut rng)).collect();
    let in_range = draws.iter().all(|k| (1..=19).contains(k));
    let mean = draws.iter().sum::<usize>() as f64 / draws.len() as f64;
    let elapsed = start.elapsed();
    let pass = ends
        && monotone
        && in_range
        && (mean - 10.0).abs() <= 0.05
        && elapsed < Duration::from_secs(5);
    report(
        8,
        "curriculum",
        pass,
        elapsed,
        &format!("k(0) = {}, k(tau) = {}, monotone = {monotone}, sample mean = {mean:.4}, range ok = {in_range}", s.k_of_t(0), s.k_of_t(tau)),
    );
}

/// Runs `args` in two fresh directories and compares every produced file
/// and stdout byte for byte.
type Setup<'a> = &'a dyn Fn(&Path);

fn runs_identical(setup: Setup, args: &[&str]) -> Result<(), String> {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut outputs = Vec::new();
    for dir in &dirs {
        setup(dir.path());
        let before: Vec<_> = listing(dir.path());
        let out = cedar(args, dir.path());
        if !out.status.success() {
            return Err(format!(
                "{args:?}: {}",
                String::from_utf8_lossy(&out.stderr)
            ));
        }
        let mut files: Vec<(String, Vec<u8>)> = listing(dir.path())
            .into_iter()
            .filter(|n| !before.contains(n))
            .map(|n| {
                let bytes = std::fs::read(dir.path().join(&n)).unwrap();
                (n, bytes)
            })
            .collect();
        files.push(("<stdout>".into(), out.stdout));
        outputs.push(files);
    }
    if outputs[0] != outputs[1] {
        return Err(format!("{} differs between runs", args[0]));
    }
    Ok(())
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn criterion_9_determinism() {
    let start = Instant::now();
    let small = |d: &Path| {
        cedar_ok(
            &["generate", "--out", "data.emb", "--n", "400", "--seed", "7"],
            d,
        );
    };
    let trained = |d: &Path| {
        small(d);
        cedar_ok(
            &[
                "train-cedar",
                "--data",
                "data.emb",
                "--out",
                "cedar.model",
                "--steps",
                "300",
            ],
            d,
        );
        cedar_ok(
            &[
                "train-sae",
                "--data",
                "data.emb",
                "--out",
                "relu.sae",
                "--variant",
                "relu",
                "--steps",
                "200",
            ],
            d,
        );
        std::fs::copy(d.join("data.emb.q.emb"), d.join("vocab.emb")).unwrap();
        let names: String = (0..16).map(|i| format!("axis_{i}\n")).collect();
        std::fs::write(d.join("vocab.txt"), names).unwrap();
    };
    let none = |_: &Path| {};
    let cases: Vec<(Setup, Vec<&str>)> = vec![
        (
            &none,
            vec!["generate", "--out", "data.emb", "--n", "400", "--seed", "7"],
        ),
        (
            &small,
            vec![
                "train-cedar",
                "--data",
                "data.emb",
                "--out",
                "m.model",
                "--steps",
                "300",
                "--seed",
                "3",
            ],
        ),
        (
            &small,
            vec![
                "train-sae",
                "--data",
                "data.emb",
                "--out",
                "s.sae",
                "--variant",
                "batchtopk",
                "--steps",
                "200",
                "--seed",
                "3",
            ],
        ),
        (
            &trained,
            vec![
                "eval",
                "--model",
                "cedar.model",
                "--data",
                "data.emb",
                "--labels",
                "data.emb.labels",
                "--out-json",
                "e.json",
                "--probe-epochs",
                "20",
            ],
        ),
        (
            &trained,
            vec![
                "compare",
                "--models",
                "cedar.model,relu.sae",
                "--data",
                "data.emb",
                "--out-csv",
                "c.csv",
                "--out-json",
                "c.json",
            ],
        ),
        (
            &trained,
            vec![
                "explain",
                "--model",
                "cedar.model",
                "--vocab",
                "vocab.emb",
                "--names",
                "vocab.txt",
                "--data",
                "data.emb",
                "--top-activating",
                "2,20",
                "--out",
                "x.json",
                "--top-csv",
                "x.csv",
            ],
        ),
    ];
    let mut problems = Vec::new();
    for (setup, args) in &cases {
        if let Err(e) = runs_identical(*setup, args) {
            problems.push(e);
        }
    }
    let elapsed = start.elapsed();
    let detail = if problems.is_empty() {
        format!("{} subcommands byte-identical across reruns", cases.len())
    } else {
        problems.join("; ")
    };
    report(9, "determinism", problems.is_empty(), elapsed, &detail);
}

#[test]
fn criterion_10_concept_pipeline() {
    let fx = fixture();
    let start = Instant::now();
    let z = load_embeddings(fx.path("data.emb")).unwrap();
    let q = load_embeddings(fx.path("data.emb.q.emb")).unwrap();
    let sources = load_embeddings(fx.path("data.emb.sources.emb")).unwrap();
    let model = CedarModel::load(fx.path("cedar.model")).unwrap();
    let d = q.rows();

    // Both orientations of every true axis, so a sign flip in a learned axis
    // still lands on its own source.
    let names: Vec<String> = (0..2 * d)
        .map(|j| format!("source_{}{}", j / 2, if j % 2 == 0 { "+" } else { "-" }))
        .collect();
    let vocab_rows = Matrix::from_fn(2 * d, d, |j, c| {
        if j % 2 == 0 {
            q.get(j / 2, c)
        } else {
            -q.get(j / 2, c)
        }
    });
    let vocab = ConceptVocabulary::new(names, vocab_rows).unwrap();
    let map = match_axes(&model, &vocab).unwrap();
    let assignment = align(model.rotation(), &q);

    let m = 50;
    let mut matched = 0;
    let mut overlaps = Vec::new();
    for (axis, &(source, cos)) in assignment.iter().enumerate() {
        let hit = map.axes[axis].concept / 2 == source && map.axes[axis].cosine > 0.9;
        if !hit {
            continue;
        }
        matched += 1;
        let sign = cos.signum();
        let mut truth: Vec<(usize, f64)> = (0..z.rows())
            .map(|i| (i, sign * sources.get(i, source)))
            .collect();
        truth.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let truth: std::collections::HashSet<usize> = truth[..m].iter().map(|p| p.0).collect();
        let found = top_activating(&model, &z, axis, m).unwrap();
        let common = found.iter().filter(|(i, _)| truth.contains(i)).count();
        overlaps.push(common as f64 / m as f64);
    }
    let min_overlap = overlaps.iter().copied().fold(1.0, f64::min);
    let mean_overlap = overlaps.iter().sum::<f64>() / overlaps.len().max(1) as f64;
    let elapsed = start.elapsed();
    let pass = matched as f64 >= 0.9 * d as f64
        && !overlaps.is_empty()
        && min_overlap >= 0.8
        && elapsed < Duration::from_secs(60);
    report(
        10,
        "concept pipeline",
        pass,
        elapsed,
        &format!("{matched}/{d} axes matched, top-{m} overlap min {min_overlap:.2} mean {mean_overlap:.2}"),
    );
}
