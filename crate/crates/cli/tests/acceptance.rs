//! Acceptance run: one PASS/FAIL line per criterion and a summary naming the
//! failures. Set `SBLWTA_ACCEPTANCE_STRICT=1` to exit with status 1 on any FAIL;
//! otherwise the run exits 0 so the rest of the workspace tests still execute.
//!
//! MNIST files are read from `SBLWTA_MNIST_DIR` (default `<workspace>/data/mnist`);
//! `scripts/fetch_mnist.sh` downloads them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use sblwta_core::attacks::{check_budget, fgsm, pgd, AttackConfig};
use sblwta_core::distributions::{
    kl_kumaraswamy_beta, sample_gumbel_softmax, sample_kumaraswamy, Temperature, KL_SERIES_TERMS,
};
use sblwta_core::ecoc::{bit_probabilities, build_code, class_probabilities, decode, CodeKind, TransformKind};
use sblwta_core::layers::{CompetitiveLayer, LwtaDenseLayer, Sampling};
use sblwta_core::model::{Head, LayerPlan, Model};
use sblwta_core::rng;
use sblwta_core::tensor::argmax;
use sblwta_core::trainer::gradient_check;
use sblwta_core::Tensor;
use serde_json::Value;
use statrs::function::gamma::{gamma, ln_gamma};

type Outcome = Result<String, String>;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---- 1. gradient integrity ----------------------------------------------------

fn gradient_integrity() -> Outcome {
    let code = build_code(2, 2, CodeKind::Identity).map_err(|e| e.to_string())?;
    let plan = [
        LayerPlan::LwtaDense { blocks: 2, units: 2, bias: true },
        LayerPlan::GatedOutput { bias: true },
    ];
    let head = Head::Ecoc { code, transform: TransformKind::Tanh };
    let model = Model::build(&[4], &plan, head, 1.0, &mut rng::stream(101, 0)).map_err(|e| e.to_string())?;
    if model.num_params() > 1000 {
        return Err(format!("{} parameters", model.num_params()));
    }
    let x = Tensor::from_fn(&[4, 4], |i| ((i * 5) % 7) as f64 / 7.0);
    let tau = Temperature::new(0.7).map_err(|e| e.to_string())?;
    let gc = gradient_check(&model, &x, &[0, 1, 1, 0], tau, 1.0, 8, 3, 1e-5).map_err(|e| e.to_string())?;
    ensure(
        gc.max_rel_error < 1e-4,
        format!("max rel error {:.3e} over {} coordinates (< 1e-4)", gc.max_rel_error, gc.checked),
    )
}

// ---- 2. distribution oracles ------------------------------------------------

fn kuma_moment(a: f64, b: f64, k: f64) -> f64 {
    b * gamma(1.0 + k / a) * gamma(b) / gamma(1.0 + k / a + b)
}

/// `E_q[log q - log p]` by stratified inverse-CDF sampling of Kumaraswamy(a, b).
fn kl_monte_carlo(a: f64, b: f64, alpha: f64, n: usize) -> f64 {
    let log_beta_alpha_1 = ln_gamma(alpha) - ln_gamma(alpha + 1.0);
    let mut total = 0.0;
    for i in 0..n {
        let u = (i as f64 + 0.5) / n as f64;
        let x = (-(u.ln() / b).exp_m1()).powf(1.0 / a);
        if x > 0.0 && x < 1.0 {
            let log_q = a.ln() + b.ln() + (a - 1.0) * x.ln() + (b - 1.0) * (-x.powf(a)).ln_1p();
            let log_p = -log_beta_alpha_1 + (alpha - 1.0) * x.ln();
            total += log_q - log_p;
        }
    }
    total / n as f64
}

fn distribution_oracles() -> Outcome {
    let n = 100_000;
    let mut r = rng::stream(102, 0);
    let mut worst_moment = 0.0f64;
    for &(a, b) in &[(0.5, 0.5), (2.0, 3.0), (5.0, 1.0)] {
        let xs: Vec<f64> = (0..n).map(|_| sample_kumaraswamy(a, b, r.gen())).collect();
        for k in [1.0, 2.0] {
            let emp = xs.iter().map(|x| x.powf(k)).sum::<f64>() / n as f64;
            let want = kuma_moment(a, b, k);
            worst_moment = worst_moment.max((emp - want).abs() / want);
        }
    }
    let logits = [1.2, -0.3, 0.4];
    let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
    let mut counts = [0usize; 3];
    let tau = Temperature::new(0.5).map_err(|e| e.to_string())?;
    for _ in 0..n {
        let noise: Vec<f64> = (0..3).map(|_| r.gen()).collect();
        let s = sample_gumbel_softmax(&logits, tau, &noise).map_err(|e| e.to_string())?;
        counts[argmax(&s)] += 1;
    }
    let tv = 0.5
        * counts
            .iter()
            .zip(&logits)
            .map(|(&c, l)| (c as f64 / n as f64 - l.exp() / z).abs())
            .sum::<f64>();
    let grid = [0.5, 1.0, 2.0, 5.0];
    let mut worst_kl = 0.0f64;
    for &a in &grid {
        for &b in &grid {
            for &alpha in &grid {
                let kl = kl_kumaraswamy_beta(a, b, alpha, KL_SERIES_TERMS).map_err(|e| e.to_string())?;
                worst_kl = worst_kl.max((kl - kl_monte_carlo(a, b, alpha, 1_000_000)).abs());
            }
        }
    }
    ensure(
        worst_moment < 0.01 && tv < 0.02 && worst_kl < 0.02,
        format!(
            "moment rel err {worst_moment:.2e} (< 1e-2), gumbel TV {tv:.2e} (< 0.02), KL grid abs err {worst_kl:.2e} (< 0.02)"
        ),
    )
}

// ---- 3. competition invariants ------------------------------------------------

fn competition_invariants() -> Outcome {
    let mut r = rng::stream(103, 0);
    let mut worst_row = 0.0f64;
    for trial in 0..10_000 {
        let (j, k, u) = (r.gen_range(1..6), r.gen_range(1..5), r.gen_range(2..5));
        let mut layer = LwtaDenseLayer::new(j, k, u, r.gen_range(0.5..3.0), trial % 2 == 0, &mut r)
            .map_err(|e| e.to_string())?;
        layer.gate.gate_logit = Tensor::from_fn(&[j, k], |_| r.gen_range(-3.0..3.0));
        let x = Tensor::from_fn(&[3, j], |_| r.gen_range(0.0..1.0));
        let s = layer.forward_sample(&x, Sampling::Exact, &mut r).map_err(|e| e.to_string())?;
        if let Some(block) = s.output.data().chunks(u).find(|b| b.iter().filter(|v| **v != 0.0).count() > 1) {
            return Err(format!("trial {trial}: block {block:?} has several nonzero outputs"));
        }
        let probs = s.winner_probs.ok_or("no winner probabilities")?;
        for row in probs.data().chunks(u) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let pi = layer.gate.sample_posterior_pi(&mut r);
        if pi.windows(2).any(|w| w[1] > w[0]) {
            return Err(format!("trial {trial}: stick products increase: {pi:?}"));
        }
    }
    ensure(
        worst_row <= 1e-9,
        format!("10000 passes sparse, stick products non-increasing, worst row-sum error {worst_row:.1e} (<= 1e-9)"),
    )
}

// ---- 4. attack soundness ------------------------------------------------------

fn attack_soundness() -> Outcome {
    let code = build_code(3, 4, CodeKind::Hadamard).map_err(|e| e.to_string())?;
    let plan = [
        LayerPlan::LwtaDense { blocks: 4, units: 2, bias: true },
        LayerPlan::GatedOutput { bias: true },
    ];
    let head = Head::Ecoc { code, transform: TransformKind::Tanh };
    let model = Model::build(&[4], &plan, head, 1.0, &mut rng::stream(104, 0)).map_err(|e| e.to_string())?;
    let mut r = rng::stream(104, 1);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let x = Tensor::from_fn(&[2, 4], |_| r.gen_range(0.0..1.0));
        let labels = [r.gen_range(0..3), r.gen_range(0..3)];
        let cfg = AttackConfig {
            epsilon: r.gen_range(0.0..0.5),
            steps: r.gen_range(1..5),
            step_size: r.gen_range(0.01..0.3),
            random_start: r.gen(),
            eot_samples: r.gen_range(1..4),
            input_bounds: (0.0, 1.0),
        };
        let adv = if i % 2 == 0 { pgd(&model, &x, &labels, &cfg, &mut r) } else { fgsm(&model, &x, &labels, &cfg, &mut r) }
            .map_err(|e| e.to_string())?;
        check_budget(&x, &adv, &cfg).map_err(|e| format!("run {i}: {e}"))?;
        for (a, b) in adv.data().iter().zip(x.data()) {
            worst = worst.max((a - b).abs() - cfg.epsilon);
            if !(0.0..=1.0).contains(a) || (a - b).abs() > cfg.epsilon + 1e-12 {
                return Err(format!("run {i}: {b} -> {a} with epsilon {}", cfg.epsilon));
            }
        }
    }
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    for _ in 0..100 {
        let x = Tensor::from_fn(&[3, 4], |_| r.gen_range(0.0..1.0));
        let labels = [0, 1, 2];
        let eps = r.gen_range(0.01..0.3);
        let cfg = AttackConfig { epsilon: eps, steps: 1, step_size: eps, random_start: false, eot_samples: 3, input_bounds: (0.0, 1.0) };
        let seed = r.gen();
        let a = pgd(&model, &x, &labels, &cfg, &mut rng::stream(seed, 0)).map_err(|e| e.to_string())?;
        let b = fgsm(&model, &x, &labels, &cfg, &mut rng::stream(seed, 0)).map_err(|e| e.to_string())?;
        if bits(&a) != bits(&b) {
            return Err("single-step PGD differs from FGSM".into());
        }
    }
    Ok(format!("1000 runs within budget and box (max excess {worst:.1e}); PGD(1 step) == FGSM bitwise on 100 draws"))
}

// ---- 5. ECOC decoding ---------------------------------------------------------

fn ecoc_decoding() -> Outcome {
    let code = build_code(10, 16, CodeKind::Hadamard).map_err(|e| e.to_string())?;
    let mut min = usize::MAX;
    for a in 0..10 {
        for b in a + 1..10 {
            min = min.min(code.row(a).iter().zip(code.row(b)).filter(|(x, y)| x != y).count());
        }
    }
    let identity = build_code(10, 10, CodeKind::Identity).map_err(|e| e.to_string())?;
    let mut r = rng::stream(105, 0);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let logits: Vec<f64> = (0..10).map(|_| r.gen_range(-6.0..6.0)).collect();
        let t = Tensor::new(vec![1, 10], logits.clone()).map_err(|e| e.to_string())?;
        let bits = bit_probabilities(&t, TransformKind::Logistic).map_err(|e| e.to_string())?;
        let probs = class_probabilities(&bits, &identity).map_err(|e| e.to_string())?;
        if decode(&probs)[0].0 != argmax(&logits) {
            mismatches += 1;
        }
    }
    ensure(
        min == 8 && mismatches == 0,
        format!("Hadamard(10,16) min distance {min} (== 8); identity decode mismatches {mismatches}/1000 (== 0)"),
    )
}

// ---- CLI helpers --------------------------------------------------------------

fn sblwta(args: &[&str], envs: &[(&str, &str)]) -> Result<String, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sblwta"));
    cmd.args(args).current_dir(workspace());
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`sblwta {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn json_f64(text: &str, key: &str) -> Result<f64, String> {
    let v: Value = serde_json::from_str(text).map_err(|e| format!("bad JSON ({e}): {text}"))?;
    v[key].as_f64().ok_or_else(|| format!("no `{key}` in {text}"))
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("SBLWTA_MNIST_DIR").map(PathBuf::from).unwrap_or_else(|| workspace().join("data/mnist"))
}

struct MnistRun {
    lwta_dir: PathBuf,
    data_set: String,
}

// ---- 6. desk-scale MNIST --------------------------------------------------------

fn mnist_experiment(root: &Path, run: &mut Option<MnistRun>) -> Outcome {
    let dir = mnist_dir();
    if !dir.join("t10k-labels-idx1-ubyte").exists() {
        return Err(format!("MNIST not found in {} (run scripts/fetch_mnist.sh)", dir.display()));
    }
    let data_set = format!("data.dir={}", dir.display());
    let mut results = BTreeMap::new();
    for name in ["lwta", "relu"] {
        let conf = format!("configs/mnist_{name}.conf");
        let out = root.join(format!("mnist_{name}"));
        let out_s = out.display().to_string();
        let common = ["--config", &conf, "--out-dir", &out_s, "--set", &data_set];
        sblwta(&[&["train"], &common[..]].concat(), &[])?;
        let benign = json_f64(&sblwta(&[&["eval"], &common[..]].concat(), &[])?, "benign_accuracy")?;
        let robust = json_f64(&sblwta(&[&["attack", "--attack", "pgd"], &common[..]].concat(), &[])?, "accuracy")?;
        results.insert(name, (benign, robust));
        if name == "lwta" {
            *run = Some(MnistRun { lwta_dir: out, data_set: data_set.clone() });
        }
    }
    let (lb, lp) = results["lwta"];
    let (rb, rp) = results["relu"];
    let margin = (lp - rp) * 100.0;
    ensure(
        lb >= 0.93 && margin >= 15.0,
        format!(
            "SB-LWTA benign {lb:.4} (>= 0.93), PGD {lp:.4}; relu benign {rb:.4}, PGD {rp:.4}; margin {margin:.1} points (>= 15)"
        ),
    )
}

// ---- 7. competition pattern export -----------------------------------------------

fn check_pattern_csv(path: &Path, classes: usize, units: usize) -> Result<(), String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty CSV")?.split(',').collect();
    for (c, h) in header.iter().enumerate() {
        if *h != format!("k{}_u{}", c / units, c % units) {
            return Err(format!("{}: unexpected header cell `{h}`", path.display()));
        }
    }
    let rows: Vec<&str> = lines.collect();
    if rows.len() != classes {
        return Err(format!("{}: {} rows, expected {classes}", path.display(), rows.len()));
    }
    for row in rows {
        let vals: Vec<f64> = row.split(',').map(|v| v.parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
        if vals.len() != header.len() {
            return Err(format!("{}: ragged row", path.display()));
        }
        for g in vals.chunks(units) {
            if (g.iter().sum::<f64>() - 1.0).abs() > 1e-9 || g.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(format!("{}: block {g:?} is not a distribution", path.display()));
            }
        }
    }
    Ok(())
}

fn competition_export(run: &Option<MnistRun>) -> Outcome {
    let run = run.as_ref().ok_or("needs the trained MNIST model from criterion 6")?;
    let out_s = run.lwta_dir.display().to_string();
    let mut notes = Vec::new();
    for layer in ["0", "1"] {
        let text = sblwta(
            &[
                "inspect-competition", "--config", "configs/mnist_lwta.conf", "--out-dir", &out_s,
                "--set", &run.data_set, "--layer", layer, "--attack", "pgd",
            ],
            &[],
        )?;
        let tv = json_f64(&text, "mean_tv")?;
        check_pattern_csv(&run.lwta_dir.join(format!("competition_layer{layer}.csv")), 10, 2)?;
        check_pattern_csv(&run.lwta_dir.join(format!("competition_layer{layer}_pgd.csv")), 10, 2)?;
        if !(0.0..=1.0).contains(&tv) {
            return Err(format!("layer {layer}: mean TV {tv} outside [0, 1]"));
        }
        notes.push(format!("layer {layer} mean TV {tv:.4}"));
    }
    Ok(format!(
        "benign and PGD CSVs valid; {} (reference claim: patterns essentially the same; recorded, not thresholded)",
        notes.join(", ")
    ))
}

// ---- 8. reproducibility ---------------------------------------------------------

fn pipeline(out: &Path, threads: &str) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let out_s = out.display().to_string();
    let base = ["--config", "configs/blobs.conf", "--out-dir", out_s.as_str()];
    let env = [("RAYON_NUM_THREADS", threads)];
    let mut stdout = Vec::new();
    let steps: [&[&str]; 9] = [
        &["train"],
        &["eval"],
        &["attack", "--attack", "fgsm"],
        &["attack", "--attack", "pgd"],
        &["attack", "--attack", "cw"],
        &["attack", "--attack", "noise"],
        &["attack", "--attack", "rand"],
        &["inspect-competition", "--layer", "0", "--attack", "pgd"],
        &["confidence-hist", "--source", "random"],
    ];
    for verb in steps {
        // the train summary echoes the output path, so it is not compared
        let text = sblwta(&[verb, &base[..]].concat(), &env)?;
        if verb[0] != "train" && verb[0] != "confidence-hist" {
            stdout.extend_from_slice(text.as_bytes());
        }
    }
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(out).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let bytes = fs::read(entry.path()).map_err(|e| e.to_string())?;
        files.insert(entry.file_name().to_string_lossy().into_owned(), bytes);
    }
    files.insert("<stdout>".into(), stdout);
    Ok(files)
}

fn reproducibility(root: &Path, run: &Option<MnistRun>) -> Outcome {
    let a = pipeline(&root.join("repro_a"), "1")?;
    let b = pipeline(&root.join("repro_b"), "4")?;
    if a.keys().ne(b.keys()) {
        return Err(format!("different output sets: {:?} vs {:?}", a.keys(), b.keys()));
    }
    if let Some((name, _)) = a.iter().find(|(k, v)| b[*k] != **v) {
        return Err(format!("{name} differs between repeated runs"));
    }
    let mut note = format!("{} blobs outputs byte-identical across repeats (1 vs 4 threads)", a.len());
    if let Some(run) = run {
        let ckpt = run.lwta_dir.join("model.sblwta").display().to_string();
        let mut outs = Vec::new();
        for tag in ["mnist_repro_a", "mnist_repro_b"] {
            let out_s = root.join(tag).display().to_string();
            let args = [
                "attack", "--attack", "pgd", "--config", "configs/mnist_lwta.conf", "--out-dir", &out_s,
                "--set", &run.data_set, "--checkpoint", &ckpt,
            ];
            sblwta(&args, &[])?;
            outs.push(fs::read(root.join(tag).join("attack_pgd.json")).map_err(|e| e.to_string())?);
        }
        if outs[0] != outs[1] {
            return Err("repeated MNIST PGD reports differ".into());
        }
        note.push_str("; MNIST PGD report identical on repeat");
    }
    Ok(note)
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path();
    let mut run = None;
    let mut failed = Vec::new();
    let mut report = |id: usize, name: &str, budget: Duration, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let within = took <= budget;
        let (status, detail) = match &outcome {
            Ok(d) if within => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; took {took:.1?}, budget {budget:?}")),
            Err(d) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failed.push(id.to_string());
        }
        println!("criterion {id} [{name}]: {status} ({took:.1?}) {detail}");
    };
    let min = |m: u64| Duration::from_secs(60 * m);
    report(1, "gradient integrity", Duration::from_secs(10), &mut gradient_integrity);
    report(2, "distribution oracles", Duration::from_secs(60), &mut distribution_oracles);
    report(3, "competition invariants", Duration::from_secs(30), &mut competition_invariants);
    report(4, "attack soundness", Duration::from_secs(60), &mut attack_soundness);
    report(5, "ECOC decoding", min(10), &mut ecoc_decoding);
    report(6, "desk-scale MNIST", min(30), &mut || mnist_experiment(root, &mut run));
    report(7, "competition pattern export", min(10), &mut || competition_export(&run));
    report(8, "reproducibility", min(30), &mut || reproducibility(root, &run));
    if failed.is_empty() {
        println!("acceptance: 8 of 8 criteria passed");
    } else {
        println!("acceptance: {} of 8 criteria passed; FAILED: {}", 8 - failed.len(), failed.join(", "));
        if std::env::var_os("SBLWTA_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
