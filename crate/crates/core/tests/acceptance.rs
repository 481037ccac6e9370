//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use hashbound::bounds::class_center;
use hashbound::centers::{generate_centers, hadamard_centers, CenterChoice};
use hashbound::codes::{hamming_distance, index_to_code};
use hashbound::mvb::{kl_divergence, run_toy, MvbDistribution, SurrogateConfig, SurrogateModel, ToyConfig};
use hashbound::nn::{softmax_cross_entropy, DenseNet, LayerSpec, Matrix, Mode};
use hashbound::ranking::{average_precision, RankList};
use hashbound::train::{
    compute_step, make_synthetic_dataset, surrogate_loss_grad, train_supervised, Objective, ToyHashModel,
    TrainConfig,
};
use hashbound::{cli, codefile, labels, BitCode, LabelSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn ap_equivalence() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let len = r.random_range(1..=64);
        let mut flags: Vec<bool> = (0..len).map(|_| r.random_bool(0.4)).collect();
        let k = r.random_range(0..len);
        flags[k] = true;
        let ours = average_precision(&RankList::from_relevance(&flags)).unwrap();
        // Mean over relevant ranks of precision at that rank.
        let mut hits = 0usize;
        let mut total = 0.0;
        for (i, &f) in flags.iter().enumerate() {
            if f {
                hits += 1;
                total += hits as f64 / (i + 1) as f64;
            }
        }
        if ours != total / hits as f64 {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("1000 lists, {mismatches} inexact"))
}

fn center_oracle() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for _ in 0..200 {
        let h = r.random_range(1..=12);
        let n = r.random_range(1..=15);
        let codes: Vec<BitCode> = (0..n)
            .map(|_| BitCode::from_bools(&(0..h).map(|_| r.random()).collect::<Vec<_>>()).unwrap())
            .collect();
        let refs: Vec<&BitCode> = codes.iter().collect();
        let cost = |c: &BitCode| -> u32 { codes.iter().map(|x| hamming_distance(c, x).unwrap()).sum() };
        let best = (0..1usize << h).map(|i| cost(&index_to_code(i, h).unwrap())).min().unwrap();
        if cost(&class_center(&refs).unwrap()) != best {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("200 sets, {failures} non-optimal centers"))
}

fn bound_inequalities() -> Outcome {
    let reports = cli::inequality_trials(3, 1000).unwrap();
    let violations: usize = reports.iter().map(|r| r.violations).sum();
    let same: usize = reports.iter().map(|r| r.same_class_pairs).sum();
    let cross: usize = reports.iter().map(|r| r.cross_class_checked).sum();
    outcome(
        violations == 0 && same > 0 && cross > 0,
        format!("1000 sets, {same} same-class and {cross} checked cross-class pairs, {violations} violations"),
    )
}

fn kl_toy(bits: usize, blocks: Option<usize>) -> (Vec<f64>, Vec<f64>) {
    let mut sur = Vec::new();
    let mut naive = Vec::new();
    for seed in 0..5 {
        let mut cfg = ToyConfig::new(bits, seed);
        cfg.blocks = blocks;
        let rep = run_toy(&cfg).unwrap();
        sur.push(rep.surrogate_kl);
        naive.push(rep.naive_kl);
    }
    (sur, naive)
}

fn fig4_analog() -> Outcome {
    let (mut sur, mut naive) = kl_toy(8, None);
    let all = format!("surrogate {sur:.4?}, naive {naive:.4?}");
    let (ms, mn) = (median(&mut sur), median(&mut naive));
    outcome(
        ms < 0.05 && ms < mn / 5.0,
        format!("median surrogate {ms:.4} (< 0.05), median naive {mn:.4} (surrogate < naive/5); {all}"),
    )
}

fn sanity16_analog() -> Outcome {
    let (mut sur, naive) = kl_toy(16, Some(2));
    let each = sur.iter().zip(&naive).all(|(s, n)| s < n);
    let all = format!("surrogate {sur:.4?}, naive {naive:.4?}");
    let ms = median(&mut sur);
    outcome(
        each && ms < 0.2,
        format!("surrogate < naive on every seed: {each}; median surrogate {ms:.4} (< 0.2); {all}"),
    )
}

fn demo_kl() -> Outcome {
    let joint = [0.394, 0.081, 0.079, 0.446];
    let (m1, m2) = (0.527, 0.525);
    let p = MvbDistribution::new(2, joint.to_vec()).unwrap();
    let q = MvbDistribution::product_of_marginals(&[m1, m2]).unwrap();
    let kl = kl_divergence(&p, &q).unwrap();
    // index 0 = (-1,-1), 1 = b1 positive, 2 = b2 positive, 3 = both
    let qs = [(1.0 - m1) * (1.0 - m2), m1 * (1.0 - m2), (1.0 - m1) * m2, m1 * m2];
    let oracle = joint[0] * (joint[0] / qs[0]).ln()
        + joint[1] * (joint[1] / qs[1]).ln()
        + joint[2] * (joint[2] / qs[2]).ln()
        + joint[3] * (joint[3] / qs[3]).ln();
    let diff = (kl - oracle).abs();
    outcome(diff < 1e-9, format!("KL {kl:.6} vs oracle {oracle:.6}, |diff| {diff:.1e} (< 1e-9)"))
}

fn hadamard_distance() -> Outcome {
    let set = hadamard_centers(10, 16).unwrap();
    let c = set.centers();
    let mut min = u32::MAX;
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            min = min.min(hamming_distance(&c[i], &c[j]).unwrap());
        }
    }
    outcome(
        set.min_pairwise() == 8 && min == 8 && c.len() == 10,
        format!("reported {}, exhaustive {min}", set.min_pairwise()),
    )
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_net(r: &mut ChaCha8Rng) -> DenseNet {
    let mut specs = Vec::new();
    let mut width = r.random_range(1..=6);
    for _ in 0..r.random_range(1..=3) {
        let next = r.random_range(1..=6);
        specs.push(LayerSpec::Affine {
            inputs: width,
            outputs: next,
        });
        width = next;
        if r.random_bool(0.6) {
            specs.push(LayerSpec::Silu);
        }
        if r.random_bool(0.4) {
            specs.push(LayerSpec::Dropout {
                rate: r.random_range(0.0..0.7),
            });
        }
    }
    let mut net = DenseNet::new(&specs, r).unwrap();
    net.set_mode(Mode::Train);
    net
}

/// Worst relative error over parameters and inputs of `sum(dout * net(x))`.
fn check_net(net: &DenseNet, r: &mut ChaCha8Rng) -> f64 {
    let rows = r.random_range(1..=4);
    let x = random_matrix(r, rows, net.input_dim());
    let dout = random_matrix(r, rows, net.output_dim());
    let mask: u64 = r.random();
    let probe = |n: &DenseNet, x: &Matrix| -> f64 {
        let (out, _) = n.forward(x, &mut ChaCha8Rng::seed_from_u64(mask)).unwrap();
        out.data().iter().zip(dout.data()).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = net.forward(&x, &mut ChaCha8Rng::seed_from_u64(mask)).unwrap();
    let (grads, dx) = net.backward(&cache, &dout).unwrap();
    let analytic: Vec<f64> = grads.iter().copied().collect();
    let mut worst = 0.0f64;
    let params = net.params();
    let mut p = net.clone();
    for k in 0..params.len() {
        let mut v = params.clone();
        v[k] += 1e-4;
        p.set_params(&v).unwrap();
        let up = probe(&p, &x);
        v[k] -= 2e-4;
        p.set_params(&v).unwrap();
        let down = probe(&p, &x);
        worst = worst.max(rel_err(analytic[k], (up - down) / 2e-4));
    }
    for k in 0..x.data().len() {
        let mut xp = x.clone();
        xp.data_mut()[k] += 1e-4;
        let up = probe(net, &xp);
        xp.data_mut()[k] -= 2e-4;
        let down = probe(net, &xp);
        worst = worst.max(rel_err(dx.data()[k], (up - down) / 2e-4));
    }
    worst
}

fn check_softmax(r: &mut ChaCha8Rng) -> f64 {
    let n = r.random_range(2..=10);
    let logits: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
    let t = r.random_range(0..n);
    let (_, g) = softmax_cross_entropy(&logits, t).unwrap();
    let mut worst = 0.0f64;
    for k in 0..n {
        let mut l = logits.clone();
        l[k] += 1e-4;
        let up = softmax_cross_entropy(&l, t).unwrap().0;
        l[k] -= 2e-4;
        let down = softmax_cross_entropy(&l, t).unwrap().0;
        worst = worst.max(rel_err(g[k], (up - down) / 2e-4));
    }
    worst
}

/// The surrogate gradient path: L_theta with respect to the hash output and,
/// through the hash model, to sampled parameters.
fn check_surrogate_path(r: &mut ChaCha8Rng, seed: u64) -> f64 {
    let h = 2 * r.random_range(1..=4);
    let d = r.random_range(2..=5);
    let classes = r.random_range(2..=3);
    let model = ToyHashModel::new(d, h, r.random_range(3..=8), seed).unwrap();
    let mut sur = SurrogateModel::new(h, Some(2), &SurrogateConfig { hidden: 10, dropout: 0.5 }, seed).unwrap();
    sur.set_mode(Mode::Train);
    let centers = generate_centers(CenterChoice::RandomMaxmin, classes, h, 4, seed).unwrap();
    let rows = r.random_range(1..=4);
    let x = random_matrix(r, rows, d);
    let labs: Vec<LabelSet> = (0..rows).map(|_| LabelSet::single(r.random_range(0..classes as u32))).collect();
    let mask: u64 = r.random();
    let step = |m: &ToyHashModel| {
        compute_step(m, &sur, &x, &labs, centers.centers(), Objective::Surrogate, &mut ChaCha8Rng::seed_from_u64(mask))
            .unwrap()
    };
    let mut worst = 0.0f64;

    let l = model.embed(&x).unwrap();
    let targets: Vec<Vec<&BitCode>> = labs
        .iter()
        .map(|s| s.labels().iter().map(|&c| &centers.centers()[c as usize]).collect())
        .collect();
    let lg = |l: &Matrix| surrogate_loss_grad(&sur, l, &targets, &mut ChaCha8Rng::seed_from_u64(mask)).unwrap();
    let (_, dl) = lg(&l);
    for k in 0..l.data().len() {
        let mut lp = l.clone();
        lp.data_mut()[k] += 1e-4;
        let up = lg(&lp).0;
        lp.data_mut()[k] -= 2e-4;
        let down = lg(&lp).0;
        worst = worst.max(rel_err(dl.data()[k], (up - down) / 2e-4));
    }

    let base = step(&model);
    let analytic: Vec<f64> = base.grads_theta.iter().copied().collect();
    let params = model.net().params();
    let mut m = model.clone();
    for _ in 0..12 {
        let k = r.random_range(0..params.len());
        let mut v = params.clone();
        v[k] += 1e-4;
        m.net_mut().set_params(&v).unwrap();
        let up = step(&m).loss_theta;
        v[k] -= 2e-4;
        m.net_mut().set_params(&v).unwrap();
        let down = step(&m).loss_theta;
        worst = worst.max(rel_err(analytic[k], (up - down) / 2e-4));
    }
    worst
}

fn gradient_suite() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let (mut net, mut sm, mut path) = (0.0f64, 0.0f64, 0.0f64);
    for c in 0..50 {
        let n = random_net(&mut r);
        net = net.max(check_net(&n, &mut r));
        sm = sm.max(check_softmax(&mut r));
        path = path.max(check_surrogate_path(&mut r, c));
    }
    let worst = net.max(sm).max(path);
    outcome(
        worst < 1e-4,
        format!("50 configs, worst relative error: layers {net:.1e}, softmax CE {sm:.1e}, surrogate path {path:.1e} (< 1e-4)"),
    )
}

fn fig1_analog() -> Outcome {
    let seed = 11;
    let data = make_synthetic_dataset(4, 200, 16, 6.0, seed).unwrap();
    let centers = generate_centers(CenterChoice::Auto, 4, 16, 64, seed).unwrap();
    let mut model = ToyHashModel::new(16, 16, 64, seed).unwrap();
    let mut sur = SurrogateModel::new(16, None, &SurrogateConfig::default(), seed).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        ..Default::default()
    };
    let trace = train_supervised(&mut model, &mut sur, &centers, &data, &cfg, seed).unwrap();
    let rho = trace.correlation().unwrap_or(f64::NAN);
    let map = trace.records.last().map_or(0.0, |r| r.map);
    outcome(
        rho > 0.5 && map > 0.95,
        format!("Spearman rho {rho:.3} (> 0.5), final mAP {map:.4} (> 0.95)"),
    )
}

fn run_bin(dir: &Path, args: &[String]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_hashbound"))
        .args(args)
        .current_dir(dir)
        .env_remove("HASHBOUND_THREADS")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut r = ChaCha8Rng::seed_from_u64(10);
    let codes: Vec<BitCode> = (0..120)
        .map(|_| BitCode::from_bools(&(0..16).map(|_| r.random()).collect::<Vec<_>>()).unwrap())
        .collect();
    let labs: Vec<LabelSet> = (0..120).map(|i| LabelSet::single((i % 4) as u32)).collect();
    codefile::save(&d.join("base.hbc"), 16, &codes).unwrap();
    labels::save(&d.join("base.csv"), &labs).unwrap();
    codefile::save(&d.join("q.hbc"), 16, &codes[..20]).unwrap();
    labels::save(&d.join("q.csv"), &labs[..20]).unwrap();

    let runs: Vec<(&str, &str)> = vec![
        ("eval --query q.hbc --query-labels q.csv --base base.hbc --base-labels base.csv --pk 10,50 --out eval.json", "eval.json"),
        ("bound --codes base.hbc --labels base.csv --out bound.json", "bound.json"),
        ("verify-bound --seed 4 --trials 2000 --out verify.json", "verify.json"),
        ("centers --classes 12 --bits 16 --method random-maxmin --seed 2 --out c.hbc", "c.json"),
        ("mvb-demo --bits 8 --train-samples 2000 --epochs 2 --seed 3 --out kl.json", "kl.json"),
        ("train-toy --per-class 50 --epochs 3 --seed 5 --trace trace.csv --out model.ckpt", "model.json"),
    ];
    let mut bad = Vec::new();
    for (cmd, report) in runs {
        let name = cmd.split(' ').next().unwrap();
        let args: Vec<String> = std::iter::once("--threads=1".to_string())
            .chain(cmd.split(' ').map(String::from))
            .collect();
        if !run_bin(d, &args) {
            bad.push(format!("{name}: first run failed"));
            continue;
        }
        let first = std::fs::read(d.join(report)).unwrap();
        let json: serde_json::Value = serde_json::from_slice(&first).unwrap();
        let replay: Vec<String> = json["args"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap().to_string())
            .collect();
        std::fs::remove_file(d.join(report)).unwrap();
        if !run_bin(d, &replay) || std::fs::read(d.join(report)).unwrap() != first {
            bad.push(format!("{name}: replay differs"));
        }
    }
    outcome(bad.is_empty(), if bad.is_empty() { "6 subcommands replayed byte-identically".into() } else { bad.join("; ") })
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 10] = [
        ("mis-rank AP equals textbook AP", ap_equivalence, Some(Duration::from_secs(1))),
        ("majority center is the exhaustive argmin", center_oracle, Some(Duration::from_secs(30))),
        ("bound inequalities hold", bound_inequalities, None),
        ("8-bit KL toy", fig4_analog, Some(Duration::from_secs(120))),
        ("16-bit blocked KL toy", sanity16_analog, Some(Duration::from_secs(300))),
        ("demo joint KL", demo_kl, None),
        ("Hadamard min pairwise distance", hadamard_distance, None),
        ("gradient suite", gradient_suite, Some(Duration::from_secs(60))),
        ("mAP tracks the bound ratio", fig1_analog, Some(Duration::from_secs(300))),
        ("CLI determinism", determinism, None),
    ];
    let mut failed = 0;
    for (i, (name, f, limit)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let mut o = f();
        let took = t.elapsed();
        if let Some(l) = limit {
            if took > *l {
                o.pass = false;
                o.detail.push_str(&format!("; over the {}s limit", l.as_secs()));
            }
        }
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {} {name}: {} [{:.2}s]",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
