//! Acceptance suite: one PASS/FAIL line per criterion and a summary line.
//! Run with `cargo test --release --test acceptance`. Failing criteria are
//! reported but only turn into a nonzero exit when `DML_ACCEPTANCE_STRICT=1`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dml_core::ablation::{self, find, run_suite, standard_plan, SuiteRow};
use dml_core::config::{DataConfig, TrainConfig};
use dml_core::data::{generate_synthetic, SyntheticConfig};
use dml_core::eval::{
    ari, dump_embeddings, intra_class_variance_ratio, nmi, read_embeddings_csv, recall_at_k, EncoderTag,
    InterClassNorm,
};
use dml_core::gradcheck::run_gradcheck;
use dml_core::kmeans::{kmeans, KMeansConfig};
use dml_core::losses::pairwise_distances;
use dml_core::surrogate::{class_standardize, mine_surrogate_labels, SurrogateConfig, STD_EPS};
use dml_core::train::{train, RunLog};
use dml_core::{Matrix, ModelParams};

type Check = Result<String, String>;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn report(id: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let res = f();
    let took = start.elapsed();
    let res = match (res, budget) {
        (Ok(msg), Some(b)) if took > b => Err(format!("{msg}; over the {}s budget", b.as_secs())),
        (r, _) => r,
    };
    let (tag, msg) = match &res {
        Ok(m) => ("PASS", m),
        Err(m) => ("FAIL", m),
    };
    println!("{tag} {id:>2} {name}: {msg} [{:.1}s]", took.as_secs_f64());
    res.is_ok()
}

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ---------------------------------------------------------------- oracles

fn recall_oracle(x: &Matrix, labels: &[usize], k: usize) -> f64 {
    let n = x.rows();
    let hits = (0..n)
        .filter(|&i| {
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(x.row(i), x.row(j)), j))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            all[..k].iter().any(|&(_, j)| labels[j] == labels[i])
        })
        .count();
    hits as f64 / n as f64
}

fn nmi_oracle(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0.0; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1.0;
    }
    let pa: Vec<f64> = table.iter().map(|r| r.iter().sum::<f64>() / n).collect();
    let pb: Vec<f64> = (0..kb).map(|j| table.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let h = |p: &[f64]| -> f64 { p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum() };
    let (ha, hb) = (h(&pa), h(&pb));
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let p = table[i][j] / n;
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    match (ha == 0.0, hb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => mi / (ha * hb).sqrt(),
    }
}

fn variance_ratio_oracle(x: &Matrix, labels: &[usize], min_pair: bool) -> f64 {
    let k = labels.iter().max().unwrap() + 1;
    let classes: Vec<Vec<usize>> = (0..k)
        .map(|c| (0..x.rows()).filter(|&i| labels[i] == c).collect::<Vec<_>>())
        .filter(|m| !m.is_empty())
        .collect();
    let mut intra = Vec::new();
    for m in classes.iter().filter(|m| m.len() > 1) {
        let mut s = 0.0;
        let mut cnt = 0.0;
        for &i in m {
            for &j in m {
                if i != j {
                    s += sq_dist(x.row(i), x.row(j)).sqrt();
                    cnt += 1.0;
                }
            }
        }
        intra.push(s / cnt);
    }
    let centers: Vec<Vec<f64>> = classes
        .iter()
        .map(|m| {
            (0..x.cols())
                .map(|d| m.iter().map(|&i| x.get(i, d)).sum::<f64>() / m.len() as f64)
                .collect()
        })
        .collect();
    let mut inter = Vec::new();
    for a in 0..centers.len() {
        for b in 0..a {
            inter.push(sq_dist(&centers[a], &centers[b]).sqrt());
        }
    }
    let intra = intra.iter().sum::<f64>() / intra.len() as f64;
    let inter = if min_pair {
        inter.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        inter.iter().sum::<f64>() / inter.len() as f64
    };
    intra / inter
}

// ---------------------------------------------------------------- criteria

fn gradient_check() -> Check {
    let r = run_gradcheck(0..20, 1e-5).map_err(|e| e.to_string())?;
    ensure(
        r.passed(1e-4) && r.per_seed.len() == 20,
        format!("max relative error {:.2e} over {} seeds (eps 1e-5, tol 1e-4)", r.max_rel_error, r.per_seed.len()),
    )
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 3];
    for inst in 0..50 {
        let n = rng.random_range(4..=200);
        let dim = rng.random_range(1..=8);
        // Every fifth instance sits on an integer grid so distance ties occur.
        let x = if inst % 5 == 0 {
            let data = (0..n * dim).map(|_| rng.random_range(-2..=2) as f64).collect();
            Matrix::from_vec(n, dim, data).unwrap()
        } else {
            gaussian(n, dim, &mut rng)
        };
        let k = rng.random_range(2..=(n / 2).min(10));
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        labels[0] = 0;
        labels[1] = 0;
        labels[2] = 1;
        let ks: Vec<usize> = [1, 2, 4, 8].into_iter().filter(|&k| k < n).collect();
        let got = recall_at_k(&x, &labels, &ks).map_err(|e| e.to_string())?;
        for &kk in &ks {
            let want = recall_oracle(&x, &labels, kk);
            if got[&kk] != want {
                return Err(format!("instance {inst}: Recall@{kk} {} vs oracle {want}", got[&kk]));
            }
        }
        let k2 = rng.random_range(1..=6);
        let other: Vec<usize> = (0..n).map(|_| rng.random_range(0..k2)).collect();
        let v = nmi(&labels, &other).map_err(|e| e.to_string())?;
        worst[0] = worst[0].max((v - nmi_oracle(&labels, &other)).abs());
        let d = pairwise_distances(&x);
        for i in 0..n {
            for j in 0..n {
                worst[1] = worst[1].max((d.get(i, j) - sq_dist(x.row(i), x.row(j))).abs());
            }
        }
        for (norm, min_pair) in [(InterClassNorm::MeanPairs, false), (InterClassNorm::MinPair, true)] {
            let v = intra_class_variance_ratio(&x, &labels, norm).map_err(|e| e.to_string())?;
            worst[2] = worst[2].max((v.ratio - variance_ratio_oracle(&x, &labels, min_pair)).abs());
        }
    }
    let msg = format!(
        "recall exact on 50 instances; max |diff| NMI {:.1e}, distances {:.1e}, variance ratio {:.1e}",
        worst[0], worst[1], worst[2]
    );
    ensure(worst.iter().all(|&w| w < 1e-9), msg)
}

fn standardization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut mean_err, mut std_err, mut idem_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let n = rng.random_range(10..=150);
        let dim = rng.random_range(1..=10);
        let k = rng.random_range(1..=5);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut x = gaussian(n, dim, &mut rng);
        let offsets = gaussian(k, dim, &mut rng);
        let scales: Vec<f64> = (0..k * dim).map(|_| 10f64.powf(rng.random_range(-2.0..2.0))).collect();
        for i in 0..n {
            for d in 0..dim {
                let c = labels[i];
                let v = x.get(i, d) * scales[c * dim + d] + 5.0 * offsets.get(c, d);
                x.set(i, d, v);
            }
        }
        let (z, stats) = class_standardize(&x, &labels).map_err(|e| e.to_string())?;
        for s in &stats {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == s.label).collect();
            if members.len() < 2 {
                continue;
            }
            for d in 0..dim {
                let m = members.iter().map(|&i| z.get(i, d)).sum::<f64>() / members.len() as f64;
                mean_err = mean_err.max(m.abs());
                if s.std[d] > STD_EPS {
                    let var = members.iter().map(|&i| (z.get(i, d) - m).powi(2)).sum::<f64>() / members.len() as f64;
                    std_err = std_err.max((var.sqrt() - 1.0).abs());
                }
            }
        }
        let (z2, _) = class_standardize(&z, &labels).map_err(|e| e.to_string())?;
        for (a, b) in z.data().iter().zip(z2.data()) {
            idem_err = idem_err.max((a - b).abs());
        }
    }
    ensure(
        mean_err < 1e-9 && std_err < 1e-6 && idem_err < 1e-9,
        format!("20 instances: max |class mean| {mean_err:.1e}, max |std - 1| {std_err:.1e}, idempotence {idem_err:.1e}"),
    )
}

fn kmeans_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = KMeansConfig::default();
    for inst in 0..20 {
        let n = rng.random_range(5..=200);
        let x = gaussian(n, rng.random_range(1..=6), &mut rng);
        let c = rng.random_range(1..=n.min(12));
        let m = kmeans(&x, c, inst, &cfg).map_err(|e| e.to_string())?;
        if let Some(w) = m.inertia_history.windows(2).find(|w| w[1] > w[0]) {
            return Err(format!("instance {inst}: inertia rose from {} to {}", w[0], w[1]));
        }
    }
    // Separable: four tight blobs far apart.
    let centers = [[0.0, 0.0], [50.0, 0.0], [0.0, 50.0], [50.0, 50.0]];
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for (c, ctr) in centers.iter().enumerate() {
        for _ in 0..25 {
            let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
            rows.push([ctr[0] + a, ctr[1] + b]);
            truth.push(c);
        }
    }
    let x = Matrix::from_rows(&rows).unwrap();
    let m = kmeans(&x, 4, 0, &cfg).map_err(|e| e.to_string())?;
    let a = ari(&m.assignments, &truth).map_err(|e| e.to_string())?;
    if a != 1.0 {
        return Err(format!("separable ARI {a}"));
    }
    // C = 1: centroid is the mean, inertia the total sum of squares.
    let x = Matrix::from_rows(&[[0.0, 1.0], [2.0, 3.0], [4.0, -1.0], [6.0, 1.0]]).unwrap();
    let m = kmeans(&x, 1, 0, &cfg).map_err(|e| e.to_string())?;
    if m.centroids.row(0) != [3.0, 1.0] || m.inertia != 28.0 || m.assignments != [0, 0, 0, 0] {
        return Err(format!("C=1 gave centroid {:?}, inertia {}", m.centroids.row(0), m.inertia));
    }
    // C = N: every point is its own centroid.
    let m = kmeans(&x, 4, 0, &cfg).map_err(|e| e.to_string())?;
    let mut seen = m.assignments.clone();
    seen.sort();
    seen.dedup();
    if m.inertia != 0.0 || seen.len() != 4 {
        return Err(format!("C=N gave inertia {} with {} clusters", m.inertia, seen.len()));
    }
    Ok("inertia monotone on 20 instances; separable ARI 1; C=1 and C=N exact".into())
}

fn surrogate_recovery() -> Check {
    let mut shared = 0.0;
    let mut class = 0.0;
    for &seed in &SEEDS {
        let s = SyntheticConfig {
            seed,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&s).map_err(|e| e.to_string())?;
        let cfg = SurrogateConfig {
            clusters: s.num_shared,
            standardize: true,
            kmeans: KMeansConfig::default(),
        };
        let m = mine_surrogate_labels(&ds.features, &ds.labels, &cfg, seed).map_err(|e| e.to_string())?;
        shared += nmi(&m.assignments, ds.shared.as_ref().unwrap()).map_err(|e| e.to_string())?;
        class += nmi(&m.assignments, &ds.labels).map_err(|e| e.to_string())?;
    }
    let (shared, class) = (shared / 5.0, class / 5.0);
    ensure(
        shared >= 0.8 && class <= 0.2,
        format!("mean NMI vs shared factor {shared:.3} (>= 0.8), vs classes {class:.3} (<= 0.2)"),
    )
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn row<'a>(rows: &'a [SuiteRow], axis: &str, setting: &str) -> Result<&'a SuiteRow, String> {
    let r = find(rows, axis, setting).ok_or_else(|| format!("missing row {axis}/{setting}"))?;
    match &r.error {
        Some(e) => Err(format!("{axis}/{setting} failed: {e}")),
        None => Ok(r),
    }
}

fn mean_r1(rows: &[SuiteRow], axis: &str, setting: &str) -> Result<f64, String> {
    row(rows, axis, setting)?
        .mean_recall1()
        .ok_or_else(|| format!("{axis}/{setting} has no runs"))
}

fn improvement(rows: &[SuiteRow]) -> Check {
    let base = row(rows, "ablation", ablation::BASELINE)?;
    let full = row(rows, "ablation", ablation::FULL)?;
    let gain = full.mean_recall1().unwrap() - base.mean_recall1().unwrap();
    let per_seed: Vec<f64> = SEEDS
        .iter()
        .map(|&s| full.recall1_of(s).unwrap() - base.recall1_of(s).unwrap())
        .collect();
    let wins = per_seed.iter().filter(|&&d| d > 0.0).count();
    let list: Vec<String> = per_seed.iter().map(|&d| format!("{:+.2}", 100.0 * d)).collect();
    ensure(
        gain >= 0.02 && wins >= 4,
        format!(
            "Recall@1 full {} vs baseline {}: {:+.2} pp (need >= +2), per seed [{}], positive in {wins}/5 (need 4)",
            pct(full.mean_recall1().unwrap()),
            pct(base.mean_recall1().unwrap()),
            100.0 * gain,
            list.join(", ")
        ),
    )
}

fn variance_trend(rows: &[SuiteRow]) -> Check {
    let d_rows: Vec<&SuiteRow> = rows.iter().filter(|r| r.axis == "d_beta").collect();
    let mut vals = Vec::new();
    for r in &d_rows {
        let v = row(rows, "d_beta", &r.setting)?
            .mean_variance_ratio()
            .ok_or("no runs")?;
        vals.push((r.setting.clone(), v));
    }
    let decreasing = vals.windows(2).all(|w| w[1].1 < w[0].1);
    let list: Vec<String> = vals.iter().map(|(s, v)| format!("D_beta={s}: {v:.4}")).collect();
    ensure(decreasing, format!("mean intra-class variance ratio {}", list.join(", ")))
}

fn ablation_order(rows: &[SuiteRow]) -> Check {
    let b = mean_r1(rows, "ablation", ablation::BASELINE)?;
    let c = mean_r1(rows, "ablation", ablation::CLUST_NO_STAND)?;
    let cs = mean_r1(rows, "ablation", ablation::CLUST_STAND)?;
    let f = mean_r1(rows, "ablation", ablation::FULL)?;
    ensure(
        b >= c && f >= cs && cs >= b,
        format!(
            "Recall@1 baseline {} {} clust {}; full {} {} clust+stand {} {} baseline",
            pct(b),
            if b >= c { ">=" } else { "<" },
            pct(c),
            pct(f),
            if f >= cs { ">=" } else { "<" },
            pct(cs),
            if cs >= b { ">=" } else { "<" },
        ),
    )
}

fn plateaus(rows: &[SuiteRow]) -> Check {
    let spread = |axis: &str| -> Result<(f64, Vec<String>), String> {
        let mut vals = Vec::new();
        for r in rows.iter().filter(|r| r.axis == axis) {
            vals.push((r.setting.clone(), mean_r1(rows, axis, &r.setting)?));
        }
        let max = vals.iter().map(|v| v.1).fold(f64::MIN, f64::max);
        let min = vals.iter().map(|v| v.1).fold(f64::MAX, f64::min);
        Ok((max - min, vals.iter().map(|(s, v)| format!("{s}:{}", pct(*v))).collect()))
    };
    let (dc, lc) = spread("clusters")?;
    let (dt, lt) = spread("update_period")?;
    ensure(
        dc < 0.03 && dt < 0.03,
        format!(
            "Recall@1 range over C [{}] = {:.2} pp, over T_U [{}] = {:.2} pp (need < 3)",
            lc.join(" "),
            100.0 * dc,
            lt.join(" "),
            100.0 * dt
        ),
    )
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let (tr, te) = DataConfig::default().load_split(Some(3)).map_err(|e| e.to_string())?;
    let a = train(&cfg, &tr, Some(&te)).map_err(|e| e.to_string())?;
    let b = train(&cfg, &tr, Some(&te)).map_err(|e| e.to_string())?;
    if a.log.fingerprint() != b.log.fingerprint() {
        return Err("run logs differ between identical runs".into());
    }
    let log_path = dir.path().join("run.jsonl");
    a.log.write_jsonl(&log_path).map_err(|e| e.to_string())?;
    let back = RunLog::read_jsonl(&log_path).map_err(|e| e.to_string())?;
    if back != a.log {
        return Err("run log changed through JSON lines".into());
    }

    let ck = dir.path().join("model.json");
    a.params.save_checkpoint(&ck).map_err(|e| e.to_string())?;
    let loaded = ModelParams::load_checkpoint(&ck).map_err(|e| e.to_string())?;
    let bits = |p: &ModelParams| -> Vec<u64> { p.slots().iter().flat_map(|s| s.iter().map(|v| v.to_bits())).collect() };
    if bits(&loaded) != bits(&a.params) || loaded.dims != a.params.dims {
        return Err("checkpoint parameters differ after reload".into());
    }
    let ck2 = dir.path().join("model2.json");
    loaded.save_checkpoint(&ck2).map_err(|e| e.to_string())?;
    if std::fs::read(&ck).unwrap() != std::fs::read(&ck2).unwrap() {
        return Err("re-saved checkpoint is not byte-identical".into());
    }

    let dump = dir.path().join("test_embeddings.csv");
    dump_embeddings(&loaded, &te, &dump).map_err(|e| e.to_string())?;
    let rows = read_embeddings_csv(&dump).map_err(|e| e.to_string())?;
    let alpha: Vec<&[f64]> = rows.iter().map(|r| r.alpha.as_slice()).collect();
    let labels: Vec<usize> = rows.iter().map(|r| r.label).collect();
    let x = Matrix::from_rows(&alpha).map_err(|e| e.to_string())?;
    let from_dump = recall_at_k(&x, &labels, &[1]).map_err(|e| e.to_string())?[&1];
    let logged = a.log.final_test(EncoderTag::Alpha).ok_or("no final test report")?.recall1();
    ensure(
        from_dump == logged,
        format!(
            "identical run logs; checkpoint round-trip bitwise; Recall@1 from dump {} vs logged {}",
            pct(from_dump),
            pct(logged)
        ),
    )
}

fn main() {
    let mut ok = Vec::new();
    ok.push(report(1, "gradient check", Some(Duration::from_secs(60)), gradient_check));
    ok.push(report(2, "metric oracles", Some(Duration::from_secs(60)), metric_oracles));
    ok.push(report(3, "standardization", None, standardization));
    ok.push(report(4, "k-means", None, kmeans_properties));
    ok.push(report(5, "surrogate recovers shared factor", Some(Duration::from_secs(120)), surrogate_recovery));

    let start = Instant::now();
    let plan = standard_plan(&TrainConfig::default());
    let suite = run_suite(&plan, &DataConfig::default(), &SEEDS, |_| {});
    let suite_time = start.elapsed();
    println!("     ablation suite: {} configurations x {} seeds [{:.1}s]", plan.len(), SEEDS.len(), suite_time.as_secs_f64());
    let with_suite = |f: fn(&[SuiteRow]) -> Check| -> Check {
        match &suite {
            Ok(rows) => f(rows),
            Err(e) => Err(format!("suite failed: {e}")),
        }
    };
    let budget = Duration::from_secs(15 * 60);
    ok.push(report(6, "improvement over baseline", None, || {
        let r = with_suite(improvement);
        match r {
            Ok(m) if suite_time > budget => Err(format!("{m}; suite exceeded 15 min")),
            r => r,
        }
    }));
    ok.push(report(7, "intra-class variance trend", None, || with_suite(variance_trend)));
    ok.push(report(8, "ablation ordering", None, || with_suite(ablation_order)));
    ok.push(report(9, "robustness plateaus", None, || with_suite(plateaus)));
    ok.push(report(10, "determinism and persistence", None, determinism));

    let passed = ok.iter().filter(|&&b| b).count();
    println!("{passed}/{} criteria passed", ok.len());
    let strict = std::env::var("DML_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed != ok.len() {
        std::process::exit(1);
    }
}
