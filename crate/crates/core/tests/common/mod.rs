//! Oracles and criterion checks shared by the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use std::path::PathBuf;
use std::time::Instant;

use fedrobust::aggregators::{
    clipped_clustering, cluster_two_groups, coordinate_median, geomed, krum, krum_select, mean, objective,
    select_majority, trim_count, trimmed_mean, DistanceMatrix, Linkage, NormHistory,
};
use fedrobust::attacks::{adaptive_attack, ipm_attack, ipm_mean_coefficient, AttackContext};
use fedrobust::data::{load_mnist, synthetic_blobs, Dataset, PartitionScheme};
use fedrobust::federation::{run_experiment, Algorithm, FederationConfig, Schedule, Simulation};
use fedrobust::models::{Architecture, Batch};
use fedrobust::rng::{stream, Purpose};
use fedrobust::vector::{dot, squared_distance, UpdateVector};
use fedrobust::{AggregatorSpec, AttackSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `Ok(detail)` on pass, `Err(detail)` on failure.
pub type Outcome = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uv(values: Vec<f64>) -> UpdateVector {
    UpdateVector::new(values).expect("finite")
}

pub fn gaussian_updates(rng: &mut impl Rng, k: usize, d: usize) -> Vec<UpdateVector> {
    (0..k)
        .map(|_| uv((0..d).map(|_| rng.sample(StandardNormal)).collect()))
        .collect()
}

/// Small integer coordinates, so exact ties are common.
pub fn integer_updates(rng: &mut impl Rng, k: usize, d: usize) -> Vec<UpdateVector> {
    (0..k)
        .map(|_| uv((0..d).map(|_| rng.random_range(-3i32..=3) as f64).collect()))
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- oracles ----

/// Krum by enumerating every neighbour subset of size `K - M - 2`.
pub fn brute_force_krum(updates: &[UpdateVector], m: usize) -> usize {
    let k = updates.len();
    let size = k - m - 2;
    let mut best = (f64::INFINITY, 0);
    for i in 0..k {
        let others: Vec<usize> = (0..k).filter(|&j| j != i).collect();
        let mut score = f64::INFINITY;
        for mask in 0u32..(1 << others.len()) {
            if mask.count_ones() as usize != size {
                continue;
            }
            let mut chosen: Vec<f64> = others
                .iter()
                .enumerate()
                .filter(|(b, _)| mask & (1 << b) != 0)
                .map(|(_, &j)| squared_distance(&updates[i], &updates[j]))
                .collect();
            // Same summation order as the implementation.
            chosen.sort_unstable_by(f64::total_cmp);
            score = score.min(chosen.iter().sum());
        }
        if score < best.0 {
            best = (score, i);
        }
    }
    best.1
}

fn column(updates: &[UpdateVector], i: usize) -> Vec<f64> {
    let mut c: Vec<f64> = updates.iter().map(|u| u[i]).collect();
    c.sort_by(|a, b| a.partial_cmp(b).unwrap());
    c
}

pub fn median_oracle(updates: &[UpdateVector]) -> Vec<f64> {
    (0..updates[0].dim())
        .map(|i| {
            let c = column(updates, i);
            let n = c.len();
            if n % 2 == 1 {
                c[n / 2]
            } else {
                (c[n / 2 - 1] + c[n / 2]) / 2.0
            }
        })
        .collect()
}

pub fn trimmed_oracle(updates: &[UpdateVector], beta: f64) -> Vec<f64> {
    let k = updates.len();
    let cut = (beta * k as f64).floor() as usize;
    (0..updates[0].dim())
        .map(|i| {
            let c = column(updates, i);
            let kept = &c[cut..k - cut];
            kept.iter().sum::<f64>() / kept.len() as f64
        })
        .collect()
}

/// Best objective over a square grid covering the points' bounding box.
pub fn grid_geomed_objective(points: &[UpdateVector], steps: usize) -> (f64, f64) {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let h = (hi[0] - lo[0]).max(hi[1] - lo[1]) / steps as f64;
    let mut best = f64::INFINITY;
    for i in 0..=steps {
        for j in 0..=steps {
            let z = [lo[0] + i as f64 * h, lo[1] + j as f64 * h];
            best = best.min(objective(&z, points));
        }
    }
    (best, h)
}

// ---- oracle equivalence ----

pub fn krum_oracle(instances: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    for t in 0..instances {
        let m = r.random_range(0..=2usize);
        let k = r.random_range((2 * m + 3).max(m + 3)..=8);
        let d = r.random_range(1..=4);
        let updates = if t % 2 == 0 {
            gaussian_updates(&mut r, k, d)
        } else {
            integer_updates(&mut r, k, d)
        };
        let got = krum_select(&updates, m).map_err(|e| e.to_string())?;
        let want = brute_force_krum(&updates, m);
        ensure(got == want, || format!("instance {t}: krum chose {got}, brute force {want}"))?;
    }
    Ok(format!("krum matched brute force on {instances} instances"))
}

pub fn coordinate_oracles(instances: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    for t in 0..instances {
        let k = r.random_range(1..=12);
        let d = r.random_range(1..=5);
        let updates = if t % 2 == 0 {
            gaussian_updates(&mut r, k, d)
        } else {
            integer_updates(&mut r, k, d)
        };
        let med = coordinate_median(&updates).map_err(|e| e.to_string())?;
        ensure(med.as_slice() == median_oracle(&updates).as_slice(), || {
            format!("instance {t}: median differs from sort oracle")
        })?;
        let beta = r.random_range(0.0..0.5);
        if k > 2 * trim_count(k, beta) {
            let tm = trimmed_mean(&updates, beta).map_err(|e| e.to_string())?;
            ensure(tm.as_slice() == trimmed_oracle(&updates, beta).as_slice(), || {
                format!("instance {t}: trimmed mean (beta {beta}) differs from sort oracle")
            })?;
        }
    }
    Ok(format!("median and trimmed mean matched sort oracles on {instances} instances"))
}

pub fn geomed_oracles(seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut worst_1d = 0.0f64;
    for t in 0..100 {
        let k = 2 * r.random_range(0..5usize) + 1;
        let updates = gaussian_updates(&mut r, k, 1);
        let g = geomed(&updates, 1e-10, 10_000).map_err(|e| e.to_string())?;
        let diff = (g[0] - median_oracle(&updates)[0]).abs();
        worst_1d = worst_1d.max(diff);
        ensure(diff <= 1e-6, || format!("1-D instance {t}: |geomed - median| = {diff:e}"))?;
    }
    let mut worst_gap = f64::NEG_INFINITY;
    for t in 0..10 {
        let k = r.random_range(3..=7);
        let updates = gaussian_updates(&mut r, k, 2);
        let g = geomed(&updates, 1e-7, 1000).map_err(|e| e.to_string())?;
        let (grid, h) = grid_geomed_objective(&updates, 1000);
        let gap = objective(&g, &updates) - grid;
        worst_gap = worst_gap.max(gap);
        ensure(gap <= h, || format!("2-D instance {t}: objective gap {gap:e} exceeds grid step {h:e}"))?;
    }
    Ok(format!(
        "geomed: worst 1-D deviation {worst_1d:.1e}, worst 2-D objective gap {worst_gap:.1e}"
    ))
}

pub fn criterion_oracles() -> Outcome {
    let start = Instant::now();
    let a = krum_oracle(200, 11)?;
    let b = coordinate_oracles(200, 12)?;
    let c = geomed_oracles(13)?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("suite took {secs:.1}s"))?;
    Ok(format!("{a}; {b}; {c}; {secs:.2}s"))
}

// ---- single-attacker breakdown ----

/// One attacker among six benign clients on the unit circle. The attacker
/// solves for the upload that puts the mean exactly on a chosen target.
pub fn criterion_breakdown() -> Outcome {
    // Integer points of norm 65 keep every sum exact, so the mean can hit the
    // target bit for bit.
    let points = [[63.0, 16.0], [60.0, 25.0], [56.0, 33.0], [52.0, 39.0], [39.0, 52.0], [33.0, 56.0]];
    let benign: Vec<UpdateVector> = points.iter().map(|p| uv(p.to_vec())).collect();
    let k = benign.len() + 1;
    let target = [-1234.5, 678.25];
    let sum = benign.iter().fold([0.0; 2], |acc, u| [acc[0] + u[0], acc[1] + u[1]]);
    let attacker = uv(vec![k as f64 * target[0] - sum[0], k as f64 * target[1] - sum[1]]);
    let mut all = vec![attacker];
    all.extend(benign.iter().cloned());

    let m = mean(&all).map_err(|e| e.to_string())?;
    ensure(m.as_slice() == target, || format!("mean = {:?}, target {target:?}", m.as_slice()))?;

    let lo: Vec<f64> = (0..2).map(|i| benign.iter().map(|u| u[i]).fold(f64::INFINITY, f64::min)).collect();
    let hi: Vec<f64> = (0..2).map(|i| benign.iter().map(|u| u[i]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let within = |v: &UpdateVector| (0..2).all(|i| lo[i] <= v[i] && v[i] <= hi[i]);
    let krum_out = krum(&all, 1).map_err(|e| e.to_string())?;
    let median_out = coordinate_median(&all).map_err(|e| e.to_string())?;
    let (cc_out, _) =
        clipped_clustering(&all, &mut NormHistory::new(), Linkage::Average).map_err(|e| e.to_string())?;
    for (name, out) in [("krum", &krum_out), ("median", &median_out), ("clipped_clustering", &cc_out)] {
        ensure(within(out), || format!("{name} output {:?} left the benign range", out.as_slice()))?;
    }
    Ok(format!(
        "mean hit {target:?} exactly; krum {:?}, median {:?}, clipped_clustering {:?} stayed in range",
        krum_out.as_slice(),
        median_out.as_slice(),
        cc_out.as_slice()
    ))
}

// ---- IPM sign law ----

pub fn criterion_ipm(instances: usize, seed: u64) -> Outcome {
    let (k, m) = (20usize, 5usize);
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for t in 0..instances {
        let d = r.random_range(1..=20);
        let benign = gaussian_updates(&mut r, k - m, d);
        for eps in [0.5, 100.0] {
            let ctx = AttackContext {
                benign_updates: &benign,
                own_updates: &[],
                num_clients: k,
                num_byzantine: m,
                server_tau: None,
                server_linkage: Linkage::Average,
            };
            let mut all = ipm_attack(&ctx, eps).map_err(|e| e.to_string())?;
            all.extend(benign.iter().cloned());
            let got = mean(&all).map_err(|e| e.to_string())?;
            let coef = (k as f64 - m as f64 * (1.0 + eps)) / (k as f64 * (k - m) as f64);
            ensure((coef - ipm_mean_coefficient(k, m, eps)).abs() < 1e-15, || "coefficient helper disagrees".into())?;
            ensure((coef > 0.0) == (eps == 0.5), || format!("coefficient {coef} has the wrong sign for eps {eps}"))?;
            for i in 0..d {
                let want = coef * benign.iter().map(|u| u[i]).sum::<f64>();
                let err = (got[i] - want).abs();
                worst = worst.max(err);
                ensure(err <= 1e-9, || format!("instance {t}, eps {eps}: error {err:e}"))?;
            }
        }
    }
    Ok(format!("{instances} instances, worst error {worst:.1e}; factor > 0 at eps 0.5, < 0 at eps 100"))
}

// ---- adaptive attack ----

/// Benign updates spread around a shared direction, the way honest
/// gradients are; two loose sub-populations make the clustering nontrivial.
pub fn benign_population(r: &mut impl Rng, n: usize, d: usize) -> Vec<UpdateVector> {
    let base: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
    let other: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
    let split = r.random_range(1..n);
    (0..n)
        .map(|i| {
            let pull = if i < split { 0.0 } else { r.random_range(0.3..1.0) };
            let noise = r.random_range(0.1..0.8);
            uv((0..d)
                .map(|j| base[j] + pull * other[j] + noise * r.sample::<f64, _>(StandardNormal))
                .collect())
        })
        .collect()
}

pub fn criterion_adaptive(trials: usize, seed: u64) -> Outcome {
    let (k, m) = (20usize, 5usize);
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let (mut contained, mut degenerate_misses) = (0usize, 0usize);
    for t in 0..trials {
        let d = [2usize, 10, 100][t % 3];
        let linkage = if t % 2 == 0 { Linkage::Average } else { Linkage::Complete };
        let benign = benign_population(&mut r, k - m, d);
        let mut history = NormHistory::new();
        history.extend(benign.iter().map(|u| u.norm()));
        let tau = fedrobust::aggregators::adaptive_tau(&history).map_err(|e| e.to_string())?;
        let ctx = AttackContext {
            benign_updates: &benign,
            own_updates: &[],
            num_clients: k,
            num_byzantine: m,
            server_tau: Some(tau),
            server_linkage: linkage,
        };
        let plan = adaptive_attack(&ctx, 1e-3).map_err(|e| e.to_string())?;
        let e1e = dot(&plan.e1, &plan.e);
        let e1p = dot(&plan.e1, &plan.e_prime);
        let err = (e1e - (plan.theta + plan.theta_prime).cos())
            .abs()
            .max((e1p - plan.theta_prime.cos()).abs())
            .max((dot(&plan.e1, &plan.e1).sqrt() - 1.0).abs());
        worst = worst.max(err);
        ensure(err <= 1e-9, || format!("trial {t} (d = {d}): identity error {err:e}"))?;
        let upload_norm = plan.updates[0].norm();
        ensure((upload_norm - tau).abs() <= 1e-9 * tau.max(1.0), || {
            format!("trial {t}: upload norm {upload_norm} != tau {tau}")
        })?;

        // The server clips to tau and re-clusters everything it received.
        let mut all: Vec<UpdateVector> = plan.updates.clone();
        all.extend(benign.iter().cloned());
        let clipped: Vec<UpdateVector> = all
            .iter()
            .map(|u| fedrobust::aggregators::clip_by_norm(u, tau).expect("tau > 0"))
            .collect();
        let groups = cluster_two_groups(&clipped, linkage).map_err(|e| e.to_string())?;
        let dist = DistanceMatrix::cosine(&clipped).map_err(|e| e.to_string())?;
        let majority = select_majority(&groups, &dist);
        if (0..m).all(|i| majority.contains(&i)) {
            contained += 1;
        } else if plan.degenerate || plan.theta < 1e-6 {
            degenerate_misses += 1;
        }
    }
    let rate = contained as f64 / trials as f64;
    ensure(rate >= 0.95, || {
        format!(
            "identities hold (worst {worst:.1e}) but the malicious updates landed in the majority in only \
             {contained}/{trials} trials ({degenerate_misses} misses at degenerate theta)"
        )
    })?;
    Ok(format!(
        "identities hold (worst {worst:.1e}); contained in {contained}/{trials} trials ({degenerate_misses} degenerate misses)"
    ))
}

// ---- FedSGD/FedAvg equivalence ----

pub fn criterion_equivalence(rounds: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let train = synthetic_blobs(3, 200, 5, 3.0, &mut r).map_err(|e| e.to_string())?;
    let test = synthetic_blobs(3, 50, 5, 3.0, &mut r).map_err(|e| e.to_string())?;
    let k = 6;
    let partition = PartitionScheme::Iid {}.apply(train.labels(), k, &mut r).map_err(|e| e.to_string())?;
    let arch = Architecture::mlp(5, 8, 3).map_err(|e| e.to_string())?;
    let make = |algorithm| {
        let mut c = FederationConfig::new(algorithm, k, 0, rounds);
        c.local_steps = 1;
        c.batch_size = 16;
        c.seed = seed;
        c.schedule = Schedule::fedsgd();
        c.eval_interval = 1;
        Simulation::new(
            c,
            arch.clone(),
            &train,
            &test,
            partition.clone(),
            &AggregatorSpec::Mean {},
            AttackSpec::none(),
        )
        .map_err(|e| e.to_string())
    };
    let mut sgd = make(Algorithm::FedSgd)?;
    let mut avg = make(Algorithm::FedAvg)?;
    let mut worst = 0.0f64;
    for t in 0..rounds {
        sgd.run_round().map_err(|e| e.to_string())?;
        avg.run_round().map_err(|e| e.to_string())?;
        let gap = sgd
            .params()
            .iter()
            .zip(avg.params())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(gap);
        ensure(gap <= 1e-10, || format!("round {t}: trajectories differ by {gap:e}"))?;
    }
    Ok(format!("{rounds} rounds, max parameter gap {worst:.1e}"))
}

// ---- gradient check ----

/// Central finite differences with step `h` against the analytic gradient;
/// returns the worst relative error, using `max(|a|, |b|, floor)` as the
/// scale so coordinates with vanishing gradient are compared absolutely.
pub fn gradient_check(arch: &Architecture, params: &[f64], batch: &Batch<'_>, h: f64, floor: f64) -> f64 {
    let analytic = arch.loss_grad(params, batch).expect("valid batch").grad;
    let mut w = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..w.len() {
        let orig = w[i];
        w[i] = orig + h;
        let up = arch.loss_grad(&w, batch).expect("valid").loss;
        w[i] = orig - h;
        let down = arch.loss_grad(&w, batch).expect("valid").loss;
        w[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(fd.abs()).max(floor);
        worst = worst.max((analytic[i] - fd).abs() / scale);
    }
    worst
}

pub struct Problem {
    pub arch: Architecture,
    pub params: Vec<f64>,
    pub data: Dataset,
}

impl Problem {
    pub fn batch(&self) -> Batch<'_> {
        self.data.all()
    }
}

pub fn random_problem(r: &mut impl Rng, arch: Architecture, n: usize) -> Problem {
    let input = arch.input_dim();
    let classes = arch.num_classes();
    let mut params = arch.init(r).values;
    // Nonzero biases so every parameter is exercised.
    params.iter_mut().for_each(|p| *p += 0.1 * r.sample::<f64, _>(StandardNormal));
    let features = (0..n * input).map(|_| r.sample(StandardNormal)).collect();
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    let data = Dataset::new(features, labels, input, classes).expect("consistent");
    Problem { arch, params, data }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradient coordinates below this magnitude are compared absolutely;
/// central differences at h = 1e-5 carry roughly 1e-11 of rounding noise.
pub const FD_FLOOR: f64 = 1e-6;

pub fn criterion_gradients(pairs: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut report = Vec::new();
    for (name, make) in [
        ("mlp", (|| Architecture::mlp(6, 5, 4)) as fn() -> fedrobust::Result<Architecture>),
        ("logistic", || Architecture::logistic(6, 4)),
    ] {
        let mut worst = 0.0f64;
        for p in 0..pairs {
            let problem = random_problem(&mut r, make().map_err(|e| e.to_string())?, 1 + p % 7);
            let err = gradient_check(&problem.arch, &problem.params, &problem.batch(), FD_STEP, FD_FLOOR);
            worst = worst.max(err);
            ensure(err <= FD_TOLERANCE, || format!("{name} pair {p}: relative error {err:e}"))?;
        }
        report.push(format!("{name} worst {worst:.1e} over {pairs} pairs"));
    }
    Ok(report.join(", "))
}

// ---- MNIST criteria ----

pub fn mnist_dir() -> PathBuf {
    std::env::var_os("FEDROBUST_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn load_mnist_or_skip() -> Option<(Dataset, Dataset)> {
    let dir = mnist_dir();
    load_mnist(&dir).ok()
}

pub struct MnistRun<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub algorithm: Algorithm,
    pub partition: PartitionScheme,
    pub num_byzantine: usize,
    pub rounds: usize,
    pub seed: u64,
    pub similarity_rounds: Vec<usize>,
}

impl MnistRun<'_> {
    pub fn config(&self) -> FederationConfig {
        let mut c = FederationConfig::new(self.algorithm, 20, self.num_byzantine, self.rounds);
        c.local_steps = 50;
        c.batch_size = 128;
        c.seed = self.seed;
        c.eval_interval = 10;
        c.similarity_rounds = self.similarity_rounds.clone();
        c
    }

    pub fn run(&self, aggregator: &AggregatorSpec, attack: AttackSpec) -> Result<Vec<fedrobust::RoundLog>, String> {
        let partition = self
            .partition
            .apply(self.train.labels(), 20, &mut stream(self.seed, Purpose::Partition, 0, 0))
            .map_err(|e| e.to_string())?;
        let arch = Architecture::mlp(784, 200, 10).map_err(|e| e.to_string())?;
        run_experiment(self.config(), arch, self.train, self.test, partition, aggregator, attack, |_| {})
            .map_err(|e| e.to_string())
    }

    pub fn final_accuracy(&self, aggregator: &AggregatorSpec, attack: AttackSpec) -> Result<f64, String> {
        let logs = self.run(aggregator, attack)?;
        let summary = fedrobust::metrics::summarize(&logs).map_err(|e| e.to_string())?;
        Ok(summary.final_accuracy)
    }
}

pub fn mnist_setup<'a>(train: &'a Dataset, test: &'a Dataset, partition: PartitionScheme) -> MnistRun<'a> {
    MnistRun {
        train,
        test,
        algorithm: Algorithm::FedAvg,
        partition,
        num_byzantine: 5,
        rounds: 100,
        seed: 1,
        similarity_rounds: Vec::new(),
    }
}

pub fn clipped_clustering_spec() -> AggregatorSpec {
    AggregatorSpec::ClippedClustering {
        linkage: Linkage::Average,
    }
}

pub fn criterion_mnist_iid(train: &Dataset, test: &Dataset) -> Outcome {
    let run = mnist_setup(train, test, PartitionScheme::Iid {});
    let ipm = AttackSpec::Ipm { epsilon: 100.0 };
    let cells: [(&str, AggregatorSpec, AttackSpec, bool, f64); 4] = [
        ("5a mean/none", AggregatorSpec::Mean {}, AttackSpec::none(), true, 0.95),
        ("5b mean/ipm100", AggregatorSpec::Mean {}, ipm.clone(), false, 0.20),
        ("5c clipped_clustering/ipm100", clipped_clustering_spec(), ipm, true, 0.93),
        ("5d clipped_clustering/sign_flip", clipped_clustering_spec(), AttackSpec::SignFlip {}, true, 0.93),
    ];
    let mut details = Vec::new();
    let mut failed = false;
    for (name, agg, attack, at_least, bound) in cells {
        let start = Instant::now();
        let acc = run.final_accuracy(&agg, attack)?;
        let ok = if at_least { acc >= bound } else { acc <= bound };
        failed |= !ok;
        let cmp = if at_least { ">=" } else { "<=" };
        details.push(format!(
            "{name}: {acc:.4} (need {cmp} {bound}) {} in {:.0}s",
            if ok { "ok" } else { "MISS" },
            start.elapsed().as_secs_f64()
        ));
    }
    if failed {
        Err(details.join("; "))
    } else {
        Ok(details.join("; "))
    }
}

pub fn criterion_noniid(train: &Dataset, test: &Dataset) -> Outcome {
    let run = mnist_setup(train, test, PartitionScheme::Dirichlet { alpha: 0.1 });
    let mean_acc = run.final_accuracy(&AggregatorSpec::Mean {}, AttackSpec::none())?;
    let geomed_acc = run.final_accuracy(&AggregatorSpec::GeoMed {}, AttackSpec::none())?;
    let gap = 100.0 * (mean_acc - geomed_acc);
    let detail = format!("mean {mean_acc:.4}, geomed {geomed_acc:.4}, gap {gap:.1} points (need >= 10)");
    if gap >= 10.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Round whose benign updates are compared in the similarity check. At
/// round 0 both algorithms start from the same seeded model, so the
/// updates differ only in how they were computed.
pub const SIMILARITY_SNAPSHOT: usize = 0;

pub fn criterion_similarity(train: &Dataset, test: &Dataset, seeds: &[u64]) -> Outcome {
    let mut totals = [0.0f64; 2];
    let mut per_seed = Vec::new();
    for &seed in seeds {
        let mut pair = [0.0; 2];
        for (slot, algorithm) in [Algorithm::FedAvg, Algorithm::FedSgd].into_iter().enumerate() {
            let run = MnistRun {
                train,
                test,
                algorithm,
                partition: PartitionScheme::Iid {},
                num_byzantine: 0,
                rounds: SIMILARITY_SNAPSHOT + 1,
                seed,
                similarity_rounds: vec![SIMILARITY_SNAPSHOT],
            };
            let logs = run.run(&AggregatorSpec::Mean {}, AttackSpec::none())?;
            pair[slot] = logs[SIMILARITY_SNAPSHOT]
                .mean_similarity
                .ok_or_else(|| "similarity was not captured".to_string())?;
            totals[slot] += pair[slot];
        }
        per_seed.push(format!("seed {seed}: fedavg {:.3} fedsgd {:.3}", pair[0], pair[1]));
    }
    let n = seeds.len() as f64;
    let (avg, sgd) = (totals[0] / n, totals[1] / n);
    let detail = format!("round {SIMILARITY_SNAPSHOT}: mean fedavg {avg:.3} vs fedsgd {sgd:.3} ({})", per_seed.join(", "));
    if avg > sgd {
        Ok(detail)
    } else {
        Err(detail)
    }
}
