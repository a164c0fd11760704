//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Criteria 6-9 train real models and take a few
//! minutes in release mode.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use vads::adversarial::{
    objective_backward, AdversarialConfig, BackwardSpec, Fusion, Optimizer, OptimizerKind,
    HEAD_D_GROUP, HEAD_Y_GROUP,
};
use vads::checks::{gradient_suite, SuiteOptions, GRAD_TOLERANCE};
use vads::data::{generate_dataset, held_out, CrossViewDataset, GenerationParams, SequencePair};
use vads::eval::{
    cmc, fusion_ablation, mean_ap, rank_gallery, variable_length_ablation, ScoreMatrix,
    DEFAULT_ABLATION_LENGTHS,
};
use vads::model::{Model, ModelConfig};
use vads::numerics::{gaussian_kl_diag, gaussian_kl_monte_carlo, GaussianParams, Rng, Tensor};
use vads::recurrent::{mult_count_projected, mult_count_vanilla, projection_reduction};
use vads::training::{
    default_lambda_grid, load_checkpoint, model_config_for, report_csv, save_checkpoint,
    select_lambda, EvalSet, TrainConfig, Trainer, HELD_OUT_IDENTITIES,
};
use vads::vrnn::{FrameSequence, View, DECODER_GROUP, ENCODER_GROUP};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

// ---------------------------------------------------------------- 1

fn cost_model() -> Outcome {
    let t = Instant::now();
    let vanilla = mult_count_vanilla(1024, 1024);
    let projected = mult_count_projected(256, 1024, 256);
    let reduction = projection_reduction(1024, 1024, 256, 256);
    let elapsed = t.elapsed();
    check(
        vanilla == 8_388_608
            && projected == 2_359_296
            && reduction == 0.71875
            && elapsed < Duration::from_millis(1),
        format!("vanilla {vanilla}, projected {projected}, reduction {reduction}, {elapsed:?}"),
    )
}

// ---------------------------------------------------------------- 2

fn gradients() -> Outcome {
    let t = Instant::now();
    let checks = gradient_suite(SuiteOptions::default()).map_err(fail)?;
    let elapsed = t.elapsed();
    let worst = checks
        .iter()
        .map(|c| c.report.max_rel_error)
        .fold(0.0, f64::max);
    let names: Vec<String> = checks
        .iter()
        .map(|c| format!("{} {:.2e}", c.name, c.report.max_rel_error))
        .collect();
    check(
        checks.iter().all(|c| c.passes())
            && worst < GRAD_TOLERANCE
            && elapsed < Duration::from_secs(60),
        format!("{}; {elapsed:.1?}", names.join(", ")),
    )
}

// ---------------------------------------------------------------- 3

fn toy_batch(classes: usize, rng: &mut Rng) -> Vec<SequencePair> {
    let frames = |rng: &mut Rng, len: usize| -> Vec<Vec<f64>> {
        (0..len)
            .map(|_| (0..8).map(|_| rng.normal()).collect())
            .collect()
    };
    (0..classes)
        .map(|i| SequencePair {
            probe: FrameSequence::new(frames(rng, 3 + i % 3), i, View::Probe).unwrap(),
            gallery: FrameSequence::new(frames(rng, 2 + i % 4), i, View::Gallery).unwrap(),
            label: i,
        })
        .collect()
}

fn update_equivalence() -> Outcome {
    let lambda = 0.6;
    let lr = 0.05;
    let base = Model::new(ModelConfig::toy(4), 5).map_err(fail)?;
    let batch = toy_batch(4, &mut Rng::new(6));
    let cfg = AdversarialConfig {
        lambda,
        ..AdversarialConfig::default()
    };
    let grads = |spec: BackwardSpec| -> Result<Vec<Tensor>, String> {
        let mut m = base.clone();
        objective_backward(&mut m, &batch, &cfg, spec, &mut Rng::new(7)).map_err(fail)?;
        Ok(m.store.grads_snapshot())
    };

    // reversal path: one backward pass, one SGD step
    let mut reversed = base.clone();
    objective_backward(
        &mut reversed,
        &batch,
        &cfg,
        BackwardSpec::training(lambda),
        &mut Rng::new(7),
    )
    .map_err(fail)?;
    let mut sgd = Optimizer::new(OptimizerKind::Sgd, lr, &reversed.store);
    sgd.update_step(&mut reversed.store).map_err(fail)?;

    // the four update rules, one per parameter group
    let d_v = grads(BackwardSpec::vrnn_only())?;
    let d_c = grads(BackwardSpec::classification_only())?;
    let d_r = grads(BackwardSpec::verification_only())?;
    let store = &base.store;
    let mut worst: f64 = 0.0;
    let mut groups_seen = [false; 4];
    for id in store.ids() {
        let k = id.index();
        let (v, c, r) = (d_v[k].data(), d_c[k].data(), d_r[k].data());
        let group = store.group(id);
        let step: Box<dyn Fn(usize) -> f64> = match group {
            g if g == ENCODER_GROUP => {
                groups_seen[0] = true;
                Box::new(|i| v[i] + c[i] - lambda * r[i])
            }
            g if g == DECODER_GROUP => {
                groups_seen[1] = true;
                Box::new(|i| v[i])
            }
            g if g == HEAD_Y_GROUP || g == HEAD_D_GROUP => {
                groups_seen[if g == HEAD_Y_GROUP { 2 } else { 3 }] = true;
                Box::new(|i| c[i] - lambda * r[i])
            }
            other => return Err(format!("unexpected parameter group {other}")),
        };
        let before = store.value(id).data();
        let after = reversed.store.value(id).data();
        for i in 0..before.len() {
            let want = before[i] - lr * step(i);
            worst = worst.max((after[i] - want).abs());
        }
    }
    check(
        worst <= 1e-10 && groups_seen.iter().all(|&s| s),
        format!("max |Δθ| difference {worst:.2e} over encoder, decoder, head_y, head_d"),
    )
}

// ---------------------------------------------------------------- 4

fn kl_monte_carlo() -> Outcome {
    let mut rng = Rng::new(404);
    let mut worst: f64 = 0.0;
    for pair in 0..20 {
        let dim = rng.int_inclusive(1, 8);
        let mut draw = || {
            let mean = (0..dim).map(|_| rng.normal()).collect();
            let std = (0..dim).map(|_| rng.uniform(0.5, 2.0)).collect();
            GaussianParams::new(mean, std)
        };
        let q = draw().map_err(fail)?;
        let p = draw().map_err(fail)?;
        let exact = gaussian_kl_diag(&q, &p).map_err(fail)?;
        let est = gaussian_kl_monte_carlo(&q, &p, 1_000_000, &mut Rng::derive(404, pair))
            .map_err(fail)?;
        worst = worst.max((est - exact).abs() / exact);
    }
    check(
        worst < 0.01,
        format!("worst relative error {:.3}% over 20 pairs", 100.0 * worst),
    )
}

// ---------------------------------------------------------------- 5

/// Brute-force rank of the first correct match: sort the gallery by score,
/// ties broken by gallery index, and walk down the list.
fn brute_ranks(s: &[Vec<f64>], pl: &[usize], gl: &[usize]) -> Vec<usize> {
    s.iter()
        .zip(pl)
        .map(|(row, &label)| {
            let order = sorted_order(row);
            order.iter().position(|&j| gl[j] == label).unwrap() + 1
        })
        .collect()
}

fn sorted_order(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    order
}

fn brute_map(s: &[Vec<f64>], pl: &[usize], gl: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in s.iter().zip(pl) {
        let order = sorted_order(row);
        let (mut hits, mut sum) = (0, 0.0);
        for (k, &j) in order.iter().enumerate() {
            if gl[j] == label {
                hits += 1;
                sum += hits as f64 / (k + 1) as f64;
            }
        }
        total += sum / hits as f64;
    }
    total / s.len() as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = Rng::new(505);
    let trials = 2000;
    let mut with_ties = 0;
    for trial in 0..trials {
        let rows = rng.int_inclusive(1, 6);
        let cols = rng.int_inclusive(1, 8);
        let classes = rng.int_inclusive(1, cols);
        // every class appears at least once in the gallery
        let mut gl: Vec<usize> = (0..cols)
            .map(|j| {
                if j < classes {
                    j
                } else {
                    rng.int_inclusive(0, classes - 1)
                }
            })
            .collect();
        rng.shuffle(&mut gl);
        let pl: Vec<usize> = (0..rows)
            .map(|_| rng.int_inclusive(0, classes - 1))
            .collect();
        // coarse levels make ties common
        let levels = rng.int_inclusive(1, 4);
        let s: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                (0..cols)
                    .map(|_| rng.int_inclusive(0, levels) as f64 / levels as f64)
                    .collect()
            })
            .collect();
        if s.iter()
            .any(|r| (1..r.len()).any(|j| r[..j].contains(&r[j])))
        {
            with_ties += 1;
        }
        let m = ScoreMatrix::new(s.concat(), pl.clone(), gl.clone()).map_err(fail)?;
        let ranks = rank_gallery(&m).map_err(fail)?;
        let want = brute_ranks(&s, &pl, &gl);
        if ranks != want {
            return Err(format!("trial {trial}: ranks {ranks:?} != {want:?}"));
        }
        for r in 1..=cols {
            let brute = want.iter().filter(|&&k| k <= r).count() as f64 / rows as f64;
            if cmc(&ranks, r).map_err(fail)? != brute {
                return Err(format!("trial {trial}: cmc@{r} mismatch"));
            }
        }
        let (got, brute) = (mean_ap(&m).map_err(fail)?, brute_map(&s, &pl, &gl));
        if got != brute {
            return Err(format!("trial {trial}: mAP {got} != {brute}"));
        }
    }
    check(
        with_ties > trials / 2,
        format!("{trials} matrices up to 6x8, {with_ties} with tied scores, all exact"),
    )
}

// ---------------------------------------------------------------- 6-9

/// The default generator, seeded. Sweeps vary the dataset seed together
/// with the training seed.
fn default_dataset(seed: u64) -> Result<CrossViewDataset, String> {
    generate_dataset(&GenerationParams::default(), seed).map_err(fail)
}

/// Default training with every epoch run, so the per-epoch curves cover
/// the full schedule.
fn full_schedule(seed: u64, lambda: f64) -> TrainConfig {
    let base = TrainConfig::default();
    TrainConfig {
        seed,
        lambda,
        patience: base.epochs,
        ..base
    }
}

fn monitor_for(ds: &CrossViewDataset) -> Result<EvalSet, String> {
    Ok(EvalSet::from_dataset(
        &held_out(ds, HELD_OUT_IDENTITIES).map_err(fail)?,
    ))
}

/// Average ranks, ties sharing the mean of their positions.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

fn adversarial_effect() -> Outcome {
    let t = Instant::now();
    let (mut kl_lower, mut r1_ok, mut negative) = (0, 0, 0);
    let mut rows = Vec::new();
    for seed in SEEDS {
        let ds = default_dataset(seed)?;
        let monitor = monitor_for(&ds)?;
        let mut finals = Vec::new();
        for lambda in [0.0, 0.6] {
            let mut tr = Trainer::new(&ds, model_config_for(&ds), full_schedule(seed, lambda))
                .map_err(fail)?
                .with_monitor(monitor.clone());
            tr.run().map_err(fail)?;
            let curve: Vec<_> = tr.records().iter().filter_map(|r| r.monitor).collect();
            let kl: Vec<f64> = curve.iter().map(|m| m.kl).collect();
            let r1: Vec<f64> = curve.iter().map(|m| m.rank1).collect();
            finals.push((*curve.last().ok_or("no epochs")?, spearman(&kl, &r1)));
        }
        let ((base, _), (adv, rho)) = (finals[0], finals[1]);
        kl_lower += usize::from(adv.kl < base.kl);
        r1_ok += usize::from(adv.rank1 >= base.rank1);
        negative += usize::from(rho < 0.0);
        rows.push(format!(
            "seed {seed}: KL {:.3}->{:.3} rank-1 {:.3}->{:.3} rho {rho:+.2}",
            base.kl, adv.kl, base.rank1, adv.rank1
        ));
    }
    let elapsed = t.elapsed();
    for r in &rows {
        println!("    {r}");
    }
    check(
        kl_lower >= 4 && r1_ok >= 4 && negative >= 4 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "KL lower {kl_lower}/5, rank-1 >= {r1_ok}/5, Spearman < 0 {negative}/5; {elapsed:.0?}"
        ),
    )
}

fn length_trend() -> Outcome {
    let ds = default_dataset(0)?;
    let test = monitor_for(&ds)?;
    let mut tr = Trainer::new(&ds, model_config_for(&ds), full_schedule(0, 0.6)).map_err(fail)?;
    tr.run().map_err(fail)?;
    let (model, _) = tr.finish().map_err(fail)?;
    let grid = variable_length_ablation(
        &model,
        &test.probe,
        &test.gallery,
        &DEFAULT_ABLATION_LENGTHS,
    )
    .map_err(fail)?;
    let mean_over = |keep: &dyn Fn(usize) -> bool| {
        let cells: Vec<f64> = grid
            .rank1
            .iter()
            .flat_map(|row| {
                row.iter()
                    .zip(&grid.lengths)
                    .filter(|(_, &l)| keep(l))
                    .map(|(&v, _)| v)
            })
            .collect();
        cells.iter().sum::<f64>() / cells.len() as f64
    };
    let (long, short) = (mean_over(&|l| l >= 32), mean_over(&|l| l <= 4));
    check(
        long > short,
        format!("mean rank-1 gallery >= 32: {long:.4}, gallery <= 4: {short:.4}"),
    )
}

fn fusion() -> Outcome {
    let mut runs = Vec::new();
    for seed in SEEDS {
        let ds = default_dataset(seed)?;
        let test = monitor_for(&ds)?;
        runs.extend(fusion_ablation(&full_schedule(seed, 0.6), &ds, &test, &[seed]).map_err(fail)?);
    }
    let mut wins = 0;
    for pair in runs.chunks(2) {
        let (early, late) = (&pair[0], &pair[1]);
        assert_eq!((early.fusion, late.fusion), (Fusion::Early, Fusion::Late));
        let (e, l) = (
            early.final_rank1().ok_or("no epochs")?,
            late.final_rank1().ok_or("no epochs")?,
        );
        println!("    seed {}: rank-1 early {e:.4} late {l:.4}", early.seed);
        wins += usize::from(e >= l);
    }

    let ds = default_dataset(0)?;
    let test = monitor_for(&ds)?;
    let zero = fusion_ablation(&full_schedule(0, 0.0), &ds, &test, &[0]).map_err(fail)?;
    let curve = |i: usize| -> Vec<[u64; 5]> {
        zero[i]
            .records
            .iter()
            .map(|r| {
                let val = r.val.map(|v| v.total).unwrap_or(f64::NAN);
                [r.train.total, r.train.l_v, r.train.l_c, r.train.l_y, val].map(f64::to_bits)
            })
            .collect()
    };
    let identical = curve(0) == curve(1);
    check(
        wins >= 3 && identical,
        format!("early >= late in {wins}/5 seeds; lambda=0 loss curves bit-identical: {identical}"),
    )
}

fn lambda_selection() -> Outcome {
    let t = Instant::now();
    let ds = default_dataset(0)?;
    let grid = default_lambda_grid();
    let sel = select_lambda(&ds, &grid, &TrainConfig::default()).map_err(fail)?;
    let elapsed = t.elapsed();
    let expected: Vec<f64> = (0..9).map(|k| 10f64.powf(-2.0 + k as f64 / 4.0)).collect();
    let grid_ok = grid.len() == 9
        && grid
            .iter()
            .zip(&expected)
            .all(|(a, b)| (a - b).abs() <= 1e-12 * b)
        && grid[0] >= 1e-2
        && grid[8] <= 1.0;
    let argmin = sel
        .risks
        .iter()
        .fold((f64::NAN, f64::INFINITY), |acc, &(l, r)| {
            if r < acc.1 {
                (l, r)
            } else {
                acc
            }
        })
        .0;
    let listed: Vec<f64> = sel.risks.iter().map(|r| r.0).collect();
    check(
        grid_ok && listed == grid && sel.best == argmin && elapsed < Duration::from_secs(30 * 60),
        format!(
            "9 candidates {:.4}..{:.4}, selected {:.4}; {elapsed:.0?}",
            grid[0], grid[8], sel.best
        ),
    )
}

// ---------------------------------------------------------------- 10

fn determinism() -> Outcome {
    let ds = default_dataset(0)?;
    let cfg = TrainConfig {
        epochs: 6,
        patience: 6,
        ..TrainConfig::default()
    };
    let full_run = || -> Result<Trainer, String> {
        let mut tr = Trainer::new(&ds, model_config_for(&ds), cfg).map_err(fail)?;
        tr.run().map_err(fail)?;
        Ok(tr)
    };
    let a = full_run()?;
    let b = full_run()?;
    let same_report = report_csv(a.records()).into_bytes() == report_csv(b.records()).into_bytes();

    let mut part = Trainer::new(&ds, model_config_for(&ds), cfg).map_err(fail)?;
    for _ in 0..3 {
        part.run_epoch().map_err(fail)?;
    }
    let dir = tempfile::tempdir().map_err(fail)?;
    let path = dir.path().join("ckpt.vack");
    save_checkpoint(&part.checkpoint(), &path).map_err(fail)?;
    drop(part);
    let mut resumed = Trainer::resume(&ds, &load_checkpoint(&path).map_err(fail)?).map_err(fail)?;
    resumed.run().map_err(fail)?;
    let tail =
        |t: &Trainer| -> Vec<_> { t.records()[3..].iter().map(|r| (r.train, r.val)).collect() };
    let resumed_ok = resumed.records().len() == a.records().len() && tail(&resumed) == tail(&a);
    let same_params = resumed.model().store.values_snapshot() == a.model().store.values_snapshot();
    check(
        same_report && resumed_ok && same_params,
        format!("report bytes equal: {same_report}; epochs 4-6 after resume equal: {resumed_ok}; final parameters equal: {same_params}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("cost model", cost_model),
        ("gradient suite", gradients),
        ("reversal update equivalence", update_equivalence),
        ("closed-form vs sampled KL", kl_monte_carlo),
        ("metric oracles", metric_oracles),
        ("adversarial effect", adversarial_effect),
        ("variable-length trend", length_trend),
        ("fusion ablation", fusion),
        ("lambda selection", lambda_selection),
        ("determinism and resume", determinism),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let (status, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "criterion {n}: {status} {name} ({:.1?}) {detail}",
            t.elapsed()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
