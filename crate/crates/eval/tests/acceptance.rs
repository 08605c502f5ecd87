//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mat_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict { pass, detail: detail.into() }
    }
}

type Criterion = fn() -> Verdict;

fn main() -> ExitCode {
    let criteria: [(&str, Option<Duration>, Criterion); 12] = [
        ("ntk additivity", Some(Duration::from_secs(10)), additivity),
        ("eigensolver oracle", Some(Duration::from_secs(10)), eigensolver),
        ("first-order loss reduction", Some(Duration::from_secs(30)), loss_reduction),
        ("function-space step", None, function_step),
        ("principal-only bound", None, principal_bound),
        ("policy unit suite", None, policy_suite),
        ("selective-backprop isolation", None, isolation),
        ("degenerate-policy equivalence", None, degenerate),
        ("flops savings at matched loss", Some(Duration::from_secs(600)), flops_savings),
        ("ntk overhead", None, overhead),
        ("effective rank", None, effective_rank_suite),
        ("pruning", None, pruning),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let mut v = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::new(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        if let Some(b) = budget {
            if elapsed > *b {
                v.pass = false;
                v.detail.push_str(&format!("; over the {}s budget", b.as_secs()));
            }
        }
        failed += usize::from(!v.pass);
        println!(
            "criterion {:>2} {:<32} {} ({:.2}s) {}",
            i + 1,
            name,
            if v.pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            v.detail
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn architectures() -> [Architecture; 3] {
    [
        Architecture::block_mlp(3, 2, 2, 8),
        Architecture::tiny_attention(8, 2, 2),
        Architecture::tiny_conv(6, 2, 4, 2, 2),
    ]
}

fn random_inputs(n: usize, d: usize, seed: u64) -> Matrix64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_targets(n: usize, k: usize, seed: u64) -> Matrix64 {
    random_inputs(n, k, seed ^ 0xabcdef)
}

fn additivity() -> Verdict {
    let mut worst = 0.0f64;
    for arch in architectures() {
        for seed in 0..5 {
            let net: Network = build_network(&arch, seed).unwrap();
            let x = random_inputs(8, arch.input_dim(), seed);
            let set = net.jacobians(&x, Scalarization::SumOfLogits).unwrap();
            let theta = matmul_transpose(&set.full).unwrap();
            let sum = integral_ntk(&set.blocks).unwrap();
            worst = worst.max(frobenius_distance(&theta, &sum).unwrap() / theta.frobenius_norm());
        }
    }
    Verdict::new(worst <= 1e-10, format!("max relative error {worst:.2e} (bound 1e-10)"))
}

fn eigensolver() -> Verdict {
    let mut analytic = 0.0f64;
    let cases: [(Vec<Vec<f64>>, Vec<f64>); 3] = [
        (vec![vec![2.0, 1.0], vec![1.0, 2.0]], vec![3.0, 1.0]),
        (vec![vec![4.0, 0.0], vec![0.0, -1.0]], vec![4.0, -1.0]),
        (
            vec![vec![2.0, -1.0, 0.0], vec![-1.0, 2.0, -1.0], vec![0.0, -1.0, 2.0]],
            vec![2.0 + 2f64.sqrt(), 2.0, 2.0 - 2f64.sqrt()],
        ),
    ];
    for (rows, expected) in cases {
        let s = eig_sym(&Matrix::from_rows(&rows).unwrap(), 1e-14).unwrap();
        for (a, b) in s.eigenvalues.iter().zip(&expected) {
            analytic = analytic.max((a - b).abs());
        }
    }
    let mut recon = 0.0f64;
    for seed in 0..3 {
        let a = random_inputs(64, 64, 100 + seed);
        let m = a.add(&a.transpose()).scale(0.5);
        let s = eig_sym(&m, 1e-14).unwrap();
        recon = recon.max(frobenius_distance(&m, &s.reconstruct()).unwrap() / m.frobenius_norm());
    }
    Verdict::new(
        analytic <= 1e-10 && recon <= 1e-8,
        format!("analytic error {analytic:.2e} (bound 1e-10), 64x64 reconstruction {recon:.2e} (bound 1e-8)"),
    )
}

/// Network with frozen shared parameters, a batch and the full-output
/// Jacobian blocks at the current parameters.
struct Probe {
    net: Network,
    batch: Batch64,
    lg: LossAndGradients<f64>,
    set: JacobianSet<f64>,
}

fn probe(arch: &Architecture, seed: u64) -> Probe {
    let mut net: Network = build_network(arch, seed).unwrap();
    net.set_shared_rule(SharedRule::Frozen);
    let x = random_inputs(8, arch.input_dim(), seed + 10);
    let y = random_targets(8, arch.output_dim(), seed + 10);
    let batch = Batch::new(x.clone(), y).unwrap();
    let lg = net.loss_and_gradients(&batch, LossKind::SquaredError).unwrap();
    let set = net.jacobians(&x, Scalarization::FullOutput).unwrap();
    Probe { net, batch, lg, set }
}

impl Probe {
    fn stepped(&self, eta: f64) -> Network {
        let mut next = self.net.clone();
        let all: BTreeSet<_> = next.module_ids().into_iter().collect();
        next.apply_selective_step(&self.lg.gradients, &all, eta).unwrap();
        next
    }

    fn output_grad(&self) -> Vec<f64> {
        self.lg.output_grad.as_slice().to_vec()
    }
}

fn loss_reduction() -> Verdict {
    let mut worst = [0.0f64; 2];
    for arch in architectures() {
        for seed in 0..5 {
            let p = probe(&arch, seed);
            let mntks: Vec<_> = p.set.blocks.iter().map(|b| build_mntk(b).unwrap()).collect();
            let predicted = predicted_loss_reduction(&mntks, &p.output_grad(), PredictionMode::Exact).unwrap();
            for (slot, eta) in [1e-4, 1e-5].into_iter().enumerate() {
                let after = p.stepped(eta).loss(&p.batch, LossKind::SquaredError).unwrap();
                let measured = (p.lg.loss - after) / eta;
                worst[slot] = worst[slot].max((measured - predicted).abs() / predicted);
            }
        }
    }
    Verdict::new(
        worst[0] <= 0.05 && worst[1] <= 0.005,
        format!(
            "max relative error {:.2e} at eta 1e-4 (bound 5e-2), {:.2e} at eta 1e-5 (bound 5e-3)",
            worst[0], worst[1]
        ),
    )
}

fn function_step() -> Verdict {
    let eta = 1e-4;
    let mut worst = 0.0f64;
    for arch in architectures() {
        for seed in 0..5 {
            let p = probe(&arch, seed);
            let theta = integral_ntk(&p.set.blocks).unwrap();
            let predicted: Vec<f64> = theta.mul_vec(&p.output_grad()).iter().map(|v| -eta * v).collect();
            let before = p.net.forward(&p.batch.inputs).unwrap().0;
            let after = p.stepped(eta).forward(&p.batch.inputs).unwrap().0;
            let measured = after.sub(&before);
            let err: f64 = measured.as_slice().iter().zip(&predicted).map(|(a, b)| (a - b).powi(2)).sum();
            let norm: f64 = predicted.iter().map(|v| v * v).sum();
            worst = worst.max((err / norm).sqrt());
        }
    }
    Verdict::new(worst <= 0.05, format!("max relative error {worst:.2e} (bound 5e-2)"))
}

fn principal_bound() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for trial in 0..100 {
        let s = rng.random_range(2..10);
        let modules = rng.random_range(1..5);
        let mntks: Vec<_> = (0..modules)
            .map(|m| {
                let p = rng.random_range(1..12);
                let scale = 10f64.powf(rng.random_range(-3.0..3.0));
                let values = random_inputs(s, p, trial * 17 + m).scale(scale);
                let block = JacobianBlock {
                    module: ModuleId::new(0, m as usize),
                    values,
                    scalarization: Scalarization::SumOfLogits,
                };
                build_mntk(&block).unwrap()
            })
            .collect();
        let g: Vec<f64> = (0..s).map(|_| rng.random_range(-2.0..2.0)).collect();
        let exact = predicted_loss_reduction(&mntks, &g, PredictionMode::Exact).unwrap();
        let principal = predicted_loss_reduction(&mntks, &g, PredictionMode::PrincipalOnly).unwrap();
        violations += usize::from(principal.is_nan() || exact.is_nan() || principal > exact);
    }
    Verdict::new(violations == 0, format!("{violations} of 100 spectra violate the bound"))
}

fn lambda_snapshot(values: &[(ModuleId, f64)], floor: bool) -> Snapshot64 {
    let map = values.iter().map(|&(id, l)| (id, (ModuleFamily::Head, l))).collect();
    let mut s = SpectrumSnapshot::from_lambdas(0, &map);
    if floor {
        for m in s.per_module.values_mut() {
            m.eigenvalues.push(0.0);
            m.lambda_min = 0.0;
        }
        s.global_lambda_min = 0.0;
    }
    s
}

fn policy_suite() -> Verdict {
    let id = ModuleId::new;
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    check("threshold 1..11 @ 0.1", eigen_threshold(1.0, 11.0, 0.1).unwrap() == 2.0);
    check("threshold 0..100 @ 0.2", eigen_threshold(0.0, 100.0, 0.2).unwrap() == 20.0);
    check("threshold degenerate range", eigen_threshold(5.0, 5.0, 0.7).unwrap() == 5.0);
    check("threshold rejects min > max", eigen_threshold(2.0, 1.0, 0.5).is_err());

    let s = lambda_snapshot(&[(id(0, 0), 10.0), (id(0, 1), 3.0), (id(0, 2), 1.0)], false);
    let sets = modular_split(&s, 3.0);
    check("boundary module is information", sets.information.contains(&id(0, 1)));
    check("below boundary is nuisance", sets.nuisance == BTreeSet::from([id(0, 2)]));

    check("temporal settled", temporal_criterion(10.0, 10.5, 10.500001, 1e-3));
    check("temporal moving", !temporal_criterion(10.0, 5.0, 8.0, 1e-3));
    check("temporal strict", !temporal_criterion(1.0, 0.0, 0.5, 0.5));
    check("temporal zero first delta", temporal_criterion(0.0, 3.0, 9.0, 1e-3));
    check("temporal tiny first delta", temporal_criterion(1e-13, 3.0, 9.0, 1e-3));

    let cfg = PolicyConfig { alpha: 0.9, ..PolicyConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut protected = true;
    for _ in 0..200 {
        let values: Vec<_> = (0..3)
            .flat_map(|l| (0..3).map(move |s| id(l, s)))
            .map(|m| (m, rng.random_range(0.0..10.0)))
            .collect();
        let sets = decide(&lambda_snapshot(&values, false), &mut PolicyState::new(), &cfg).unwrap();
        protected &= (0..3).all(|l| sets.information.iter().any(|m| m.layer == l));
    }
    check("protection keeps every layer", protected);

    let scripted = |sticky: bool| {
        let cfg = PolicyConfig { sticky, alpha: 0.01, ..PolicyConfig::default() };
        let mut st = PolicyState::new();
        [(10.0, 1.0), (20.0, 3.0), (30.0, 3.0), (40.0, 9.0)]
            .iter()
            .map(|&(a, b)| {
                let s = lambda_snapshot(&[(id(0, 0), a), (id(0, 1), b), (id(1, 0), 50.0)], true);
                decide(&s, &mut st, &cfg).unwrap()
            })
            .collect::<Vec<_>>()
    };
    let (sticky, loose) = (scripted(true), scripted(false));
    check("both modes stop settled module", sticky[2].nuisance.contains(&id(0, 1)) && loose[2].nuisance.contains(&id(0, 1)));
    check("sticky keeps stop after rebound", sticky[3].nuisance.contains(&id(0, 1)));
    check("non-sticky readmits after rebound", loose[3].information.contains(&id(0, 1)));

    if failures.is_empty() {
        Verdict::new(true, "17 exact checks")
    } else {
        Verdict::new(false, format!("failed: {}", failures.join(", ")))
    }
}

fn teacher_task(seed: u64) -> (Network, Dataset64) {
    let kind = DatasetKind::TeacherStudent { n_train: 64, n_val: 32, d_in: 4, teacher_width: 8, noise: 0.05 };
    let net = build_network(&Architecture::block_mlp(4, 4, 2, 16), seed).unwrap();
    (net, generate_dataset(&kind, seed).unwrap())
}

fn isolation() -> Verdict {
    let mut cfg = TrainConfig { epochs: 20, seed: 3, patience: None, ..TrainConfig::default() };
    cfg.policy.alpha = 0.5;
    cfg.policy.warmup = 2;
    cfg.policy.cadence = 2;
    let (net, data) = teacher_task(3);
    let mut schedule = cfg.schedule::<f64>();
    let (mut checked, mut violations) = (0usize, 0usize);
    let mut unchanged = |start: &[f64], now: &Network, frozen: &BTreeSet<ModuleId>| {
        for spec in now.modules().filter(|s| frozen.contains(&s.id)) {
            for r in &spec.ranges {
                checked += 1;
                violations += usize::from(start[r.clone()] != now.parameters()[r.clone()]);
            }
        }
    };
    // parameters at the episode start and the modules inactive in every epoch since
    let mut episode: Option<(Vec<f64>, BTreeSet<ModuleId>)> = None;
    let mut last = Vec::new();
    let result = train_with(net, &data, &cfg, schedule.as_mut(), &mut |e| {
        let outside: BTreeSet<_> = e.network.module_ids().into_iter().filter(|m| !e.active.contains(m)).collect();
        unchanged(e.before, e.network, &outside);
        if cfg.is_episode_start(e.epoch) {
            if let Some((start, frozen)) = episode.take() {
                let before = ModularNetwork::with_parameters(e.network.architecture(), e.before.to_vec()).unwrap();
                unchanged(&start, &before, &frozen);
            }
            episode = Some((e.before.to_vec(), outside));
        } else if let Some((_, frozen)) = episode.as_mut() {
            frozen.retain(|m| outside.contains(m));
        }
        last = e.network.parameters().to_vec();
    })
    .unwrap();
    if let Some((start, frozen)) = episode {
        let end = ModularNetwork::with_parameters(result.network.architecture(), last).unwrap();
        unchanged(&start, &end, &frozen);
    }
    let nuisance_epochs = result.active_epochs.iter().filter(|a| a.len() < result.modules.len()).count();
    Verdict::new(
        violations == 0 && checked > 0 && result.epochs_run() == 20,
        format!(
            "{checked} frozen ranges checked over {} epochs ({nuisance_epochs} with nuisance modules), {violations} changed",
            result.epochs_run()
        ),
    )
}

fn degenerate() -> Verdict {
    let mut mat = TrainConfig { epochs: 12, seed: 11, patience: None, ..TrainConfig::default() };
    mat.policy.alpha = 1e-12;
    mat.policy.temporal_enabled = false;
    mat.policy.warmup = 2;
    mat.policy.cadence = 2;
    let vanilla = TrainConfig { policy_kind: PolicyKind::Vanilla, ..mat.clone() };
    let (net, data) = teacher_task(11);
    let a = train(net.clone(), &data, &mat).unwrap();
    let b = train(net, &data, &vanilla).unwrap();
    let same = a.train_losses() == b.train_losses()
        && a.val_losses() == b.val_losses()
        && a.network.parameters() == b.network.parameters();
    Verdict::new(
        same && a.ledger.ntk_overhead > 0,
        format!("{} epochs, trajectories {}", a.epochs_run(), if same { "bit-identical" } else { "differ" }),
    )
}

fn token_task() -> (Architecture, DatasetKind) {
    let (seq_len, vocab, d_model) = (8, 8, 16);
    (
        Architecture::TinyAttention {
            seq_len,
            d_token: vocab + 1,
            d_model,
            heads: 4,
            layers: 4,
            d_ff: 2 * d_model,
            d_out: vocab,
        },
        DatasetKind::TinyTokenMask { n_train: 256, n_val: 128, seq_len, vocab, period: 3, mask_rate: 0.15 },
    )
}

fn token_config(kind: PolicyKind, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        policy_kind: kind,
        lr: 0.05,
        epochs: 50,
        batch_size: 16,
        seed,
        loss_kind: LossKind::SoftmaxCrossEntropy,
        patience: None,
        ..TrainConfig::default()
    };
    cfg.policy.alpha = 0.1;
    cfg.policy.beta = 1e-3;
    cfg.policy.samples = 16;
    cfg
}

struct TokenRun {
    val: f64,
    modular_backward: u64,
    overhead: f64,
}

fn token_runs() -> &'static [(TokenRun, TokenRun)] {
    use std::sync::OnceLock;
    static RUNS: OnceLock<Vec<(TokenRun, TokenRun)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let (arch, kind) = token_task();
        (0..5)
            .map(|seed| {
                let data = generate_dataset::<f64>(&kind, seed).unwrap();
                let run = |k| {
                    let r = train(build_network(&arch, seed).unwrap(), &data, &token_config(k, seed)).unwrap();
                    TokenRun {
                        val: r.final_val_loss().unwrap(),
                        modular_backward: r.ledger.backward_modular,
                        overhead: r.ledger.overhead_ratio(),
                    }
                };
                (run(PolicyKind::Vanilla), run(PolicyKind::Mat))
            })
            .collect()
    })
}

fn flops_savings() -> Verdict {
    let mut passes = 0;
    let mut per_seed = Vec::new();
    for (seed, (v, m)) in token_runs().iter().enumerate() {
        let savings = 1.0 - m.modular_backward as f64 / v.modular_backward as f64;
        let ok = m.val <= v.val * 1.02 && savings >= 0.2;
        passes += usize::from(ok);
        per_seed.push(format!(
            "seed {seed}: val {:.4} vs {:.4}, savings {:.1}%{}",
            m.val,
            v.val,
            100.0 * savings,
            if ok { " ok" } else { "" }
        ));
    }
    Verdict::new(passes >= 3, format!("{passes}/5 seeds meet both bounds (need 3) [{}]", per_seed.join("; ")))
}

fn overhead() -> Verdict {
    let worst = token_runs().iter().map(|(_, m)| m.overhead).fold(0.0, f64::max);
    Verdict::new(worst <= 0.10, format!("max overhead {:.2}% of total flops (bound 10%)", 100.0 * worst))
}

fn effective_rank_suite() -> Verdict {
    let mut worst = 0.0f64;
    for n in 1..=16 {
        worst = worst.max((effective_rank(&vec![2.5; n]).unwrap() - n as f64).abs());
        let mut spike = vec![0.0f64; n];
        spike[n / 2] = 7.0;
        worst = worst.max((effective_rank(&spike).unwrap() - 1.0).abs());
    }
    let values = [3.0, 1.0, 0.5, 0.25, 1e-3];
    let base = effective_rank(&values).unwrap();
    for c in [1e-6, 0.3, 42.0, 1e6] {
        let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
        worst = worst.max((effective_rank(&scaled).unwrap() - base).abs());
    }
    Verdict::new(worst <= 1e-10, format!("max error {worst:.2e} (bound 1e-10)"))
}

fn pruning() -> Verdict {
    let mut worst = 0.0f64;
    let mut identity = true;
    for arch in architectures() {
        for seed in 0..3 {
            let net: Network = build_network(&arch, seed).unwrap();
            let x = random_inputs(6, arch.input_dim(), seed + 50);
            let snap = snapshot(&net, &x, Scalarization::SumOfLogits, 0).unwrap();

            let mut kept_all = net.clone();
            let none = prune_by_lambda(&mut kept_all, &snap, 1.0, true).unwrap();
            identity &= none.is_empty() && kept_all.forward(&x).unwrap().0 == net.forward(&x).unwrap().0;

            let mut pruned = net.clone();
            let removed = prune_by_lambda(&mut pruned, &snap, 0.5, false).unwrap();
            let mut params = net.parameters().to_vec();
            for spec in net.modules().filter(|s| removed.contains(&s.id)) {
                for r in &spec.ranges {
                    params[r.clone()].iter_mut().for_each(|p| *p = 0.0);
                }
            }
            let oracle = ModularNetwork::with_parameters(&arch, params).unwrap();
            let a = pruned.forward(&x).unwrap().0;
            let b = oracle.forward(&x).unwrap().0;
            worst = worst.max(a.sub(&b).as_slice().iter().fold(0.0, |m, v| m.max(v.abs())));
        }
    }
    Verdict::new(
        worst <= 1e-12 && identity,
        format!(
            "masked-forward max deviation {worst:.2e} (bound 1e-12), keep 1.0 {}",
            if identity { "is identity" } else { "changed outputs" }
        ),
    )
}
