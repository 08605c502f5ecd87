use std::collections::BTreeSet;

use super::*;
use crate::data::{generate_dataset, DatasetKind};
use crate::mntk::SpectrumSnapshot;
use crate::modelzoo::{Architecture, ModuleFamily};

fn linear_data(seed: u64) -> Dataset<f64> {
    let kind = DatasetKind::LinearTeacher { n_train: 32, n_val: 16, d_in: 3, noise: 0.05 };
    generate_dataset(&kind, seed).unwrap()
}

fn mlp(seed: u64) -> ModularNetwork<f64> {
    ModularNetwork::build(&Architecture::block_mlp(3, 2, 2, 8), seed).unwrap()
}

fn cfg(kind: PolicyKind, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig {
        policy_kind: kind,
        epochs,
        batch_size: 8,
        lr: 0.05,
        seed: 3,
        patience: None,
        ..TrainConfig::default()
    };
    c.policy.samples = 8;
    c.policy.warmup = 1;
    c.policy.cadence = 2;
    c
}

#[test]
fn vanilla_backward_is_twice_forward() {
    let r = train(mlp(1), &linear_data(1), &cfg(PolicyKind::Vanilla, 4)).unwrap();
    assert_eq!(r.ledger.backward_total, 2 * r.ledger.forward_total);
    assert_eq!(r.ledger.ntk_overhead, 0);
    assert_eq!(r.ledger.per_epoch.len(), 4);
}

#[test]
fn rand_with_full_fraction_is_vanilla() {
    let vanilla = train(mlp(1), &linear_data(1), &cfg(PolicyKind::Vanilla, 5)).unwrap();
    let mut c = cfg(PolicyKind::Rand, 5);
    c.rand_fraction = 1.0;
    let rand = train(mlp(1), &linear_data(1), &c).unwrap();
    assert_eq!(vanilla.train_losses(), rand.train_losses());
    assert_eq!(vanilla.network.parameters(), rand.network.parameters());
}

#[test]
fn rand_half_updates_half_per_epoch() {
    let mut c = cfg(PolicyKind::Rand, 6);
    c.policy.protect_per_layer = false;
    let r = train(mlp(1), &linear_data(1), &c).unwrap();
    assert!(r.active_epochs.iter().all(|a| a.len() == 2));
}

#[test]
fn runs_are_deterministic() {
    let c = cfg(PolicyKind::Mat, 6);
    let a = train(mlp(2), &linear_data(2), &c).unwrap();
    let b = train(mlp(2), &linear_data(2), &c).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.ledger, b.ledger);
}

#[test]
fn degenerate_mat_matches_vanilla() {
    let mut c = cfg(PolicyKind::Mat, 6);
    c.policy.alpha = 1e-12;
    c.policy.temporal_enabled = false;
    let mat = train(mlp(4), &linear_data(4), &c).unwrap();
    let vanilla = train(mlp(4), &linear_data(4), &cfg(PolicyKind::Vanilla, 6)).unwrap();
    assert_eq!(mat.train_losses(), vanilla.train_losses());
    assert_eq!(mat.network.parameters(), vanilla.network.parameters());
    assert!(mat.ledger.ntk_overhead > 0);
}

#[test]
fn disconnected_module_is_never_updated() {
    let arch = Architecture::BlockMlp { d_in: 3, width: 4, blocks_per_layer: 2, layers: 1, d_out: 1, bias: false };
    let mut p = ModularNetwork::<f64>::build(&arch, 5).unwrap().parameters().to_vec();
    let len = p.len();
    p[len - 2] = 0.0;
    p[len - 1] = 0.0;
    let net = ModularNetwork::with_parameters(&arch, p).unwrap();
    let b = ModuleId::new(0, 1);
    let b_before = net.module_parameters(b).unwrap();

    let mut c = cfg(PolicyKind::Mat, 8);
    c.shared_rule = SharedRule::Frozen;
    c.policy.warmup = 0;
    c.policy.cadence = 1;
    let mat = train(net.clone(), &linear_data(6), &c).unwrap();
    assert_eq!(mat.network.module_parameters(b).unwrap(), b_before);
    assert!(mat.active_epochs.iter().all(|a| !a.contains(&b)));

    c.policy_kind = PolicyKind::Vanilla;
    let vanilla = train(net, &linear_data(6), &c).unwrap();
    let steps = (8 * 32 / 8) as u64;
    let half = vanilla.ledger.backward_modular / 2;
    assert!(mat.ledger.backward_modular.abs_diff(half) <= steps);
}

#[test]
fn histogram_counts_epochs() {
    let r = train(mlp(1), &linear_data(1), &cfg(PolicyKind::Vanilla, 10)).unwrap();
    let h = epoch_histogram(&r);
    assert_eq!(h.len(), 4);
    assert!(h.values().all(|&c| c == 10));
}

#[test]
fn scripted_schedule_replays_into_histogram() {
    let ids = mlp(1).module_ids();
    let a: BTreeSet<_> = [ids[0], ids[2]].into();
    let b: BTreeSet<_> = [ids[0]].into();
    let mut script = ScriptedSchedule::new(vec![
        EpochPlan::Train(a.clone()),
        EpochPlan::Train(a),
        EpochPlan::Train(b),
    ]);
    let c = cfg(PolicyKind::Vanilla, 5);
    let r = train_with(mlp(1), &linear_data(1), &c, &mut script, &mut |_| {}).unwrap();
    let h = epoch_histogram(&r);
    assert_eq!(h[&ids[0]], 5);
    assert_eq!(h[&ids[1]], 0);
    assert_eq!(h[&ids[2]], 2);
    assert_eq!(h[&ids[3]], 0);
}

#[test]
fn halt_freezes_everything() {
    let ids = mlp(1).module_ids();
    let mut script = ScriptedSchedule::new(vec![EpochPlan::Train(ids.iter().copied().collect()), EpochPlan::Halt]);
    let c = cfg(PolicyKind::Vanilla, 6);
    let mut last = Vec::new();
    let r = train_with(mlp(1), &linear_data(1), &c, &mut script, &mut |e| {
        last = e.network.parameters().to_vec();
    })
    .unwrap();
    assert_eq!(r.stop_reason, StopReason::InformationEmpty);
    assert_eq!(r.epochs_run(), 1);
    assert_eq!(r.network.parameters(), &last[..]);
}

#[test]
fn inactive_modules_are_bit_identical_per_epoch() {
    let c = TrainConfig { policy: PolicyConfig { alpha: 0.5, ..cfg(PolicyKind::Mat, 8).policy }, ..cfg(PolicyKind::Mat, 8) };
    let mut checked = 0;
    train_with(mlp(7), &linear_data(7), &c, c.schedule::<f64>().as_mut(), &mut |e| {
        for spec in e.network.modules() {
            if !e.active.contains(&spec.id) {
                for r in &spec.ranges {
                    assert_eq!(&e.before[r.clone()], &e.network.parameters()[r.clone()]);
                }
                checked += 1;
            }
        }
    })
    .unwrap();
    assert!(checked > 0);
}

#[test]
fn multirate_slow_modules_step_every_k() {
    let mut c = cfg(PolicyKind::Multirate, 1);
    c.multirate.k = 2;
    let mut sched = MultirateSchedule::new(0.5, 2, schedule::stream(0, 3));
    let net = mlp(1);
    Schedule::<f64>::plan(&mut sched, 0, &net, None).unwrap();
    let slow = sched.slow_modules().unwrap().clone();
    assert_eq!(slow.len(), 2);
    let all: BTreeSet<_> = net.module_ids().into_iter().collect();
    let r0 = Schedule::<f64>::rates(&mut sched, 0, &all, 0.1);
    let r1 = Schedule::<f64>::rates(&mut sched, 1, &all, 0.1);
    assert!(slow.iter().all(|id| !r0.contains_key(id)));
    assert!(slow.iter().all(|id| (r1[id] - 0.2).abs() < 1e-15));
    assert_eq!(r0.len(), 2);
    assert_eq!(r1.len(), 4);
    train(mlp(1), &linear_data(1), &c).unwrap();
}

#[test]
fn divergence_reports_checkpoint() {
    let mut c = cfg(PolicyKind::Vanilla, 20);
    c.lr = 1e6;
    match train(mlp(1), &linear_data(1), &c) {
        Err(TrainError::NonFinite { checkpoint, .. }) => {
            assert_eq!(checkpoint.len(), mlp(1).parameters().len());
            assert!(checkpoint.iter().all(|v| v.is_finite()));
        }
        other => panic!("expected divergence, got {:?}", other.map(|r| r.stop_reason)),
    }
}

#[test]
fn patience_stops_early() {
    let mut c = cfg(PolicyKind::Vanilla, 200);
    c.lr = 1e-9;
    c.patience = Some(Patience { epochs: 3, rel_tol: 1e-4 });
    let r = train(mlp(1), &linear_data(1), &c).unwrap();
    assert_eq!(r.stop_reason, StopReason::Converged);
    assert_eq!(r.epochs_run(), 4);
}

#[test]
fn invalid_configs_rejected() {
    let mut c = cfg(PolicyKind::Vanilla, 1);
    c.lr = 0.0;
    assert!(matches!(c.validate(), Err(TrainError::Config(_))));
    let mut c = cfg(PolicyKind::Mat, 1);
    c.policy.samples = 1000;
    assert!(matches!(train(mlp(1), &linear_data(1), &c), Err(TrainError::Config(_))));
}

#[test]
fn metric_rows_follow_schedule() {
    let r = train(mlp(1), &linear_data(1), &cfg(PolicyKind::Mat, 6)).unwrap();
    let globals = r.rows.iter().filter(|row| row.scope == RowScope::Global).count();
    assert_eq!(globals, 6);
    // warmup 1, cadence 2: snapshots at epochs 1, 3, 5
    let module_rows: Vec<_> = r.rows.iter().filter(|row| row.scope != RowScope::Global).collect();
    assert_eq!(module_rows.len(), 3 * 4);
    assert!(module_rows.iter().all(|row| [1, 3, 5].contains(&row.epoch)));
    assert!(module_rows.iter().all(|row| row.lambda_max.is_some() && row.train_loss.is_none()));
}

fn lambdas(values: &[(ModuleId, f64)]) -> SpectrumSnapshot<f64> {
    let map = values.iter().map(|&(id, l)| (id, (ModuleFamily::Block, l))).collect();
    SpectrumSnapshot::from_lambdas(0, &map)
}

#[test]
fn prune_keeps_top_ranked() {
    let mut net = mlp(1);
    let ids = net.module_ids();
    let snap = lambdas(&[(ids[0], 9.0), (ids[1], 3.0), (ids[2], 7.0), (ids[3], 5.0)]);
    let pruned = prune_by_lambda(&mut net, &snap, 0.5, true).unwrap();
    assert_eq!(pruned, BTreeSet::from([ids[1], ids[3]]));
    assert_eq!(net.module_ids(), vec![ids[0], ids[2]]);
}

#[test]
fn prune_full_keep_is_identity() {
    let mut net = mlp(1);
    let before = net.clone();
    let ids = net.module_ids();
    let snap = lambdas(&[(ids[0], 1.0), (ids[1], 2.0), (ids[2], 3.0), (ids[3], 4.0)]);
    assert!(prune_by_lambda(&mut net, &snap, 1.0, true).unwrap().is_empty());
    assert_eq!(net, before);
}

#[test]
fn prune_protection_and_ties() {
    let mut net = mlp(1);
    let ids = net.module_ids();
    // both layer-1 modules rank last
    let snap = lambdas(&[(ids[0], 9.0), (ids[1], 8.0), (ids[2], 1.0), (ids[3], 1.0)]);
    assert!(matches!(
        prune_by_lambda(&mut net.clone(), &snap, 0.5, true),
        Err(TrainError::Protection(_))
    ));
    let tied = lambdas(&[(ids[0], 1.0), (ids[1], 1.0), (ids[2], 1.0), (ids[3], 1.0)]);
    let pruned = prune_by_lambda(&mut net, &tied, 0.75, false).unwrap();
    assert_eq!(pruned, BTreeSet::from([ids[3]]));
    assert!(prune_by_lambda(&mut mlp(1), &tied, 0.0, false).is_err());
}
