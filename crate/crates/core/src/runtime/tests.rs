use super::*;
use crate::csc::{fixed_point_residual, solve, SelectionStrategy};
use crate::grid::{make_grid, Partition};
use crate::tensor::{convolve, lambda_max, Domain, Pos};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dom(s: &[usize]) -> Domain {
    Domain::new(s).unwrap()
}

fn instance(seed: u64, sizes: &[usize], support: &[usize], k: usize, density: f64) -> (Signal, Dictionary) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Dictionary::zeros(k, 1, dom(support));
    for v in d.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    for a in 0..k {
        let n = d.atom(a).iter().map(|v| v * v).sum::<f64>().sqrt();
        d.atom_mut(a).iter_mut().for_each(|v| *v /= n);
    }
    let dm = dom(sizes);
    let coding = dm.coding_region(d.support());
    let mut z = ActivationMap::zeros(dm, k);
    for p in coding.positions() {
        for a in 0..k {
            if rng.random_bool(density) {
                z.set(a, p, rng.random_range(-3.0..3.0));
            }
        }
    }
    let mut x = convolve(&z, &d).unwrap();
    for v in x.data_mut() {
        *v += 0.05 * rng.random_range(-1.0..1.0);
    }
    (x, d)
}

fn det(seed: u64) -> RunOptions {
    RunOptions {
        scheduler: Scheduler::Deterministic,
        seed,
        ..RunOptions::default()
    }
}

#[test]
fn one_worker_matches_sequential_lgcd_bitwise() {
    let (x, d) = instance(0, &[400], &[8], 2, 0.01);
    let lambda = 0.1 * lambda_max(&x, &d).unwrap();
    let eps = 1e-6;
    let (zs, log) = solve(&x, &d, lambda, SelectionStrategy::locally_greedy(), eps, u64::MAX).unwrap();
    let grid = make_grid(x.domain(), 1, d.support(), Partition::Grid).unwrap();
    for opts in [det(3), RunOptions::default()] {
        let (zd, stats) = run_dicodile_z(&x, &d, lambda, &grid, eps, &opts).unwrap();
        assert_eq!(zd, zs);
        assert!(stats.converged);
        assert_eq!(stats.accepted, log.updates);
        assert_eq!(stats.iterations(), log.iterations);
        assert_eq!(stats.messages, 0);
        assert_eq!(stats.soft_locked, 0);
    }
}

fn check_equivalence(x: &Signal, d: &Dictionary, workers: &[usize], opts: &RunOptions) {
    let lambda = 0.1 * lambda_max(x, d).unwrap();
    let eps = 1e-9;
    let g1 = make_grid(x.domain(), 1, d.support(), Partition::Grid).unwrap();
    let (_, s1) = run_dicodile_z(x, d, lambda, &g1, eps, opts).unwrap();
    for &w in workers {
        let g = make_grid(x.domain(), w, d.support(), Partition::Grid).unwrap();
        let (z, s) = run_dicodile_z(x, d, lambda, &g, eps, opts).unwrap();
        assert!(s.converged, "W={w}");
        let rel = (s.objective - s1.objective).abs() / s1.objective;
        assert!(rel < 1e-6, "W={w}: {} vs {}", s.objective, s1.objective);
        assert!(fixed_point_residual(x, d, &z, lambda).unwrap() < eps * 1.0001, "W={w}");
    }
}

#[test]
fn distributed_matches_one_worker_1d() {
    let (x, d) = instance(1, &[64 * 6], &[6], 2, 0.02);
    check_equivalence(&x, &d, &[2, 4], &det(1));
    check_equivalence(&x, &d, &[4], &RunOptions::default());
}

#[test]
fn distributed_matches_one_worker_2d() {
    let (x, d) = instance(2, &[48, 48], &[4, 4], 2, 0.01);
    check_equivalence(&x, &d, &[4, 9], &det(2));
    let partial = RunOptions { participation: 0.6, ..det(5) };
    check_equivalence(&x, &d, &[9], &partial);
    check_equivalence(&x, &d, &[4, 9], &RunOptions::default());
}

#[test]
fn large_lambda_sends_nothing() {
    let (x, d) = instance(3, &[40, 40], &[4, 4], 2, 0.02);
    let lambda = lambda_max(&x, &d).unwrap();
    for w in [1, 4, 9] {
        let g = make_grid(x.domain(), w, d.support(), Partition::Grid).unwrap();
        for opts in [det(0), RunOptions::default()] {
            let (z, s) = run_dicodile_z(&x, &d, lambda, &g, 1e-6, &opts).unwrap();
            assert_eq!(z.nnz(), 0);
            assert_eq!(s.messages, 0);
            assert!(s.converged);
        }
    }
}

#[test]
fn halo_mirrors_owner_values_after_drain() {
    let (x, d) = instance(4, &[40, 36], &[3, 4], 3, 0.02);
    let lambda = 0.1 * lambda_max(&x, &d).unwrap();
    let grid = make_grid(x.domain(), 6, d.support(), Partition::Grid).unwrap();
    let (sh, workers) = prepare(&x, &d, lambda, &grid, 1e-8, &det(4), None).unwrap();
    let mut sim = Simulation::new(&sh, workers, 4, 0.7);
    sim.run().unwrap();
    let ws = sim.workers();
    let mut checked = 0;
    for w in ws {
        let sub = *w.sub_domain();
        for p in w.slab_region().positions().filter(|p| !sub.contains(*p)) {
            let o = &ws[grid.owner(p)];
            for k in 0..3 {
                assert_eq!(w.z_at(k, p).to_bits(), o.z_at(k, p).to_bits());
                let (a, b) = (w.beta_at(k, p), o.beta_at(k, p));
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
                checked += 1;
            }
        }
    }
    assert!(checked > 0);
}

fn overlapping(a: Pos, b: Pos, l: [usize; 3]) -> bool {
    (0..3).all(|i| a[i].abs_diff(b[i]) < l[i])
}

#[test]
fn no_interfering_commits_in_a_round() {
    for seed in 0..8 {
        let (x, d) = instance(10 + seed, &[36, 36], &[3, 3], 2, 0.03);
        let lambda = 0.05 * lambda_max(&x, &d).unwrap();
        let grid = make_grid(x.domain(), 9, d.support(), Partition::Grid).unwrap();
        let opts = RunOptions {
            participation: [1.0, 0.8, 0.5][seed as usize % 3],
            record_commits: true,
            ..det(seed)
        };
        let (_, s) = run_dicodile_z(&x, &d, lambda, &grid, 1e-8, &opts).unwrap();
        let l = d.support().shape();
        let mut by_round: std::collections::BTreeMap<u64, Vec<&CommitRecord>> = Default::default();
        for c in &s.commits {
            by_round.entry(c.round).or_default().push(c);
        }
        for cs in by_round.values() {
            for (i, a) in cs.iter().enumerate() {
                for b in &cs[i + 1..] {
                    assert!(a.worker == b.worker || !overlapping(a.pos, b.pos, l), "{a:?} {b:?}");
                }
            }
        }
        assert!(s.soft_locked > 0 || seed > 0);
    }
}

#[test]
fn messages_stay_between_grid_neighbors() {
    let grid = make_grid(&dom(&[60, 60]), 9, &dom(&[5, 5]), Partition::Grid).unwrap();
    for p in grid.domain().region().positions() {
        let a = grid.coords(grid.owner(p));
        for w in grid.notify_set(p) {
            let b = grid.coords(w);
            assert!((0..3).all(|i| a[i].abs_diff(b[i]) <= 1));
        }
    }
}

#[test]
fn few_iterations_send_messages() {
    let (x, d) = instance(5, &[4096], &[8], 2, 0.004);
    let lambda = 0.1 * lambda_max(&x, &d).unwrap();
    let grid = make_grid(x.domain(), 2, d.support(), Partition::Grid).unwrap();
    let (_, s) = run_dicodile_z(&x, &d, lambda, &grid, 1e-6, &det(0)).unwrap();
    let b = grid.border(0);
    let ratio = b.border_boxes().iter().map(|r| r.len()).sum::<usize>() as f64 / b.sub_domain.len() as f64;
    for w in &s.per_worker {
        let frac = w.notifying_updates as f64 / w.iterations as f64;
        assert!(frac < ratio + 0.01, "{frac} vs {ratio}");
    }
}

#[test]
fn acceptance_rate_exceeds_bound() {
    let (x, d) = instance(6, &[64, 64], &[4, 4], 2, 0.05);
    let lambda = 0.05 * lambda_max(&x, &d).unwrap();
    let grid = make_grid(x.domain(), 4, d.support(), Partition::Grid).unwrap();
    let (_, s) = run_dicodile_z(&x, &d, lambda, &grid, 1e-6, &det(0)).unwrap();
    let bound = crate::grid::acceptance_bound(&grid).value;
    assert!(s.acceptance_rate() >= bound, "{} < {bound}", s.acceptance_rate());
}

fn small_setup(w: usize) -> (Signal, Dictionary, WorkerGrid) {
    let (x, d) = instance(7, &[40, 40], &[4, 4], 2, 0.02);
    let g = make_grid(x.domain(), w, d.support(), Partition::Grid).unwrap();
    (x, d, g)
}

#[test]
fn update_outside_extension_is_a_protocol_violation() {
    let (x, d, g) = small_setup(4);
    let (sh, mut ws) = prepare(&x, &d, 0.1, &g, 1e-6, &det(0), None).unwrap();
    // Worker 0 owns [0, 20[^2 and mirrors up to 24; (35, 35) is far away.
    let m = UpdateMessage { atom: 0, pos: [35, 35, 0], delta: 1.0, origin: 3, seq: 1 };
    assert!(matches!(ws[0].receive_update(&sh, &m), Err(Error::Protocol { worker: 0, .. })));
    // Its neighborhood [32,39[ misses the extension, a nearer one does not.
    let m = UpdateMessage { pos: [26, 26, 0], ..m };
    assert!(ws[0].receive_update(&sh, &m).is_ok());
    let mut out = Outbox::new();
    let bad = UpdateMessage { pos: [35, 35, 0], ..m };
    ws[0].handle(&sh, Message::Update(bad), &mut out);
    assert_eq!(ws[0].status(), Status::Stopped);
    assert_eq!(out.len(), 3);
}

#[test]
fn only_extended_border_commits_notify() {
    let (x, d, g) = small_setup(4);
    let opts = RunOptions { record_commits: true, ..det(0) };
    let (sh, mut ws) = prepare(&x, &d, 0.0, &g, 1e-12, &opts, None).unwrap();
    let b = g.border(0);
    let (mut quiet, mut loud) = (0, 0);
    let mut out = Outbox::new();
    for _ in 0..200 {
        let n = ws[0].commits.len();
        ws[0].worker_iteration(&sh, &mut out);
        let msgs = out.iter().filter(|(_, m)| matches!(m, Message::Update(_))).count();
        out.clear();
        if ws[0].commits.len() == n {
            continue;
        }
        let pos = ws[0].commits[n].pos;
        let expect = if b.in_extended_border(pos) { g.notify_set(pos).len() } else { 0 };
        assert_eq!(msgs, expect, "{pos:?}");
        if msgs == 0 {
            quiet += 1;
        } else {
            loud += 1;
        }
    }
    assert!(quiet > 0 && loud > 0);
}

#[test]
fn soft_locked_candidate_leaves_z_unchanged() {
    let (x, d, g) = small_setup(4);
    let (sh, mut ws) = prepare(&x, &d, 0.0, &g, 1e-12, &det(0), None).unwrap();
    let w0 = &mut ws[0];
    // (10, 18) is on the right face of [0, 20[^2; (10, 21) belongs to
    // worker 1 and lies in V((10, 18)).
    let mine: Pos = [10, 18, 0];
    let theirs: Pos = [10, 21, 0];
    let i = w0.slab.index(0, mine);
    w0.slab.beta[i] = 100.0;
    let i = w0.slab.index(0, theirs);
    w0.slab.beta[i] = 1000.0;
    assert!(g.border(0).in_border(mine));
    let mut out = Outbox::new();
    for _ in 0..w0.cells().len() {
        w0.worker_iteration(&sh, &mut out);
    }
    assert!(w0.stats().soft_locked >= 1);
    assert_eq!(w0.z_at(0, mine), 0.0);
    // Without soft-locks the same candidate is committed.
    let sh2 = Shared { soft_locks: false, grid: sh.grid.clone(), ctx: sh.ctx.clone(), ..sh };
    let (_, mut ws) = prepare(&x, &d, 0.0, &g, 1e-12, &det(0), None).unwrap();
    let w0 = &mut ws[0];
    let i = w0.slab.index(0, mine);
    w0.slab.beta[i] = 100.0;
    let i = w0.slab.index(0, theirs);
    w0.slab.beta[i] = 1000.0;
    for _ in 0..w0.cells().len() {
        w0.worker_iteration(&sh2, &mut out);
    }
    assert_eq!(w0.stats().soft_locked, 0);
    assert!(w0.z_at(0, mine) != 0.0);
}

#[test]
fn paused_worker_wakes_on_update() {
    let (x, d, g) = small_setup(4);
    let lambda = 0.1 * lambda_max(&x, &d).unwrap();
    // Alone, a border candidate locked by a neighbor would stay locked.
    let isolated = RunOptions { soft_locks: false, ..det(0) };
    let (sh, mut ws) = prepare(&x, &d, lambda, &g, 1e-6, &isolated, None).unwrap();
    let mut out = Outbox::new();
    while ws[1].status() == Status::Active {
        ws[1].worker_iteration(&sh, &mut out);
    }
    assert_eq!(ws[1].status(), Status::Paused);
    assert_eq!(ws[1].epoch(), 1);
    // The pause was announced to the three others.
    let ann = out
        .iter()
        .filter(|(_, m)| matches!(m, Message::Control(ControlMessage::PauseAnnounce(_))))
        .count();
    assert_eq!(ann, 3);
    out.clear();
    let m = UpdateMessage { atom: 1, pos: [18, 18, 0], delta: 0.5, origin: 0, seq: 1 };
    ws[1].handle(&sh, Message::Update(m), &mut out);
    assert_eq!(ws[1].status(), Status::Active);
    while ws[1].status() == Status::Active {
        ws[1].worker_iteration(&sh, &mut out);
    }
    assert_eq!(ws[1].epoch(), 2);
    let last = out.iter().rev().find_map(|(_, m)| match m {
        Message::Control(ControlMessage::PauseAnnounce(r)) => Some(r.clone()),
        _ => None,
    });
    let r = last.unwrap();
    assert_eq!((r.epoch, r.recv_from[0]), (2, 1));
}

#[test]
fn unaccounted_message_prevents_false_termination() {
    let (x, d, g) = small_setup(4);
    let lambda = 0.1 * lambda_max(&x, &d).unwrap();
    let (sh, ws) = prepare(&x, &d, lambda, &g, 1e-6, &det(0), None).unwrap();
    let mut sim = Simulation::new(&sh, ws, 0, 1.0);
    // An update that worker 1 never counted as sent: worker 3's receive
    // count can then never match, so the run must not be declared done.
    let m = UpdateMessage { atom: 0, pos: [19, 21, 0], delta: 0.0, origin: 1, seq: 1 };
    sim.inject(1, 3, Message::Update(m)).unwrap();
    let r = sim.run();
    assert!(matches!(r, Err(Error::Protocol { .. })), "{r:?}");
    assert!(sim.workers().iter().all(|w| w.status() != Status::Done));
}

#[test]
fn divergence_guard_on_zero_state() {
    let (x, d, g) = small_setup(4);
    let (sh, ws) = prepare(&x, &d, 0.1, &g, 1e-6, &det(0), None).unwrap();
    for w in &ws {
        assert!(w.divergence_guard(2, sh.threshold).is_ok());
    }
    let t = divergence_threshold(&d, 50.0);
    let m = d.max_abs().into_iter().fold(0.0, f64::max);
    assert!((t - 50.0 / m).abs() < 1e-12);
}

#[test]
fn tiny_threshold_trips_divergence() {
    let (x, d, g) = small_setup(4);
    let lambda = 0.1 * lambda_max(&x, &d).unwrap();
    let opts = RunOptions { divergence_factor: 1e-3, ..det(0) };
    assert!(matches!(
        run_dicodile_z(&x, &d, lambda, &g, 1e-6, &opts),
        Err(Error::Diverged { .. })
    ));
    let opts = RunOptions { divergence_factor: 1e-3, ..RunOptions::default() };
    assert!(matches!(
        run_dicodile_z(&x, &d, lambda, &g, 1e-6, &opts),
        Err(Error::Diverged { .. })
    ));
}

#[test]
fn iteration_limit_is_not_an_error() {
    let (x, d, g) = small_setup(4);
    let lambda = 0.01 * lambda_max(&x, &d).unwrap();
    for opts in [RunOptions { max_iter: 3, ..det(0) }, RunOptions { max_iter: 3, ..RunOptions::default() }] {
        let (_, s) = run_dicodile_z(&x, &d, lambda, &g, 1e-12, &opts).unwrap();
        assert!(!s.converged);
    }
}

#[test]
fn warm_start_resumes() {
    let (x, d, g) = small_setup(4);
    let lambda = 0.1 * lambda_max(&x, &d).unwrap();
    let (z, _) = run_dicodile_z(&x, &d, lambda, &g, 1e-8, &det(0)).unwrap();
    let (z2, s) = run_dicodile_z_with(&x, &d, lambda, &g, 1e-8, &det(1), Some(&z)).unwrap();
    assert!(s.converged);
    assert!(s.accepted < 10);
    let diff = z.data().iter().zip(z2.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-6);
}

#[test]
fn stats_json_fields() {
    let (x, d, g) = small_setup(4);
    let (_, s) = run_dicodile_z(&x, &d, 0.5, &g, 1e-6, &det(0)).unwrap();
    let v = serde_json::to_value(&s).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    let mut want = vec!["workers", "grid", "accepted", "soft_locked", "messages", "t_sec", "objective"];
    want.sort();
    let mut keys = keys;
    keys.sort();
    assert_eq!(keys, want);
    assert_eq!(v["grid"], serde_json::json!([2, 2]));
}

#[test]
fn scheduler_names() {
    assert_eq!("async".parse::<Scheduler>().unwrap(), Scheduler::Async);
    assert_eq!("deterministic".parse::<Scheduler>().unwrap(), Scheduler::Deterministic);
    assert!("fast".parse::<Scheduler>().is_err());
}
