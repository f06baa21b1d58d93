use proptest::prelude::*;

use super::*;
use crate::error::Error;
use crate::tensor::Prng;

fn bb(grabbed: bool, poured: bool) -> Blackboard {
    Blackboard::new(PlannerParams::default()).with_flags(grabbed, poured)
}

fn post(b: &mut Blackboard, interaction: &str, horizon: u32, confidence: f64) {
    let p = b.params().clone();
    b.post(HoiMessage {
        human_id: p.human_id,
        object_id: p.cup_id,
        interaction: interaction.into(),
        horizon,
        confidence,
        stamp: b.clock(),
    });
}

fn tick_at(tree: &mut BtNode, b: &mut Blackboard, t: f64) -> Status {
    b.begin_tick(t);
    tree.tick(b)
}

#[test]
fn selector_takes_the_first_non_failing_branch() {
    let mut t = BtNode::selector(vec![
        BtNode::condition("no", |_| false),
        BtNode::action("go", 0.0, None).unwrap(),
    ])
    .unwrap();
    assert_eq!(t.tick(&mut bb(false, false)), Status::Success);
}

#[test]
fn sequence_stops_at_a_running_child() {
    let mut t = BtNode::sequence(vec![
        BtNode::condition("yes", |_| true),
        BtNode::action("wait", 1.0, None).unwrap(),
        BtNode::effect("never", Effect::Set(Flag::Poured)),
    ])
    .unwrap();
    let mut b = bb(false, false);
    assert_eq!(t.tick(&mut b), Status::Running);
    assert!(!b.poured());
}

#[test]
fn actions_run_for_their_duration() {
    let mut t = BtNode::action("a", 0.3, Some(Effect::Set(Flag::Grabbed))).unwrap();
    let mut b = bb(false, false);
    let statuses: Vec<Status> = (0..5).map(|_| t.tick(&mut b)).collect();
    use Status::*;
    assert_eq!(statuses, [Running, Running, Running, Success, Running]);
    assert_eq!(b.events().len(), 1);
}

#[test]
fn repeat_never_finishes() {
    let mut t = BtNode::repeat(BtNode::condition("no", |_| false)).unwrap();
    let mut b = bb(false, false);
    assert!((0..3).all(|_| t.tick(&mut b) == Status::Running));
    let mut t = BtNode::repeat(BtNode::condition("yes", |_| true)).unwrap();
    assert_eq!(t.tick(&mut b), Status::Running);
}

#[test]
fn malformed_nodes_are_rejected_at_construction() {
    let leaf = || BtNode::condition("c", |_| true);
    assert!(matches!(BtNode::sequence(vec![]), Err(Error::Structure(_))));
    assert!(matches!(BtNode::selector(vec![]), Err(Error::Structure(_))));
    assert!(matches!(BtNode::new(NodeKind::Repeat, vec![]), Err(Error::Structure(_))));
    assert!(matches!(BtNode::new(NodeKind::Repeat, vec![leaf(), leaf()]), Err(Error::Structure(_))));
    let cond = NodeKind::Condition(Condition { name: "c", pred: |_| true });
    assert!(matches!(BtNode::new(cond, vec![leaf()]), Err(Error::Structure(_))));
    assert!(matches!(BtNode::action("a", -1.0, None), Err(Error::Structure(_))));
    assert!(build_bartender_tree(1.0, &ActionDurations::default()).is_err());
    assert!(build_bartender_tree(0.0, &ActionDurations::default()).is_err());
}

#[test]
fn memory_sequence_resumes_and_selector_halts_lower_branches() {
    // A running lower-priority branch is reset when a higher one fires.
    let mut t = BtNode::selector(vec![
        BtNode::sequence_with_memory(vec![
            BtNode::condition("poured", |b| b.poured()),
            BtNode::action("high", 1.0, None).unwrap(),
        ])
        .unwrap(),
        BtNode::sequence_with_memory(vec![
            BtNode::condition("grabbed", |b| b.grabbed()),
            BtNode::action("prepare", 0.2, Some(Effect::Set(Flag::Poured))).unwrap(),
            BtNode::action("low", 1.0, None).unwrap(),
        ])
        .unwrap(),
    ])
    .unwrap();
    let mut b = bb(true, false);
    let mut seen = Vec::new();
    for _ in 0..4 {
        b.begin_tick(0.0);
        assert_eq!(t.tick(&mut b), Status::Running);
        seen.push(b.working().unwrap());
    }
    assert_eq!(seen, ["prepare", "prepare", "low", "high"]);
}

/// Which action the bartender should start, read directly off the branch
/// descriptions.
fn expected(grabbed: bool, hold: bool, near: bool) -> &'static str {
    if grabbed && hold {
        POUR
    } else if !grabbed && near {
        GRAB
    } else if grabbed && !near {
        MOVE_AWAY
    } else {
        IDLE
    }
}

#[test]
fn truth_table_of_the_main_selector() {
    for bits in 0..8u8 {
        let (grabbed, hold, near) = (bits & 1 != 0, bits & 2 != 0, bits & 4 != 0);
        let mut tree = build_bartender_tree(0.5, &ActionDurations::default()).unwrap();
        let mut b = bb(grabbed, false);
        post(&mut b, "hold", 0, if hold { 0.9 } else { 0.1 });
        post(&mut b, "next_to", 0, if near { 0.8 } else { 0.2 });
        assert_eq!(tick_at(&mut tree, &mut b, 0.0), Status::Running);
        assert_eq!(b.working(), Some(expected(grabbed, hold, near)), "grabbed {grabbed} hold {hold} near {near}");
    }
}

#[test]
fn poured_blackboard_does_nothing() {
    let mut tree = build_bartender_tree(0.5, &ActionDurations::default()).unwrap();
    let mut b = bb(true, true);
    post(&mut b, "hold", 0, 1.0);
    tick_at(&mut tree, &mut b, 0.0);
    assert_eq!(b.working(), None);
}

#[test]
fn stale_messages_expire() {
    let mut tree = build_bartender_tree(0.5, &ActionDurations::default()).unwrap();
    let mut b = bb(false, false);
    post(&mut b, "next_to", 0, 0.9);
    tick_at(&mut tree, &mut b, 0.0);
    assert_eq!(b.working(), Some(GRAB));
    tick_at(&mut tree, &mut b, 1.0);
    assert_eq!(b.confidence("next_to", 0), Some(0.9));
    tick_at(&mut tree, &mut b, 1.2);
    assert_eq!(b.confidence("next_to", 0), None);
}

#[test]
fn hold_preempts_moving_away() {
    let mut tree = build_bartender_tree(0.5, &ActionDurations::default()).unwrap();
    let mut b = bb(true, false);
    for k in 0..5 {
        let t = k as f64 * 0.1;
        b.begin_tick(t);
        post(&mut b, "next_to", 0, 0.1);
        tree.tick(&mut b);
        assert_eq!(b.working(), Some(MOVE_AWAY));
    }
    b.begin_tick(0.5);
    post(&mut b, "hold", 0, 0.95);
    tree.tick(&mut b);
    assert_eq!(b.working(), Some(POUR));
    assert!(b.grabbed());
}

#[test]
fn flags_stay_safe_under_random_message_streams() {
    let d = ActionDurations {
        grab_bottle: 0.4,
        pour: 0.3,
        return_bottle: 0.4,
        idle: 0.2,
    };
    for stream in 0..1000u64 {
        let mut rng = Prng::new(stream);
        let mut tree = build_bartender_tree(0.5, &d).unwrap();
        let mut b = bb(false, false);
        for k in 0..300 {
            b.begin_tick(k as f64 * 0.1);
            for name in ["next_to", "hold"] {
                if rng.bernoulli(0.6) {
                    let h = if rng.bernoulli(0.5) { 0 } else { 3 };
                    post(&mut b, name, h, rng.uniform(0.0, 1.0));
                }
            }
            tree.tick(&mut b);
            if b.working() == Some(POUR) {
                assert!(b.grabbed(), "stream {stream} tick {k}: pouring without the bottle");
            }
        }
        let pours = b.events().iter().filter(|e| e.flag == Flag::Poured && e.value).count();
        assert!(pours <= 1, "stream {stream}: poured {pours} times");
    }
}

fn noiseless(tau_a: u32, threshold: f64) -> Scenario {
    Scenario {
        noise: 0.0,
        tau_a,
        threshold,
        ..Default::default()
    }
}

fn waiting(sc: &Scenario) -> f64 {
    let tl = run_scripted(sc, 3).unwrap();
    fluency(&tl).unwrap().waiting_time.unwrap()
}

#[test]
fn reactive_planner_waits_for_proximity() {
    let sc = noiseless(0, 0.5);
    let tl = run_scripted(&sc, 1).unwrap();
    assert!(!tl.timed_out);
    let g = tl.grab_start.unwrap();
    assert!(sc.human_at(g, None).distance < 0.5 * sc.d0);
    assert!(sc.human_at(g - sc.dt, None).distance >= 0.5 * sc.d0);
    assert!(tl.robot_did(POUR) && tl.robot_did(RETURN));
    assert_eq!(tl.flag_events.iter().filter(|e| e.flag == Flag::Poured).count(), 1);
}

#[test]
fn anticipation_starts_the_grab_earlier() {
    let (a, b) = (run_scripted(&noiseless(0, 0.5), 1).unwrap(), run_scripted(&noiseless(3, 0.5), 1).unwrap());
    assert!((a.grab_start.unwrap() - b.grab_start.unwrap() - 3.0).abs() < 1e-9);
    let (wa, wb) = (fluency(&a).unwrap().waiting_time.unwrap(), fluency(&b).unwrap().waiting_time.unwrap());
    assert!((wa - wb - 3.0f64.min(4.0)).abs() < 1e-9, "{wa} {wb}");
}

#[test]
fn anticipation_never_hurts() {
    for th in [0.2, 0.3, 0.5, 0.7, 0.8] {
        let w0 = waiting(&noiseless(0, th));
        for k in [1, 3, 5] {
            assert!(waiting(&noiseless(k, th)) < w0, "threshold {th} tau {k}");
        }
    }
}

#[test]
fn higher_thresholds_wait_longer() {
    for tau in [0, 1, 3, 5] {
        let ws: Vec<f64> = (1..10).map(|i| waiting(&noiseless(tau, i as f64 / 10.0))).collect();
        assert!(ws.windows(2).all(|w| w[0] <= w[1] + 1e-9), "tau {tau}: {ws:?}");
    }
}

#[test]
fn passer_by_gets_the_bottle_put_back() {
    let sc = Scenario {
        script: Scenario::passer_by_script(),
        noise: 0.0,
        ..Default::default()
    };
    let tl = run_scripted(&sc, 1).unwrap();
    assert!(tl.robot_did(GRAB) && tl.robot_did(MOVE_AWAY));
    assert!(!tl.robot_did(POUR));
    assert!(tl.timed_out);
    assert_eq!(tl.pour_start, None);
    assert_eq!(fluency(&tl).unwrap().waiting_time, None);
}

#[test]
fn episodes_are_deterministic() {
    let sc = Scenario { tau_a: 1, noise: 0.2, ..Default::default() };
    assert_eq!(run_scripted(&sc, 9).unwrap(), run_scripted(&sc, 9).unwrap());
    let runs: Vec<Timeline> = (0..5).map(|s| run_scripted(&sc, s).unwrap()).collect();
    assert!(runs.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn scenario_validation() {
    let bad = [
        Scenario { threshold: 1.0, ..Default::default() },
        Scenario { dt: 0.0, ..Default::default() },
        Scenario { script: vec![], ..Default::default() },
        Scenario {
            durations: ActionDurations { pour: 0.0, ..Default::default() },
            ..Default::default()
        },
    ];
    for sc in bad {
        assert!(matches!(run_scripted(&sc, 0), Err(Error::Config(_))));
    }
}

fn iv(start: f64, end: f64) -> Interval {
    Interval { start, end, label: "a".into() }
}

fn timeline(human: Vec<Interval>, robot: Vec<Interval>, total: f64) -> Timeline {
    Timeline {
        human,
        robot,
        total,
        timed_out: false,
        hold_start: None,
        grab_start: None,
        pour_start: None,
        flag_events: vec![],
    }
}

#[test]
fn fluency_worked_examples() {
    let f = fluency(&timeline(vec![iv(0.0, 4.0)], vec![iv(4.0, 10.0)], 10.0)).unwrap();
    assert!((f.h_idle - 60.0).abs() < 1e-9 && (f.r_idle - 40.0).abs() < 1e-9);
    assert!(f.c_act.abs() < 1e-9 && f.f_del.abs() < 1e-9);

    let f = fluency(&timeline(vec![iv(0.0, 6.0)], vec![iv(4.0, 10.0)], 10.0)).unwrap();
    assert!((f.c_act - 20.0).abs() < 1e-9 && (f.f_del + 20.0).abs() < 1e-9);

    let f = fluency(&timeline(vec![iv(0.0, 10.0)], vec![iv(0.0, 10.0)], 10.0)).unwrap();
    assert!(f.h_idle.abs() < 1e-9 && f.r_idle.abs() < 1e-9 && (f.c_act - 100.0).abs() < 1e-9);

    // robot [1,3] then human [5,8] then robot [7,9]: +2 s gap, −1 s overlap
    let f = fluency(&timeline(vec![iv(5.0, 8.0)], vec![iv(1.0, 3.0), iv(7.0, 9.0)], 10.0)).unwrap();
    assert!((f.f_del - 10.0).abs() < 1e-9);

    assert!(matches!(fluency(&timeline(vec![], vec![], 0.0)), Err(Error::Contract(_))));
}

#[test]
fn waiting_time_is_pour_minus_hold() {
    let mut tl = timeline(vec![iv(0.0, 2.0)], vec![iv(1.0, 4.0)], 5.0);
    tl.hold_start = Some(2.5);
    tl.pour_start = Some(3.25);
    assert!((fluency(&tl).unwrap().waiting_time.unwrap() - 0.75).abs() < 1e-12);
}

/// Sorted, non-overlapping intervals inside `[0, total]` from a list of
/// positive gap/length pairs.
fn lay_out(parts: &[(f64, f64)], total: f64) -> Vec<Interval> {
    let scale = total / parts.iter().map(|(g, l)| g + l).sum::<f64>().max(total);
    let mut t = 0.0;
    parts
        .iter()
        .map(|&(g, l)| {
            let s = t + g * scale;
            t = s + l * scale;
            iv(s, t)
        })
        .collect()
}

proptest! {
    #[test]
    fn fluency_stays_in_range(
        h in prop::collection::vec((0.0f64..3.0, 0.01f64..3.0), 0..6),
        r in prop::collection::vec((0.0f64..3.0, 0.01f64..3.0), 0..6),
        total in 1.0f64..30.0,
    ) {
        let f = fluency(&timeline(lay_out(&h, total), lay_out(&r, total), total)).unwrap();
        let eps = 1e-9;
        for v in [f.h_idle, f.r_idle, f.c_act] {
            prop_assert!((-eps..=100.0 + eps).contains(&v));
        }
        prop_assert!((-100.0 - eps..=100.0 + eps).contains(&f.f_del));
        prop_assert!(f.c_act <= 100.0 - f.h_idle + eps);
        prop_assert!(f.c_act <= 100.0 - f.r_idle + eps);
    }

    #[test]
    fn simulated_timelines_are_well_formed(seed in any::<u64>(), tau in 0u32..6, th in 0.1f64..0.9) {
        let sc = Scenario { tau_a: tau, threshold: th, noise: 0.1, ..Default::default() };
        let tl = run_scripted(&sc, seed).unwrap();
        for agent in [&tl.human, &tl.robot] {
            for w in agent.windows(2) {
                prop_assert!(w[0].end <= w[1].start + 1e-9);
            }
            prop_assert!(agent.iter().all(|i| i.start < i.end && i.end <= tl.total + 1e-9));
        }
        let f = fluency(&tl).unwrap();
        prop_assert!((-100.0..=100.0).contains(&f.f_del));
    }
}

#[test]
fn sweep_shows_the_trends() {
    let base = Scenario::default();
    let cells = sweep(&base, &[0.3, 0.5, 0.7], &[0, 1, 3, 5], 20, 7).unwrap();
    assert_eq!(cells.len(), 12);
    let at = |th: f64, tau: u32| cells.iter().find(|c| c.threshold == th && c.tau == tau).unwrap().waiting_time;
    for th in [0.3, 0.5, 0.7] {
        assert!(at(th, 3) < at(th, 0));
    }
    for tau in [0, 1, 3, 5] {
        assert!(at(0.3, tau) <= at(0.5, tau) && at(0.5, tau) <= at(0.7, tau), "tau {tau}");
    }
    let csv = fluency_csv(&cells);
    assert!(csv.starts_with(&format!("{FLUENCY_CSV_HEADER}\n")));
    assert_eq!(csv.lines().count(), 13);
    assert_eq!(sweep(&base, &[0.3, 0.5, 0.7], &[0, 1, 3, 5], 20, 7).unwrap().len(), 12);
}

#[test]
fn model_driven_episode_runs() {
    use crate::model::{HoiModel, ModelConfig};
    use crate::pipeline::with_generated_classes;
    let cfg = with_generated_classes(ModelConfig {
        grid_l: 2,
        d_vis: 8,
        d_box: 8,
        depth: 1,
        heads: 2,
        horizons: vec![0, 1],
        ..Default::default()
    });
    let model = HoiModel::new(cfg, 3).unwrap();
    let sc = Scenario { tau_a: 1, timeout: 15.0, ..Default::default() };
    let mut pred = ModelPredictor::new(model.clone(), 2, 1).unwrap();
    let mut tree = build_bartender_tree(sc.threshold, &sc.durations).unwrap();
    let a = simulate(&sc, &mut tree, &mut pred, 2).unwrap();
    let b = simulate(&sc, &mut tree, &mut pred, 2).unwrap();
    assert_eq!(a, b);
    assert!(a.total > 0.0);
    assert!(ModelPredictor::new(model, 2, 3).is_err());
}
