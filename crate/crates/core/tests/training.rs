mod common;

use common::tiny_config;
use dualcritic::codec::{build_scenario, Difficulty, GopSpec, Simulator, QP_MAX};
use dualcritic::config::Mode;
use dualcritic::features::{distortion_reward, rate_reward};
use dualcritic::nn::{Mlp, Parameters};
use dualcritic::training::{
    apply_delta, bootstrap_agent, clone_base, delta_from_action, train_dual, with_anchors, Agent,
    ChosenCritic, ConstantTeacher, TidLadder, Trainer, LOG_COLUMNS, TERMINAL_QP_OFFSET,
};

fn scenarios(count: u64, gop_size: usize) -> Vec<GopSpec> {
    (0..count)
        .map(|k| {
            let d = if k % 2 == 0 { Difficulty::Slow } else { Difficulty::Fast };
            build_scenario(gop_size, 500 + k, d, 27).unwrap()
        })
        .collect()
}

fn trained_agent(seed: u64) -> Agent {
    let cfg = tiny_config(seed);
    let pool = with_anchors(&scenarios(6, 4), &[22, 27, 32, 37]).unwrap();
    bootstrap_agent(&cfg, &pool).unwrap().0
}

/// Agent whose base always proposes `qp`.
fn fixed_base_agent(widths: &[usize], qp: u8, seed: u64) -> Agent {
    let mut base = Mlp::zeros(&Agent::base_specs(widths)).unwrap();
    let p = (f64::from(qp) / f64::from(QP_MAX)).clamp(1e-6, 1.0 - 1e-6);
    base.layers_mut().last_mut().unwrap().biases_mut()[0] = (p / (1.0 - p)).ln();
    let fresh = Agent::new(widths, seed).unwrap();
    Agent::from_parts(base, fresh.actor, true).unwrap()
}

#[test]
fn action_scaling_examples() {
    assert_eq!(apply_delta(30, 0.5), 30);
    assert_eq!(apply_delta(45, 1.0), 51);
    assert_eq!(apply_delta(5, 0.0), 0);
    assert_eq!(delta_from_action(0.0), -10);
    assert_eq!(delta_from_action(1.0), 10);
}

#[test]
fn constant_teacher_is_cloned_exactly() {
    let cfg = tiny_config(1);
    let out = clone_base(&ConstantTeacher(32), &scenarios(10, 4), &cfg, 3).unwrap();
    assert!(out.held_out_mae <= 1.0, "held-out MAE {}", out.held_out_mae);
}

#[test]
fn ladder_teacher_is_cloned_within_two_qp() {
    let cfg = tiny_config(2);
    let pool = with_anchors(&scenarios(10, 4), &[22, 27, 32, 37]).unwrap();
    let out = clone_base(&TidLadder, &pool, &cfg, 4).unwrap();
    assert!(out.held_out_mae <= 2.0, "held-out MAE {}", out.held_out_mae);
    assert!(out.target_met);
}

#[test]
fn dual_episodes_follow_the_algorithm() {
    let agent = trained_agent(5);
    let base_sum = agent.base.checksum();
    let cfg = tiny_config(5);
    let mut trainer = Trainer::new(agent, cfg).unwrap();
    let mut env = Simulator::new();
    let pool = with_anchors(&scenarios(4, 4), &[22, 37]).unwrap();
    let mut saw = [false, false];
    for ep in 0..40 {
        let gop = &pool[ep % pool.len()];
        let out = trainer.run_episode(&mut env, gop);
        assert!(out.error.is_none(), "{:?}", out.error);
        let clean = out.clean.unwrap();
        let noisy = out.noisy.unwrap();

        let over = clean.total_bits > gop.budget;
        assert_eq!(out.row.over_budget, over);
        let expect = if over { ChosenCritic::Rate } else { ChosenCritic::Distortion };
        assert_eq!(out.row.chosen_critic, expect);
        saw[usize::from(over)] = true;

        let ts = &out.transitions;
        assert_eq!(ts.len(), gop.gop_size);
        assert!(ts[..ts.len() - 1].iter().all(|t| t.r_r == 0.0 && !t.terminal));
        let last = ts.last().unwrap();
        assert!(last.terminal);
        assert_eq!(last.r_r, rate_reward(gop.budget, noisy.total_bits).unwrap());

        let (lo, hi) = dualcritic::codec::gop_extremes(gop).unwrap();
        let stored: f64 = ts.iter().map(|t| t.r_d).sum();
        let direct: f64 = noisy
            .frames
            .iter()
            .map(|f| distortion_reward(f.mse, lo, hi, gop.gop_size).unwrap())
            .sum();
        assert!((stored - direct).abs() <= 1e-9 * direct.abs().max(1e-12));

        for (t, f) in ts.iter().zip(&noisy.frames) {
            assert!((0.0..=1.0).contains(&t.action));
            let base_qp = (t.state[t.state.len() - 1] * f64::from(QP_MAX)).round() as u8;
            assert_eq!(apply_delta(base_qp, t.action), f.qp);
        }
    }
    assert!(saw[0] && saw[1], "both critics should be exercised");
    assert_eq!(trainer.agent().base.checksum(), base_sum);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let cfg = tiny_config(9);
        let cfg = dualcritic::config::TrainerConfig { episodes: 3, ..cfg };
        let (agent, log) = train_dual(&mut Simulator::new(), trained_agent(9), &scenarios(4, 4), &cfg).unwrap();
        (log.to_csv_string().unwrap(), agent.to_checkpoint().to_json().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn single_mode_forces_qp_after_overspend() {
    let widths = [24, 16];
    let agent = fixed_base_agent(&widths, 10, 1);
    let cfg = dualcritic::config::TrainerConfig {
        mode: Mode::Single,
        gop_size: 8,
        ..tiny_config(1)
    };
    let mut trainer = Trainer::new(agent, cfg).unwrap();
    let mut env = Simulator::new();
    let mut forced = 0;
    for gop in scenarios(6, 8) {
        let out = trainer.run_episode(&mut env, &gop);
        assert_eq!(out.row.chosen_critic, ChosenCritic::Single);
        let noisy = out.noisy.unwrap();
        let qp_i = noisy.frames[0].qp;
        let mut spent = 0.0;
        let mut here = 0;
        for (k, f) in noisy.frames.iter().enumerate() {
            if k > 0 && spent > gop.budget {
                assert_eq!(f.qp, (qp_i + TERMINAL_QP_OFFSET).min(QP_MAX));
                here += 1;
            }
            spent += f.bits;
        }
        assert_eq!(out.transitions.len() + here, noisy.frames.len());
        assert!(out.transitions.last().unwrap().terminal);
        forced += here;
    }
    assert!(forced > 0, "the low-QP base should overspend");
}

#[test]
fn zero_lambda_removes_rate_pressure() {
    let agent = fixed_base_agent(&[24, 16], 20, 2);
    let cfg = dualcritic::config::TrainerConfig {
        mode: Mode::Single,
        lambda_single_critic: 0.0,
        ..tiny_config(2)
    };
    let mut trainer = Trainer::new(agent, cfg).unwrap();
    let mut env = Simulator::new();
    for gop in scenarios(4, 4) {
        let out = trainer.run_episode(&mut env, &gop);
        assert!(out.transitions.iter().all(|t| t.r_r == 0.0));
    }
}

#[test]
fn training_log_has_documented_columns() {
    let cfg = dualcritic::config::TrainerConfig { episodes: 2, ..tiny_config(3) };
    let (_, log) = train_dual(&mut Simulator::new(), trained_agent(3), &scenarios(2, 4), &cfg).unwrap();
    let text = log.to_csv_string().unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header, LOG_COLUMNS.join(","));
    assert_eq!(text.lines().count(), 3);
    assert_eq!(LOG_COLUMNS.len(), 11);
}

#[test]
fn unfrozen_base_is_rejected() {
    let agent = Agent::new(&[8], 0).unwrap();
    assert!(Trainer::new(agent, tiny_config(0)).is_err());
}
