//! Randomized invariants across modules.

use ddrl_lab::cli::Checkpoint;
use ddrl_lab::net::{ema_update, Architecture, EpsNet};
use ddrl_lab::oracle::{histogram_density, tilted_target, total_variation, GridDensity, GridSpec};
use ddrl_lab::par::{map_range_with, Mode};
use ddrl_lab::reward_service::protocol::{read_message, write_message};
use ddrl_lab::reward_service::{Message, Status};
use ddrl_lab::rl::{compute_advantages, exp_tilt_advantages, select_timesteps};
use ddrl_lab::schedule::{forward_noise, ScheduleConfig, ScheduleKind};
use proptest::prelude::*;

fn schedule_strategy() -> impl Strategy<Value = ScheduleConfig> {
    (1usize..80, 1e-4f64..0.3, 0.0f64..0.6).prop_map(|(steps, lo, span)| ScheduleConfig {
        steps,
        beta_min: lo,
        beta_max: (lo + span).min(0.95),
        kind: ScheduleKind::Linear,
    })
}

fn rewards_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 2..16)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_quantities_are_well_formed(cfg in schedule_strategy()) {
        let s = cfg.build().unwrap();
        let mut prev = 1.0;
        for t in 1..=s.steps() {
            prop_assert!(s.alpha_bar(t) < prev && s.alpha_bar(t) > 0.0);
            prev = s.alpha_bar(t);
            prop_assert!(s.sigma(t) > 0.0 && s.sigma(t).is_finite());
            prop_assert!(s.weight(t) > 0.0 && s.weight(t).is_finite());
        }
        let x = forward_noise(&[0.3, -2.0], s.steps(), &[0.0, 0.0], &s).unwrap();
        prop_assert!((x[0] / 0.3 - s.alpha_bar(s.steps()).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn timestep_sets_descend_within_range(steps in 1usize..100, stride in 1usize..6) {
        let ts = select_timesteps(steps, stride);
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(ts.iter().all(|t| (2..=steps).contains(t)));
        prop_assert_eq!(ts.len(), steps.saturating_sub(1).div_ceil(stride));
    }

    #[test]
    fn group_advantages_are_centered_and_shift_invariant(r in rewards_strategy(), shift in -1e3f64..1e3, beta in 0.01f64..10.0) {
        let a = compute_advantages(&r, beta, 1e-6).unwrap();
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-8 * r.len() as f64 / beta.min(1.0));
        let moved: Vec<f64> = r.iter().map(|x| x + shift).collect();
        let b = compute_advantages(&moved, beta, 1e-6).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6 * (1.0 + x.abs()));
        }
        let same = vec![r[0]; r.len()];
        prop_assert!(compute_advantages(&same, beta, 1e-6).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn group_advantages_preserve_order(r in rewards_strategy()) {
        let a = compute_advantages(&r, 1.0, 1e-6).unwrap();
        for i in 0..r.len() {
            for j in 0..r.len() {
                if r[i] < r[j] {
                    prop_assert!(a[i] < a[j]);
                }
            }
        }
    }

    #[test]
    fn exp_tilt_advantages_are_finite_and_monotone(r in prop::collection::vec(-5.0f64..5.0, 2..10), beta in 0.2f64..4.0, z in -3.0f64..3.0) {
        // exponents stay below 40 here, so a cap of 50 never ties two rollouts
        let a = exp_tilt_advantages(&r, beta, z, 50.0).unwrap();
        prop_assert!(a.iter().all(|v| v.is_finite()));
        for i in 0..r.len() {
            for j in 0..r.len() {
                if r[i] < r[j] {
                    prop_assert!(a[i] < a[j]);
                }
            }
        }
    }

    #[test]
    fn tilted_target_normalizes_and_ignores_reward_shift(
        logits in prop::collection::vec(-3.0f64..3.0, 5..40),
        beta in 0.1f64..5.0,
        shift in -20.0f64..20.0,
    ) {
        let n = logits.len();
        let total: f64 = logits.iter().map(|l| l.exp()).sum();
        let data = GridDensity { spec: GridSpec::line(-1.0, 1.0, n), masses: logits.iter().map(|l| l.exp() / total).collect() };
        let rewards: Vec<f64> = (0..n).map(|k| (k as f64 * 0.37).sin() * 2.0).collect();
        let p = tilted_target(&data, &rewards, beta).unwrap();
        prop_assert!((p.total() - 1.0).abs() < 1e-12);
        let moved: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let q = tilted_target(&data, &moved, beta).unwrap();
        prop_assert!(total_variation(&p, &q).unwrap() < 1e-12);
    }

    #[test]
    fn histograms_are_normalized(xs in prop::collection::vec(-12.0f64..12.0, 1..200)) {
        let samples: Vec<Vec<f64>> = xs.iter().map(|x| vec![*x]).collect();
        let spec = GridSpec::line(-10.0, 10.0, 41);
        let (h, outside) = histogram_density(&samples, &spec).unwrap();
        prop_assert!((h.total() - 1.0).abs() < 1e-12);
        prop_assert_eq!(outside, xs.iter().filter(|x| x.abs() > 10.0 + 0.25).count());
    }

    #[test]
    fn ema_endpoints(a in prop::collection::vec(-1.0f64..1.0, 1..20)) {
        let b: Vec<f64> = a.iter().map(|x| x * 3.0 + 1.0).collect();
        let mut keep = a.clone();
        ema_update(&mut keep, &b, 1.0).unwrap();
        prop_assert_eq!(&keep, &a);
        let mut take = a.clone();
        ema_update(&mut take, &b, 0.0).unwrap();
        prop_assert_eq!(&take, &b);
    }

    #[test]
    fn wire_messages_roundtrip(
        samples in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 2), 0..20),
        conds in prop::collection::vec(-3i64..5, 0..20),
        rewards in prop::option::of(prop::collection::vec(-1e9f64..1e9, 0..20)),
    ) {
        let msgs = vec![
            Message::Submit { task: "gmm2d".into(), samples, conditions: conds },
            Message::Result { uuid: "ab12".into(), status: Status::Done, rewards, reason: None },
            Message::Fetch { uuid: "x".into(), wait_ms: 7 },
            Message::Shutdown,
        ];
        let mut buf = Vec::new();
        for m in &msgs {
            write_message(&mut buf, m).unwrap();
        }
        let mut r = std::io::Cursor::new(buf);
        for m in &msgs {
            let got = read_message(&mut r).unwrap();
            prop_assert_eq!(got.as_ref(), Some(m));
        }
        prop_assert!(read_message(&mut r).unwrap().is_none());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_text_roundtrips(seed in any::<u64>(), scale in 1e-12f64..1e12) {
        let mut net = EpsNet::init(Architecture::new(2, 3, 7), seed).unwrap();
        for p in net.params_mut() {
            *p *= scale;
        }
        let sched = ScheduleConfig::default();
        let ck = Checkpoint::from_net("init", &net, &sched, "h");
        let text = ck.to_json().unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn sequential_and_parallel_maps_agree(n in 0usize..500) {
        let f = |i: usize| ((i as f64) * 0.1).sin().exp();
        let a = map_range_with(Mode::Sequential, n, f);
        let b = map_range_with(Mode::default_mode(), n, f);
        prop_assert_eq!(a, b);
    }
}
