mod common;

use common::{close, fd_grad4};
use proptest::prelude::*;
use racbf::dynamics::*;

fn state() -> impl Strategy<Value = AgentState> {
    (-50.0..50.0f64, -50.0..50.0f64, -2.0..15.0f64, -3.1..3.1f64).prop_map(|(x, y, v, t)| AgentState::new(x, y, v, t))
}

#[test]
fn flow_matches_integration() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    for _ in 0..200 {
        let s0 = common::random_state(&mut rng, 50.0);
        let mut s = s0;
        for k in 1..=10 {
            for _ in 0..10 {
                s = step_rk4(s, ControlInput::ZERO, 0.01).unwrap();
            }
            let tau = k as f64 * 0.1;
            let exact = idle_flow(s0, tau);
            for (p, q) in s.to_array().iter().zip(exact.to_array()) {
                assert!((p - q).abs() <= 1e-6, "tau {tau}: {s:?} vs {exact:?}");
            }
        }
    }
}

#[test]
fn jacobian_matches_central_differences() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2);
    for _ in 0..100 {
        let s = common::random_state(&mut rng, 20.0);
        let tau = rand::Rng::random_range(&mut rng, 0.0..1.0);
        let j = idle_flow_jacobian(s, tau);
        for row in 0..4 {
            let g = fd_grad4(|x| idle_flow(AgentState::from_array(x), tau).to_array()[row], s.to_array(), 1e-5);
            for col in 0..4 {
                assert!(close(j[row][col], g[col], 1e-4, 1e-8), "d{row}/d{col}: {} vs {}", j[row][col], g[col]);
            }
        }
    }
}

proptest! {
    #[test]
    fn zero_input_is_drift(s in state()) {
        prop_assert_eq!(unicycle_deriv(s, ControlInput::ZERO), drift(s));
    }

    #[test]
    fn rk4_keeps_theta_wrapped(s in state(), a in -4.0..4.0f64, w in -1.0..1.0f64, dt in 0.001..1.0f64) {
        let n = step_rk4(s, ControlInput::new(a, w), dt).unwrap();
        prop_assert!(n.theta > -std::f64::consts::PI && n.theta <= std::f64::consts::PI);
    }

    #[test]
    fn turning_preserves_speed(s in state(), w in -1.0..1.0f64, dt in 0.001..1.0f64) {
        let n = step_rk4(s, ControlInput::new(0.0, w), dt).unwrap();
        prop_assert_eq!(n.v, s.v);
    }

    #[test]
    fn jacobian_speed_heading_block_is_identity(s in state(), tau in 0.0..3.0f64) {
        let j = idle_flow_jacobian(s, tau);
        prop_assert_eq!([j[2][2], j[2][3], j[3][2], j[3][3]], [1.0, 0.0, 0.0, 1.0]);
    }
}
