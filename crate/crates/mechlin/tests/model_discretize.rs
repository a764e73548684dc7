//! Midpoint discretization and derivative-slot oracles, checked against
//! closed forms typed directly into f64 arithmetic.

use std::collections::BTreeMap;

use mechlin::graph::{DerivOrder, GraphBuilder};
use mechlin::model::{slots, ModelError};
use mechlin::nalgebra::DVector;
use mechlin::{discretize, MechSystem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    let err = (a - b).abs();
    assert!(
        err <= tol * (1.0 + b.abs()),
        "{what}: got {a}, want {b} (err {err:.3e})"
    );
}

/// Pendulum with unit mass and length: L = ½ qdot² + g cos q, torque input.
fn pendulum(g: f64) -> MechSystem {
    let b = GraphBuilder::new();
    let q = b.var("q0");
    let qd = b.var("qdot0");
    let lagrangian = b.finish(&[0.5 * (qd.clone() * qd) + g * q.cos()]);

    let b = GraphBuilder::new();
    let u = b.var("u0");
    let forcing = b.finish(&[u]);

    MechSystem::new(1, 1, lagrangian, forcing, None, BTreeMap::new()).unwrap()
}

/// Free particle with a named mass parameter and no forcing.
fn free_particle() -> MechSystem {
    let b = GraphBuilder::new();
    let qd = b.var("qdot0");
    let m = b.var("m");
    let lagrangian = b.finish(&[0.5 * m * (qd.clone() * qd)]);

    let b = GraphBuilder::new();
    let zero = b.constant(0.0);
    let forcing = b.finish(&[zero]);

    let mut params = BTreeMap::new();
    params.insert("m".to_string(), 1.3);
    MechSystem::new(1, 0, lagrangian, forcing, None, params).unwrap()
}

#[test]
fn free_particle_discrete_lagrangian_is_quadratic_in_the_difference() {
    let disc = discretize(&free_particle(), 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let qk = rng.gen_range(-2.0..2.0);
        let qn = rng.gen_range(-2.0..2.0);
        let got = disc.ld().eval(&[("qk0", qk), ("qn0", qn), ("m", 1.3)]).unwrap();
        let want = 1.3 * (qn - qk) * (qn - qk) / 0.2;
        assert_close(got, want, 1e-14, "free-particle ld");
    }
}

#[test]
fn pendulum_discrete_lagrangian_matches_closed_form() {
    let g = 9.8;
    let dt = 0.1;
    let disc = discretize(&pendulum(g), dt).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..20 {
        let qk = rng.gen_range(-3.0..3.0);
        let qn = rng.gen_range(-3.0..3.0);
        let got = disc.ld().eval(&[("qk0", qk), ("qn0", qn)]).unwrap();
        let want = (qn - qk) * (qn - qk) / (2.0 * dt) + g * dt * f64::cos((qk + qn) / 2.0);
        assert_close(got, want, 1e-14, "pendulum ld");
    }
}

/// The slot-1 derivative of the discrete Lagrangian is the term that
/// appears in the implicit root condition of the one-step map.
#[test]
fn pendulum_d1ld_matches_the_root_condition_term() {
    let disc = discretize(&pendulum(9.8), 0.1).unwrap();
    let d = disc
        .ld()
        .derive(&[("qk0", 0.2), ("qn0", 0.2471)], &["qk0"], DerivOrder::First)
        .unwrap();
    let want = -(0.2471 - 0.2) / 0.1 - 0.49 * f64::sin((0.2 + 0.2471) / 2.0);
    assert_close(d.grad[0], want, 1e-13, "d1 ld");
    // Same number with the digits written out: -0.471 - 0.49 sin(0.22355).
    assert_close(d.grad[0], -0.471 - 0.49 * f64::sin(0.22355), 1e-12, "d1 ld digits");
}

#[test]
fn pure_torque_force_integrates_to_u_times_dt() {
    let disc = discretize(&pendulum(9.8), 0.1).unwrap();
    let got = disc
        .fminus()
        .eval(&[("qk0", 0.2), ("qn0", 0.2471), ("u0", 0.8)])
        .unwrap();
    assert_eq!(got, 0.8 * 0.1);
    assert_close(got, 0.08, 1e-12, "u dt");
    let plus = disc
        .fplus()
        .eval(&[("qk0", 0.2), ("qn0", 0.2471), ("u0", 0.8)])
        .unwrap();
    assert_eq!(plus, 0.0);
}

/// Two structural identities of the midpoint rule, at random points:
/// D1 ld + D2 ld = dt * dL/dq(mid, rate) and D2 ld − D1 ld = 2 dL/dqd.
#[test]
fn midpoint_slot_identities_hold() {
    let sys = pendulum(9.8);
    let dt = 0.07;
    let disc = discretize(&sys, dt).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..20 {
        let qk = rng.gen_range(-3.0..3.0);
        let qn = rng.gen_range(-3.0..3.0);
        let d = disc
            .ld()
            .derive(&[("qk0", qk), ("qn0", qn)], &["qk0", "qn0"], DerivOrder::First)
            .unwrap();
        let (mid, rate) = ((qk + qn) / 2.0, (qn - qk) / dt);
        let cont = sys
            .lagrangian()
            .derive(&[("q0", mid), ("qdot0", rate)], &["q0", "qdot0"], DerivOrder::First)
            .unwrap();
        assert_close(d.grad[0] + d.grad[1], dt * cont.grad[0], 1e-12, "slot sum");
        assert_close(d.grad[1] - d.grad[0], 2.0 * cont.grad[1], 1e-12, "slot difference");
    }
}

/// At a resting pair (q, q) the midpoint substitution reproduces the
/// continuous Lagrangian at zero velocity with no rounding at all.
#[test]
fn resting_pair_reproduces_scaled_rest_lagrangian_exactly() {
    let sys = pendulum(9.8);
    let dt = 0.1;
    let disc = discretize(&sys, dt).unwrap();
    for &q in &[0.0, 0.2, -1.7, 3.0] {
        let ld = disc.ld().eval(&[("qk0", q), ("qn0", q)]).unwrap();
        let rest = sys.lagrangian().eval(&[("q0", q), ("qdot0", 0.0)]).unwrap();
        assert_eq!(ld.to_bits(), (rest * dt).to_bits(), "resting pair at q={q}");
    }
}

#[test]
fn pendulum_second_slots_match_reference_values() {
    let disc = discretize(&pendulum(9.8), 0.1).unwrap();
    let s = slots(
        &disc,
        &DVector::from_vec(vec![0.2]),
        &DVector::from_vec(vec![0.2471]),
        &DVector::from_vec(vec![0.8]),
        DerivOrder::Second,
        false,
    )
    .unwrap();
    let sec = s.second.as_ref().unwrap();

    // Four-decimal reference values, then the closed forms at full precision.
    assert_close(sec.d2d1l[(0, 0)], -10.2389, 5e-5, "d2d1l reference");
    assert_close(sec.d2d2l[(0, 0)], 9.7610, 5e-5, "d2d2l reference");
    let mid = (0.2 + 0.2471) / 2.0;
    let curv = 9.8 * 0.1 / 4.0 * f64::cos(mid);
    assert_close(sec.d1d1l[(0, 0)], 10.0 - curv, 1e-12, "d1d1l closed form");
    assert_close(sec.d2d1l[(0, 0)], -10.0 - curv, 1e-12, "d2d1l closed form");
    assert_close(sec.d2d2l[(0, 0)], 10.0 - curv, 1e-12, "d2d2l closed form");

    // Pure torque: the only nonzero force derivative is d/du = dt.
    assert_eq!(sec.d3f_minus[(0, 0)], 0.1);
    assert_eq!(sec.d1f_minus[(0, 0)], 0.0);
    assert_eq!(sec.d2f_minus[(0, 0)], 0.0);
    assert_eq!(sec.d3f_plus[(0, 0)], 0.0);

    // First tier comes along with every order.
    assert_close(s.first.f_minus[0], 0.08, 1e-12, "f minus value");
}

#[test]
fn free_particle_cross_slot_is_minus_mass_over_dt() {
    let disc = discretize(&free_particle(), 0.1).unwrap();
    let s = slots(
        &disc,
        &DVector::from_vec(vec![0.4]),
        &DVector::from_vec(vec![0.9]),
        &DVector::zeros(0),
        DerivOrder::Second,
        false,
    )
    .unwrap();
    let sec = s.second.unwrap();
    assert_close(sec.d2d1l[(0, 0)], -13.0, 1e-12, "free particle cross slot");
    assert_close(sec.d1d1l[(0, 0)], 13.0, 1e-12, "free particle diagonal slot");
}

/// Lower tiers must not depend on the requested order: the same passes
/// fill them, so the numbers agree bitwise.
#[test]
fn slot_tiers_are_identical_across_orders() {
    let disc = discretize(&pendulum(9.8), 0.1).unwrap();
    let qk = DVector::from_vec(vec![0.3]);
    let qn = DVector::from_vec(vec![0.35]);
    let u = DVector::from_vec(vec![-0.2]);

    let s1 = slots(&disc, &qk, &qn, &u, DerivOrder::First, false).unwrap();
    let s2 = slots(&disc, &qk, &qn, &u, DerivOrder::Second, false).unwrap();
    let s3 = slots(&disc, &qk, &qn, &u, DerivOrder::Third, false).unwrap();

    assert_eq!(s1.first.d1l[0].to_bits(), s2.first.d1l[0].to_bits());
    assert_eq!(s1.first.d2l[0].to_bits(), s3.first.d2l[0].to_bits());
    assert_eq!(s1.first.f_minus[0].to_bits(), s3.first.f_minus[0].to_bits());

    let (a, b) = (s2.second.as_ref().unwrap(), s3.second.as_ref().unwrap());
    for (x, y) in [
        (&a.d1d1l, &b.d1d1l),
        (&a.d2d1l, &b.d2d1l),
        (&a.d1d2l, &b.d1d2l),
        (&a.d2d2l, &b.d2d2l),
        (&a.d3f_minus, &b.d3f_minus),
    ] {
        assert_eq!(x[(0, 0)].to_bits(), y[(0, 0)].to_bits());
    }
    assert!(s2.third.is_none());
    assert!(s3.third.is_some());
}

/// A coupled two-coordinate system: mixed-partial blocks must be exact
/// transposes, and every block must agree with central differences.
#[test]
fn mixed_partial_blocks_agree_with_finite_differences() {
    let b = GraphBuilder::new();
    let q0 = b.var("q0");
    let q1 = b.var("q1");
    let qd0 = b.var("qdot0");
    let qd1 = b.var("qdot1");
    // Kinetic coupling and a joint potential, nothing separable.
    let lagrangian = b.finish(&[0.5 * (qd0.clone() * qd0.clone())
        + 0.5 * (qd1.clone() * qd1.clone())
        + 0.3 * (qd0 * qd1)
        - (q0.clone().powi(2) * q1.clone() + q1.powi(3) / 3.0 + q0.sin())]);
    let b = GraphBuilder::new();
    let (z0, z1) = (b.constant(0.0), b.constant(0.0));
    let forcing = b.finish(&[z0, z1]);
    let sys = MechSystem::new(2, 0, lagrangian, forcing, None, BTreeMap::new()).unwrap();
    let dt = 0.05;
    let disc = discretize(&sys, dt).unwrap();

    let qk = DVector::from_vec(vec![0.4, -0.3]);
    let qn = DVector::from_vec(vec![0.5, -0.1]);
    let u = DVector::zeros(0);
    let s = slots(&disc, &qk, &qn, &u, DerivOrder::Second, false).unwrap();
    let sec = s.second.unwrap();

    assert_eq!(sec.d1d2l, sec.d2d1l.transpose(), "mixed blocks transpose");

    // d2d1l[i][j] = d/d qn_j of d1l_i, finite-differenced.
    let h = 1e-5;
    for j in 0..2 {
        let mut up = qn.clone();
        let mut dn = qn.clone();
        up[j] += h;
        dn[j] -= h;
        let su = slots(&disc, &qk, &up, &u, DerivOrder::First, false).unwrap();
        let sd = slots(&disc, &qk, &dn, &u, DerivOrder::First, false).unwrap();
        for i in 0..2 {
            let fd = (su.first.d1l[i] - sd.first.d1l[i]) / (2.0 * h);
            assert_close(sec.d2d1l[(i, j)], fd, 1e-9, &format!("d2d1l[{i},{j}] vs fd"));
            let fd2 = (su.first.d2l[i] - sd.first.d2l[i]) / (2.0 * h);
            assert_close(sec.d2d2l[(i, j)], fd2, 1e-9, &format!("d2d2l[{i},{j}] vs fd"));
        }
    }
}

/// Pendulum with symbolic mass/length/gravity parameters must agree with
/// the numerically specialized graph.
#[test]
fn named_parameters_match_inlined_constants() {
    let b = GraphBuilder::new();
    let q = b.var("q0");
    let qd = b.var("qdot0");
    let (m, l, g) = (b.var("m"), b.var("l"), b.var("g"));
    let lagrangian =
        b.finish(&[0.5 * (m.clone() * l.clone().powi(2)) * (qd.clone() * qd) + m * g * l * q.cos()]);
    let b = GraphBuilder::new();
    let u = b.var("u0");
    let forcing = b.finish(&[u]);
    let mut params = BTreeMap::new();
    params.insert("m".to_string(), 1.0);
    params.insert("l".to_string(), 1.0);
    params.insert("g".to_string(), 9.8);
    let sys = MechSystem::new(1, 1, lagrangian, forcing, None, params).unwrap();

    let disc_sym = discretize(&sys, 0.1).unwrap();
    let disc_num = discretize(&pendulum(9.8), 0.1).unwrap();

    let qk = DVector::from_vec(vec![0.2]);
    let qn = DVector::from_vec(vec![0.2471]);
    let u = DVector::from_vec(vec![0.8]);
    let a = slots(&disc_sym, &qk, &qn, &u, DerivOrder::Second, false).unwrap();
    let b = slots(&disc_num, &qk, &qn, &u, DerivOrder::Second, false).unwrap();
    assert_close(a.first.d1l[0], b.first.d1l[0], 1e-13, "param d1l");
    assert_close(
        a.second.as_ref().unwrap().d2d1l[(0, 0)],
        b.second.as_ref().unwrap().d2d1l[(0, 0)],
        1e-13,
        "param d2d1l",
    );
}

#[test]
fn constraint_slots_evaluate_at_both_endpoints() {
    // Unit circle constraint on the first two of three coordinates.
    let b = GraphBuilder::new();
    let (q0, q1) = (b.var("q0"), b.var("q1"));
    let h = b.finish(&[q0.powi(2) + q1.powi(2) - 1.0]);

    let b = GraphBuilder::new();
    let (q0, q1, q2) = (b.var("q0"), b.var("q1"), b.var("q2"));
    let qd: Vec<_> = (0..3).map(|i| b.var(&format!("qdot{i}"))).collect();
    let lagrangian = b.finish(&[0.5
        * (qd[0].clone() * qd[0].clone()
            + qd[1].clone() * qd[1].clone()
            + qd[2].clone() * qd[2].clone())
        - (q0.clone() * q1.clone() + q2.clone().powi(2))]);
    let b = GraphBuilder::new();
    let outs: Vec<_> = (0..3).map(|_| b.constant(0.0)).collect();
    let forcing = b.finish(&outs);
    let sys = MechSystem::new(3, 0, lagrangian, forcing, Some(h), BTreeMap::new()).unwrap();
    let disc = discretize(&sys, 0.1).unwrap();

    let qk = DVector::from_vec(vec![0.6, 0.8, 0.1]);
    let qn = DVector::from_vec(vec![0.8, 0.6, -0.2]);
    let s = slots(&disc, &qk, &qn, &DVector::zeros(0), DerivOrder::Third, true).unwrap();
    let cs = s.constraints.unwrap();

    assert_close(cs.h_next[0], 0.8 * 0.8 + 0.6 * 0.6 - 1.0, 1e-15, "h at next");
    for (dh, q) in [(&cs.dh_k, &qk), (&cs.dh_next, &qn)] {
        assert_eq!(dh.nrows(), 1);
        assert_eq!(dh.ncols(), 3);
        assert_close(dh[(0, 0)], 2.0 * q[0], 1e-15, "dh x");
        assert_close(dh[(0, 1)], 2.0 * q[1], 1e-15, "dh y");
        assert_eq!(dh[(0, 2)], 0.0);
    }
    let d2 = &cs.d2h_next.as_ref().unwrap()[0];
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j && i < 2 { 2.0 } else { 0.0 };
            assert_eq!(d2.get(i, j), want, "d2h[{i},{j}]");
        }
    }
    let d3 = &cs.d3h_k.as_ref().unwrap()[0];
    for i in 0..3 {
        for j in 0..3 {
            for l in 0..3 {
                assert_eq!(d3.get(i, j, l), 0.0, "d3h[{i},{j},{l}]");
            }
        }
    }
}

mod errors {
    use super::*;

    fn unit_lagrangian() -> mechlin::ExprGraph {
        let b = GraphBuilder::new();
        let qd = b.var("qdot0");
        b.finish(&[qd.clone() * qd])
    }

    fn no_force() -> mechlin::ExprGraph {
        let b = GraphBuilder::new();
        let z = b.constant(0.0);
        b.finish(&[z])
    }

    #[test]
    fn reserved_parameter_names_are_rejected() {
        for bad in ["q0", "qk3", "qn1", "u12", "qdot0"] {
            let mut params = BTreeMap::new();
            params.insert(bad.to_string(), 1.0);
            let err =
                MechSystem::new(1, 0, unit_lagrangian(), no_force(), None, params).unwrap_err();
            assert!(
                matches!(err, ModelError::Shape { .. }),
                "param `{bad}`: got {err:?}"
            );
        }
        // `q` alone is not positional; only exact `q<index>` forms are.
        let mut params = BTreeMap::new();
        params.insert("q".to_string(), 2.0);
        assert!(MechSystem::new(1, 0, unit_lagrangian(), no_force(), None, params).is_ok());
    }

    #[test]
    fn non_finite_parameters_are_rejected() {
        let mut params = BTreeMap::new();
        params.insert("m".to_string(), f64::NAN);
        assert!(matches!(
            MechSystem::new(1, 0, unit_lagrangian(), no_force(), None, params),
            Err(ModelError::BadParameter { .. })
        ));
    }

    #[test]
    fn forcing_output_count_must_match_nq() {
        let b = GraphBuilder::new();
        let (z0, z1) = (b.constant(0.0), b.constant(0.0));
        let forcing = b.finish(&[z0, z1]);
        assert!(matches!(
            MechSystem::new(1, 0, unit_lagrangian(), forcing, None, BTreeMap::new()),
            Err(ModelError::Shape { .. })
        ));
    }

    #[test]
    fn constraints_must_leave_some_freedom() {
        let b = GraphBuilder::new();
        let q = b.var("q0");
        let h = b.finish(&[q.clone() * q]);
        assert!(matches!(
            MechSystem::new(1, 0, unit_lagrangian(), no_force(), Some(h), BTreeMap::new()),
            Err(ModelError::TooManyConstraints { n: 1, c: 1 })
        ));
    }

    #[test]
    fn role_variable_whitelists_are_enforced() {
        // Lagrangian may not reference inputs.
        let b = GraphBuilder::new();
        let u = b.var("u0");
        let l = b.finish(&[u.clone() * u]);
        assert!(matches!(
            MechSystem::new(1, 1, l, no_force(), None, BTreeMap::new()),
            Err(ModelError::BadVariable { graph: "Lagrangian", .. })
        ));

        // Constraints are configuration-only.
        let b = GraphBuilder::new();
        let qd = b.var("qdot0");
        let h = b.finish(&[qd.clone() * qd]);
        let b = GraphBuilder::new();
        let (z0, z1) = (b.constant(0.0), b.constant(0.0));
        let forcing = b.finish(&[z0, z1]);
        let b = GraphBuilder::new();
        let qd = b.var("qdot0");
        let l2 = b.finish(&[qd.clone() * qd]);
        assert!(matches!(
            MechSystem::new(2, 0, l2, forcing, Some(h), BTreeMap::new()),
            Err(ModelError::BadVariable { graph: "constraints", .. })
        ));

        // Out-of-range indices are just as bad as foreign names.
        let b = GraphBuilder::new();
        let q9 = b.var("q9");
        let l3 = b.finish(&[q9.clone() * q9]);
        assert!(matches!(
            MechSystem::new(1, 0, l3, no_force(), None, BTreeMap::new()),
            Err(ModelError::BadVariable { .. })
        ));
    }

    #[test]
    fn bad_timesteps_are_rejected() {
        let sys = MechSystem::new(1, 0, unit_lagrangian(), no_force(), None, BTreeMap::new())
            .unwrap();
        for dt in [0.0, -0.1, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                discretize(&sys, dt),
                Err(ModelError::BadTimestep { .. })
            ));
        }
    }

    #[test]
    fn slot_dimension_mismatches_are_rejected() {
        let sys = MechSystem::new(1, 0, unit_lagrangian(), no_force(), None, BTreeMap::new())
            .unwrap();
        let disc = discretize(&sys, 0.1).unwrap();
        let err = slots(
            &disc,
            &DVector::from_vec(vec![0.1, 0.2]),
            &DVector::from_vec(vec![0.1]),
            &DVector::zeros(0),
            DerivOrder::First,
            false,
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::Shape { .. }));
    }
}
