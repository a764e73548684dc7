//! The built-in model library: constructor contracts, published values,
//! symmetry consequences, and the named-template registry.

use std::collections::BTreeMap;

use mechlin::graph::DerivOrder;
use mechlin::integrator::{simulate, step, DiscreteState, NewtonOpts};
use mechlin::linearizer::check_singularity;
use mechlin::model::ModelError;
use mechlin::nalgebra::DVector;
use mechlin::{
    cartesian_pendulum, constrained_chain, discretize, pendulum, spherical_pendulum, ChainParams,
    SystemTemplate,
};

fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    let err = (a - b).abs();
    assert!(
        err <= tol * (1.0 + b.abs()),
        "{what}: got {a}, want {b} (err {err:.3e})"
    );
}

fn state(q: &[f64], p: &[f64]) -> DiscreteState {
    DiscreteState::new(DVector::from_row_slice(q), DVector::from_row_slice(p))
}

mod pendulum_template {
    use super::*;

    /// The default pendulum reproduces the hand-checked single step from
    /// (q, p) = (0.2, 0.5) with u = 0.8 at dt = 0.1.
    #[test]
    fn defaults_reproduce_the_worked_step() {
        let disc = discretize(&pendulum(1.0, 1.0, 9.8).unwrap(), 0.1).unwrap();
        let result = step(
            &disc,
            &state(&[0.2], &[0.5]),
            &DVector::from_row_slice(&[0.8]),
            &NewtonOpts::default(),
        )
        .unwrap();
        assert_close(result.state.q[0], 0.247136194155572, 1e-12, "stepped configuration");
        assert_close(result.state.p[0], 0.362723883111432, 1e-12, "stepped momentum");
    }

    /// With gravity off the pendulum is a free rotor, and the step keeps
    /// the momentum constant.
    #[test]
    fn free_rotor_conserves_momentum() {
        let disc = discretize(&pendulum(1.0, 1.0, 0.0).unwrap(), 0.1).unwrap();
        let traj = simulate(
            &disc,
            &state(&[0.3], &[0.7]),
            100,
            |_, _| DVector::zeros(1),
            &NewtonOpts::default(),
        )
        .unwrap();
        for s in &traj.states {
            assert_close(s.p[0], 0.7, 1e-13, "free-rotor momentum");
        }
    }

    /// Direct evaluation of the Lagrangian for a longer pendulum:
    /// at θ = 0, θ̇ = 1 it is ½ml²·1 + mgl = 2 + 2g for l = 2.
    #[test]
    fn doubled_length_scales_the_lagrangian() {
        let sys = pendulum(1.0, 2.0, 9.8).unwrap();
        let value = sys.lagrangian().eval(&[("q0", 0.0), ("qdot0", 1.0)]).unwrap();
        assert_close(value, 2.0 + 2.0 * 9.8, 1e-14, "Lagrangian value");
    }

    #[test]
    fn rejects_nonpositive_parameters() {
        assert!(matches!(pendulum(0.0, 1.0, 9.8), Err(ModelError::Shape { .. })));
        assert!(matches!(pendulum(1.0, -2.0, 9.8), Err(ModelError::Shape { .. })));
        assert!(matches!(pendulum(1.0, 1.0, f64::NAN), Err(ModelError::Shape { .. })));
    }
}

mod spherical_template {
    use super::*;

    /// The mass matrix ∂²L/∂q̇² is diag(mr²sin²θ, mr²): full rank away
    /// from the poles, with the azimuthal entry vanishing at θ = nπ.
    #[test]
    fn mass_matrix_degenerates_at_the_poles() {
        let (m, r) = (1.3, 0.7);
        let sys = spherical_pendulum(m, r, 9.8).unwrap();
        let at = |theta: f64| {
            let bundle = sys
                .lagrangian()
                .derive(
                    &[("q1", theta), ("qdot0", 0.4), ("qdot1", -0.2)],
                    &["qdot0", "qdot1"],
                    DerivOrder::Second,
                )
                .unwrap();
            let h = bundle.hess.unwrap();
            (h.get(0, 0), h.get(0, 1), h.get(1, 1))
        };

        let equator = at(std::f64::consts::FRAC_PI_2);
        assert_close(equator.0, m * r * r, 1e-14, "azimuthal inertia at the equator");
        assert_close(equator.2, m * r * r, 1e-14, "polar inertia at the equator");
        assert_close(equator.1, 0.0, 1e-14, "off-diagonal inertia");

        let pole = at(0.0);
        assert_close(pole.0, 0.0, 1e-14, "azimuthal inertia at the pole");
        assert_close(pole.2, m * r * r, 1e-14, "polar inertia at the pole");
    }

    /// The Lagrangian never references the azimuth itself, and the
    /// matching discrete consequence is that the azimuthal momentum is
    /// conserved exactly by the step.
    #[test]
    fn azimuthal_momentum_is_conserved() {
        let sys = spherical_pendulum(1.0, 1.0, 9.8).unwrap();
        assert!(
            sys.lagrangian().var_index("q0").is_none(),
            "Lagrangian should be independent of the azimuth"
        );
        let disc = discretize(&sys, 0.01).unwrap();
        let traj = simulate(
            &disc,
            &state(&[0.3, 1.2], &[0.4, 0.1]),
            500,
            |_, _| DVector::zeros(0),
            &NewtonOpts::default(),
        )
        .unwrap();
        for s in &traj.states {
            assert_close(s.p[0], 0.4, 1e-10, "azimuthal momentum");
        }
        // The polar momentum does change, so conservation above is not
        // an artifact of nothing moving.
        assert!((traj.states[500].p[1] - 0.1).abs() > 1e-3, "polar momentum froze");
    }

    /// The solver-facing matrix determinant matches its closed form at a
    /// probe point, independent of the template's coordinate ordering.
    #[test]
    fn step_matrix_determinant_matches_closed_form() {
        let (m, r, g, dt) = (1.0f64, 1.0f64, 9.8f64, 0.05f64);
        let disc = discretize(&spherical_pendulum(m, r, g).unwrap(), dt).unwrap();
        let (tk, tn, fk, fn_) = (0.9, 1.05, 0.2, 0.6);
        let report = check_singularity(
            &disc,
            &DVector::from_row_slice(&[fk, tk]),
            &DVector::from_row_slice(&[fn_, tn]),
            &DVector::zeros(0),
        )
        .unwrap();
        let mid = 0.5 * (tk + tn);
        let expected = m * m * r.powi(3) / (4.0 * dt * dt)
            * mid.sin().powi(2)
            * (dt * dt * g * mid.cos() + r * (2.0 + (tk + tn).cos()) * (fk - fn_).powi(2) + 4.0 * r);
        assert_close(report.m_det, expected, 1e-10, "determinant closed form");
    }

    #[test]
    fn rejects_nonpositive_parameters() {
        assert!(matches!(spherical_pendulum(-1.0, 1.0, 9.8), Err(ModelError::Shape { .. })));
        assert!(matches!(spherical_pendulum(1.0, 0.0, 9.8), Err(ModelError::Shape { .. })));
    }
}

mod cartesian_template {
    use super::*;

    /// The solver-facing matrix for the constrained point mass is
    /// constant: diag(m/dt, m/dt) up to sign, so its determinant is
    /// (m/dt)² at any pair of states, while the constraint-pivot
    /// determinant carries the configuration dependence −(4dt/m)(qₖ·qₙ).
    #[test]
    fn step_matrices_have_their_closed_forms() {
        let (m, l, dt) = (1.6, 2.0, 0.05);
        let disc = discretize(&cartesian_pendulum(m, l).unwrap(), dt).unwrap();
        for (ak, an) in [(0.3, 0.45), (-1.2, -1.1), (2.0, 2.4)] {
            let qk = DVector::from_row_slice(&[l * f64::sin(ak), -l * f64::cos(ak)]);
            let qn = DVector::from_row_slice(&[l * f64::sin(an), -l * f64::cos(an)]);
            let report =
                check_singularity(&disc, &qk, &qn, &DVector::zeros(0)).unwrap();
            assert_close(report.m_det, (m / dt).powi(2), 1e-12, "mass-side determinant");
            let s_expected = -(4.0 * dt / m) * qk.dot(&qn);
            assert_close(
                report.s_det.unwrap(),
                s_expected,
                1e-12,
                "constraint-pivot determinant",
            );
        }
    }

    /// A start on the circle stays on the circle.
    #[test]
    fn on_circle_start_stays_on_circle() {
        let l = 1.25;
        let disc = discretize(&cartesian_pendulum(0.8, l).unwrap(), 0.01).unwrap();
        // Initial momentum tangent to the circle at angle 0.4.
        let a = 0.4f64;
        let start = state(
            &[l * a.sin(), -l * a.cos()],
            &[0.6 * a.cos(), 0.6 * a.sin()],
        );
        let traj = simulate(&disc, &start, 400, |_, _| DVector::zeros(0), &NewtonOpts::default())
            .unwrap();
        for s in &traj.states {
            let h = s.q[0] * s.q[0] + s.q[1] * s.q[1] - l * l;
            assert!(h.abs() <= 1e-9, "constraint residual {h:.3e}");
        }
    }

    #[test]
    fn rejects_nonpositive_parameters() {
        assert!(matches!(cartesian_pendulum(1.0, 0.0), Err(ModelError::Shape { .. })));
        assert!(matches!(cartesian_pendulum(-0.5, 1.0), Err(ModelError::Shape { .. })));
    }
}

mod chain_template {
    use super::*;

    /// The default sizing gives the 40-coordinate, 6-constraint system
    /// with one input per string.
    #[test]
    fn default_sizing() {
        let sys = constrained_chain(40, 6, &ChainParams::default()).unwrap();
        assert_eq!(sys.nq(), 40);
        assert_eq!(sys.nc(), 6);
        assert_eq!(sys.nu(), 6);
    }

    /// A two-link unconstrained chain with gravity off sits still at the
    /// origin of its phase space.
    #[test]
    fn weightless_chain_at_rest_is_a_fixed_point() {
        let params = ChainParams { gravity: 0.0, ..ChainParams::default() };
        let disc = discretize(&constrained_chain(2, 0, &params).unwrap(), 0.05).unwrap();
        let traj = simulate(
            &disc,
            &state(&[0.0, 0.0], &[0.0, 0.0]),
            50,
            |_, _| DVector::zeros(0),
            &NewtonOpts::default(),
        )
        .unwrap();
        for s in &traj.states {
            assert!(s.q.amax() <= 1e-14, "configuration moved: {:?}", s.q);
            assert!(s.p.amax() <= 1e-14, "momentum appeared: {:?}", s.p);
        }
    }

    /// The hanging rest configuration satisfies every string constraint
    /// by construction and is a fixed point under gravity, with zero
    /// multipliers.
    #[test]
    fn hanging_rest_satisfies_the_strings() {
        let disc =
            discretize(&constrained_chain(40, 6, &ChainParams::default()).unwrap(), 0.01).unwrap();
        let rest = state(&vec![0.0; 40], &vec![0.0; 40]);
        let traj = simulate(&disc, &rest, 20, |_, _| DVector::zeros(6), &NewtonOpts::default())
            .unwrap();
        for s in &traj.states {
            assert!(s.q.amax() <= 1e-12, "rest configuration drifted");
        }
        for lam in &traj.lambdas {
            assert!(lam.amax() <= 1e-10, "rest multipliers nonzero: {lam:?}");
        }
    }

    /// Inputs act on exactly the coordinates the strings attach to.
    #[test]
    fn inputs_land_on_attachment_coordinates() {
        let sys = constrained_chain(5, 2, &ChainParams::default()).unwrap();
        // Attachment indices for (5, 2) are floor(5/3)−1 = 0 and
        // floor(10/3)−1 = 2.
        let forcing = sys.forcing();
        let values = forcing.bind(&[("u0", 3.0), ("u1", -2.0)]).unwrap();
        let mut ws = mechlin::graph::Workspace::new();
        forcing.eval_pass(&values, &mut ws).unwrap();
        let outputs: Vec<f64> = (0..5).map(|i| forcing.value(&ws, i)).collect();
        assert_eq!(outputs, vec![3.0, 0.0, -2.0, 0.0, 0.0]);
    }

    /// A perturbed chain swings while every string stays taut to
    /// tolerance.
    #[test]
    fn perturbed_chain_keeps_its_strings() {
        let disc =
            discretize(&constrained_chain(10, 2, &ChainParams::default()).unwrap(), 0.01).unwrap();
        let mut q0 = vec![0.0; 10];
        for (i, qi) in q0.iter_mut().enumerate() {
            *qi = 0.03 * f64::sin(1.0 + i as f64);
        }
        let sys = constrained_chain(10, 2, &ChainParams::default()).unwrap();
        // Project the perturbed start back onto the constraint set by
        // checking it is close enough for the solver to hold.
        let h0 = constraint_residual(&sys, &q0);
        assert!(h0 < 5e-3, "perturbation left the constraint set too far: {h0:.3e}");
        let traj = simulate(
            &disc,
            &state(&q0, &vec![0.0; 10]),
            300,
            |_, _| DVector::zeros(2),
            &NewtonOpts::default(),
        )
        .unwrap();
        let mut max_h = 0.0f64;
        let mut max_q = 0.0f64;
        for s in &traj.states[1..] {
            max_h = max_h.max(constraint_residual(&sys, s.q.as_slice()));
            max_q = max_q.max(s.q.amax());
        }
        assert!(max_h <= 1e-9, "constraint residual grew to {max_h:.3e}");
        assert!(max_q > 1e-3, "chain froze instead of swinging");
    }

    fn constraint_residual(sys: &mechlin::MechSystem, q: &[f64]) -> f64 {
        let h = sys.constraints().unwrap();
        let pairs: Vec<(String, f64)> =
            q.iter().enumerate().map(|(i, &v)| (format!("q{i}"), v)).collect();
        let borrowed: Vec<(&str, f64)> = pairs.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        let values = h.bind(&borrowed).unwrap();
        let mut ws = mechlin::graph::Workspace::new();
        h.eval_pass(&values, &mut ws).unwrap();
        (0..h.n_outputs()).map(|i| h.value(&ws, i).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn rejects_inconsistent_sizing() {
        let p = ChainParams::default();
        assert!(matches!(constrained_chain(1, 0, &p), Err(ModelError::Shape { .. })));
        assert!(matches!(constrained_chain(4, 4, &p), Err(ModelError::Shape { .. })));
        let bad = ChainParams { link_length: 0.0, ..p };
        assert!(matches!(constrained_chain(4, 1, &bad), Err(ModelError::Shape { .. })));
        let degenerate = ChainParams { anchor_dx: 0.0, anchor_dy: 0.0, ..p };
        assert!(matches!(constrained_chain(4, 1, &degenerate), Err(ModelError::Shape { .. })));
    }
}

mod registry {
    use super::*;

    #[test]
    fn every_template_builds_with_defaults() {
        let names: Vec<&str> = SystemTemplate::all().iter().map(|t| t.name).collect();
        assert_eq!(
            names,
            vec!["pendulum", "spherical-pendulum", "cartesian-pendulum", "constrained-chain"]
        );
        for template in SystemTemplate::all() {
            let sys = template.build(&BTreeMap::new()).unwrap();
            assert!(sys.nq() >= 1, "template `{}` built an empty system", template.name);
        }
    }

    /// The registry path and the direct constructor produce the same
    /// step.
    #[test]
    fn template_step_matches_direct_construction() {
        let template = SystemTemplate::find("pendulum").unwrap();
        let sys = template.build(&BTreeMap::new()).unwrap();
        let disc = discretize(&sys, 0.1).unwrap();
        let result = step(
            &disc,
            &state(&[0.2], &[0.5]),
            &DVector::from_row_slice(&[0.8]),
            &NewtonOpts::default(),
        )
        .unwrap();
        assert_close(result.state.q[0], 0.247136194155572, 1e-12, "template configuration");
        assert_close(result.state.p[0], 0.362723883111432, 1e-12, "template momentum");
    }

    #[test]
    fn overrides_apply_and_unknown_names_are_rejected() {
        let template = SystemTemplate::find("pendulum").unwrap();
        let mut overrides = BTreeMap::new();
        overrides.insert("l".to_string(), 2.0);
        let sys = template.build(&overrides).unwrap();
        let value = sys.lagrangian().eval(&[("q0", 0.0), ("qdot0", 1.0)]).unwrap();
        assert_close(value, 2.0 + 2.0 * 9.8, 1e-14, "override took effect");

        overrides.insert("mass".to_string(), 2.0);
        match template.build(&overrides) {
            Err(ModelError::Shape { detail }) => {
                assert!(detail.contains("mass"), "error should name the bad key: {detail}")
            }
            other => panic!("expected a shape error, got {other:?}"),
        }
    }

    #[test]
    fn chain_counts_must_be_whole() {
        let template = SystemTemplate::find("constrained-chain").unwrap();
        let mut overrides = BTreeMap::new();
        overrides.insert("links".to_string(), 2.5);
        assert!(matches!(template.build(&overrides), Err(ModelError::Shape { .. })));
        overrides.insert("links".to_string(), -3.0);
        assert!(matches!(template.build(&overrides), Err(ModelError::Shape { .. })));
    }

    #[test]
    fn unknown_template_name_is_absent() {
        assert!(SystemTemplate::find("marionette").is_none());
    }
}
