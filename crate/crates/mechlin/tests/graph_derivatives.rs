//! Closed-form and finite-difference oracles for the expression graph's
//! derivative passes, through third order.

use mechlin::graph::{DerivOrder, DerivativeBundle, GraphBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Guarded relative comparison: |a - b| <= tol * (1 + |b|).
fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    let err = (a - b).abs();
    assert!(
        err <= tol * (1.0 + b.abs()),
        "{what}: got {a}, want {b} (err {err:.3e}, tol {tol:.0e})"
    );
}

/// Full bundle comparison against closed-form grad/hess/third tensors,
/// all given in dense row-major-ish literal form.
fn assert_bundle(
    got: &DerivativeBundle,
    value: f64,
    grad: &[f64],
    hess: &[&[f64]],
    third: &[&[&[f64]]],
    tol: f64,
    what: &str,
) {
    assert_close(got.value, value, tol, &format!("{what} value"));
    let n = grad.len();
    for i in 0..n {
        assert_close(got.grad[i], grad[i], tol, &format!("{what} grad[{i}]"));
    }
    let h = got.hess.as_ref().expect("hessian requested");
    for i in 0..n {
        for j in 0..n {
            assert_close(h.get(i, j), hess[i][j], tol, &format!("{what} hess[{i},{j}]"));
        }
    }
    let t = got.third.as_ref().expect("third order requested");
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                assert_close(
                    t.get(i, j, l),
                    third[i][j][l],
                    tol,
                    &format!("{what} third[{i},{j},{l}]"),
                );
            }
        }
    }
}

const TOL: f64 = 1e-12;

#[test]
fn addition_and_subtraction_have_constant_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let x = rng.gen_range(-2.0..2.0);
        let y = rng.gen_range(-2.0..2.0);

        let b = GraphBuilder::new();
        let (vx, vy) = (b.var("x"), b.var("y"));
        let g = b.finish(&[vx.clone() + vy.clone()]);
        let d = g
            .derive(&[("x", x), ("y", y)], &["x", "y"], DerivOrder::Third)
            .unwrap();
        let z: &[&[f64]] = &[&[0.0, 0.0], &[0.0, 0.0]];
        assert_bundle(&d, x + y, &[1.0, 1.0], z, &[z, z], TOL, &format!("add #{trial}"));

        let b = GraphBuilder::new();
        let (vx, vy) = (b.var("x"), b.var("y"));
        let g = b.finish(&[vx - vy]);
        let d = g
            .derive(&[("x", x), ("y", y)], &["x", "y"], DerivOrder::Third)
            .unwrap();
        assert_bundle(&d, x - y, &[1.0, -1.0], z, &[z, z], TOL, &format!("sub #{trial}"));
    }
}

#[test]
fn product_has_unit_cross_hessian_and_zero_third_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..20 {
        let x = rng.gen_range(-2.0..2.0);
        let y = rng.gen_range(-2.0..2.0);
        let b = GraphBuilder::new();
        let (vx, vy) = (b.var("x"), b.var("y"));
        let g = b.finish(&[vx * vy]);
        let d = g
            .derive(&[("x", x), ("y", y)], &["x", "y"], DerivOrder::Third)
            .unwrap();
        let z: &[&[f64]] = &[&[0.0, 0.0], &[0.0, 0.0]];
        assert_bundle(
            &d,
            x * y,
            &[y, x],
            &[&[0.0, 1.0], &[1.0, 0.0]],
            &[z, z],
            TOL,
            &format!("mul #{trial}"),
        );
    }
}

#[test]
fn quotient_derivatives_match_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..20 {
        let x = rng.gen_range(-2.0..2.0);
        // Keep the denominator well away from zero.
        let y: f64 = rng.gen_range(0.5..2.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let b = GraphBuilder::new();
        let (vx, vy) = (b.var("x"), b.var("y"));
        let g = b.finish(&[vx / vy]);
        let d = g
            .derive(&[("x", x), ("y", y)], &["x", "y"], DerivOrder::Third)
            .unwrap();
        let (y2, y3, y4) = (y * y, y * y * y, y * y * y * y);
        assert_bundle(
            &d,
            x / y,
            &[1.0 / y, -x / y2],
            &[&[0.0, -1.0 / y2], &[-1.0 / y2, 2.0 * x / y3]],
            &[
                &[&[0.0, 0.0], &[0.0, 2.0 / y3]],
                &[&[0.0, 2.0 / y3], &[2.0 / y3, -6.0 * x / y4]],
            ],
            TOL,
            &format!("div #{trial}"),
        );
    }
}

#[test]
fn negation_flips_all_derivatives() {
    let b = GraphBuilder::new();
    let vx = b.var("x");
    let g = b.finish(&[-(vx.sin())]);
    let d = g.derive(&[("x", 0.7)], &["x"], DerivOrder::Third).unwrap();
    let (s, c) = (0.7f64.sin(), 0.7f64.cos());
    assert_bundle(
        &d,
        -s,
        &[-c],
        &[&[s]],
        &[&[&[c]]],
        TOL,
        "neg(sin)",
    );
}

#[test]
fn integer_powers_match_falling_factorials() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for &k in &[2i32, 3, 5, -1, -2] {
        for trial in 0..20 {
            // Stay away from 0 so negative exponents are well conditioned.
            let x: f64 = rng.gen_range(0.6..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let b = GraphBuilder::new();
            let vx = b.var("x");
            let g = b.finish(&[vx.powi(k)]);
            let d = g.derive(&[("x", x)], &["x"], DerivOrder::Third).unwrap();
            let kf = k as f64;
            let f1 = kf * x.powi(k - 1);
            let f2 = kf * (kf - 1.0) * x.powi(k - 2);
            let f3 = kf * (kf - 1.0) * (kf - 2.0) * x.powi(k - 3);
            assert_bundle(
                &d,
                x.powi(k),
                &[f1],
                &[&[f2]],
                &[&[&[f3]]],
                TOL,
                &format!("pow k={k} #{trial}"),
            );
        }
    }
}

#[test]
fn trig_derivatives_cycle_through_third_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for trial in 0..20 {
        let x = rng.gen_range(-3.0..3.0);
        let (s, c) = (f64::sin(x), f64::cos(x));

        let b = GraphBuilder::new();
        let vx = b.var("x");
        let g = b.finish(&[vx.sin()]);
        let d = g.derive(&[("x", x)], &["x"], DerivOrder::Third).unwrap();
        assert_bundle(&d, s, &[c], &[&[-s]], &[&[&[-c]]], TOL, &format!("sin #{trial}"));

        let b = GraphBuilder::new();
        let vx = b.var("x");
        let g = b.finish(&[vx.cos()]);
        let d = g.derive(&[("x", x)], &["x"], DerivOrder::Third).unwrap();
        assert_bundle(&d, c, &[-s], &[&[-c]], &[&[&[s]]], TOL, &format!("cos #{trial}"));
    }
}

#[test]
fn square_root_derivatives_match_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for trial in 0..20 {
        let x: f64 = rng.gen_range(0.2..4.0);
        let b = GraphBuilder::new();
        let vx = b.var("x");
        let g = b.finish(&[vx.sqrt()]);
        let d = g.derive(&[("x", x)], &["x"], DerivOrder::Third).unwrap();
        let w = x.sqrt();
        assert_bundle(
            &d,
            w,
            &[0.5 / w],
            &[&[-0.25 / (w * x)]],
            &[&[&[0.375 / (w * x * x)]]],
            TOL,
            &format!("sqrt #{trial}"),
        );
    }
}

/// d³/dx³ cos(x) = sin(x), which is exactly 1 at x = π/2.
#[test]
fn third_derivative_of_cosine_at_quarter_turn() {
    let b = GraphBuilder::new();
    let vx = b.var("x");
    let g = b.finish(&[vx.cos()]);
    let d = g
        .derive(&[("x", std::f64::consts::FRAC_PI_2)], &["x"], DerivOrder::Third)
        .unwrap();
    assert_close(d.third.unwrap().get(0, 0, 0), 1.0, 1e-12, "d3 cos at pi/2");
}

/// Pendulum-style energy expression evaluated against the formula typed
/// straight into f64 arithmetic.
#[test]
fn pendulum_lagrangian_value_matches_direct_formula() {
    let b = GraphBuilder::new();
    let q = b.var("q");
    let qd = b.var("qd");
    let g = b.finish(&[0.5 * (qd.clone() * qd) + 9.8 * q.cos()]);

    // At the origin the cosine term contributes exactly g.
    assert_eq!(g.eval(&[("q", 0.0), ("qd", 0.0)]).unwrap(), 9.8);

    let got = g.eval(&[("q", 0.2), ("qd", 0.5)]).unwrap();
    let want = 0.5 * (0.5 * 0.5) + 9.8 * f64::cos(0.2);
    assert_close(got, want, 1e-15, "lagrangian value");
    assert_close(got, 9.7297, 1e-4, "lagrangian 4-decimal value");
}

/// Structurally identical subtrees must be shared, not duplicated.
#[test]
fn identical_subexpressions_are_shared() {
    let b = GraphBuilder::new();
    let x = b.var("x");
    let y = b.var("y");
    let s = x.clone() + y;
    let g = b.finish(&[s.clone() * s.clone().sin() + s]);
    // x, y, x+y, sin, mul, add: six nodes, no copies of x+y.
    assert_eq!(g.nodes().len(), 6);
}

/// Derivation sets are ordered variable subsets: a permuted set must
/// produce the same tensors with permuted indices.
#[test]
fn permuted_derivation_sets_agree() {
    let b = GraphBuilder::new();
    let x = b.var("x");
    let y = b.var("y");
    let z = b.var("z");
    let g = b.finish(&[(x * y.sin() + z.clone()) * z]);

    let pt: &[(&str, f64)] = &[("x", 0.3), ("y", -0.8), ("z", 1.4)];
    let fwd = g.derive(pt, &["x", "y", "z"], DerivOrder::Third).unwrap();
    let rev = g.derive(pt, &["z", "y", "x"], DerivOrder::Third).unwrap();

    let perm = [2usize, 1, 0];
    for i in 0..3 {
        assert_close(rev.grad[i], fwd.grad[perm[i]], TOL, "permuted grad");
        for j in 0..3 {
            assert_close(
                rev.hess.as_ref().unwrap().get(i, j),
                fwd.hess.as_ref().unwrap().get(perm[i], perm[j]),
                TOL,
                "permuted hess",
            );
            for l in 0..3 {
                assert_close(
                    rev.third.as_ref().unwrap().get(i, j, l),
                    fwd.third.as_ref().unwrap().get(perm[i], perm[j], perm[l]),
                    TOL,
                    "permuted third",
                );
            }
        }
    }
}

/// A derivation set that is a strict subset must match the full set on
/// the shared indices.
#[test]
fn subset_derivation_matches_full_set() {
    let b = GraphBuilder::new();
    let x = b.var("x");
    let y = b.var("y");
    let g = b.finish(&[x.clone() * x.sin() + y.powi(3)]);

    let pt: &[(&str, f64)] = &[("x", 0.9), ("y", 0.4)];
    let full = g.derive(pt, &["x", "y"], DerivOrder::Second).unwrap();
    let sub = g.derive(pt, &["y"], DerivOrder::Second).unwrap();
    assert_close(sub.grad[0], full.grad[1], TOL, "subset grad");
    assert_close(
        sub.hess.as_ref().unwrap().get(0, 0),
        full.hess.as_ref().unwrap().get(1, 1),
        TOL,
        "subset hess",
    );
}

// ---------------------------------------------------------------------
// Finite-difference cross-checks on randomly generated graphs.
// ---------------------------------------------------------------------

mod fd {
    use super::*;
    use mechlin::graph::Expr;

    /// Random expression over `vars`, built to stay smooth everywhere:
    /// divisions get a denominator bounded away from zero and square
    /// roots a strictly positive radicand.
    pub fn random_expr(b: &GraphBuilder, vars: &[Expr], rng: &mut ChaCha8Rng, depth: u32) -> Expr {
        if depth == 0 || rng.gen_range(0..10) < 2 {
            return if rng.gen_range(0..4) < 3 {
                vars[rng.gen_range(0..vars.len())].clone()
            } else {
                b.constant(rng.gen_range(-2.0..2.0))
            };
        }
        let a = random_expr(b, vars, rng, depth - 1);
        match rng.gen_range(0..9) {
            0 => a + random_expr(b, vars, rng, depth - 1),
            1 => a - random_expr(b, vars, rng, depth - 1),
            2 => a * random_expr(b, vars, rng, depth - 1),
            3 => {
                let d = random_expr(b, vars, rng, depth - 1);
                a / (d.clone() * d + 2.0)
            }
            4 => a.sin(),
            5 => a.cos(),
            6 => (a.clone() * a + 1.0).sqrt(),
            7 => a.powi(rng.gen_range(2..4)),
            _ => -a,
        }
    }

    fn bundle_at(g: &mechlin::ExprGraph, at: &[f64], order: DerivOrder) -> DerivativeBundle {
        let pairs: Vec<(&str, f64)> = g
            .vars()
            .iter()
            .zip(at)
            .map(|(n, &v)| (n.as_str(), v))
            .collect();
        let wrt: Vec<&str> = g.vars().iter().map(|s| s.as_str()).collect();
        g.derive(&pairs, &wrt, order).unwrap()
    }

    #[test]
    fn random_graphs_agree_with_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1701);
        for trial in 0..50 {
            let b = GraphBuilder::new();
            let vars = [b.var("x"), b.var("y"), b.var("z")];
            let e = random_expr(&b, &vars, &mut rng, 4);
            let g = b.finish(&[e]);

            let at: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d = bundle_at(&g, &at, DerivOrder::Third);
            let n = at.len();

            // Gradient against values, Hessian against gradients.
            let h = 1e-5;
            for i in 0..n {
                let mut up = at.clone();
                let mut dn = at.clone();
                up[i] += h;
                dn[i] -= h;
                let fu = bundle_at(&g, &up, DerivOrder::First);
                let fd = bundle_at(&g, &dn, DerivOrder::First);
                assert_close(
                    d.grad[i],
                    (fu.value - fd.value) / (2.0 * h),
                    1e-6,
                    &format!("trial {trial} grad[{i}]"),
                );
                for j in 0..n {
                    assert_close(
                        d.hess.as_ref().unwrap().get(i, j),
                        (fu.grad[j] - fd.grad[j]) / (2.0 * h),
                        1e-6,
                        &format!("trial {trial} hess[{i},{j}]"),
                    );
                }
            }

            // Third order against Hessians, with a larger step.
            let h = 1e-4;
            for i in 0..n {
                let mut up = at.clone();
                let mut dn = at.clone();
                up[i] += h;
                dn[i] -= h;
                let fu = bundle_at(&g, &up, DerivOrder::Second);
                let fd = bundle_at(&g, &dn, DerivOrder::Second);
                for j in 0..n {
                    for l in 0..n {
                        let want = (fu.hess.as_ref().unwrap().get(j, l)
                            - fd.hess.as_ref().unwrap().get(j, l))
                            / (2.0 * h);
                        assert_close(
                            d.third.as_ref().unwrap().get(i, j, l),
                            want,
                            1e-5,
                            &format!("trial {trial} third[{i},{j},{l}]"),
                        );
                    }
                }
            }
        }
    }

    /// Derivatives are linear in the output: D(a·f + b·g) = a·Df + b·Dg.
    #[test]
    fn derivatives_are_linear_in_the_expression() {
        let mut rng = ChaCha8Rng::seed_from_u64(1702);
        for _ in 0..20 {
            let b = GraphBuilder::new();
            let vars = [b.var("x"), b.var("y"), b.var("z")];
            let f = random_expr(&b, &vars, &mut rng, 3);
            let g = random_expr(&b, &vars, &mut rng, 3);
            let (alpha, beta) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let combo = alpha * f.clone() + beta * g.clone();
            let graph = b.finish(&[f, g, combo]);

            let at: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pairs: Vec<(&str, f64)> = graph
                .vars()
                .iter()
                .zip(&at)
                .map(|(n, &v)| (n.as_str(), v))
                .collect();
            let values = graph.bind(&pairs).unwrap();
            let mut ws = mechlin::graph::Workspace::new();
            graph.hess_pass(&values, &[0, 1, 2], &mut ws).unwrap();

            let gf: Vec<f64> = graph.grad(&ws, 0).to_vec();
            let gg: Vec<f64> = graph.grad(&ws, 1).to_vec();
            let gc: Vec<f64> = graph.grad(&ws, 2).to_vec();
            for k in 0..gf.len() {
                assert_close(gc[k], alpha * gf[k] + beta * gg[k], 1e-12, "linearity grad");
            }
            let hf: Vec<f64> = graph.hess_packed(&ws, 0).to_vec();
            let hg: Vec<f64> = graph.hess_packed(&ws, 1).to_vec();
            let hc: Vec<f64> = graph.hess_packed(&ws, 2).to_vec();
            for k in 0..hf.len() {
                assert_close(hc[k], alpha * hf[k] + beta * hg[k], 1e-12, "linearity hess");
            }
        }
    }
}

// ---------------------------------------------------------------------
// Failure modes.
// ---------------------------------------------------------------------

mod errors {
    use super::*;
    use mechlin::graph::EvalError;

    #[test]
    fn unbound_variable_is_reported() {
        let b = GraphBuilder::new();
        let x = b.var("x");
        let y = b.var("y");
        let g = b.finish(&[x + y]);
        match g.eval(&[("x", 1.0)]) {
            Err(EvalError::UnassignedVariable { .. }) => {}
            other => panic!("expected unassigned-variable error, got {other:?}"),
        }
    }

    #[test]
    fn division_by_zero_is_reported() {
        let b = GraphBuilder::new();
        let x = b.var("x");
        let y = b.var("y");
        let g = b.finish(&[x / y]);
        assert!(matches!(
            g.eval(&[("x", 1.0), ("y", 0.0)]),
            Err(EvalError::DivisionByZero { .. })
        ));
    }

    #[test]
    fn negative_radicand_is_reported() {
        let b = GraphBuilder::new();
        let x = b.var("x");
        let g = b.finish(&[x.sqrt()]);
        assert!(matches!(
            g.eval(&[("x", -1.0)]),
            Err(EvalError::SqrtNegative { .. })
        ));
    }

    #[test]
    fn sqrt_derivative_at_zero_is_reported() {
        let b = GraphBuilder::new();
        let x = b.var("x");
        let g = b.finish(&[x.sqrt()]);
        // The value itself is fine...
        assert_eq!(g.eval(&[("x", 0.0)]).unwrap(), 0.0);
        // ...but every derivative there is unbounded.
        assert!(matches!(
            g.derive(&[("x", 0.0)], &["x"], DerivOrder::First),
            Err(EvalError::SqrtZeroDerivative { .. })
        ));
    }

    #[test]
    fn zero_to_negative_power_is_reported() {
        let b = GraphBuilder::new();
        let x = b.var("x");
        let g = b.finish(&[x.powi(-2)]);
        assert!(matches!(
            g.eval(&[("x", 0.0)]),
            Err(EvalError::ZeroToNegativePower { .. })
        ));
    }

    #[test]
    fn unknown_and_duplicate_derivation_sets_are_rejected() {
        let b = GraphBuilder::new();
        let x = b.var("x");
        let g = b.finish(&[x.sin()]);
        assert!(matches!(
            g.derive(&[("x", 1.0)], &["nope"], DerivOrder::First),
            Err(EvalError::BadDerivationSet { .. })
        ));
        let b = GraphBuilder::new();
        let x = b.var("x");
        let y = b.var("y");
        let g = b.finish(&[x * y]);
        assert!(matches!(
            g.derive(&[("x", 1.0), ("y", 1.0)], &["x", "x"], DerivOrder::First),
            Err(EvalError::BadDerivationSet { .. })
        ));
    }
}
