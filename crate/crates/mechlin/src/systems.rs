//! Built-in model library.
//!
//! Four constructors cover the systems exercised throughout the test
//! suite and the bundled scenarios: a forced planar pendulum, an unforced
//! spherical pendulum, a point mass constrained to a circle, and a
//! parameterized constrained chain of point masses. Each is also
//! registered as a named [`SystemTemplate`] so scenario files can request
//! it by name with parameter overrides.

use std::collections::BTreeMap;

use crate::graph::{Expr, GraphBuilder};
use crate::model::{MechSystem, ModelError};

fn require_positive(what: &str, v: f64) -> Result<(), ModelError> {
    if !v.is_finite() || v <= 0.0 {
        return Err(ModelError::Shape { detail: format!("{what} must be positive, got {v}") });
    }
    Ok(())
}

fn require_finite(what: &str, v: f64) -> Result<(), ModelError> {
    if !v.is_finite() {
        return Err(ModelError::Shape { detail: format!("{what} must be finite, got {v}") });
    }
    Ok(())
}

/// Planar pendulum of mass `m` on a rigid massless rod of length `l`
/// under gravity `g`, with a torque input on the single coordinate.
///
/// `q0` is the angle from the hanging rest position, so
/// L = ½ml²q̇₀² + mgl·cos q₀ and the inverted equilibrium sits at
/// q₀ = π.
pub fn pendulum(m: f64, l: f64, g: f64) -> Result<MechSystem, ModelError> {
    require_positive("pendulum mass", m)?;
    require_positive("pendulum length", l)?;
    require_finite("gravity", g)?;

    let b = GraphBuilder::new();
    let q = b.var("q0");
    let qd = b.var("qdot0");
    let lagrangian = b.finish(&[0.5 * m * l * l * (qd.clone() * qd) + m * g * l * q.cos()]);

    let b = GraphBuilder::new();
    let forcing = b.finish(&[b.var("u0")]);
    MechSystem::new(1, 1, lagrangian, forcing, None, BTreeMap::new())
}

/// Unforced spherical pendulum of mass `m` on a rod of length `r` under
/// gravity `g`.
///
/// Coordinates are `q0` = azimuthal angle φ and `q1` = polar angle θ
/// measured from the upward vertical, so the mass matrix is
/// diag(mr²sin²θ, mr²) and the chart degenerates at θ = nπ where the
/// azimuth loses meaning.
pub fn spherical_pendulum(m: f64, r: f64, g: f64) -> Result<MechSystem, ModelError> {
    require_positive("pendulum mass", m)?;
    require_positive("pendulum length", r)?;
    require_finite("gravity", g)?;

    let b = GraphBuilder::new();
    let phi_d = b.var("qdot0");
    let theta = b.var("q1");
    let theta_d = b.var("qdot1");
    let sin_theta = theta.clone().sin();
    let kinetic = 0.5
        * m
        * r
        * r
        * (theta_d.clone() * theta_d + (sin_theta.clone() * sin_theta) * (phi_d.clone() * phi_d));
    let lagrangian = b.finish(&[kinetic + m * g * r * theta.cos()]);

    let b = GraphBuilder::new();
    let outputs = [b.constant(0.0), b.constant(0.0)];
    let forcing = b.finish(&outputs);
    MechSystem::new(2, 0, lagrangian, forcing, None, BTreeMap::new())
}

/// Unforced point mass `m` in the Cartesian plane, held on the circle of
/// radius `l` by the holonomic constraint h = x² + y² − l², with no
/// gravity.
///
/// Coordinates are `q0` = x and `q1` = y. The redundant-coordinate
/// description trades the pendulum's single chart for a constraint
/// force, which is exactly the regime the constrained step and its
/// linearization are built for.
pub fn cartesian_pendulum(m: f64, l: f64) -> Result<MechSystem, ModelError> {
    require_positive("particle mass", m)?;
    require_positive("circle radius", l)?;

    let b = GraphBuilder::new();
    let xd = b.var("qdot0");
    let yd = b.var("qdot1");
    let lagrangian = b.finish(&[0.5 * m * (xd.clone() * xd + yd.clone() * yd)]);

    let b = GraphBuilder::new();
    let outputs = [b.constant(0.0), b.constant(0.0)];
    let forcing = b.finish(&outputs);

    let b = GraphBuilder::new();
    let x = b.var("q0");
    let y = b.var("q1");
    let constraints = b.finish(&[x.clone() * x + y.clone() * y - l * l]);
    MechSystem::new(2, 0, lagrangian, forcing, Some(constraints), BTreeMap::new())
}

/// Geometry and inertia of a [`constrained_chain`].
#[derive(Clone, Copy, Debug)]
pub struct ChainParams {
    /// Length of each link.
    pub link_length: f64,
    /// Point mass carried at the end of each link.
    pub link_mass: f64,
    /// Gravitational acceleration along −y.
    pub gravity: f64,
    /// Horizontal offset of each string anchor from its attachment
    /// point's rest position.
    pub anchor_dx: f64,
    /// Vertical offset of each string anchor from its attachment point's
    /// rest position.
    pub anchor_dy: f64,
}

impl Default for ChainParams {
    fn default() -> Self {
        ChainParams {
            link_length: 0.05,
            link_mass: 0.05,
            gravity: 9.8,
            anchor_dx: 0.1,
            anchor_dy: 0.3,
        }
    }
}

/// Index of the link each string attaches to: `strings` indices spread
/// evenly along a chain of `links` coordinates.
fn attach_indices(links: usize, strings: usize) -> Vec<usize> {
    (0..strings).map(|j| (j + 1) * links / (strings + 1) - 1).collect()
}

/// Planar serial chain of `links` point masses in absolute-angle
/// coordinates, with `strings` of fixed length tying evenly spaced links
/// to anchor points offset diagonally from their rest positions.
///
/// Coordinate `qi` is the absolute angle of link `i` from the downward
/// vertical; the position of mass `i` is the prefix sum of the link
/// vectors, so the expression graph grows linearly with the chain. Each
/// string contributes one squared-distance constraint that holds exactly
/// in the hanging rest configuration, plus one torque input on the
/// coordinate it attaches to. The default sizing (40 links, 6 strings)
/// gives a 40-dimensional configuration with 6 constraints.
pub fn constrained_chain(
    links: usize,
    strings: usize,
    params: &ChainParams,
) -> Result<MechSystem, ModelError> {
    if links < 2 {
        return Err(ModelError::Shape {
            detail: format!("chain needs at least 2 links, got {links}"),
        });
    }
    if strings >= links {
        return Err(ModelError::Shape {
            detail: format!("chain with {links} links supports at most {} strings", links - 1),
        });
    }
    require_positive("link_length", params.link_length)?;
    require_positive("link_mass", params.link_mass)?;
    require_finite("gravity", params.gravity)?;
    require_finite("anchor_dx", params.anchor_dx)?;
    require_finite("anchor_dy", params.anchor_dy)?;
    let span2 = params.anchor_dx * params.anchor_dx + params.anchor_dy * params.anchor_dy;
    if strings > 0 && span2 <= 0.0 {
        return Err(ModelError::Shape {
            detail: "string anchors need a nonzero offset from the attachment point".into(),
        });
    }

    let (l, m, g) = (params.link_length, params.link_mass, params.gravity);
    let attach = attach_indices(links, strings);

    // Kinetic and potential terms share the velocity and height prefix
    // sums, keeping the graph at a constant number of nodes per link.
    let b = GraphBuilder::new();
    let mut vx = b.constant(0.0);
    let mut vy = b.constant(0.0);
    let mut height = b.constant(0.0);
    let mut lagr = b.constant(0.0);
    for i in 0..links {
        let qi = b.var(&format!("q{i}"));
        let qdi = b.var(&format!("qdot{i}"));
        vx = vx + l * qi.clone().cos() * qdi.clone();
        vy = vy + l * qi.clone().sin() * qdi;
        height = height - l * qi.cos();
        lagr = lagr + 0.5 * m * (vx.clone() * vx.clone() + vy.clone() * vy.clone())
            - m * g * height.clone();
    }
    let lagrangian = b.finish(&[lagr]);

    let b = GraphBuilder::new();
    let mut outputs: Vec<Expr> = (0..links).map(|_| b.constant(0.0)).collect();
    for (j, &a) in attach.iter().enumerate() {
        outputs[a] = b.var(&format!("u{j}"));
    }
    let forcing = b.finish(&outputs);

    let constraints = if strings == 0 {
        None
    } else {
        let b = GraphBuilder::new();
        let mut px = b.constant(0.0);
        let mut py = b.constant(0.0);
        let mut positions = Vec::with_capacity(links);
        for i in 0..links {
            let qi = b.var(&format!("q{i}"));
            px = px + l * qi.clone().sin();
            py = py - l * qi.cos();
            positions.push((px.clone(), py.clone()));
        }
        let rows: Vec<Expr> = attach
            .iter()
            .map(|&a| {
                // The anchor sits diagonally offset from the attachment
                // point's rest position (0, −l(a+1)), so the rest
                // configuration satisfies the constraint exactly.
                let ax = params.anchor_dx;
                let ay = -l * (a as f64 + 1.0) + params.anchor_dy;
                let ex = positions[a].0.clone() - ax;
                let ey = positions[a].1.clone() - ay;
                ex.clone() * ex + ey.clone() * ey - span2
            })
            .collect();
        Some(b.finish(&rows))
    };

    MechSystem::new(links, strings, lagrangian, forcing, constraints, BTreeMap::new())
}

/// One named parameter of a [`SystemTemplate`], with its default value.
#[derive(Clone, Copy, Debug)]
pub struct ParamSpec {
    pub name: &'static str,
    pub default: f64,
}

/// A named system constructor addressable from scenario files.
pub struct SystemTemplate {
    pub name: &'static str,
    pub params: &'static [ParamSpec],
    build: fn(&BTreeMap<String, f64>) -> Result<MechSystem, ModelError>,
}

impl SystemTemplate {
    /// All built-in templates.
    pub fn all() -> &'static [SystemTemplate] {
        &REGISTRY
    }

    /// Looks a template up by name.
    pub fn find(name: &str) -> Option<&'static SystemTemplate> {
        REGISTRY.iter().find(|t| t.name == name)
    }

    /// The template's parameters at their default values.
    pub fn defaults(&self) -> BTreeMap<String, f64> {
        self.params.iter().map(|p| (p.name.to_string(), p.default)).collect()
    }

    /// Builds the system with `overrides` applied over the defaults.
    /// Unknown parameter names are rejected.
    pub fn build(&self, overrides: &BTreeMap<String, f64>) -> Result<MechSystem, ModelError> {
        let mut values = self.defaults();
        for (name, v) in overrides {
            if !values.contains_key(name.as_str()) {
                return Err(ModelError::Shape {
                    detail: format!("template `{}` has no parameter `{name}`", self.name),
                });
            }
            values.insert(name.clone(), *v);
        }
        (self.build)(&values)
    }
}

/// Reads a parameter that must be a nonnegative whole number.
fn count_param(values: &BTreeMap<String, f64>, name: &str) -> Result<usize, ModelError> {
    let v = values[name];
    if !v.is_finite() || v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
        return Err(ModelError::Shape {
            detail: format!("parameter `{name}` must be a whole count, got {v}"),
        });
    }
    Ok(v as usize)
}

static REGISTRY: [SystemTemplate; 4] = [
    SystemTemplate {
        name: "pendulum",
        params: &[
            ParamSpec { name: "m", default: 1.0 },
            ParamSpec { name: "l", default: 1.0 },
            ParamSpec { name: "g", default: 9.8 },
        ],
        build: |v| pendulum(v["m"], v["l"], v["g"]),
    },
    SystemTemplate {
        name: "spherical-pendulum",
        params: &[
            ParamSpec { name: "m", default: 1.0 },
            ParamSpec { name: "r", default: 1.0 },
            ParamSpec { name: "g", default: 9.8 },
        ],
        build: |v| spherical_pendulum(v["m"], v["r"], v["g"]),
    },
    SystemTemplate {
        name: "cartesian-pendulum",
        params: &[
            ParamSpec { name: "m", default: 1.0 },
            ParamSpec { name: "l", default: 1.0 },
        ],
        build: |v| cartesian_pendulum(v["m"], v["l"]),
    },
    SystemTemplate {
        name: "constrained-chain",
        params: &[
            ParamSpec { name: "links", default: 40.0 },
            ParamSpec { name: "strings", default: 6.0 },
            ParamSpec { name: "link_length", default: 0.05 },
            ParamSpec { name: "link_mass", default: 0.05 },
            ParamSpec { name: "gravity", default: 9.8 },
            ParamSpec { name: "anchor_dx", default: 0.1 },
            ParamSpec { name: "anchor_dy", default: 0.3 },
        ],
        build: |v| {
            constrained_chain(
                count_param(v, "links")?,
                count_param(v, "strings")?,
                &ChainParams {
                    link_length: v["link_length"],
                    link_mass: v["link_mass"],
                    gravity: v["gravity"],
                    anchor_dx: v["anchor_dx"],
                    anchor_dy: v["anchor_dy"],
                },
            )
        },
    },
];
