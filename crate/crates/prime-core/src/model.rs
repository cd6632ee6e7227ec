//! Planar articulated robot description: kinematic tree, contact points,
//! actuation map, and the JSON document format.
//!
//! Conventions: world frame is x-right, z-up; the floating base is the first
//! link and contributes 3 DOF `[p_x, p_z, theta]`; every further link adds
//! one articulated joint. Contact geometry is point-vs-ground-plane `z = 0`.

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inertia::{
    is_physically_consistent_2d, theta_to_pi_2d, InertialParams2D, LogCholeskyParams2D,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model document parse error at {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("model validation error: {0}")]
    Validation(String),
}

/// One-DOF planar joint connecting a link to its parent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Joint {
    /// Rotation about the out-of-plane axis; `sign` is +1 or -1.
    Revolute { sign: f64 },
    /// Translation along a unit axis expressed in the joint frame.
    Prismatic { axis: Vector2<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub name: String,
    /// Parent link index; -1 marks the floating base (first link only).
    pub parent: i32,
    /// `None` only for the base link.
    pub joint: Option<Joint>,
    /// Fixed transform from the parent frame to this link's joint frame.
    pub offset_xy: Vector2<f64>,
    pub offset_angle: f64,
    pub inertia: InertialParams2D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactPoint {
    pub link: usize,
    /// Offset of the contact point in the link frame.
    pub point: Vector2<f64>,
    /// Coulomb friction coefficient, dimensionless, > 0.
    pub mu: f64,
}

/// Planar kinematic tree with floating base. Immutable after load.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarModel {
    pub links: Vec<Link>,
    pub contacts: Vec<ContactPoint>,
    pub gravity: Vector2<f64>,
    /// One flag per articulated joint; `true` means torque-actuated.
    pub actuated: Vec<bool>,
}

/// Generalized state `[q; v]` with `q = [p_x, p_z, theta_base, alpha_1..n]`.
/// Angles are stored unwrapped.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
}

impl State {
    pub fn new(q: DVector<f64>, v: DVector<f64>) -> Self {
        assert_eq!(q.len(), v.len());
        Self { q, v }
    }

    pub fn zeros(dof: usize) -> Self {
        Self {
            q: DVector::zeros(dof),
            v: DVector::zeros(dof),
        }
    }
}

impl PlanarModel {
    /// Number of articulated joints.
    pub fn n_joints(&self) -> usize {
        self.links.len() - 1
    }

    /// Generalized-coordinate dimension `3 + n`.
    pub fn dof(&self) -> usize {
        3 + self.n_joints()
    }

    /// Number of actuated joints (columns of the input map).
    pub fn n_actuated(&self) -> usize {
        self.actuated.iter().filter(|a| **a).count()
    }

    /// Generalized-coordinate indices of the actuated joints, in joint order.
    pub fn actuated_indices(&self) -> Vec<usize> {
        self.actuated
            .iter()
            .enumerate()
            .filter(|(_, a)| **a)
            .map(|(j, _)| 3 + j)
            .collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.links.iter().map(|l| l.inertia.mass()).sum()
    }

    /// Returns a copy with one link's inertia replaced by the parameters
    /// mapped from `theta2`.
    pub fn set_link_theta(
        &self,
        link: usize,
        theta2: &LogCholeskyParams2D,
    ) -> Result<PlanarModel, ModelError> {
        if link >= self.links.len() {
            return Err(ModelError::Validation(format!(
                "link index {link} out of range ({} links)",
                self.links.len()
            )));
        }
        let pi2 = theta_to_pi_2d(theta2)
            .map_err(|e| ModelError::Validation(format!("link {link}: {e}")))?;
        let mut out = self.clone();
        out.links[link].inertia = pi2;
        Ok(out)
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.links.is_empty() {
            return Err(ModelError::Validation("model has no links".into()));
        }
        if self.links[0].parent != -1 {
            return Err(ModelError::Validation(
                "first link must be the floating base (parent = -1)".into(),
            ));
        }
        if self.links[0].joint.is_some() {
            return Err(ModelError::Validation(
                "base link must not declare a joint".into(),
            ));
        }
        for (i, link) in self.links.iter().enumerate().skip(1) {
            if link.parent < 0 || link.parent as usize >= i {
                return Err(ModelError::Validation(format!(
                    "link {} ({}): parent index {} must be a preceding link",
                    i, link.name, link.parent
                )));
            }
            match link.joint {
                None => {
                    return Err(ModelError::Validation(format!(
                        "link {} ({}): articulated link must declare a joint",
                        i, link.name
                    )))
                }
                Some(Joint::Revolute { sign }) => {
                    if sign != 1.0 && sign != -1.0 {
                        return Err(ModelError::Validation(format!(
                            "link {} ({}): revolute axis must be [1] or [-1]",
                            i, link.name
                        )));
                    }
                }
                Some(Joint::Prismatic { axis }) => {
                    if (axis.norm() - 1.0).abs() > 1e-9 {
                        return Err(ModelError::Validation(format!(
                            "link {} ({}): prismatic axis must be a unit vector",
                            i, link.name
                        )));
                    }
                }
            }
        }
        for (i, link) in self.links.iter().enumerate() {
            let (ok, margin) = is_physically_consistent_2d(&link.inertia);
            if !ok {
                return Err(ModelError::Validation(format!(
                    "link {} ({}): inertia not physically consistent (margin {margin:.3e})",
                    i, link.name
                )));
            }
        }
        for (i, c) in self.contacts.iter().enumerate() {
            if c.link >= self.links.len() {
                return Err(ModelError::Validation(format!(
                    "contact {i}: link index {} out of range",
                    c.link
                )));
            }
            if !(c.mu > 0.0) {
                return Err(ModelError::Validation(format!(
                    "contact {i}: friction coefficient must be > 0, got {}",
                    c.mu
                )));
            }
        }
        if self.actuated.len() != self.n_joints() {
            return Err(ModelError::Validation(format!(
                "actuated flags length {} does not match joint count {}",
                self.actuated.len(),
                self.n_joints()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// JSON document form. Unknown fields are rejected.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointDoc {
    #[serde(rename = "type")]
    kind: String,
    axis: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OffsetDoc {
    xy: [f64; 2],
    angle: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InertiaDoc {
    m: f64,
    hx: f64,
    hy: f64,
    #[serde(rename = "Iz")]
    iz: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkDoc {
    name: String,
    parent: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    joint: Option<JointDoc>,
    offset: OffsetDoc,
    inertia: InertiaDoc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContactDoc {
    link: usize,
    point: [f64; 2],
    mu: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    links: Vec<LinkDoc>,
    contacts: Vec<ContactDoc>,
    gravity: [f64; 2],
    actuated: Vec<bool>,
}

/// Parses and validates a model from its JSON document.
pub fn load_model(document: &str) -> Result<PlanarModel, ModelError> {
    let de = &mut serde_json::Deserializer::from_str(document);
    let doc: ModelDoc = serde_path_to_error::deserialize(de).map_err(|e| ModelError::Parse {
        path: e.path().to_string(),
        msg: e.inner().to_string(),
    })?;
    let mut links = Vec::with_capacity(doc.links.len());
    for (i, l) in doc.links.iter().enumerate() {
        let joint = match &l.joint {
            None => None,
            Some(j) => Some(match j.kind.as_str() {
                "revolute" => {
                    if j.axis.len() != 1 {
                        return Err(ModelError::Validation(format!(
                            "link {i}: revolute axis must have one entry"
                        )));
                    }
                    Joint::Revolute { sign: j.axis[0] }
                }
                "prismatic" => {
                    if j.axis.len() != 2 {
                        return Err(ModelError::Validation(format!(
                            "link {i}: prismatic axis must have two entries"
                        )));
                    }
                    Joint::Prismatic {
                        axis: Vector2::new(j.axis[0], j.axis[1]),
                    }
                }
                other => {
                    return Err(ModelError::Validation(format!(
                        "link {i}: unknown joint type {other:?}"
                    )))
                }
            }),
        };
        links.push(Link {
            name: l.name.clone(),
            parent: l.parent,
            joint,
            offset_xy: Vector2::new(l.offset.xy[0], l.offset.xy[1]),
            offset_angle: l.offset.angle,
            inertia: InertialParams2D::new(l.inertia.m, l.inertia.hx, l.inertia.hy, l.inertia.iz),
        });
    }
    let model = PlanarModel {
        links,
        contacts: doc
            .contacts
            .iter()
            .map(|c| ContactPoint {
                link: c.link,
                point: Vector2::new(c.point[0], c.point[1]),
                mu: c.mu,
            })
            .collect(),
        gravity: Vector2::new(doc.gravity[0], doc.gravity[1]),
        actuated: doc.actuated,
    };
    model.validate()?;
    Ok(model)
}

/// Serializes a model back to its JSON document form.
pub fn save_model(model: &PlanarModel) -> String {
    let doc = ModelDoc {
        links: model
            .links
            .iter()
            .map(|l| LinkDoc {
                name: l.name.clone(),
                parent: l.parent,
                joint: l.joint.map(|j| match j {
                    Joint::Revolute { sign } => JointDoc {
                        kind: "revolute".into(),
                        axis: vec![sign],
                    },
                    Joint::Prismatic { axis } => JointDoc {
                        kind: "prismatic".into(),
                        axis: vec![axis.x, axis.y],
                    },
                }),
                offset: OffsetDoc {
                    xy: [l.offset_xy.x, l.offset_xy.y],
                    angle: l.offset_angle,
                },
                inertia: InertiaDoc {
                    m: l.inertia.mass(),
                    hx: l.inertia.h().0,
                    hy: l.inertia.h().1,
                    iz: l.inertia.iz(),
                },
            })
            .collect(),
        contacts: model
            .contacts
            .iter()
            .map(|c| ContactDoc {
                link: c.link,
                point: [c.point.x, c.point.y],
                mu: c.mu,
            })
            .collect(),
        gravity: [model.gravity.x, model.gravity.y],
        actuated: model.actuated.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("model serialization cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inertia::theta_from_pi_2d;
    use approx::assert_relative_eq;

    pub(crate) const HOPPER_JSON: &str = r#"{
      "links": [
        {"name": "torso", "parent": -1,
         "offset": {"xy": [0.0, 0.0], "angle": 0.0},
         "inertia": {"m": 5.0, "hx": 0.1, "hy": 0.0, "Iz": 0.25}},
        {"name": "leg", "parent": 0,
         "joint": {"type": "prismatic", "axis": [0.0, -1.0]},
         "offset": {"xy": [0.0, 0.0], "angle": 0.0},
         "inertia": {"m": 0.8, "hx": 0.0, "hy": -0.16, "Iz": 0.07}}
      ],
      "contacts": [{"link": 1, "point": [0.0, -0.4], "mu": 0.7}],
      "gravity": [0.0, -9.81],
      "actuated": [true]
    }"#;

    #[test]
    fn hopper_loads() {
        let m = load_model(HOPPER_JSON).unwrap();
        assert_eq!(m.n_joints(), 1);
        assert_eq!(m.dof(), 4);
        assert_eq!(m.contacts.len(), 1);
        assert_eq!(m.n_actuated(), 1);
        assert_relative_eq!(m.total_mass(), 5.8, epsilon = 1e-12);
    }

    #[test]
    fn save_load_round_trip() {
        let m = load_model(HOPPER_JSON).unwrap();
        let again = load_model(&save_model(&m)).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn parent_ordering_enforced() {
        let bad = HOPPER_JSON.replace("\"parent\": 0", "\"parent\": 1");
        let err = load_model(&bad).unwrap_err();
        assert!(matches!(err, ModelError::Validation(_)), "{err}");
    }

    #[test]
    fn zero_friction_rejected() {
        let bad = HOPPER_JSON.replace("\"mu\": 0.7", "\"mu\": 0.0");
        assert!(matches!(
            load_model(&bad).unwrap_err(),
            ModelError::Validation(_)
        ));
    }

    #[test]
    fn unknown_field_rejected_with_path() {
        let bad = HOPPER_JSON.replace("\"mu\": 0.7", "\"mu\": 0.7, \"bounce\": 1.0");
        match load_model(&bad).unwrap_err() {
            ModelError::Parse { path, .. } => assert!(path.contains("contacts"), "{path}"),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn inconsistent_inertia_names_link() {
        let bad = HOPPER_JSON.replace("\"Iz\": 0.25", "\"Iz\": -0.25");
        match load_model(&bad).unwrap_err() {
            ModelError::Validation(msg) => assert!(msg.contains("torso"), "{msg}"),
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn set_link_theta_identity_and_scaling() {
        let m = load_model(HOPPER_JSON).unwrap();
        let theta = theta_from_pi_2d(&m.links[0].inertia).unwrap();
        let same = m.set_link_theta(0, &theta).unwrap();
        assert!((same.links[0].inertia.pi2 - m.links[0].inertia.pi2).amax() < 1e-12);

        let mut scaled = theta;
        scaled.theta2[0] += 2.0f64.ln();
        let heavier = m.set_link_theta(0, &scaled).unwrap();
        assert_relative_eq!(
            heavier.links[0].inertia.mass(),
            4.0 * m.links[0].inertia.mass(),
            max_relative = 1e-12
        );
        assert!(m.set_link_theta(99, &theta).is_err());
    }
}
