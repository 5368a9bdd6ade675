//! Serial-chain leg model: forward kinematics, position Jacobian, contact
//! frame orientation and damped least-squares inverse kinematics.
//!
//! A chain is the product
//! `T_base · Π_i [Trans(offset_i) · Rot(fixed_i) · Rot(axis_i, q_i)] · Trans(foot)`
//! expressed in the IMU frame. All joints are revolute.

use nalgebra::{DVector, Dyn, Matrix3, OMatrix, Rotation3, Vector3, U3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::exp_so3;

pub type PositionJacobian = OMatrix<f64, U3, Dyn>;

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    /// Unit rotation axis in the joint's parent frame.
    pub axis: Vector3<f64>,
    /// Translation from the previous joint, in the parent frame.
    pub offset: Vector3<f64>,
    /// Fixed rotation applied after the offset and before the joint motion.
    pub fixed_rotation: Rotation3<f64>,
}

impl Joint {
    pub fn revolute(axis: Vector3<f64>, offset: Vector3<f64>) -> Self {
        Self { axis, offset, fixed_rotation: Rotation3::identity() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    pub base_rotation: Rotation3<f64>,
    pub base_translation: Vector3<f64>,
    pub joints: Vec<Joint>,
    pub foot_offset: Vector3<f64>,
}

/// Declarative chain description as found in config and meta files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    pub axis: [f64; 3],
    pub offset: [f64; 3],
    /// Optional fixed rotation, axis-angle vector in radians.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    #[serde(default)]
    pub base_translation: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_rotation: Option<[f64; 3]>,
    pub joints: Vec<JointConfig>,
    #[serde(default)]
    pub foot_offset: [f64; 3],
}

/// Upper bound on `ik_solve` iterations.
pub const IK_MAX_ITERATIONS: usize = 200;
pub const IK_TOLERANCE: f64 = 1e-8;
pub const IK_DAMPING: f64 = 1e-4;

struct Frames {
    /// Rotation of each joint frame (after its fixed rotation, before its motion).
    rotations: Vec<Matrix3<f64>>,
    origins: Vec<Vector3<f64>>,
    foot_rotation: Matrix3<f64>,
    foot: Vector3<f64>,
}

impl KinematicChain {
    pub fn new(
        base_rotation: Rotation3<f64>,
        base_translation: Vector3<f64>,
        joints: Vec<Joint>,
        foot_offset: Vector3<f64>,
    ) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::Config("kinematic chain needs at least one joint".into()));
        }
        for (i, j) in joints.iter().enumerate() {
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "joint {i}: axis must be unit length, got norm {}",
                    j.axis.norm()
                )));
            }
        }
        Ok(Self { base_rotation, base_translation, joints, foot_offset })
    }

    pub fn from_config(cfg: &ChainConfig) -> Result<Self> {
        let v = |a: [f64; 3]| Vector3::new(a[0], a[1], a[2]);
        let joints = cfg
            .joints
            .iter()
            .enumerate()
            .map(|(i, j)| {
                let axis = v(j.axis);
                let n = axis.norm();
                if !(n > 1e-12) {
                    return Err(Error::Config(format!("joint {i}: zero rotation axis")));
                }
                Ok(Joint {
                    axis: axis / n,
                    offset: v(j.offset),
                    fixed_rotation: j.rotation.map(|r| exp_so3(&v(r))).unwrap_or_else(Rotation3::identity),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            cfg.base_rotation.map(|r| exp_so3(&v(r))).unwrap_or_else(Rotation3::identity),
            v(cfg.base_translation),
            joints,
            v(cfg.foot_offset),
        )
    }

    pub fn to_config(&self) -> ChainConfig {
        let a = |v: &Vector3<f64>| [v.x, v.y, v.z];
        let rot = |r: &Rotation3<f64>| {
            let u = crate::manifold::log_so3(r);
            (u.norm() > 0.0).then(|| a(&u))
        };
        ChainConfig {
            base_translation: a(&self.base_translation),
            base_rotation: rot(&self.base_rotation),
            joints: self
                .joints
                .iter()
                .map(|j| JointConfig { axis: a(&j.axis), offset: a(&j.offset), rotation: rot(&j.fixed_rotation) })
                .collect(),
            foot_offset: a(&self.foot_offset),
        }
    }

    /// Sagittal 3-DOF leg (hip, knee and ankle pitch) with 0.4 m thigh and shank,
    /// hip 0.1 m to the left of the IMU.
    pub fn sagittal_leg() -> Self {
        let y = Vector3::y();
        Self::new(
            Rotation3::identity(),
            Vector3::new(0.0, 0.1, 0.0),
            vec![
                Joint::revolute(y, Vector3::zeros()),
                Joint::revolute(y, Vector3::new(0.0, 0.0, -0.4)),
                Joint::revolute(y, Vector3::new(0.0, 0.0, -0.4)),
            ],
            Vector3::zeros(),
        )
        .expect("static chain is valid")
    }

    /// Left leg used by the simulator: hip roll, hip pitch and knee pitch, which
    /// reaches the 3D foot positions required by turning and lateral stepping.
    pub fn biped_leg() -> Self {
        Self::new(
            Rotation3::identity(),
            Vector3::new(0.0, 0.1, -0.1),
            vec![
                Joint::revolute(Vector3::x(), Vector3::zeros()),
                Joint::revolute(Vector3::y(), Vector3::zeros()),
                Joint::revolute(Vector3::y(), Vector3::new(0.0, 0.0, -0.4)),
            ],
            Vector3::new(0.0, 0.0, -0.4),
        )
        .expect("static chain is valid")
    }

    /// Mirror image across the IMU x-z plane (left leg -> right leg).
    ///
    /// Offsets flip their y component; axes are pseudovectors and flip x and z.
    pub fn mirrored(&self) -> Self {
        let flip_v = |v: &Vector3<f64>| Vector3::new(v.x, -v.y, v.z);
        let flip_axis = |v: &Vector3<f64>| Vector3::new(-v.x, v.y, -v.z);
        let flip_r = |r: &Rotation3<f64>| exp_so3(&flip_axis(&crate::manifold::log_so3(r)));
        Self {
            base_rotation: flip_r(&self.base_rotation),
            base_translation: flip_v(&self.base_translation),
            joints: self
                .joints
                .iter()
                .map(|j| Joint {
                    axis: flip_axis(&j.axis),
                    offset: flip_v(&j.offset),
                    fixed_rotation: flip_r(&j.fixed_rotation),
                })
                .collect(),
            foot_offset: flip_v(&self.foot_offset),
        }
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// Sum of the link lengths after the base; an upper bound on reach from the
    /// first joint.
    pub fn reach(&self) -> f64 {
        self.joints.iter().skip(1).map(|j| j.offset.norm()).sum::<f64>() + self.foot_offset.norm()
    }

    fn frames(&self, q: &DVector<f64>) -> Frames {
        assert_eq!(q.len(), self.dof(), "joint vector length must equal chain DOF");
        let mut rot = *self.base_rotation.matrix();
        let mut pos = self.base_translation;
        let mut rotations = Vec::with_capacity(self.dof());
        let mut origins = Vec::with_capacity(self.dof());
        for (joint, &angle) in self.joints.iter().zip(q.iter()) {
            pos += rot * joint.offset;
            rot *= joint.fixed_rotation.matrix();
            rotations.push(rot);
            origins.push(pos);
            rot *= exp_so3(&(joint.axis * angle)).matrix();
        }
        let foot = pos + rot * self.foot_offset;
        Frames { rotations, origins, foot_rotation: rot, foot }
    }

    /// Foot position in the IMU frame.
    pub fn fk(&self, q: &DVector<f64>) -> Vector3<f64> {
        self.frames(q).foot
    }

    /// Contact frame orientation with respect to the IMU frame.
    pub fn fko(&self, q: &DVector<f64>) -> Rotation3<f64> {
        Rotation3::from_matrix_unchecked(self.frames(q).foot_rotation)
    }

    /// `∂fk/∂q`, one `axis × lever arm` column per joint.
    pub fn jacobian(&self, q: &DVector<f64>) -> PositionJacobian {
        let f = self.frames(q);
        let mut jac = PositionJacobian::zeros(self.dof());
        for (i, joint) in self.joints.iter().enumerate() {
            let axis = f.rotations[i] * joint.axis;
            jac.set_column(i, &axis.cross(&(f.foot - f.origins[i])));
        }
        jac
    }

    /// Joint angles placing the foot at `target` (IMU frame), by damped least
    /// squares starting from `seed`.
    pub fn ik_solve(&self, target: &Vector3<f64>, seed: &DVector<f64>) -> Result<DVector<f64>> {
        let mut q = seed.clone();
        let mut err = target - self.fk(&q);
        for _ in 0..IK_MAX_ITERATIONS {
            if err.norm() < IK_TOLERANCE {
                return Ok(q);
            }
            let jac = self.jacobian(&q);
            let jjt = &jac * jac.transpose() + Matrix3::identity() * IK_DAMPING;
            let Some(inv) = jjt.try_inverse() else { break };
            q += jac.transpose() * (inv * err);
            err = target - self.fk(&q);
        }
        if err.norm() < IK_TOLERANCE {
            return Ok(q);
        }
        Err(Error::IkNoConvergence { residual: err.norm(), iterations: IK_MAX_ITERATIONS })
    }
}
