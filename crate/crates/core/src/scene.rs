//! Evaluation workspace: the fracturable floor patch, the goal sphere behind it
//! and the forbidden wall further back. The tool tip is a point.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Half-thickness of the slab that counts as touching the forbidden wall (mm).
pub const FORBIDDEN_SLAB_HALF_THICKNESS: f64 = 0.25;

const NORMAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("malformed scene document: {0}")]
    Parse(String),
    #[error("invalid scene geometry: {0}")]
    Geometry(String),
}

/// A planar rectangle. Extents are measured along an in-plane basis derived
/// from the normal (see [`Patch::basis`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Patch {
    pub center: Vec3,
    pub normal: Vec3,
    pub half_extents: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn clamp(&self, p: &Vec3) -> Vec3 {
        Vec3::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
            p.z.clamp(self.min.z, self.max.z),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub floor: Patch,
    pub goal: Sphere,
    pub forbidden: Patch,
    pub workspace_bounds: Aabb,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            floor: Patch {
                center: Vec3::zeros(),
                normal: Vec3::z(),
                half_extents: [20.0, 20.0],
            },
            goal: Sphere {
                center: Vec3::new(0.0, 0.0, -25.0),
                radius: 2.0,
            },
            forbidden: Patch {
                center: Vec3::new(0.0, 0.0, -30.0),
                normal: Vec3::z(),
                half_extents: [20.0, 20.0],
            },
            workspace_bounds: Aabb {
                min: Vec3::new(-30.0, -30.0, -40.0),
                max: Vec3::new(30.0, 30.0, 30.0),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ContactSet {
    pub floor_contact: bool,
    pub penetration: f64,
    pub goal_hit: bool,
    pub forbidden_hit: bool,
}

impl Patch {
    /// Orthonormal in-plane axes `(u, v)` with `u x v = normal`.
    pub fn basis(&self) -> (Vec3, Vec3) {
        let n = self.normal;
        let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let u = (helper - n * helper.dot(&n)).normalize();
        let v = n.cross(&u);
        (u, v)
    }

    fn within_extents(&self, p: &Vec3) -> bool {
        let (u, v) = self.basis();
        let d = p - self.center;
        d.dot(&u).abs() <= self.half_extents[0] && d.dot(&v).abs() <= self.half_extents[1]
    }

    /// Signed distance above the plane, positive on the normal side.
    pub fn height(&self, p: &Vec3) -> f64 {
        (p - self.center).dot(&self.normal)
    }
}

/// Depth of `tip` beyond the patch plane, zero on the approach side or outside
/// the patch support.
pub fn penetration_depth(tip: &Vec3, floor: &Patch) -> f64 {
    let depth = -floor.height(tip);
    if depth > 0.0 && floor.within_extents(tip) {
        depth
    } else {
        0.0
    }
}

pub fn classify_contacts(tip: &Vec3, scene: &SceneConfig) -> ContactSet {
    let penetration = penetration_depth(tip, &scene.floor);
    let floor_contact = scene.floor.within_extents(tip) && scene.floor.height(tip) <= 0.0;
    let goal_hit = (tip - scene.goal.center).norm() <= scene.goal.radius;
    let forbidden_hit = scene.forbidden.height(tip).abs() <= FORBIDDEN_SLAB_HALF_THICKNESS
        && scene.forbidden.within_extents(tip);
    ContactSet {
        floor_contact,
        penetration,
        goal_hit,
        forbidden_hit,
    }
}

fn unit_normal(name: &str, n: Vec3) -> Result<Vec3, SceneError> {
    let len = n.norm();
    if !len.is_finite() || (len - 1.0).abs() > NORMAL_TOLERANCE {
        return Err(SceneError::Geometry(format!(
            "{name} normal must be unit length, got norm {len}"
        )));
    }
    Ok(n / len)
}

fn check_patch(name: &str, patch: &mut Patch) -> Result<(), SceneError> {
    patch.normal = unit_normal(name, patch.normal)?;
    if !patch.center.iter().all(|c| c.is_finite()) {
        return Err(SceneError::Geometry(format!("{name} center is not finite")));
    }
    if !patch.half_extents.iter().all(|&e| e > 0.0 && e.is_finite()) {
        return Err(SceneError::Geometry(format!(
            "{name} half extents must be positive, got {:?}",
            patch.half_extents
        )));
    }
    Ok(())
}

impl SceneConfig {
    /// Validates geometry and re-normalizes near-unit normals.
    pub fn validated(mut self) -> Result<Self, SceneError> {
        check_patch("floor", &mut self.floor)?;
        check_patch("forbidden", &mut self.forbidden)?;
        if !(self.goal.radius > 0.0 && self.goal.radius.is_finite()) {
            return Err(SceneError::Geometry(format!(
                "goal radius must be positive, got {}",
                self.goal.radius
            )));
        }
        if self.floor.height(&self.goal.center) >= 0.0 {
            return Err(SceneError::Geometry(
                "goal center must lie behind the floor plane".into(),
            ));
        }
        let b = &self.workspace_bounds;
        if !(0..3).all(|i| b.min[i] < b.max[i]) {
            return Err(SceneError::Geometry(
                "workspace bounds must have min < max on every axis".into(),
            ));
        }
        Ok(self)
    }

    /// Idle tool position: 10 mm above the floor center on the approach side.
    pub fn home(&self) -> Vec3 {
        self.floor.center + self.floor.normal * 10.0
    }
}

/// Parses a standalone scene document (TOML, lengths in mm).
pub fn load_scene(text: &str) -> Result<SceneConfig, SceneError> {
    let scene: SceneConfig = toml::from_str(text).map_err(|e| SceneError::Parse(e.to_string()))?;
    scene.validated()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> SceneConfig {
        SceneConfig::default().validated().unwrap()
    }

    #[test]
    fn penetration_examples() {
        let s = scene();
        assert_eq!(penetration_depth(&Vec3::new(1.0, 1.0, 2.0), &s.floor), 0.0);
        assert_eq!(penetration_depth(&Vec3::new(1.0, 1.0, -3.0), &s.floor), 3.0);
        assert_eq!(penetration_depth(&Vec3::new(25.0, 0.0, -3.0), &s.floor), 0.0);
    }

    #[test]
    fn contact_examples() {
        let s = scene();
        assert!(classify_contacts(&s.goal.center, &s).goal_hit);
        let off = s.goal.center + Vec3::new(s.goal.radius + 0.001, 0.0, 0.0);
        let c = classify_contacts(&off, &s);
        assert!(!c.goal_hit && !c.forbidden_hit);
        let on_wall = classify_contacts(&Vec3::new(3.0, -4.0, -30.0), &s);
        assert!(on_wall.forbidden_hit);
        let beside_wall = classify_contacts(&Vec3::new(3.0, -4.0, -30.3), &s);
        assert!(!beside_wall.forbidden_hit);
    }

    #[test]
    fn tilted_patch_basis_is_orthonormal() {
        let p = Patch {
            center: Vec3::zeros(),
            normal: Vec3::new(1.0, 1.0, 0.0).normalize(),
            half_extents: [1.0, 1.0],
        };
        let (u, v) = p.basis();
        assert!((u.norm() - 1.0).abs() < 1e-12 && (v.norm() - 1.0).abs() < 1e-12);
        assert!(u.dot(&v).abs() < 1e-12 && u.dot(&p.normal).abs() < 1e-12);
        assert!((u.cross(&v) - p.normal).norm() < 1e-12);
    }

    #[test]
    fn load_rejects_degenerate_geometry() {
        let text = toml::to_string(&SceneConfig::default()).unwrap();
        assert_eq!(load_scene(&text).unwrap(), scene());

        let mut bad = SceneConfig::default();
        bad.goal.radius = 0.0;
        let err = load_scene(&toml::to_string(&bad).unwrap()).unwrap_err();
        assert!(matches!(err, SceneError::Geometry(_)));

        let mut bad = SceneConfig::default();
        bad.floor.normal = Vec3::new(0.0, 0.0, 2.0);
        assert!(matches!(
            load_scene(&toml::to_string(&bad).unwrap()),
            Err(SceneError::Geometry(_))
        ));

        let mut bad = SceneConfig::default();
        bad.forbidden.half_extents = [0.0, 3.0];
        assert!(load_scene(&toml::to_string(&bad).unwrap()).is_err());

        assert!(matches!(load_scene("floor = 3"), Err(SceneError::Parse(_))));
    }

    #[test]
    fn near_unit_normal_is_renormalized() {
        let mut s = SceneConfig::default();
        s.floor.normal = Vec3::new(0.0, 0.0, 1.0 + 5e-7);
        let v = s.validated().unwrap();
        assert!((v.floor.normal.norm() - 1.0).abs() <= 1e-15);
    }
}
