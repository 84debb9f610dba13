//! Coordinate systems, rotations, device panel layouts, and pose sampling.
//!
//! Conventions used throughout the crate:
//!
//! - The global coordinate system (GCS) is a right-handed frame with `z` up.
//! - A pose rotation is the angle triple `(alpha, beta, gamma)` applied as
//!   intrinsic rotations about `z`, then `y`, then `x`, i.e.
//!   `R = R_z(alpha) * R_y(beta) * R_x(gamma)`. The columns of `R` are the
//!   local axes expressed in the GCS.
//! - Within a panel-local frame, `theta` is the zenith angle measured from
//!   the local `+z` axis and `phi` is the azimuth measured from local `+x`
//!   in the local `xy`-plane.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ── Small linear algebra ────────────────────────────────────────────────────

/// A 3-vector of `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Vec3) -> Vec3 {
        Vec3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        Vec3::new(self.x / n, self.y / n, self.z / n)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// A row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Build a matrix whose columns are `x`, `y`, `z`.
    pub fn from_columns(x: Vec3, y: Vec3, z: Vec3) -> Self {
        Mat3([[x.x, y.x, z.x], [x.y, y.y, z.y], [x.z, y.z, z.z]])
    }

    pub fn column(&self, c: usize) -> Vec3 {
        Vec3::new(self.0[0][c], self.0[1][c], self.0[2][c])
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(r)
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Max absolute entry of `self * self^T - I`.
    pub fn orthonormality_defect(&self) -> f64 {
        let p = self.mul_mat(&self.transpose());
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((p.0[i][j] - target).abs());
            }
        }
        worst
    }
}

// ── Poses and rotations ─────────────────────────────────────────────────────

/// Position and orientation of a device (AP or UT) in the global frame.
///
/// `rotation` is the `(alpha, beta, gamma)` triple; after normalization
/// `alpha` lies in `[-pi, pi)`, `beta` in `[-pi/2, pi/2]` and `gamma` in
/// `[0, 2*pi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vec3,
    pub rotation: [f64; 3],
}

impl Pose {
    pub fn new(position: Vec3, rotation: [f64; 3]) -> Self {
        Pose { position, rotation }
    }

    /// The rotation matrix of this pose.
    pub fn rotation_matrix(&self) -> Mat3 {
        rotation_matrix(self.rotation)
    }
}

/// Composite rotation `R_z(alpha) * R_y(beta) * R_x(gamma)`.
///
/// Total function; the result is orthonormal with determinant +1 for any
/// finite input.
pub fn rotation_matrix(rotation: [f64; 3]) -> Mat3 {
    let (sa, ca) = rotation[0].sin_cos();
    let (sb, cb) = rotation[1].sin_cos();
    let (sg, cg) = rotation[2].sin_cos();
    let rz = Mat3([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]]);
    let ry = Mat3([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]]);
    let rx = Mat3([[1.0, 0.0, 0.0], [0.0, cg, -sg], [0.0, sg, cg]]);
    rz.mul_mat(&ry).mul_mat(&rx)
}

/// Device orientation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OrientationMode {
    Portrait,
    Landscape,
}

impl OrientationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            OrientationMode::Portrait => "portrait",
            OrientationMode::Landscape => "landscape",
        }
    }
}

/// Draw a random device rotation for the given orientation mode.
///
/// Portrait keeps `beta = 0` with `alpha ~ U[-pi, pi)` and
/// `gamma ~ U[0, pi/2]`; landscape keeps `gamma = 0` with
/// `alpha ~ U[-pi, pi)` and `beta ~ U[-pi/2, 0]`.
pub fn sample_orientation<R: Rng + ?Sized>(mode: OrientationMode, rng: &mut R) -> [f64; 3] {
    let alpha = rng.gen_range(-PI..PI);
    match mode {
        OrientationMode::Portrait => {
            let gamma = rng.gen_range(0.0..=FRAC_PI_2);
            [alpha, 0.0, gamma]
        }
        OrientationMode::Landscape => {
            let beta = rng.gen_range(-FRAC_PI_2..=0.0);
            [alpha, beta, 0.0]
        }
    }
}

/// Infer the orientation mode from a rotation triple produced by
/// [`sample_orientation`] (portrait draws have `beta = 0` exactly).
pub fn mode_of_rotation(rotation: [f64; 3]) -> OrientationMode {
    if rotation[1] == 0.0 {
        OrientationMode::Portrait
    } else {
        OrientationMode::Landscape
    }
}

// ── Panels and device designs ───────────────────────────────────────────────

const AXES_TOL: f64 = 1e-12;

/// One antenna panel: element grid, mechanical boresight, and the local frame.
///
/// `grid` holds the element counts `{N_x, N_y, N_z}` along the panel-local
/// axes. `local_axes` has the panel-local axes as columns, expressed in the
/// device LCS, so a device-frame direction maps into the panel frame via
/// `local_axes^T * d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelLayout {
    pub grid: [usize; 3],
    pub boresight: Vec3,
    pub local_axes: Mat3,
}

impl PanelLayout {
    pub fn new(grid: [usize; 3], boresight: Vec3, local_axes: Mat3) -> Result<Self> {
        if grid.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(
                "panel grid counts must be >= 1".into(),
            ));
        }
        if (boresight.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::NonUnitDirection);
        }
        if local_axes.orthonormality_defect() > AXES_TOL || (local_axes.det() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "panel local_axes must be a rotation matrix".into(),
            ));
        }
        Ok(PanelLayout {
            grid,
            boresight,
            local_axes,
        })
    }

    /// Number of elements in this panel.
    pub fn num_elements(&self) -> usize {
        self.grid[0] * self.grid[1] * self.grid[2]
    }
}

/// Named multi-panel device design.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceDesign {
    pub name: String,
    pub panels: Vec<PanelLayout>,
}

impl DeviceDesign {
    /// Edge design: three 4-element ULAs on the right, top and left edges.
    ///
    /// The device LCS has the screen in the `xy`-plane, `+y` toward the top
    /// edge and `+z` out of the screen. Edge ULAs have their boresight along
    /// the panel-local `+x` axis and elements along the panel-local `y` axis.
    pub fn edge() -> Self {
        let p1 = PanelLayout::new([1, 4, 1], Vec3::X, Mat3::IDENTITY).unwrap();
        // Top edge: rotate the P1 frame by +90 degrees about device z.
        let p2 = PanelLayout::new(
            [1, 4, 1],
            Vec3::Y,
            Mat3::from_columns(Vec3::Y, -Vec3::X, Vec3::Z),
        )
        .unwrap();
        // Left edge: rotate by 180 degrees about device z.
        let p3 = PanelLayout::new(
            [1, 4, 1],
            -Vec3::X,
            Mat3::from_columns(-Vec3::X, -Vec3::Y, Vec3::Z),
        )
        .unwrap();
        DeviceDesign {
            name: "edge".into(),
            panels: vec![p1, p2, p3],
        }
    }

    /// Edge-face design: the edge panels plus two `{2,2,1}` UPAs on the back
    /// (near the top, looking `-z`) and the face (near the bottom, looking
    /// `+z`). Their elements lie in the device `xy`-plane.
    pub fn edge_face() -> Self {
        let mut design = DeviceDesign::edge();
        design.name = "edge-face".into();
        // Back panel: rotate by 180 degrees about device x so local z = -z.
        let p4 = PanelLayout::new(
            [2, 2, 1],
            -Vec3::Z,
            Mat3::from_columns(Vec3::X, -Vec3::Y, -Vec3::Z),
        )
        .unwrap();
        let p5 = PanelLayout::new([2, 2, 1], Vec3::Z, Mat3::IDENTITY).unwrap();
        design.panels.push(p4);
        design.panels.push(p5);
        design
    }

    /// Look a built-in design up by name (`"edge"` or `"edge-face"`).
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "edge" => Ok(DeviceDesign::edge()),
            "edge-face" => Ok(DeviceDesign::edge_face()),
            other => Err(Error::InvalidArgument(format!(
                "unknown device design '{other}' (expected 'edge' or 'edge-face')"
            ))),
        }
    }

    /// Parse a custom design from its JSON description.
    ///
    /// Schema: `{"name": ..., "panels": [{"grid": [nx,ny,nz],
    /// "boresight": [x,y,z], "local_axes": [[x-axis],[y-axis],[z-axis]]}]}`
    /// where each axis vector is expressed in the device LCS.
    pub fn from_json_str(json: &str) -> Result<Self> {
        let raw: DesignFile =
            serde_json::from_str(json).map_err(|e| Error::Format(e.to_string()))?;
        if raw.panels.is_empty() {
            return Err(Error::InvalidArgument("design has no panels".into()));
        }
        let mut panels = Vec::with_capacity(raw.panels.len());
        for p in raw.panels {
            let axes = Mat3::from_columns(
                Vec3::from_array(p.local_axes[0]),
                Vec3::from_array(p.local_axes[1]),
                Vec3::from_array(p.local_axes[2]),
            );
            panels.push(PanelLayout::new(
                p.grid,
                Vec3::from_array(p.boresight),
                axes,
            )?);
        }
        Ok(DeviceDesign {
            name: raw.name,
            panels,
        })
    }

    pub fn num_panels(&self) -> usize {
        self.panels.len()
    }

    /// Total number of UT antenna elements over all panels.
    pub fn total_elements(&self) -> usize {
        self.panels.iter().map(|p| p.num_elements()).sum()
    }

    /// Global combiner index of the first beam of panel `p` in the union
    /// codebook ordering.
    pub fn panel_offset(&self, p: usize) -> usize {
        self.panels[..p].iter().map(|q| q.num_elements()).sum()
    }
}

#[derive(Deserialize)]
struct DesignFile {
    name: String,
    panels: Vec<PanelFile>,
}

#[derive(Deserialize)]
struct PanelFile {
    grid: [usize; 3],
    boresight: [f64; 3],
    local_axes: [[f64; 3]; 3],
}

// ── Direction <-> panel angles ──────────────────────────────────────────────

/// Resolve a global-frame arrival direction into `(phi, theta)` of the given
/// panel's local frame for a device at `device_pose`.
///
/// `dir` points from the device toward the apparent source and must be a
/// unit vector (within 1e-9). Returns azimuth `phi` in `[-pi, pi)` and
/// zenith `theta` in `[0, pi]`.
pub fn direction_to_panel_angles(
    dir: Vec3,
    device_pose: &Pose,
    panel: &PanelLayout,
) -> Result<(f64, f64)> {
    if (dir.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::NonUnitDirection);
    }
    let d_device = device_pose.rotation_matrix().transpose().mul_vec(dir);
    let d_local = panel.local_axes.transpose().mul_vec(d_device);
    let theta = d_local.z.clamp(-1.0, 1.0).acos();
    let mut phi = d_local.y.atan2(d_local.x);
    if phi >= PI {
        phi = -PI;
    }
    Ok((phi, theta))
}

/// Inverse of [`direction_to_panel_angles`]: map panel-local `(phi, theta)`
/// back to a global-frame unit direction.
pub fn panel_angles_to_direction(
    phi: f64,
    theta: f64,
    device_pose: &Pose,
    panel: &PanelLayout,
) -> Vec3 {
    let d_local = Vec3::new(
        theta.sin() * phi.cos(),
        theta.sin() * phi.sin(),
        theta.cos(),
    );
    let d_device = panel.local_axes.mul_vec(d_local);
    device_pose.rotation_matrix().mul_vec(d_device)
}

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_to_pi(angle: f64) -> f64 {
    let mut a = (angle + PI).rem_euclid(TAU) - PI;
    if a >= PI {
        a = -PI;
    }
    a
}
