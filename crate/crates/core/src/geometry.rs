//! Keypoint decomposition algebra.
//!
//! A face is described by canonical keypoints `k_c` (identity only), a head
//! pose `(R, t)` and a per-keypoint expression deformation `δ`. The posed
//! keypoints are `k_i = R·k_c,i + t + δ_i`; the expression is added after the
//! rotation. Rotations are built from Euler angles as
//! `R = R_z(roll)·R_x(pitch)·R_y(yaw)`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{KpbeError, Result};
use crate::tensor::{Real, Tensor, Var};

/// Number of keypoints per face.
pub const NUM_KEYPOINTS: usize = 15;

/// Max-abs tolerance on `RᵀR = I` and `det R = 1`.
pub const ROTATION_TOLERANCE: f64 = 1e-5;

pub type Vec3 = [f64; 3];

/// A point in normalized scene coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Keypoint3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Keypoint3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_array(self) -> Vec3 {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(&self, other: &Keypoint3) -> f64 {
        let d = [self.x - other.x, self.y - other.y, self.z - other.z];
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

impl From<Vec3> for Keypoint3 {
    fn from(v: Vec3) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<Keypoint3> for Vec3 {
    fn from(k: Keypoint3) -> Self {
        k.to_array()
    }
}

/// Exactly [`NUM_KEYPOINTS`] points; index `i` is always the same keypoint channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Keypoint3>", into = "Vec<Keypoint3>")]
pub struct KeypointSet {
    points: Vec<Keypoint3>,
}

impl KeypointSet {
    pub fn new(points: Vec<Keypoint3>) -> Result<Self> {
        if points.len() != NUM_KEYPOINTS {
            return Err(KpbeError::invalid(format!(
                "a keypoint set holds {NUM_KEYPOINTS} points, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(KpbeError::invalid(format!("keypoint {i} is not finite")));
        }
        Ok(Self { points })
    }

    pub fn from_arrays(points: &[Vec3]) -> Result<Self> {
        Self::new(points.iter().copied().map(Keypoint3::from).collect())
    }

    /// Reads `(K, 3)` or `(1, K, 3)` tensor data.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let v = t.to_f64_vec();
        if v.len() != NUM_KEYPOINTS * 3 {
            return Err(KpbeError::shape(format!(
                "expected {NUM_KEYPOINTS}x3 keypoint tensor, got {:?}",
                t.shape()
            )));
        }
        Self::new(v.chunks_exact(3).map(|c| Keypoint3::new(c[0], c[1], c[2])).collect())
    }

    pub fn points(&self) -> &[Keypoint3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let flat: Vec<f64> = self.points.iter().flat_map(|p| p.to_array()).collect();
        Tensor::from_f64(&[NUM_KEYPOINTS, 3], &flat)
    }

    /// Mean Euclidean distance between corresponding keypoints.
    pub fn mean_distance(&self, other: &KeypointSet) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| a.distance(b))
            .sum::<f64>()
            / NUM_KEYPOINTS as f64
    }
}

impl TryFrom<Vec<Keypoint3>> for KeypointSet {
    type Error = KpbeError;

    fn try_from(points: Vec<Keypoint3>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<KeypointSet> for Vec<Keypoint3> {
    fn from(k: KeypointSet) -> Self {
        k.points
    }
}

/// A proper rotation (orthonormal, determinant +1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct RotationMatrix([[f64; 3]; 3]);

impl RotationMatrix {
    pub const IDENTITY: Self = Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Validates orthonormality and orientation within [`ROTATION_TOLERANCE`].
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(KpbeError::InvalidRotation("matrix has non-finite entries".into()));
        }
        let err = orthonormality_error(&m);
        if err > ROTATION_TOLERANCE {
            return Err(KpbeError::InvalidRotation(format!(
                "not orthonormal: R^T R deviates from identity by {err:.3e} (tolerance {ROTATION_TOLERANCE:.0e})"
            )));
        }
        let det = det3(&m);
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(KpbeError::InvalidRotation(format!(
                "determinant is {det:.6}, expected 1"
            )));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.0
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.0, v)
    }

    pub fn transpose(&self) -> Self {
        Self(transpose3(&self.0))
    }

    pub fn compose(&self, other: &RotationMatrix) -> Self {
        Self(mat_mul(&self.0, &other.0))
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let v = t.to_f64_vec();
        if v.len() != 9 {
            return Err(KpbeError::shape(format!("expected 3x3 rotation, got {:?}", t.shape())));
        }
        Self::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let flat: Vec<f64> = self.0.iter().flatten().copied().collect();
        Tensor::from_f64(&[3, 3], &flat)
    }
}

impl TryFrom<[[f64; 3]; 3]> for RotationMatrix {
    type Error = KpbeError;

    fn try_from(m: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(m)
    }
}

impl From<RotationMatrix> for [[f64; 3]; 3] {
    fn from(r: RotationMatrix) -> Self {
        r.0
    }
}

/// Head rotation and translation; translation components lie in `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadPose {
    rotation: RotationMatrix,
    translation: Vec3,
}

impl HeadPose {
    pub const IDENTITY: Self = Self {
        rotation: RotationMatrix::IDENTITY,
        translation: [0.0; 3],
    };

    pub fn new(rotation: RotationMatrix, translation: Vec3) -> Result<Self> {
        if translation.iter().any(|t| !t.is_finite() || t.abs() > 1.0) {
            return Err(KpbeError::invalid(format!(
                "translation {translation:?} must have finite components in [-1, 1]"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_euler(yaw: f64, pitch: f64, roll: f64, translation: Vec3) -> Result<Self> {
        Self::new(euler_to_rotation(yaw, pitch, roll)?, translation)
    }

    pub fn rotation(&self) -> &RotationMatrix {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }
}

/// Per-keypoint additive deformation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec3>", into = "Vec<Vec3>")]
pub struct ExpressionDeform {
    deltas: Vec<Vec3>,
}

impl ExpressionDeform {
    pub fn new(deltas: Vec<Vec3>) -> Result<Self> {
        if deltas.len() != NUM_KEYPOINTS {
            return Err(KpbeError::invalid(format!(
                "an expression holds {NUM_KEYPOINTS} deltas, got {}",
                deltas.len()
            )));
        }
        if deltas.iter().flatten().any(|v| !v.is_finite()) {
            return Err(KpbeError::invalid("expression delta is not finite"));
        }
        Ok(Self { deltas })
    }

    pub fn zero() -> Self {
        Self {
            deltas: vec![[0.0; 3]; NUM_KEYPOINTS],
        }
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let v = t.to_f64_vec();
        if v.len() != NUM_KEYPOINTS * 3 {
            return Err(KpbeError::shape(format!(
                "expected {NUM_KEYPOINTS}x3 expression tensor, got {:?}",
                t.shape()
            )));
        }
        Self::new(v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn deltas(&self) -> &[Vec3] {
        &self.deltas
    }

    /// Largest absolute component over all deltas.
    pub fn max_abs(&self) -> f64 {
        self.deltas.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let flat: Vec<f64> = self.deltas.iter().flatten().copied().collect();
        Tensor::from_f64(&[NUM_KEYPOINTS, 3], &flat)
    }
}

impl TryFrom<Vec<Vec3>> for ExpressionDeform {
    type Error = KpbeError;

    fn try_from(d: Vec<Vec3>) -> Result<Self> {
        Self::new(d)
    }
}

impl From<ExpressionDeform> for Vec<Vec3> {
    fn from(e: ExpressionDeform) -> Self {
        e.deltas
    }
}

pub(crate) fn mat_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_mul<T: Real>(a: &[[T; 3]; 3], b: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let mut c = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

fn transpose3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = m[j][i];
        }
    }
    t
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Max-abs entry of `RᵀR − I`.
pub fn orthonormality_error(m: &[[f64; 3]; 3]) -> f64 {
    let mut err: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            err = err.max((dot - want).abs());
        }
    }
    err
}

fn rot_y<T: Real>(a: T) -> [[T; 3]; 3] {
    let (s, c, o, z) = (a.sin(), a.cos(), T::one(), T::zero());
    [[c, z, s], [z, o, z], [-s, z, c]]
}

fn rot_x<T: Real>(a: T) -> [[T; 3]; 3] {
    let (s, c, o, z) = (a.sin(), a.cos(), T::one(), T::zero());
    [[o, z, z], [z, c, -s], [z, s, c]]
}

fn rot_z<T: Real>(a: T) -> [[T; 3]; 3] {
    let (s, c, o, z) = (a.sin(), a.cos(), T::one(), T::zero());
    [[c, -s, z], [s, c, z], [z, z, o]]
}

fn d_rot_y<T: Real>(a: T) -> [[T; 3]; 3] {
    let (s, c, z) = (a.sin(), a.cos(), T::zero());
    [[-s, z, c], [z, z, z], [-c, z, -s]]
}

fn d_rot_x<T: Real>(a: T) -> [[T; 3]; 3] {
    let (s, c, z) = (a.sin(), a.cos(), T::zero());
    [[z, z, z], [z, -s, -c], [z, c, -s]]
}

fn d_rot_z<T: Real>(a: T) -> [[T; 3]; 3] {
    let (s, c, z) = (a.sin(), a.cos(), T::zero());
    [[-s, -c, z], [c, -s, z], [z, z, z]]
}

fn euler_matrix<T: Real>(yaw: T, pitch: T, roll: T) -> [[T; 3]; 3] {
    mat_mul(&mat_mul(&rot_z(roll), &rot_x(pitch)), &rot_y(yaw))
}

/// `R = R_z(roll)·R_x(pitch)·R_y(yaw)`, angles in radians.
pub fn euler_to_rotation(yaw: f64, pitch: f64, roll: f64) -> Result<RotationMatrix> {
    if !(yaw.is_finite() && pitch.is_finite() && roll.is_finite()) {
        return Err(KpbeError::invalid(format!(
            "Euler angles must be finite, got yaw={yaw} pitch={pitch} roll={roll}"
        )));
    }
    RotationMatrix::new(euler_matrix(yaw, pitch, roll))
}

/// `R·k_c,i + t + δ_i` for every keypoint. No clamping: posed keypoints may
/// leave the unit cube.
pub fn compose_keypoints(canonical: &KeypointSet, pose: &HeadPose, expression: &ExpressionDeform) -> KeypointSet {
    let t = pose.translation();
    let points = canonical
        .points()
        .iter()
        .zip(expression.deltas())
        .map(|(k, d)| {
            let r = pose.rotation().apply(k.to_array());
            Keypoint3::new(r[0] + t[0] + d[0], r[1] + t[1] + d[1], r[2] + t[2] + d[2])
        })
        .collect();
    KeypointSet { points }
}

/// Free-view control: the user pose replaces the driving pose wholesale.
pub fn override_pose(_driving_pose: &HeadPose, user_pose: &HeadPose) -> HeadPose {
    *user_pose
}

/// Differentiable rotation from per-row Euler angles: `(n, 3)` `[yaw, pitch, roll]`
/// to `(n, 3, 3)`.
pub fn euler_rotation_var<T: Real>(angles: &Var<T>) -> Var<T> {
    let s = angles.shape().to_vec();
    assert!(s.len() == 2 && s[1] == 3, "angles must be (n, 3), got {s:?}");
    let a = angles.value().clone();
    let n = s[0];
    let mut out = Vec::with_capacity(n * 9);
    for row in a.data().chunks_exact(3) {
        out.extend(euler_matrix(row[0], row[1], row[2]).iter().flatten());
    }
    Var::from_op(Tensor::from_vec(&[n, 3, 3], out), vec![angles.clone()], move |g, _| {
        let gd = g.data();
        let mut ga = Vec::with_capacity(n * 3);
        for (i, row) in a.data().chunks_exact(3).enumerate() {
            let (y, p, r) = (row[0], row[1], row[2]);
            let (ry, rx, rz) = (rot_y(y), rot_x(p), rot_z(r));
            let partials = [
                mat_mul(&mat_mul(&rz, &rx), &d_rot_y(y)),
                mat_mul(&mat_mul(&rz, &d_rot_x(p)), &ry),
                mat_mul(&mat_mul(&d_rot_z(r), &rx), &ry),
            ];
            let gi = &gd[i * 9..(i + 1) * 9];
            for d in partials {
                ga.push(d.iter().flatten().zip(gi).map(|(&a, &b)| a * b).sum());
            }
        }
        vec![Some(Tensor::from_vec(&s, ga))]
    })
}

/// Differentiable batched composition: `k_c (n, K, 3)`, `R (n, 3, 3)`,
/// `t (n, 3)`, `δ (n, K, 3)` to posed keypoints `(n, K, 3)`.
pub fn compose_keypoints_var<T: Real>(canonical: &Var<T>, rotation: &Var<T>, translation: &Var<T>, expression: &Var<T>) -> Var<T> {
    let n = canonical.shape()[0];
    canonical
        .bmm(&rotation.permute(&[0, 2, 1]))
        .add(&translation.reshape(&[n, 1, 3]))
        .add(expression)
}

/// The documented JSON interchange form of a keypoint decomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRecord {
    pub canonical: KeypointSet,
    #[serde(rename = "R")]
    pub rotation: RotationMatrix,
    #[serde(rename = "t")]
    pub translation: Vec3,
    #[serde(rename = "exp")]
    pub expression: ExpressionDeform,
}

impl DecompositionRecord {
    pub fn new(canonical: KeypointSet, pose: &HeadPose, expression: ExpressionDeform) -> Self {
        Self {
            canonical,
            rotation: *pose.rotation(),
            translation: pose.translation(),
            expression,
        }
    }

    pub fn pose(&self) -> Result<HeadPose> {
        HeadPose::new(self.rotation, self.translation)
    }

    /// Serializes with every float written in 17 significant digits.
    pub fn to_json(&self) -> Result<String> {
        let mut buf = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, SignificantDigits);
        self.serialize(&mut ser)?;
        Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Compact JSON with floats always in scientific notation and 17 significant digits.
struct SignificantDigits;

impl serde_json::ser::Formatter for SignificantDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        write!(writer, "{:.16e}", f64::from(value))
    }
}
