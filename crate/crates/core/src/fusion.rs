//! Back-projection of labeled depth frames into a voxel-hashed point map with
//! label voting over a sliding window of recent frames.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidParam(format!("intrinsics fx={fx} fy={fy} cx={cx} cy={cy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Parse `fx fy cx cy`.
    pub fn parse(text: &str) -> Result<Self> {
        let v = parse_floats(text.trim())?;
        match v[..] {
            [fx, fy, cx, cy] => Self::new(fx, fy, cx, cy),
            _ => Err(Error::Parse(format!("intrinsics need 4 numbers, got {}", v.len()))),
        }
    }

    pub fn to_text(&self) -> String {
        format!("{} {} {} {}\n", self.fx, self.fy, self.cx, self.cy)
    }

    /// Pixel coordinates `(u, v)` of a camera-frame point.
    pub fn project(&self, p: &Point3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("`{t}` is not a number"))))
        .collect()
}

/// Allowed deviation from orthonormality and unit determinant.
pub const RIGIDITY_TOL: f64 = 1e-6;

/// Camera-to-world rigid transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FramePose {
    m: Matrix4<f64>,
}

impl FramePose {
    pub fn identity() -> Self {
        Self { m: Matrix4::identity() }
    }

    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let bottom_ok = m[(3, 0)] == 0.0 && m[(3, 1)] == 0.0 && m[(3, 2)] == 0.0 && m[(3, 3)] == 1.0;
        if !m.iter().all(|v| v.is_finite()) || !bottom_ok {
            return Err(Error::InvalidPose("not a homogeneous transform".into()));
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if ortho > RIGIDITY_TOL || (det - 1.0).abs() > RIGIDITY_TOL {
            return Err(Error::InvalidPose(format!("rotation is not rigid (|R'R - I| = {ortho:e}, det = {det})")));
        }
        Ok(Self { m })
    }

    /// From a translation and a row-major rotation.
    pub fn from_parts(t: [f64; 3], r: [f64; 9]) -> Result<Self> {
        let mut m = Matrix4::identity();
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] = r[i * 3 + j];
            }
            m[(i, 3)] = t[i];
        }
        Self::from_matrix(m)
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self::from_parts(t, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).expect("identity rotation")
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.m
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        let r = self.m.fixed_view::<3, 3>(0, 0);
        let t = Vector3::new(self.m[(0, 3)], self.m[(1, 3)], self.m[(2, 3)]);
        Point3::from(r * p.coords + t)
    }

    /// World-to-camera inverse of [`Self::apply`].
    pub fn inverse_apply(&self, p: &Point3<f64>) -> Point3<f64> {
        let r = self.m.fixed_view::<3, 3>(0, 0);
        let t = Vector3::new(self.m[(0, 3)], self.m[(1, 3)], self.m[(2, 3)]);
        Point3::from(r.transpose() * (p.coords - t))
    }

    fn row_text(&self, index: u64) -> String {
        let mut s = format!("{} {} {} {}", index, self.m[(0, 3)], self.m[(1, 3)], self.m[(2, 3)]);
        for i in 0..3 {
            for j in 0..3 {
                s += &format!(" {}", self.m[(i, j)]);
            }
        }
        s
    }
}

/// Parse `frame_index tx ty tz r00 r01 ... r22` lines.
pub fn parse_trajectory(text: &str) -> Result<Vec<(u64, FramePose)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let index = tokens
            .next()
            .and_then(|t| t.parse::<u64>().ok())
            .ok_or_else(|| Error::Parse(format!("trajectory line {}: bad frame index", n + 1)))?;
        let v = parse_floats(&tokens.collect::<Vec<_>>().join(" "))?;
        if v.len() != 12 {
            return Err(Error::Parse(format!("trajectory line {}: expected 12 numbers, got {}", n + 1, v.len())));
        }
        let r: [f64; 9] = v[3..].try_into().expect("nine entries");
        out.push((index, FramePose::from_parts([v[0], v[1], v[2]], r)?));
    }
    Ok(out)
}

pub fn trajectory_to_text(poses: &[(u64, FramePose)]) -> String {
    poses.iter().map(|(i, p)| p.row_text(*i) + "\n").collect()
}

/// A world-space point with its class.
pub type LabeledPoint = (Point3<f64>, u8);

/// Lift every valid, non-ignored pixel into world space.
pub fn backproject(
    label: &Array2<u8>,
    depth: &Array2<f32>,
    k: &CameraIntrinsics,
    pose: &FramePose,
    max_range: f64,
    ignore: Option<u8>,
) -> Result<Vec<LabeledPoint>> {
    if label.dim() != depth.dim() {
        return Err(Error::Shape(format!("label {:?} vs depth {:?}", label.dim(), depth.dim())));
    }
    let mut out = Vec::new();
    for ((v, u), &z) in depth.indexed_iter() {
        let z = z as f64;
        let class = label[[v, u]];
        if !(z > 0.0 && z < max_range) || Some(class) == ignore {
            continue;
        }
        let cam = Point3::new((u as f64 - k.cx) * z / k.fx, (v as f64 - k.cy) * z / k.fy, z);
        out.push((pose.apply(&cam), class));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    /// Frames kept in each voxel's vote window.
    pub window: usize,
    /// Voxel edge length, meters.
    pub voxel_size: f64,
    pub max_range: f64,
    pub ignore: Option<u8>,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            window: 9,
            voxel_size: 0.02,
            max_range: 10.0,
            ignore: Some(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Voxel {
    sum: Vector3<f64>,
    count: u64,
    /// `(frame, label)`, oldest first.
    pub history: VecDeque<(u64, u8)>,
    pub fused: u8,
}

impl Voxel {
    pub fn position(&self) -> Point3<f64> {
        Point3::from(self.sum / self.count as f64)
    }
}

/// Majority label, ties going to the most recent of the tied labels.
pub fn fuse_window(labels: &[u8]) -> Option<u8> {
    let mut counts = [0usize; 256];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let best = *counts.iter().max()?;
    labels.iter().rev().copied().find(|&l| counts[l as usize] == best)
}

/// Majority of one frame's points in a voxel, ties to the smallest class.
fn frame_vote(labels: &[u8]) -> u8 {
    let mut counts = [0usize; 256];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let best = counts.iter().max().copied().unwrap_or(0);
    counts.iter().position(|&c| c == best).expect("non-empty") as u8
}

pub type VoxelKey = (i64, i64, i64);

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPointMap {
    pub params: FusionParams,
    voxels: BTreeMap<VoxelKey, Voxel>,
    last_frame: Option<u64>,
}

impl LabeledPointMap {
    pub fn new(params: FusionParams) -> Result<Self> {
        if params.window == 0 || !(params.voxel_size > 0.0) {
            return Err(Error::InvalidParam("window and voxel size must be positive".into()));
        }
        Ok(Self {
            params,
            voxels: BTreeMap::new(),
            last_frame: None,
        })
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxels(&self) -> impl Iterator<Item = (&VoxelKey, &Voxel)> {
        self.voxels.iter()
    }

    pub fn key(&self, p: &Point3<f64>) -> VoxelKey {
        let s = self.params.voxel_size;
        ((p.x / s).floor() as i64, (p.y / s).floor() as i64, (p.z / s).floor() as i64)
    }

    /// Fold one frame's points in. Frame indices must strictly increase.
    pub fn vote_update(&mut self, points: &[LabeledPoint], frame: u64) -> Result<()> {
        if self.last_frame.is_some_and(|f| frame <= f) {
            return Err(Error::InvalidParam(format!(
                "frame {frame} does not follow frame {}",
                self.last_frame.unwrap_or_default()
            )));
        }
        self.last_frame = Some(frame);
        let mut per_voxel: BTreeMap<VoxelKey, (Vector3<f64>, u64, Vec<u8>)> = BTreeMap::new();
        for (p, class) in points {
            let e = per_voxel.entry(self.key(p)).or_insert_with(|| (Vector3::zeros(), 0, Vec::new()));
            e.0 += p.coords;
            e.1 += 1;
            e.2.push(*class);
        }
        for (key, (sum, count, labels)) in per_voxel {
            let v = self.voxels.entry(key).or_insert_with(|| Voxel {
                sum: Vector3::zeros(),
                count: 0,
                history: VecDeque::new(),
                fused: 0,
            });
            v.sum += sum;
            v.count += count;
            v.history.push_back((frame, frame_vote(&labels)));
        }
        let window = self.params.window as u64;
        for v in self.voxels.values_mut() {
            while v.history.front().is_some_and(|&(f, _)| f + window <= frame) {
                v.history.pop_front();
            }
            let labels: Vec<u8> = v.history.iter().map(|h| h.1).collect();
            if let Some(l) = fuse_window(&labels) {
                v.fused = l;
            }
        }
        Ok(())
    }

    /// Binary little-endian PLY: x, y, z (float), red, green, blue, class (uchar).
    pub fn to_ply(&self, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
        if self.voxels.is_empty() {
            return Err(Error::InvalidParam("cannot export an empty map".into()));
        }
        let header = format!(
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nproperty uchar class\nend_header\n",
            self.voxels.len()
        );
        let mut out = header.into_bytes();
        for v in self.voxels.values() {
            let p = v.position();
            for c in [p.x, p.y, p.z] {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
            let color = palette.get(v.fused as usize).copied().unwrap_or([255, 255, 255]);
            out.extend_from_slice(&color);
            out.push(v.fused);
        }
        Ok(out)
    }

    pub fn export_ply(&self, path: &Path, palette: &[[u8; 3]]) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_ply(palette)?)?;
        Ok(())
    }
}

/// Distinct, fixed colors per class; class 0 is black.
pub fn default_palette(k: usize) -> Vec<[u8; 3]> {
    (0..k)
        .map(|i| {
            if i == 0 {
                return [0, 0, 0];
            }
            let h = (i as f64 * 0.618_033_988_749_895).fract() * 6.0;
            let x = (1.0 - (h % 2.0 - 1.0).abs()) * 255.0;
            let (r, g, b) = match h as u32 {
                0 => (255.0, x, 0.0),
                1 => (x, 255.0, 0.0),
                2 => (0.0, 255.0, x),
                3 => (0.0, x, 255.0),
                4 => (x, 0.0, 255.0),
                _ => (255.0, 0.0, x),
            };
            [r as u8, g as u8, b as u8]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinhole_identity_case() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let label = Array2::from_elem((1, 1), 3u8);
        let depth = Array2::from_elem((1, 1), 2.0f32);
        let pts = backproject(&label, &depth, &k, &FramePose::identity(), 10.0, Some(0)).unwrap();
        assert_eq!(pts, vec![(Point3::new(0.0, 0.0, 2.0), 3)]);
    }

    #[test]
    fn non_rigid_pose_rejected() {
        assert!(matches!(
            FramePose::from_parts([0.0; 3], [2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            Err(Error::InvalidPose(_))
        ));
        assert!(FramePose::from_parts([0.0; 3], [-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn invalid_and_ignored_pixels_skipped() {
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let label = Array2::from_shape_vec((1, 4), vec![1, 0, 1, 1]).unwrap();
        let depth = Array2::from_shape_vec((1, 4), vec![1.0, 1.0, 0.0, 20.0]).unwrap();
        let pts = backproject(&label, &depth, &k, &FramePose::identity(), 10.0, Some(0)).unwrap();
        assert_eq!(pts.len(), 1);
    }

    #[test]
    fn majority_sequence_from_the_description() {
        let mut map = LabeledPointMap::new(FusionParams { window: 5, ..FusionParams::default() }).unwrap();
        let p = Point3::new(0.001, 0.001, 0.001);
        for (f, l) in [1u8, 1, 2].iter().enumerate() {
            map.vote_update(&[(p, *l)], f as u64).unwrap();
        }
        assert_eq!(map.voxels().next().unwrap().1.fused, 1);
        for (f, l) in [2u8, 2].iter().enumerate() {
            map.vote_update(&[(p, *l)], 3 + f as u64).unwrap();
        }
        assert_eq!(map.voxels().next().unwrap().1.fused, 2);
    }

    #[test]
    fn frames_must_increase() {
        let mut map = LabeledPointMap::new(FusionParams::default()).unwrap();
        map.vote_update(&[], 3).unwrap();
        assert!(map.vote_update(&[], 3).is_err());
    }

    #[test]
    fn trajectory_round_trip() {
        let poses = vec![(0, FramePose::identity()), (4, FramePose::translation([1.0, -2.0, 0.5]))];
        assert_eq!(parse_trajectory(&trajectory_to_text(&poses)).unwrap(), poses);
        assert!(parse_trajectory("0 1 2 3").is_err());
    }

    #[test]
    fn single_point_ply() {
        let mut map = LabeledPointMap::new(FusionParams::default()).unwrap();
        map.vote_update(&[(Point3::new(0.5, 0.5, 1.0), 2)], 0).unwrap();
        let pal = default_palette(3);
        let bytes = map.to_ply(&pal).unwrap();
        let body = &bytes[bytes.len() - 16..];
        assert_eq!(&body[12..15], &pal[2]);
        assert_eq!(body[15], 2);
        assert!(LabeledPointMap::new(FusionParams::default()).unwrap().to_ply(&pal).is_err());
    }
}
