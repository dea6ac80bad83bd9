//! The discriminator's pose encodings: 2D heatmaps, depth maps and the
//! pairwise geometric descriptor, plus the differentiable path that builds
//! them from generator outputs.
//!
//! Coordinate spaces: image pixels `(u, v)`, heatmap cells `(hx, hy)` with
//! pixel centers aligned (`hx = (u + 0.5)·s − 0.5` for scale `s =
//! W_hm / W_img`), and camera-frame millimeters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{CameraModel, Frame, Pose2D, Pose3D};
use crate::synth::SyntheticSample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("heatmap {0} has no positive mass")]
    DegenerateMap(usize),
    #[error("joint {joint} has non-positive depth {depth}")]
    NonPositiveDepth { joint: usize, depth: f64 },
    #[error("sample {0} has no 3D labels")]
    MissingLabels(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodeConfig {
    /// (height, width) of every heatmap and depth map.
    pub heatmap_size: (usize, usize),
    /// (height, width) of the source images.
    pub image_size: (usize, usize),
    /// Root depth used to back-project root-relative depths, in mm.
    pub nominal_root_depth: f64,
    /// Offsets are divided by this (squares by its square) before entering
    /// the discriminator; depth maps are divided by it too.
    pub feature_scale: f64,
    /// Half-width of the window around each map's peak used for
    /// coordinate extraction; `None` uses the whole map.
    pub window_radius: Option<usize>,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            heatmap_size: (16, 16),
            image_size: (32, 32),
            nominal_root_depth: 4000.0,
            feature_scale: 500.0,
            window_radius: Some(4),
        }
    }
}

impl EncodeConfig {
    fn scale(&self) -> (f64, f64) {
        (self.heatmap_size.1 as f64 / self.image_size.1 as f64, self.heatmap_size.0 as f64 / self.image_size.0 as f64)
    }

    pub fn image_to_heatmap(&self, p: [f64; 2]) -> [f64; 2] {
        let (sx, sy) = self.scale();
        [(p[0] + 0.5) * sx - 0.5, (p[1] + 0.5) * sy - 0.5]
    }

    pub fn heatmap_to_image(&self, p: [f64; 2]) -> [f64; 2] {
        let (sx, sy) = self.scale();
        [(p[0] + 0.5) / sx - 0.5, (p[1] + 0.5) / sy - 0.5]
    }

    pub fn map_len(&self) -> usize {
        self.heatmap_size.0 * self.heatmap_size.1
    }
}

/// `P` maps of `height × width`, joint-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub joints: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl HeatmapStack {
    pub fn map(&self, j: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[j * n..(j + 1) * n]
    }
}

/// Depth maps share the heatmap layout; values are millimeters.
pub type DepthMapStack = HeatmapStack;

/// `6 × P × P` pairwise descriptor; entry `(c, i, j)` lives at `c·P² + i·P + j`.
/// Channels 0–2 hold `Δx, Δy, Δz = z_i − z_j` (mm), 3–5 their squares.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoDescriptor {
    pub joints: usize,
    pub values: Vec<f64>,
}

impl GeoDescriptor {
    pub fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        let p = self.joints;
        self.values[c * p * p + i * p + j]
    }

    /// Largest violation of the descriptor algebra (antisymmetric offsets,
    /// symmetric nonnegative squares, zero diagonal, square relation).
    pub fn algebra_violation(&self) -> f64 {
        let p = self.joints;
        let mut worst = 0.0f64;
        for i in 0..p {
            for c in 0..6 {
                worst = worst.max(self.at(c, i, i).abs());
            }
            for j in 0..p {
                for c in 0..3 {
                    worst = worst.max((self.at(c, i, j) + self.at(c, j, i)).abs());
                    worst = worst.max((self.at(c + 3, i, j) - self.at(c + 3, j, i)).abs());
                    worst = worst.max((-self.at(c + 3, i, j)).max(0.0));
                    worst = worst.max((self.at(c + 3, i, j) - self.at(c, i, j).powi(2)).abs());
                }
            }
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorInput {
    pub heatmaps: HeatmapStack,
    pub depth_maps: DepthMapStack,
    pub descriptor: GeoDescriptor,
}

/// Unit-peak Gaussians with identity covariance centered at each joint
/// (heatmap coordinates).
pub fn render_heatmaps(pose_hm: &Pose2D, height: usize, width: usize) -> HeatmapStack {
    let p = pose_hm.joint_count();
    let mut values = vec![0.0; p * height * width];
    for (j, c) in pose_hm.coords.iter().enumerate() {
        let map = &mut values[j * height * width..(j + 1) * height * width];
        for y in 0..height {
            let dy = y as f64 - c[1];
            for x in 0..width {
                let dx = x as f64 - c[0];
                map[y * width + x] = (-(dx * dx + dy * dy) / 2.0).exp();
            }
        }
    }
    HeatmapStack { joints: p, height, width, values }
}

/// `depth_j × heatmap_j`, elementwise per joint.
pub fn render_depth_maps(heatmaps: &HeatmapStack, depths: &[f64]) -> Result<DepthMapStack, EncodeError> {
    if depths.len() != heatmaps.joints {
        return Err(EncodeError::ShapeMismatch(format!("{} depths for {} heatmaps", depths.len(), heatmaps.joints)));
    }
    let n = heatmaps.height * heatmaps.width;
    let values = heatmaps.values.iter().enumerate().map(|(k, &h)| depths[k / n] * h).collect();
    Ok(HeatmapStack { joints: heatmaps.joints, height: heatmaps.height, width: heatmaps.width, values })
}

pub fn geometric_descriptor(pose: &Pose3D) -> GeoDescriptor {
    let p = pose.joint_count();
    let mut values = vec![0.0; 6 * p * p];
    for i in 0..p {
        for j in 0..p {
            for c in 0..3 {
                let d = pose.coords[i][c] - pose.coords[j][c];
                values[c * p * p + i * p + j] = d;
                values[(c + 3) * p * p + i * p + j] = d * d;
            }
        }
    }
    GeoDescriptor { joints: p, values }
}

/// Expected `(x, y)` cell coordinates under the map normalized to unit sum.
pub fn soft_argmax(map: &[f64], height: usize, width: usize) -> Result<(f64, f64), EncodeError> {
    windowed_soft_argmax(map, height, width, None).map(|w| (w.x, w.y))
}

struct Window {
    x: f64,
    y: f64,
    mass: f64,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
}

fn windowed_soft_argmax(
    map: &[f64],
    height: usize,
    width: usize,
    radius: Option<usize>,
) -> Result<Window, EncodeError> {
    let (rows, cols) = match radius {
        None => (0..height, 0..width),
        Some(r) => {
            let peak = argmax(map);
            let (py, px) = (peak / width, peak % width);
            (py.saturating_sub(r)..(py + r + 1).min(height), px.saturating_sub(r)..(px + r + 1).min(width))
        }
    };
    let (mut mass, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in rows.clone() {
        for x in cols.clone() {
            let v = map[y * width + x];
            mass += v;
            sx += v * x as f64;
            sy += v * y as f64;
        }
    }
    if !(mass > 0.0) {
        return Err(EncodeError::DegenerateMap(0));
    }
    Ok(Window { x: sx / mass, y: sy / mass, mass, rows, cols })
}

pub fn argmax(map: &[f64]) -> usize {
    map.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
}

/// Back-projects pixels with absolute depths into the camera frame.
pub fn compose_3d(pose2d: &Pose2D, depths: &[f64], cam: &CameraModel) -> Result<Pose3D, EncodeError> {
    if depths.len() != pose2d.joint_count() {
        return Err(EncodeError::ShapeMismatch(format!("{} depths for {} joints", depths.len(), pose2d.joint_count())));
    }
    let coords = pose2d
        .coords
        .iter()
        .zip(depths)
        .enumerate()
        .map(|(joint, (uv, &z))| {
            if z <= 0.0 {
                return Err(EncodeError::NonPositiveDepth { joint, depth: z });
            }
            Ok([(uv[0] - cam.cx) * z / cam.fx, (uv[1] - cam.cy) * z / cam.fy, z])
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Pose3D::new(coords, Frame::Camera))
}

/// Encodes a camera-frame pose the way ground truth is presented to the
/// discriminator: the pose is re-expressed at the nominal root depth
/// before building the descriptor, so labeled and predicted poses share a
/// scale.
pub fn encode_pose(
    pose_cam: &Pose3D,
    root: usize,
    cam: &CameraModel,
    cfg: &EncodeConfig,
) -> Result<DiscriminatorInput, EncodeError> {
    let pixels = Pose2D::new(pose_cam.coords.iter().map(|c| cam.pixel(c)).collect());
    let rel = pose_cam.root_relative_depths(root);
    encode_pixels_depths(&pixels, &rel, cam, cfg)
}

fn encode_pixels_depths(
    pixels: &Pose2D,
    rel: &[f64],
    cam: &CameraModel,
    cfg: &EncodeConfig,
) -> Result<DiscriminatorInput, EncodeError> {
    let hm = Pose2D::new(pixels.coords.iter().map(|&p| cfg.image_to_heatmap(p)).collect());
    let heatmaps = render_heatmaps(&hm, cfg.heatmap_size.0, cfg.heatmap_size.1);
    let depth_maps = render_depth_maps(&heatmaps, rel)?;
    let abs: Vec<f64> = rel.iter().map(|r| cfg.nominal_root_depth + r).collect();
    let descriptor = geometric_descriptor(&compose_3d(pixels, &abs, cam)?);
    Ok(DiscriminatorInput { heatmaps, depth_maps, descriptor })
}

pub fn encode_ground_truth(
    sample: &SyntheticSample,
    root: usize,
    cfg: &EncodeConfig,
) -> Result<DiscriminatorInput, EncodeError> {
    let pose = sample.pose3d.as_ref().ok_or(EncodeError::MissingLabels(sample.id))?;
    let rel = pose.root_relative_depths(root);
    encode_pixels_depths(&sample.pose2d, &rel, &sample.camera, cfg)
}

/// Intermediates of [`encode_prediction`] needed by its backward pass.
#[derive(Debug, Clone)]
pub struct PredictionTrace {
    windows: Vec<(f64, std::ops::Range<usize>, std::ops::Range<usize>)>,
    hm_coords: Vec<[f64; 2]>,
    pixels: Vec<[f64; 2]>,
    abs_depths: Vec<f64>,
    depths: Vec<f64>,
    pose: Pose3D,
    intrinsics: (f64, f64, f64, f64),
}

impl PredictionTrace {
    /// Predicted pixel coordinates.
    pub fn pixels(&self) -> Pose2D {
        Pose2D::new(self.pixels.clone())
    }

    /// Camera-frame pose at the nominal root depth.
    pub fn pose(&self) -> &Pose3D {
        &self.pose
    }
}

/// Extracts per-joint pixel coordinates from predicted heatmaps.
pub fn decode_heatmaps(heatmaps: &HeatmapStack, cfg: &EncodeConfig) -> Result<Pose2D, EncodeError> {
    (0..heatmaps.joints)
        .map(|j| {
            let w = windowed_soft_argmax(heatmaps.map(j), heatmaps.height, heatmaps.width, cfg.window_radius)
                .map_err(|_| EncodeError::DegenerateMap(j))?;
            Ok(cfg.heatmap_to_image([w.x, w.y]))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Pose2D::new)
}

/// Builds the discriminator input from generator outputs: coordinates by
/// soft-argmax, 3D by back-projection with root-relative `depths` offset
/// by the nominal root depth, then descriptor and depth maps.
pub fn encode_prediction(
    heatmaps: &HeatmapStack,
    depths: &[f64],
    cam: &CameraModel,
    cfg: &EncodeConfig,
) -> Result<(DiscriminatorInput, PredictionTrace), EncodeError> {
    if depths.len() != heatmaps.joints || (heatmaps.height, heatmaps.width) != cfg.heatmap_size {
        return Err(EncodeError::ShapeMismatch(format!(
            "{} depths, {}x{} maps for {} joints",
            depths.len(),
            heatmaps.height,
            heatmaps.width,
            heatmaps.joints
        )));
    }
    let mut windows = Vec::with_capacity(heatmaps.joints);
    let mut hm_coords = Vec::with_capacity(heatmaps.joints);
    for j in 0..heatmaps.joints {
        let w = windowed_soft_argmax(heatmaps.map(j), heatmaps.height, heatmaps.width, cfg.window_radius)
            .map_err(|_| EncodeError::DegenerateMap(j))?;
        hm_coords.push([w.x, w.y]);
        windows.push((w.mass, w.rows, w.cols));
    }
    let pixels: Vec<[f64; 2]> = hm_coords.iter().map(|&c| cfg.heatmap_to_image(c)).collect();
    let abs_depths: Vec<f64> = depths.iter().map(|d| cfg.nominal_root_depth + d).collect();
    let pose = compose_3d(&Pose2D::new(pixels.clone()), &abs_depths, cam)?;
    let input = DiscriminatorInput {
        heatmaps: heatmaps.clone(),
        depth_maps: render_depth_maps(heatmaps, depths)?,
        descriptor: geometric_descriptor(&pose),
    };
    let trace = PredictionTrace {
        windows,
        hm_coords,
        pixels,
        abs_depths,
        depths: depths.to_vec(),
        pose,
        intrinsics: (cam.fx, cam.fy, cam.cx, cam.cy),
    };
    Ok((input, trace))
}

/// Gradients with respect to a [`DiscriminatorInput`], same layouts.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrad {
    pub heatmaps: Vec<f64>,
    pub depth_maps: Vec<f64>,
    pub descriptor: Vec<f64>,
}

/// Backward pass of [`encode_prediction`]: returns `(∂L/∂heatmaps, ∂L/∂depths)`.
pub fn encode_prediction_backward(
    heatmaps: &HeatmapStack,
    trace: &PredictionTrace,
    grad: &InputGrad,
    cfg: &EncodeConfig,
) -> (Vec<f64>, Vec<f64>) {
    let p = heatmaps.joints;
    let n = heatmaps.height * heatmaps.width;
    let width = heatmaps.width;
    let mut d_heat = grad.heatmaps.clone();
    let mut d_depth = vec![0.0; p];

    // depth maps: D_j = r_j · S_j
    for j in 0..p {
        for k in j * n..(j + 1) * n {
            d_heat[k] += trace.depths[j] * grad.depth_maps[k];
            d_depth[j] += grad.depth_maps[k] * heatmaps.values[k];
        }
    }

    // descriptor → joint positions
    let mut d_pos = vec![[0.0f64; 3]; p];
    let pp = p * p;
    for i in 0..p {
        for j in 0..p {
            for c in 0..3 {
                let delta = trace.pose.coords[i][c] - trace.pose.coords[j][c];
                let g = grad.descriptor[c * pp + i * p + j] + 2.0 * delta * grad.descriptor[(c + 3) * pp + i * p + j];
                d_pos[i][c] += g;
                d_pos[j][c] -= g;
            }
        }
    }

    // back-projection: x = (u − cx)·z/fx, y = (v − cy)·z/fy, z = Z0 + r
    let (fx, fy, cx, cy) = trace.intrinsics;
    let (sx, sy) = cfg.scale();
    for j in 0..p {
        let [u, v] = trace.pixels[j];
        let z = trace.abs_depths[j];
        let [gx, gy, gz] = d_pos[j];
        let du = gx * z / fx;
        let dv = gy * z / fy;
        d_depth[j] += gz + gx * (u - cx) / fx + gy * (v - cy) / fy;
        // pixel = (hm + 0.5)/s − 0.5, then the windowed soft-argmax
        let (dhx, dhy) = (du / sx, dv / sy);
        let (mass, rows, cols) = &trace.windows[j];
        let [hx, hy] = trace.hm_coords[j];
        for y in rows.clone() {
            for x in cols.clone() {
                d_heat[j * n + y * width + x] += (dhx * (x as f64 - hx) + dhy * (y as f64 - hy)) / mass;
            }
        }
    }
    (d_heat, d_depth)
}

/// Flattened discriminator features: `maps` is heatmaps then scaled depth
/// maps; `geo` is the scaled descriptor.
pub fn input_features(input: &DiscriminatorInput, cfg: &EncodeConfig) -> (Vec<f64>, Vec<f64>) {
    let s = cfg.feature_scale;
    let mut maps = input.heatmaps.values.clone();
    maps.extend(input.depth_maps.values.iter().map(|v| v / s));
    let third = input.descriptor.values.len() / 2;
    let geo =
        input.descriptor.values.iter().enumerate().map(|(k, v)| if k < third { v / s } else { v / (s * s) }).collect();
    (maps, geo)
}

/// Maps feature-space gradients back to [`InputGrad`].
pub fn input_features_backward(d_maps: &[f64], d_geo: &[f64], cfg: &EncodeConfig) -> InputGrad {
    let s = cfg.feature_scale;
    let half = d_maps.len() / 2;
    let third = d_geo.len() / 2;
    InputGrad {
        heatmaps: d_maps[..half].to_vec(),
        depth_maps: d_maps[half..].iter().map(|g| g / s).collect(),
        descriptor: d_geo.iter().enumerate().map(|(k, g)| if k < third { g / s } else { g / (s * s) }).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraModel {
        CameraModel::new((48.0, 48.0), (15.5, 15.5), Matrix3::identity(), Vector3::zeros()).unwrap()
    }

    #[test]
    fn heatmap_spot_values() {
        let hm = render_heatmaps(&Pose2D::new(vec![[5.0, 7.0]]), 16, 16);
        assert_eq!(hm.values[7 * 16 + 5], 1.0);
        assert!((hm.values[7 * 16 + 6] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((hm.values[8 * 16 + 5] - 0.6065306597126334).abs() < 1e-12);
        assert_eq!(argmax(hm.map(0)), 7 * 16 + 5);
    }

    #[test]
    fn heatmap_argmax_is_rounded_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let c = [rng.random_range(0.0..15.0), rng.random_range(0.0..15.0)];
            let hm = render_heatmaps(&Pose2D::new(vec![c]), 16, 16);
            let k = argmax(hm.map(0));
            assert_eq!((k % 16, k / 16), (c[0].round() as usize, c[1].round() as usize));
            assert!(hm.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn depth_maps() {
        let hm = render_heatmaps(&Pose2D::new(vec![[3.0, 4.0], [8.0, 8.0]]), 16, 16);
        let dm = render_depth_maps(&hm, &[0.0, -120.0]).unwrap();
        assert!(dm.map(0).iter().all(|&v| v == 0.0));
        assert_eq!(dm.map(1)[8 * 16 + 8], -120.0);
        for k in 0..256 {
            assert_eq!(dm.values[256 + k], -120.0 * hm.values[256 + k]);
        }
        assert!(render_depth_maps(&hm, &[1.0]).is_err());
    }

    #[test]
    fn descriptor_substitution() {
        let pose = Pose3D::new(vec![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]], Frame::Camera);
        let d = geometric_descriptor(&pose);
        let got: Vec<f64> = (0..6).map(|c| d.at(c, 0, 1)).collect();
        assert_eq!(got, vec![1.0, 2.0, 3.0, 1.0, 4.0, 9.0]);
        let back: Vec<f64> = (0..6).map(|c| d.at(c, 1, 0)).collect();
        assert_eq!(back, vec![-1.0, -2.0, -3.0, 1.0, 4.0, 9.0]);
        assert!((0..6).all(|c| d.at(c, 0, 0) == 0.0));
        assert_eq!(d.algebra_violation(), 0.0);
    }

    #[test]
    fn soft_argmax_cases() {
        // 15×11 map: the truncated support is symmetric about (5, 7)
        let hm = render_heatmaps(&Pose2D::new(vec![[5.0, 7.0]]), 15, 11);
        let (x, y) = soft_argmax(hm.map(0), 15, 11).unwrap();
        assert!((x - 5.0).abs() < 1e-9 && (y - 7.0).abs() < 1e-9);
        let (x, y) = soft_argmax(&[1.0; 64], 8, 8).unwrap();
        assert_eq!((x, y), (3.5, 3.5));
        assert_eq!(soft_argmax(&[0.0; 64], 8, 8), Err(EncodeError::DegenerateMap(0)));
    }

    #[test]
    fn soft_argmax_matches_weighted_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let map: Vec<f64> = (0..12 * 9).map(|_| rng.random_range(0.0..1.0)).collect();
            let (x, y) = soft_argmax(&map, 12, 9).unwrap();
            let total: f64 = map.iter().sum();
            let ex: f64 = map.iter().enumerate().map(|(k, v)| v * (k % 9) as f64).sum::<f64>() / total;
            let ey: f64 = map.iter().enumerate().map(|(k, v)| v * (k / 9) as f64).sum::<f64>() / total;
            assert!((x - ex).abs() / ex < 1e-12 && (y - ey).abs() / ey < 1e-12);
        }
    }

    #[test]
    fn compose_cases() {
        let c = CameraModel::new((1000.0, 1000.0), (0.0, 0.0), Matrix3::identity(), Vector3::zeros()).unwrap();
        let p = compose_3d(&Pose2D::new(vec![[100.0, 0.0], [0.0, 0.0]]), &[2000.0, 750.0], &c).unwrap();
        assert_eq!(p.coords[0], [200.0, 0.0, 2000.0]);
        assert_eq!(p.coords[1], [0.0, 0.0, 750.0]);
        assert!(matches!(
            compose_3d(&Pose2D::new(vec![[0.0, 0.0]]), &[0.0], &c),
            Err(EncodeError::NonPositiveDepth { joint: 0, .. })
        ));
    }

    #[test]
    fn perturbing_one_depth_is_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = EncodeConfig::default();
        let centers: Vec<[f64; 2]> =
            (0..5).map(|_| [rng.random_range(3.0..12.0), rng.random_range(3.0..12.0)]).collect();
        let hm = render_heatmaps(&Pose2D::new(centers), 16, 16);
        let depths = vec![0.0, 50.0, -30.0, 120.0, -80.0];
        let (a, _) = encode_prediction(&hm, &depths, &cam(), &cfg).unwrap();
        let mut d2 = depths.clone();
        d2[2] += 25.0;
        let (b, _) = encode_prediction(&hm, &d2, &cam(), &cfg).unwrap();
        for c in 0..6 {
            for i in 0..5 {
                for j in 0..5 {
                    if i != 2 && j != 2 {
                        assert_eq!(a.descriptor.at(c, i, j), b.descriptor.at(c, i, j));
                    }
                }
            }
        }
        assert_ne!(a.descriptor.at(2, 2, 0), b.descriptor.at(2, 2, 0));
    }

    /// Random scalar function of the features, with its gradient.
    fn probe(input: &DiscriminatorInput, cfg: &EncodeConfig, seed: u64) -> (f64, InputGrad) {
        let (maps, geo) = input_features(input, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wm: Vec<f64> = maps.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let wg: Vec<f64> = geo.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        // quadratic in the features to exercise nonlinear terms
        let lin_m: f64 = maps.iter().zip(&wm).map(|(a, b)| a * b).sum();
        let lin_g: f64 = geo.iter().zip(&wg).map(|(a, b)| a * b).sum();
        let value = lin_m + lin_g + 0.5 * lin_g * lin_g;
        let dm: Vec<f64> = wm.clone();
        let dg: Vec<f64> = wg.iter().map(|w| w * (1.0 + lin_g)).collect();
        (value, input_features_backward(&dm, &dg, cfg))
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = EncodeConfig { window_radius: Some(3), ..EncodeConfig::default() };
        let p = 4;
        // smooth positive maps with a clear peak so the window is stable
        let centers: Vec<[f64; 2]> =
            (0..p).map(|_| [rng.random_range(4.0..11.0), rng.random_range(4.0..11.0)]).collect();
        let mut hm = render_heatmaps(&Pose2D::new(centers), 16, 16);
        for v in hm.values.iter_mut() {
            *v = 0.9 * *v + 0.05 + rng.random_range(0.0..0.01);
        }
        let depths: Vec<f64> = (0..p).map(|_| rng.random_range(-300.0..300.0)).collect();
        let eval = |hm: &HeatmapStack, d: &[f64]| {
            let (input, _) = encode_prediction(hm, d, &cam(), &cfg).unwrap();
            probe(&input, &cfg, 9).0
        };
        let (input, trace) = encode_prediction(&hm, &depths, &cam(), &cfg).unwrap();
        let (_, g) = probe(&input, &cfg, 9);
        let (d_heat, d_depth) = encode_prediction_backward(&hm, &trace, &g, &cfg);

        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        for j in 0..p {
            let h = 1e-3;
            let mut up = depths.clone();
            up[j] += h;
            let mut dn = depths.clone();
            dn[j] -= h;
            let fd = (eval(&hm, &up) - eval(&hm, &dn)) / (2.0 * h);
            assert!(rel(d_depth[j], fd) < 1e-5, "depth {j}: {} vs {fd}", d_depth[j]);
        }
        for k in (0..hm.values.len()).step_by(7) {
            let h = 1e-6;
            let mut up = hm.clone();
            up.values[k] += h;
            let mut dn = hm.clone();
            dn.values[k] -= h;
            let fd = (eval(&up, &depths) - eval(&dn, &depths)) / (2.0 * h);
            assert!(rel(d_heat[k], fd) < 1e-5, "heat {k}: {} vs {fd}", d_heat[k]);
        }
    }
}
