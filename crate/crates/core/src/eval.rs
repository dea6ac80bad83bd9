//! Evaluation protocols and pose metrics.
//!
//! Protocol #1 aligns the prediction's root depth to the ground truth;
//! Protocol #2 aligns each prediction with an optimal similarity transform.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{Pose2D, Pose3D, SkeletonTopology, LIMB_GROUPS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("count mismatch: {0} predictions vs {1} ground truths")]
    CountMismatch(usize, usize),
    #[error("joint count mismatch: {0} vs {1}")]
    JointMismatch(usize, usize),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("sample {0} has a zero-length head segment")]
    ZeroHeadSegment(usize),
    #[error("no samples to evaluate")]
    Empty,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("toml: {0}")]
    Toml(String),
}

/// Correctness threshold for 3D PCK, mm.
pub const PCK3D_THRESHOLD: f64 = 150.0;
/// AUC thresholds are `5, 10, …, 150` mm.
pub const AUC_STEP: f64 = 5.0;
pub const AUC_STEPS: usize = 30;

fn check_pair(pred: &Pose3D, gt: &Pose3D) -> Result<(), EvalError> {
    if pred.joint_count() != gt.joint_count() {
        return Err(EvalError::JointMismatch(pred.joint_count(), gt.joint_count()));
    }
    Ok(())
}

fn check_counts<A, B>(preds: &[A], gts: &[B]) -> Result<(), EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::CountMismatch(preds.len(), gts.len()));
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Shifts `pred` along z so that its root depth equals the ground truth's.
pub fn root_depth_align(pred: &Pose3D, gt: &Pose3D, root: usize) -> Pose3D {
    let dz = gt.coords[root][2] - pred.coords[root][2];
    Pose3D::new(pred.coords.iter().map(|c| [c[0], c[1], c[2] + dz]).collect(), pred.frame)
}

fn joint_errors(pred: &Pose3D, gt: &Pose3D) -> Vec<f64> {
    pred.coords.iter().zip(&gt.coords).map(|(a, b)| (Vector3::from(*a) - Vector3::from(*b)).norm()).collect()
}

/// Protocol #1 per-joint errors, sample-major.
fn aligned_errors(preds: &[Pose3D], gts: &[Pose3D], root: usize) -> Result<Vec<Vec<f64>>, EvalError> {
    check_counts(preds, gts)?;
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            check_pair(p, g)?;
            Ok(joint_errors(&root_depth_align(p, g, root), g))
        })
        .collect()
}

/// Mean of the values summed in sorted order, so that any permutation of
/// the samples gives a bitwise-identical result.
fn sorted_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean(rows: &[Vec<f64>]) -> f64 {
    sorted_mean(rows.iter().flatten().copied())
}

/// Protocol #1 MPJPE in mm.
pub fn mpjpe(preds: &[Pose3D], gts: &[Pose3D], root: usize) -> Result<f64, EvalError> {
    Ok(mean(&aligned_errors(preds, gts, root)?))
}

/// Similarity transform `s·R·x + t` taking `pred` onto `gt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, pose: &Pose3D) -> Pose3D {
        let coords = pose
            .coords
            .iter()
            .map(|c| (self.rotation * Vector3::from(*c) * self.scale + self.translation).into())
            .collect();
        Pose3D::new(coords, pose.frame)
    }
}

/// Least-squares similarity (or rigid, without scale) alignment with the
/// reflection excluded.
pub fn procrustes_transform(pred: &Pose3D, gt: &Pose3D, with_scale: bool) -> Result<Similarity, EvalError> {
    check_pair(pred, gt)?;
    let n = pred.joint_count();
    if n < 3 {
        return Err(EvalError::DegenerateConfiguration(format!("{n} joints")));
    }
    let mean_of = |p: &Pose3D| p.coords.iter().map(|c| Vector3::from(*c)).sum::<Vector3<f64>>() / n as f64;
    let (mp, mg) = (mean_of(pred), mean_of(gt));
    let xs: Vec<Vector3<f64>> = pred.coords.iter().map(|c| Vector3::from(*c) - mp).collect();
    let ys: Vec<Vector3<f64>> = gt.coords.iter().map(|c| Vector3::from(*c) - mg).collect();

    let spread = |v: &[Vector3<f64>]| v.iter().fold(Matrix3::zeros(), |acc, x| acc + x * x.transpose());
    let gt_sv = spread(&ys).symmetric_eigenvalues();
    let mut ev: Vec<f64> = gt_sv.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[1] > 1e-12 * ev[0].max(f64::MIN_POSITIVE)) {
        return Err(EvalError::DegenerateConfiguration("ground-truth joints are collinear".into()));
    }
    let var_x: f64 = xs.iter().map(|x| x.norm_squared()).sum();
    if !(var_x > 0.0) {
        return Err(EvalError::DegenerateConfiguration("prediction joints coincide".into()));
    }

    let cov = xs.iter().zip(&ys).fold(Matrix3::zeros(), |acc, (x, y)| acc + y * x.transpose());
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sign = (u.determinant() * v_t.determinant()).signum();
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let rotation = u * d * v_t;
    let scale = if with_scale {
        (svd.singular_values[0] + svd.singular_values[1] + sign * svd.singular_values[2]) / var_x
    } else {
        1.0
    };
    let translation = mg - rotation * mp * scale;
    Ok(Similarity { scale, rotation, translation })
}

pub fn procrustes_align(pred: &Pose3D, gt: &Pose3D, with_scale: bool) -> Result<Pose3D, EvalError> {
    Ok(procrustes_transform(pred, gt, with_scale)?.apply(pred))
}

/// Protocol #2 MPJPE in mm.
pub fn mpjpe_p2(preds: &[Pose3D], gts: &[Pose3D], with_scale: bool) -> Result<f64, EvalError> {
    check_counts(preds, gts)?;
    let rows = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| Ok(joint_errors(&procrustes_align(p, g, with_scale)?, g)))
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(mean(&rows))
}

pub fn rmse(pred: &Pose3D, gt: &Pose3D) -> f64 {
    let e = joint_errors(pred, gt);
    (e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64).sqrt()
}

/// Percentage of 2D joints within half the ground-truth head-segment length.
pub fn pckh_2d(preds: &[Pose2D], gts: &[Pose2D], topology: &SkeletonTopology) -> Result<f64, EvalError> {
    check_counts(preds, gts)?;
    let (a, b) = topology.head_segment;
    let (mut hit, mut total) = (0usize, 0usize);
    for (n, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.joint_count() != g.joint_count() {
            return Err(EvalError::JointMismatch(p.joint_count(), g.joint_count()));
        }
        let head = (g.coords[a][0] - g.coords[b][0]).hypot(g.coords[a][1] - g.coords[b][1]);
        if !(head > 0.0) {
            return Err(EvalError::ZeroHeadSegment(n));
        }
        let threshold = 0.5 * head;
        for (pj, gj) in p.coords.iter().zip(&g.coords) {
            total += 1;
            if (pj[0] - gj[0]).hypot(pj[1] - gj[1]) < threshold {
                hit += 1;
            }
        }
    }
    Ok(100.0 * hit as f64 / total as f64)
}

/// 3D PCK at 150 mm and its AUC over `5..=150` mm, both percent, after
/// root-depth alignment.
pub fn pck3d_auc(preds: &[Pose3D], gts: &[Pose3D], root: usize) -> Result<(f64, f64), EvalError> {
    let errors: Vec<f64> = aligned_errors(preds, gts, root)?.into_iter().flatten().collect();
    let pck_at = |t: f64| 100.0 * errors.iter().filter(|&&e| e < t).count() as f64 / errors.len() as f64;
    let auc = (1..=AUC_STEPS).map(|k| pck_at(AUC_STEP * k as f64)).sum::<f64>() / AUC_STEPS as f64;
    Ok((pck_at(PCK3D_THRESHOLD), auc))
}

/// Protocol #1 MPJPE restricted to each limb group's joints.
pub fn per_group_error(
    preds: &[Pose3D],
    gts: &[Pose3D],
    topology: &SkeletonTopology,
) -> Result<BTreeMap<String, f64>, EvalError> {
    let rows = aligned_errors(preds, gts, topology.root)?;
    Ok(topology
        .limb_groups
        .iter()
        .map(|(name, joints)| (name.clone(), sorted_mean(rows.iter().flat_map(|r| joints.iter().map(|&j| r[j])))))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub domain: String,
    pub samples: usize,
    pub mpjpe_p1: f64,
    pub mpjpe_p2: f64,
    pub per_group: BTreeMap<String, f64>,
    pub pckh05: f64,
    pub pck3d: f64,
    pub auc3d: f64,
}

impl MetricsReport {
    /// Computes every metric from aligned prediction/label lists.
    #[allow(clippy::too_many_arguments)]
    pub fn compute(
        variant: &str,
        seed: u64,
        domain: &str,
        preds: &[Pose3D],
        gts: &[Pose3D],
        preds2d: &[Pose2D],
        gts2d: &[Pose2D],
        topology: &SkeletonTopology,
    ) -> Result<Self, EvalError> {
        let (pck3d, auc3d) = pck3d_auc(preds, gts, topology.root)?;
        Ok(Self {
            variant: variant.to_string(),
            seed,
            domain: domain.to_string(),
            samples: preds.len(),
            mpjpe_p1: mpjpe(preds, gts, topology.root)?,
            mpjpe_p2: mpjpe_p2(preds, gts, true)?,
            per_group: per_group_error(preds, gts, topology)?,
            pckh05: pckh_2d(preds2d, gts2d, topology)?,
            pck3d,
            auc3d,
        })
    }

    pub fn is_valid(&self) -> bool {
        let pct = |v: f64| (0.0..=100.0).contains(&v);
        [self.mpjpe_p1, self.mpjpe_p2].iter().chain(self.per_group.values()).all(|v| v.is_finite())
            && pct(self.pckh05)
            && pct(self.pck3d)
            && pct(self.auc3d)
    }

    pub fn csv_header() -> Vec<String> {
        let mut h: Vec<String> =
            ["variant", "seed", "domain", "samples", "mpjpe_p1", "mpjpe_p2"].map(String::from).to_vec();
        h.extend(LIMB_GROUPS.iter().map(|g| g.to_string()));
        h.extend(["pckh05", "pck3d", "auc3d"].map(String::from));
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut r = vec![
            self.variant.clone(),
            self.seed.to_string(),
            self.domain.clone(),
            self.samples.to_string(),
            self.mpjpe_p1.to_string(),
            self.mpjpe_p2.to_string(),
        ];
        r.extend(LIMB_GROUPS.iter().map(|g| self.per_group.get(*g).map(|v| v.to_string()).unwrap_or_default()));
        r.extend([self.pckh05, self.pck3d, self.auc3d].map(|v| v.to_string()));
        r
    }

    pub fn to_toml(&self) -> Result<String, EvalError> {
        toml::to_string(self).map_err(|e| EvalError::Toml(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, EvalError> {
        toml::from_str(text).map_err(|e| EvalError::Toml(e.to_string()))
    }

    /// Writes `<stem>.csv` and `<stem>.toml` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        write_csv(&dir.join(format!("{stem}.csv")), std::slice::from_ref(self))?;
        std::fs::File::create(dir.join(format!("{stem}.toml")))?.write_all(self.to_toml()?.as_bytes())?;
        Ok(())
    }
}

pub fn write_csv(path: &Path, reports: &[MetricsReport]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MetricsReport::csv_header())?;
    for r in reports {
        w.write_record(r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::Frame;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut impl Rng, p: usize) -> Pose3D {
        Pose3D::new(
            (0..p)
                .map(|_| {
                    [rng.random_range(-800.0..800.0), rng.random_range(-800.0..800.0), rng.random_range(3000.0..5000.0)]
                })
                .collect(),
            Frame::Camera,
        )
    }

    fn shifted(p: &Pose3D, d: [f64; 3]) -> Pose3D {
        Pose3D::new(p.coords.iter().map(|c| [c[0] + d[0], c[1] + d[1], c[2] + d[2]]).collect(), p.frame)
    }

    #[test]
    fn root_alignment_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_pose(&mut rng, 16);
        assert_eq!(root_depth_align(&shifted(&gt, [0.0, 0.0, 10.0]), &gt, 0), gt);
        assert_eq!(root_depth_align(&gt, &gt, 0), gt);
        let pred = random_pose(&mut rng, 16);
        let a = root_depth_align(&pred, &gt, 3);
        let dz = gt.coords[3][2] - pred.coords[3][2];
        assert_eq!(a.coords[3][2], gt.coords[3][2]);
        for (x, y) in a.coords.iter().zip(&pred.coords) {
            assert_eq!((x[0], x[1]), (y[0], y[1]));
            assert!((x[2] - y[2] - dz).abs() < 1e-9);
        }
    }

    #[test]
    fn mpjpe_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gts: Vec<Pose3D> = (0..4).map(|_| random_pose(&mut rng, 16)).collect();
        assert_eq!(mpjpe(&gts, &gts, 0).unwrap(), 0.0);
        let off: Vec<Pose3D> = gts.iter().map(|g| shifted(g, [3.0, 4.0, 0.0])).collect();
        assert_eq!(mpjpe(&off, &gts, 0).unwrap(), 5.0);
        assert!(matches!(mpjpe(&off[..2], &gts, 0), Err(EvalError::CountMismatch(2, 4))));

        let preds: Vec<Pose3D> = (0..4).map(|_| random_pose(&mut rng, 16)).collect();
        let mut sum = 0.0;
        for (p, g) in preds.iter().zip(&gts) {
            let dz = g.coords[0][2] - p.coords[0][2];
            for j in 0..16 {
                let d: Vec<f64> =
                    (0..3).map(|c| p.coords[j][c] + if c == 2 { dz } else { 0.0 } - g.coords[j][c]).collect();
                sum += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            }
        }
        let oracle = sum / 64.0;
        assert!((mpjpe(&preds, &gts, 0).unwrap() - oracle).abs() / oracle < 1e-12);
    }

    #[test]
    fn procrustes_recovers_similarity_copies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let gt = random_pose(&mut rng, 16);
            let rot = Rotation3::from_euler_angles(
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-3.0..3.0),
            );
            let t = Vector3::new(rng.random_range(-500.0..500.0), 0.0, 200.0);
            let pred = Similarity { scale: 0.7, rotation: *rot.matrix(), translation: t }.apply(&gt);
            let aligned = procrustes_align(&pred, &gt, true).unwrap();
            let sse: f64 = joint_errors(&aligned, &gt).iter().map(|e| e * e).sum();
            let norm: f64 = gt.coords.iter().flatten().map(|v| v * v).sum();
            assert!(sse / norm < 1e-16, "{}", sse / norm);
        }
    }

    #[test]
    fn scale_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_pose(&mut rng, 16);
        let pred = Pose3D::new(gt.coords.iter().map(|c| c.map(|v| 2.0 * v)).collect(), gt.frame);
        assert!(rmse(&procrustes_align(&pred, &gt, true).unwrap(), &gt) < 1e-9);
        assert!(rmse(&procrustes_align(&pred, &gt, false).unwrap(), &gt) > 1.0);
    }

    #[test]
    fn procrustes_beats_random_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_pose(&mut rng, 16);
        let pred = random_pose(&mut rng, 16);
        let sse = |p: &Pose3D| joint_errors(p, &gt).iter().map(|e| e * e).sum::<f64>();
        let best = sse(&procrustes_align(&pred, &gt, true).unwrap());
        let opt = procrustes_transform(&pred, &gt, true).unwrap();
        for _ in 0..100_000 {
            let rot = Rotation3::from_euler_angles(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            );
            let cand = Similarity {
                scale: opt.scale * rng.random_range(0.8..1.2),
                rotation: rot.matrix() * opt.rotation,
                translation: opt.translation
                    + Vector3::new(
                        rng.random_range(-50.0..50.0),
                        rng.random_range(-50.0..50.0),
                        rng.random_range(-50.0..50.0),
                    ),
            };
            assert!(sse(&cand.apply(&pred)) >= best * (1.0 - 1e-12));
        }
    }

    #[test]
    fn collinear_ground_truth_is_degenerate() {
        let gt = Pose3D::new((0..5).map(|k| [k as f64, 2.0 * k as f64, 0.0]).collect(), Frame::Camera);
        let pred = Pose3D::new((0..5).map(|k| [k as f64, 0.0, (k * k) as f64]).collect(), Frame::Camera);
        assert!(matches!(procrustes_align(&pred, &gt, true), Err(EvalError::DegenerateConfiguration(_))));
    }

    #[test]
    fn pckh_cases() {
        let topo = SkeletonTopology::default_16();
        let (a, b) = topo.head_segment;
        let mut g = vec![[0.0, 0.0]; 16];
        g[a] = [10.0, 10.0];
        g[b] = [10.0, 30.0];
        let gt = Pose2D::new(g);
        assert_eq!(pckh_2d(std::slice::from_ref(&gt), std::slice::from_ref(&gt), &topo).unwrap(), 100.0);
        let far = Pose2D::new(gt.coords.iter().map(|c| [c[0] + 200.0, c[1]]).collect());
        assert_eq!(pckh_2d(&[far], std::slice::from_ref(&gt), &topo).unwrap(), 0.0);
        // threshold 10 px: even joints 4 px off, odd joints 16 px off
        let half = Pose2D::new(
            gt.coords.iter().enumerate().map(|(j, c)| [c[0] + if j % 2 == 0 { 4.0 } else { 16.0 }, c[1]]).collect(),
        );
        assert_eq!(pckh_2d(&[half], std::slice::from_ref(&gt), &topo).unwrap(), 50.0);
        let mut z = gt.clone();
        z.coords[b] = z.coords[a];
        assert!(matches!(pckh_2d(&[gt], &[z], &topo), Err(EvalError::ZeroHeadSegment(0))));
    }

    #[test]
    fn pck_auc_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gts: Vec<Pose3D> = (0..3).map(|_| random_pose(&mut rng, 16)).collect();
        assert_eq!(pck3d_auc(&gts, &gts, 0).unwrap(), (100.0, 100.0));
        let at =
            |d: f64| pck3d_auc(&gts.iter().map(|g| shifted(g, [d, 0.0, 0.0])).collect::<Vec<_>>(), &gts, 0).unwrap();
        assert_eq!(at(200.0), (0.0, 0.0));
        assert_eq!(at(75.0), (100.0, 50.0));
    }

    #[test]
    fn group_errors() {
        let topo = SkeletonTopology::default_16();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gts: Vec<Pose3D> = (0..3).map(|_| random_pose(&mut rng, 16)).collect();
        let zero = per_group_error(&gts, &gts, &topo).unwrap();
        assert!(zero.values().all(|&v| v == 0.0));
        let arms: Vec<usize> = ["U.Arms", "L.Arms"].iter().flat_map(|g| topo.limb_groups[*g].clone()).collect();
        let preds: Vec<Pose3D> = gts
            .iter()
            .map(|g| {
                let mut p = g.clone();
                for &j in &arms {
                    p.coords[j][2] += 30.0;
                }
                p
            })
            .collect();
        let e = per_group_error(&preds, &gts, &topo).unwrap();
        assert_eq!(e["U.Legs"], 0.0);
        assert_eq!(e["L.Legs"], 0.0);
        assert!((e["U.Arms"] - 30.0).abs() < 1e-9 && (e["L.Arms"] - 30.0).abs() < 1e-9);
    }

    #[test]
    fn report_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let topo = SkeletonTopology::default_16();
        let gts: Vec<Pose3D> = (0..5).map(|_| random_pose(&mut rng, 16)).collect();
        let preds: Vec<Pose3D> = gts.iter().map(|g| shifted(g, [10.0, -5.0, 40.0])).collect();
        let g2: Vec<Pose2D> =
            gts.iter().map(|g| Pose2D::new(g.coords.iter().map(|c| [c[0] / 50.0, c[1] / 50.0]).collect())).collect();
        let r = MetricsReport::compute("Full", 3, "xfer", &preds, &gts, &g2, &g2, &topo).unwrap();
        assert!(r.is_valid());
        assert!(r.mpjpe_p2 <= r.mpjpe_p1);
        assert_eq!(MetricsReport::from_toml(&r.to_toml().unwrap()).unwrap(), r);
        assert_eq!(MetricsReport::csv_header().len(), r.csv_row().len());
    }
}
