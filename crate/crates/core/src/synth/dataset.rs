//! Dataset generation and the line-oriented dataset file.
//!
//! ```text
//! ADVPOSE-DATASET version=1 domain=lab joints=16 image=32x32 has_3d_labels=1 count=N
//! <id> <domain> <image: f32 LE hex> <pose2d: f64 LE hex> <pose3d: f64 LE hex | -> <camera: f64 LE hex>
//! ```
//!
//! The camera field holds `fx fy cx cy`, the row-major rotation and the
//! translation (16 values).

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use super::{render_stick_figure, sample_camera, sample_pose, AnthropometricModel, DomainSpec};
use crate::skeleton::{project, CameraModel, Frame, Pose2D, Pose3D, SkeletonError};

pub const DATASET_VERSION: u32 = 1;
const MAGIC: &str = "ADVPOSE-DATASET";
/// Largest reprojection error tolerated when loading labeled records.
const REPROJECTION_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset i/o: {0}")]
    Io(#[from] io::Error),
    #[error("dataset line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("dataset version {0} unsupported")]
    Version(u32),
    #[error("record {0} carries 3D labels in a domain without them")]
    LabelDiscipline(usize),
    #[error("record {id}: pose2d deviates from projected pose3d by {err:e} px")]
    Reprojection { id: usize, err: f64 },
    #[error("invalid domain: {0:?}")]
    InvalidDomain(Vec<String>),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: usize,
    pub domain: String,
    /// Row-major grayscale, `height × width`, values in [0, 1].
    pub image: Vec<f32>,
    pub pose2d: Pose2D,
    /// Camera-frame pose, present exactly for labeled domains.
    pub pose3d: Option<Pose3D>,
    pub camera: CameraModel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub domain: String,
    pub joint_count: usize,
    pub image_size: (usize, usize),
    pub has_3d_labels: bool,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<SyntheticSample>,
}

/// Per-sample seed: a SplitMix64 mix of the run seed, the domain name and
/// the sample index, so samples can be generated in any order.
pub fn sample_seed(seed: u64, domain: &str, index: usize) -> u64 {
    let salt = domain.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    splitmix(splitmix(seed ^ salt) ^ index as u64)
}

pub fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_dataset(
    domain: &DomainSpec,
    model: &AnthropometricModel,
    n: usize,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    let problems = domain.validate();
    if !problems.is_empty() {
        return Err(DatasetError::InvalidDomain(problems));
    }
    let samples = (0..n)
        .into_par_iter()
        .map(|id| generate_sample(domain, model, id, sample_seed(seed, &domain.name, id)))
        .collect::<Vec<_>>();
    Ok(Dataset {
        header: DatasetHeader {
            version: DATASET_VERSION,
            domain: domain.name.clone(),
            joint_count: model.joint_count(),
            image_size: domain.image_size,
            has_3d_labels: domain.has_3d_labels,
            count: n,
        },
        samples,
    })
}

fn generate_sample(domain: &DomainSpec, model: &AnthropometricModel, id: usize, seed: u64) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let camera = sample_camera(domain, &mut rng);
        let world = sample_pose(model, domain.pose_scope, &mut rng);
        // a joint behind the camera cannot be imaged; draw again
        let Ok((cam_pose, pose2d)) = project(&world, &camera) else { continue };
        let image = render_stick_figure(&pose2d, &model.topology, domain.image_size);
        return SyntheticSample {
            id,
            domain: domain.name.clone(),
            image,
            pose2d,
            pose3d: domain.has_3d_labels.then_some(cam_pose),
            camera,
        };
    }
}

impl SyntheticSample {
    pub fn reprojection_error(&self) -> Option<f64> {
        let pose = self.pose3d.as_ref()?;
        let err = pose
            .coords
            .iter()
            .zip(&self.pose2d.coords)
            .map(|(c, uv)| {
                let p = self.camera.pixel(c);
                (p[0] - uv[0]).abs().max((p[1] - uv[1]).abs())
            })
            .fold(0.0, f64::max);
        Some(err)
    }

    pub fn image_f64(&self) -> Vec<f64> {
        self.image.iter().map(|&v| v as f64).collect()
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        let h = &self.header;
        writeln!(
            w,
            "{MAGIC} version={} domain={} joints={} image={}x{} has_3d_labels={} count={}",
            h.version,
            h.domain,
            h.joint_count,
            h.image_size.0,
            h.image_size.1,
            h.has_3d_labels as u8,
            self.samples.len()
        )?;
        let mut line = String::new();
        for s in &self.samples {
            line.clear();
            write!(line, "{} {} ", s.id, s.domain).unwrap();
            push_hex(&mut line, s.image.iter().flat_map(|v| v.to_le_bytes()));
            line.push(' ');
            push_hex(&mut line, s.pose2d.coords.iter().flatten().flat_map(|v| v.to_le_bytes()));
            line.push(' ');
            match &s.pose3d {
                Some(p) => push_hex(&mut line, p.coords.iter().flatten().flat_map(|v| v.to_le_bytes())),
                None => line.push('-'),
            }
            line.push(' ');
            push_hex(&mut line, camera_values(&s.camera).iter().flat_map(|v| v.to_le_bytes()));
            writeln!(w, "{line}")?;
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        self.write_to(BufWriter::new(fs::File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::read_from(io::BufReader::new(fs::File::open(path)?))
    }

    /// Parses and validates a dataset: label discipline and, for labeled
    /// records, reprojection consistency.
    pub fn read_from<R: BufRead>(r: R) -> Result<Self, DatasetError> {
        let mut lines = r.lines();
        let first = lines.next().ok_or(DatasetError::Format { line: 1, msg: "empty file".into() })??;
        let header = parse_header(&first)?;
        let (h, w) = header.image_size;
        let p = header.joint_count;
        let mut samples = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            let bad = |msg: &str| DatasetError::Format { line: lineno, msg: msg.to_string() };
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let id: usize = fields[0].parse().map_err(|_| bad("bad id"))?;
            if fields[1] != header.domain {
                return Err(bad("domain differs from header"));
            }
            let image: Vec<f32> = decode::<4>(fields[2], h * w)
                .ok_or_else(|| bad("bad image"))?
                .into_iter()
                .map(f32::from_le_bytes)
                .collect();
            let flat2: Vec<f64> = decode::<8>(fields[3], 2 * p)
                .ok_or_else(|| bad("bad pose2d"))?
                .into_iter()
                .map(f64::from_le_bytes)
                .collect();
            let pose3d = match fields[4] {
                "-" => None,
                hex => {
                    let flat: Vec<f64> = decode::<8>(hex, 3 * p)
                        .ok_or_else(|| bad("bad pose3d"))?
                        .into_iter()
                        .map(f64::from_le_bytes)
                        .collect();
                    Some(Pose3D::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(), Frame::Camera))
                }
            };
            if pose3d.is_some() != header.has_3d_labels {
                if pose3d.is_some() {
                    return Err(DatasetError::LabelDiscipline(id));
                }
                return Err(bad("labeled domain record without pose3d"));
            }
            let cam: Vec<f64> = decode::<8>(fields[5], 16)
                .ok_or_else(|| bad("bad camera"))?
                .into_iter()
                .map(f64::from_le_bytes)
                .collect();
            let camera = CameraModel::new(
                (cam[0], cam[1]),
                (cam[2], cam[3]),
                Matrix3::from_row_slice(&cam[4..13]),
                Vector3::new(cam[13], cam[14], cam[15]),
            )?;
            let sample = SyntheticSample {
                id,
                domain: header.domain.clone(),
                image,
                pose2d: Pose2D::new(flat2.chunks_exact(2).map(|c| [c[0], c[1]]).collect()),
                pose3d,
                camera,
            };
            if let Some(err) = sample.reprojection_error() {
                if err > REPROJECTION_TOL {
                    return Err(DatasetError::Reprojection { id, err });
                }
            }
            samples.push(sample);
        }
        if samples.len() != header.count {
            return Err(DatasetError::Format {
                line: 1,
                msg: format!("header count {} but {} records", header.count, samples.len()),
            });
        }
        Ok(Self { header, samples })
    }
}

fn camera_values(c: &CameraModel) -> Vec<f64> {
    let mut v = vec![c.fx, c.fy, c.cx, c.cy];
    for r in 0..3 {
        for k in 0..3 {
            v.push(c.rotation[(r, k)]);
        }
    }
    v.extend(c.translation.iter());
    v
}

fn push_hex(s: &mut String, bytes: impl Iterator<Item = u8>) {
    const DIGITS: &[u8; 16] = b"0123456789abcdef";
    for b in bytes {
        s.push(DIGITS[(b >> 4) as usize] as char);
        s.push(DIGITS[(b & 15) as usize] as char);
    }
}

fn decode<const N: usize>(hex_str: &str, count: usize) -> Option<Vec<[u8; N]>> {
    let bytes = hex::decode(hex_str).ok()?;
    if bytes.len() != count * N {
        return None;
    }
    Some(bytes.chunks_exact(N).map(|c| c.try_into().unwrap()).collect())
}

fn parse_header(line: &str) -> Result<DatasetHeader, DatasetError> {
    let bad = |msg: String| DatasetError::Format { line: 1, msg };
    let mut parts = line.split(' ');
    if parts.next() != Some(MAGIC) {
        return Err(bad("missing dataset magic".into()));
    }
    let mut kv = std::collections::BTreeMap::new();
    for p in parts {
        let (k, v) = p.split_once('=').ok_or_else(|| bad(format!("bad header field {p:?}")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("header lacks {k}")));
    let num = |k: &str| get(k)?.parse::<usize>().map_err(|_| bad(format!("header {k} not a number")));
    let version = num("version")? as u32;
    if version != DATASET_VERSION {
        return Err(DatasetError::Version(version));
    }
    let (ih, iw) = get("image")?.split_once('x').ok_or_else(|| bad("bad image size".into()))?;
    let image_size = (
        ih.parse().map_err(|_| bad("bad image height".into()))?,
        iw.parse().map_err(|_| bad("bad image width".into()))?,
    );
    Ok(DatasetHeader {
        version,
        domain: get("domain")?.to_string(),
        joint_count: num("joints")?,
        image_size,
        has_3d_labels: match get("has_3d_labels")? {
            "1" => true,
            "0" => false,
            v => return Err(bad(format!("bad has_3d_labels {v:?}"))),
        },
        count: num("count")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_give_identical_bytes() {
        let model = AnthropometricModel::default_16();
        let lab = DomainSpec::lab();
        let mut a = Vec::new();
        let mut b = Vec::new();
        generate_dataset(&lab, &model, 10, 7).unwrap().write_to(&mut a).unwrap();
        generate_dataset(&lab, &model, 10, 7).unwrap().write_to(&mut b).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        generate_dataset(&lab, &model, 10, 8).unwrap().write_to(&mut c).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn samples_do_not_depend_on_count() {
        let model = AnthropometricModel::default_16();
        let wild = DomainSpec::wild();
        let small = generate_dataset(&wild, &model, 5, 3).unwrap();
        let big = generate_dataset(&wild, &model, 12, 3).unwrap();
        assert_eq!(small.samples[..], big.samples[..5]);
    }

    #[test]
    fn reload_is_bit_exact_and_labels_follow_domain() {
        let model = AnthropometricModel::default_16();
        for domain in [DomainSpec::lab(), DomainSpec::wild(), DomainSpec::xfer()] {
            let ds = generate_dataset(&domain, &model, 8, 11).unwrap();
            let mut bytes = Vec::new();
            ds.write_to(&mut bytes).unwrap();
            let back = Dataset::read_from(&bytes[..]).unwrap();
            assert_eq!(back, ds);
            for s in &back.samples {
                assert_eq!(s.pose3d.is_some(), domain.has_3d_labels);
                if let Some(e) = s.reprojection_error() {
                    assert!(e < 1e-6);
                }
            }
        }
    }

    #[test]
    fn label_discipline_is_enforced_on_load() {
        let model = AnthropometricModel::default_16();
        let ds = generate_dataset(&DomainSpec::lab(), &model, 2, 1).unwrap();
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        let text = String::from_utf8(bytes).unwrap().replacen("has_3d_labels=1", "has_3d_labels=0", 1);
        assert!(matches!(Dataset::read_from(text.as_bytes()), Err(DatasetError::LabelDiscipline(0))));
    }

    #[test]
    fn corrupted_pose_fails_reprojection() {
        let model = AnthropometricModel::default_16();
        let mut ds = generate_dataset(&DomainSpec::lab(), &model, 1, 1).unwrap();
        ds.samples[0].pose2d.coords[3][0] += 1e-3;
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        assert!(matches!(Dataset::read_from(&bytes[..]), Err(DatasetError::Reprojection { id: 0, .. })));
    }

    #[test]
    fn malformed_files() {
        assert!(Dataset::read_from(&b""[..]).is_err());
        assert!(Dataset::read_from(&b"NOPE version=1\n"[..]).is_err());
        let hdr = "ADVPOSE-DATASET version=2 domain=lab joints=16 image=32x32 has_3d_labels=1 count=0\n";
        assert!(matches!(Dataset::read_from(hdr.as_bytes()), Err(DatasetError::Version(2))));
        let hdr =
            "ADVPOSE-DATASET version=1 domain=lab joints=16 image=32x32 has_3d_labels=1 count=1\n0 lab zz - - -\n";
        assert!(matches!(Dataset::read_from(hdr.as_bytes()), Err(DatasetError::Format { line: 2, .. })));
    }
}
