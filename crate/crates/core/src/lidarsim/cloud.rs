use std::io::{Read, Write};

use super::pose::Pose2;
use crate::error::{Error, Result};

pub const CLOUD_MAGIC: &[u8; 4] = b"TRND";
pub const CLOUD_VERSION: u16 = 1;
/// Fixed header bytes before the timestamp.
pub const CLOUD_HEADER_LEN: usize = 16;

/// Points with per-point features, stamped with capture time and poses.
///
/// `points` are expressed in the frame of `frame_pose`; `sensor_pose` is
/// where the scan was captured. Both poses sit at sensor height, so frame
/// changes only act on `x`, `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    /// Row-major `N x feature_dim`.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    pub timestamp: f64,
    pub sensor_pose: Pose2,
    pub frame_pose: Pose2,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, features: Vec<f64>, feature_dim: usize, timestamp: f64, pose: Pose2) -> Result<Self> {
        if features.len() != points.len() * feature_dim {
            return Err(Error::contract(format!(
                "{} points with {feature_dim} features need {} values, got {}",
                points.len(),
                points.len() * feature_dim,
                features.len()
            )));
        }
        if !points.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::numeric("point cloud", "non-finite coordinate"));
        }
        Ok(PointCloud { points, features, feature_dim, timestamp, sensor_pose: pose, frame_pose: pose })
    }

    pub fn empty(feature_dim: usize, timestamp: f64, pose: Pose2) -> Self {
        PointCloud { points: Vec::new(), features: Vec::new(), feature_dim, timestamp, sensor_pose: pose, frame_pose: pose }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Sensor position in the cloud's current frame.
    pub fn sensor_origin(&self) -> [f64; 3] {
        let w = self.sensor_pose.to_world([0.0; 3]);
        self.frame_pose.from_world(w)
    }

    /// Keeps the points for which `keep(i)` holds.
    pub fn select(&self, mut keep: impl FnMut(usize) -> bool) -> PointCloud {
        let mut out = PointCloud { points: Vec::new(), features: Vec::new(), ..self.clone() };
        for i in 0..self.len() {
            if keep(i) {
                out.points.push(self.points[i]);
                out.features.extend_from_slice(self.feature(i));
            }
        }
        out
    }
}

/// Re-expresses `cloud` in the frame of `target`. Features and time are untouched.
pub fn transform_to_frame(cloud: &PointCloud, target: Pose2) -> PointCloud {
    let from = cloud.frame_pose;
    let points = cloud
        .points
        .iter()
        .map(|&p| target.from_world(from.to_world(p)))
        .collect();
    PointCloud { points, frame_pose: target, ..cloud.clone() }
}

/// Drops every point with `z <= z_thd`.
pub fn ground_filter(cloud: &PointCloud, z_thd: f64) -> PointCloud {
    cloud.select(|i| cloud.points[i][2] > z_thd)
}

/// Writes the binary cloud format: 16-byte header, `f64` timestamp, then
/// `N` little-endian rows of `3 + d` `f32` values.
pub fn write_cloud<W: Write>(cloud: &PointCloud, mut w: W) -> std::io::Result<()> {
    let n = u32::try_from(cloud.len()).map_err(|_| std::io::Error::other("too many points"))?;
    let d = u16::try_from(cloud.feature_dim).map_err(|_| std::io::Error::other("too many features"))?;
    let mut buf = Vec::with_capacity(CLOUD_HEADER_LEN + 8 + cloud.len() * (3 + cloud.feature_dim) * 4);
    buf.extend_from_slice(CLOUD_MAGIC);
    buf.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    buf.extend_from_slice(&[0u8; 4]);
    buf.extend_from_slice(&cloud.timestamp.to_le_bytes());
    for i in 0..cloud.len() {
        for v in cloud.points[i] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for v in cloud.feature(i) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)
}

/// Reads a cloud written by [`write_cloud`]. Poses are not stored in the
/// file and come back as the identity.
pub fn read_cloud<R: Read>(mut r: R) -> std::result::Result<PointCloud, String> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| e.to_string())?;
    if bytes.len() < CLOUD_HEADER_LEN + 8 {
        return Err("truncated header".into());
    }
    if &bytes[0..4] != CLOUD_MAGIC {
        return Err("bad magic".into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CLOUD_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let n = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let d = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let t = f64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let row = 3 + d;
    let body = &bytes[CLOUD_HEADER_LEN + 8..];
    if body.len() != n * row * 4 {
        return Err(format!("expected {} payload bytes, found {}", n * row * 4, body.len()));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let mut points = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * d);
    for r in vals.chunks_exact(row) {
        points.push([r[0], r[1], r[2]]);
        features.extend_from_slice(&r[3..]);
    }
    PointCloud::new(points, features, d, t, Pose2::default()).map_err(|e| e.to_string())
}

pub fn save_cloud(cloud: &PointCloud, path: &std::path::Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_cloud(cloud, std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_cloud(path: &std::path::Path) -> Result<PointCloud> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_cloud(std::io::BufReader::new(f)).map_err(|d| Error::format(path, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> PointCloud {
        PointCloud::new(
            vec![[1.0, 2.0, -1.5], [3.0, -1.0, 0.5], [0.0, 0.0, 0.25]],
            vec![0.1, 0.2, 0.3],
            1,
            0.5,
            Pose2::new(1.0, 2.0, 0.3),
        )
        .unwrap()
    }

    #[test]
    fn own_pose_is_identity() {
        let c = cloud();
        let t = transform_to_frame(&c, c.frame_pose);
        for (a, b) in t.points.iter().zip(&c.points) {
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pure_translation_shifts_points() {
        let c = PointCloud::new(vec![[5.0, 5.0, 1.0]], vec![0.0], 1, 0.0, Pose2::default()).unwrap();
        let t = transform_to_frame(&c, Pose2::new(1.0, 2.0, 0.0));
        assert_eq!(t.points[0], [4.0, 3.0, 1.0]);
        assert_eq!(t.features, c.features);
        assert_eq!(t.timestamp, c.timestamp);
    }

    #[test]
    fn ground_filter_extremes() {
        let c = cloud();
        assert_eq!(ground_filter(&c, -10.0).len(), 3);
        assert_eq!(ground_filter(&c, 10.0).len(), 0);
        let mid = ground_filter(&c, 0.0);
        assert_eq!(mid.len(), 2);
        assert_eq!(mid.features, vec![0.2, 0.3]);
    }

    #[test]
    fn header_layout() {
        let mut bytes = Vec::new();
        write_cloud(&cloud(), &mut bytes).unwrap();
        assert_eq!(&bytes[0..4], b"TRND");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 3);
        assert_eq!(u16::from_le_bytes([bytes[10], bytes[11]]), 1);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 0.5);
        assert_eq!(bytes.len(), 24 + 3 * 4 * 4);
    }

    #[test]
    fn corrupt_files_rejected() {
        let mut bytes = Vec::new();
        write_cloud(&cloud(), &mut bytes).unwrap();
        assert!(read_cloud(&bytes[..20]).is_err());
        assert!(read_cloud(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_cloud(bad.as_slice()).is_err());
    }
}
